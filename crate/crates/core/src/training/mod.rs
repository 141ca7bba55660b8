//! Two-phase trainer: joint multi-task training, then continued training
//! with chosen parameter groups frozen (the usual second phase freezes
//! the segmentation side). Batch normalization always runs in
//! inference mode with learnable affine parameters, so tiny toy batches
//! cannot poison running statistics.

pub mod data;
pub mod synth;

pub use data::{load_dataset, load_sample, save_sample};
pub use synth::{synth_sample, Difficulty, Sample};

use crate::error::{Error, Result};
use crate::losses::{
    assign_targets, detection_loss, segmentation_loss, total_loss, LossBreakdown, LossWeights,
};
use crate::network::config::ModelConfig;
use crate::network::exec::taped_forward;
use crate::network::graph::Graph;
use crate::network::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    SegHeads,
    DetHead,
    Fusion,
    Backbone,
}

pub const ALL_GROUPS: [ParamGroup; 4] = [
    ParamGroup::SegHeads,
    ParamGroup::DetHead,
    ParamGroup::Fusion,
    ParamGroup::Backbone,
];

impl std::str::FromStr for ParamGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "seg_heads" => Ok(ParamGroup::SegHeads),
            "det_head" => Ok(ParamGroup::DetHead),
            "fusion" => Ok(ParamGroup::Fusion),
            "backbone" => Ok(ParamGroup::Backbone),
            other => Err(Error::InvalidConfig(format!(
                "unknown parameter group '{other}' (expected seg_heads, det_head, fusion or backbone)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    SgdMomentum,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd_momentum" => Ok(Optimizer::SgdMomentum),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::InvalidConfig(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub epochs: usize,
    pub frozen: Vec<ParamGroup>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub phases: Vec<Phase>,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            phases: vec![Phase { epochs: 1, frozen: vec![] }],
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            batch_size: 2,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::InvalidConfig("schedule needs at least one phase".into()));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.epochs == 0 {
                return Err(Error::InvalidConfig(format!("phase {} has 0 epochs", i + 1)));
            }
            if ALL_GROUPS.iter().all(|g| p.frozen.contains(g)) {
                return Err(Error::InvalidConfig(format!(
                    "phase {} freezes every parameter group",
                    i + 1
                )));
            }
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Applies a phase's freeze set to the model's trainable mask.
pub fn apply_phase(model: &mut Model, phase: &Phase) {
    model.unfreeze_all();
    for g in &phase.frozen {
        for prefix in Graph::group_prefixes(*g) {
            model.freeze_prefix(prefix);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: usize,
    pub l_total: f64,
    pub l_det: f64,
    pub l_seg: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&format!(
                "epoch={} phase={} l_total={:.6} l_det={:.6} l_seg={:.6} lr={}\n",
                r.epoch, r.phase, r.l_total, r.l_det, r.l_seg, r.learning_rate
            ));
        }
        s
    }
}

struct OptimState {
    kind: Optimizer,
    lr: f32,
    step: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl OptimState {
    fn new(kind: Optimizer, lr: f64, model: &Model) -> Self {
        let zeros: Vec<Tensor<f32>> = model.params().iter().map(|p| Tensor::zeros(p.dims())).collect();
        OptimState {
            kind,
            lr: lr as f32,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update over the trainable parameters; `grads[i]` is None when
    /// parameter i received no gradient this step.
    fn apply(&mut self, model: &mut Model, grads: &[Option<Tensor<f32>>]) {
        self.step += 1;
        const MU: f32 = 0.9;
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        const EPS: f32 = 1e-8;
        for i in 0..grads.len() {
            if !model.is_trainable(i) {
                continue;
            }
            let Some(g) = &grads[i] else { continue };
            match self.kind {
                Optimizer::SgdMomentum => {
                    let vel = &mut self.m[i];
                    for (v, gi) in vel.data_mut().iter_mut().zip(g.data()) {
                        *v = MU * *v + *gi;
                    }
                    let p = model.param_mut(i);
                    for (pi, v) in p.data_mut().iter_mut().zip(vel.data()) {
                        *pi -= self.lr * *v;
                    }
                }
                Optimizer::Adam => {
                    let bc1 = 1.0 - B1.powi(self.step as i32);
                    let bc2 = 1.0 - B2.powi(self.step as i32);
                    for ((m, v), gi) in self.m[i]
                        .data_mut()
                        .iter_mut()
                        .zip(self.v[i].data_mut())
                        .zip(g.data())
                    {
                        *m = B1 * *m + (1.0 - B1) * *gi;
                        *v = B2 * *v + (1.0 - B2) * *gi * *gi;
                    }
                    let p = model.param_mut(i);
                    for ((pi, m), v) in p
                        .data_mut()
                        .iter_mut()
                        .zip(self.m[i].data())
                        .zip(self.v[i].data())
                    {
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *pi -= self.lr * mhat / (vhat.sqrt() + EPS);
                    }
                }
            }
        }
    }
}

/// Forward + loss + backward for one sample; returns the breakdown and
/// per-parameter gradients of l_total.
pub fn sample_grads(
    model: &Model,
    sample: &Sample,
    weights: LossWeights,
    fg_weight: f64,
) -> Result<(LossBreakdown, Vec<Option<Tensor<f32>>>)> {
    let tf = taped_forward(model, &sample.image)?;
    let mut tape = tf.tape;

    let targets = assign_targets(&sample.boxes, &model.config)?;
    let det = detection_loss(
        [
            tape.value(tf.det[0]),
            tape.value(tf.det[1]),
            tape.value(tf.det[2]),
        ],
        &targets,
        &model.config,
    )?;
    let seg = segmentation_loss(
        tape.value(tf.drivable),
        tape.value(tf.lane),
        &sample.drivable_mask,
        &sample.lane_mask,
        fg_weight,
    )?;
    let breakdown = total_loss(det.value, seg.value, det.components, weights);

    let [g0, g1, g2] = det.grads;
    let l_det = tape.custom_scalar(
        det.value as f32,
        vec![tf.det[0], tf.det[1], tf.det[2]],
        vec![g0, g1, g2],
    )?;
    let (sd, sl) = seg.grads;
    let l_seg = tape.custom_scalar(seg.value as f32, vec![tf.drivable, tf.lane], vec![sd, sl])?;
    let l_total = tape.affine_combine(l_det, weights.alpha as f32, l_seg, weights.beta as f32)?;

    let node_grads = tape.backward(l_total)?;
    let mut grads: Vec<Option<Tensor<f32>>> = vec![None; model.params().len()];
    for (i, pv) in tf.param_vars.iter().enumerate() {
        if let Some(var) = pv {
            grads[i] = node_grads[var.0].clone();
        }
    }
    Ok((breakdown, grads))
}

/// Runs the schedule's phases in order over the dataset and returns the
/// trained model and the per-epoch log. Deterministic for a fixed seed.
pub fn train(
    config: &ModelConfig,
    schedule: &TrainSchedule,
    dataset: &[Sample],
    weights: LossWeights,
    fg_weight: f64,
) -> Result<(Model, TrainLog)> {
    schedule.validate()?;
    weights.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    let (h, w) = config.input_res;
    for (i, s) in dataset.iter().enumerate() {
        if s.image.dims() != [1, 3, h, w] {
            return Err(Error::InvalidInput(format!(
                "sample {i} has resolution {:?}, expected (1, 3, {h}, {w})",
                s.image.dims()
            )));
        }
    }

    let mut model = Model::build(config.clone(), schedule.seed)?;
    let mut opt = OptimState::new(schedule.optimizer, schedule.learning_rate, &model);
    let mut log = TrainLog::default();
    let mut epoch = 0usize;

    for (pi, phase) in schedule.phases.iter().enumerate() {
        apply_phase(&mut model, phase);
        for _ in 0..phase.epochs {
            epoch += 1;
            let mut sum_det = 0.0;
            let mut sum_seg = 0.0;
            for batch in dataset.chunks(schedule.batch_size) {
                let mut acc: Vec<Option<Tensor<f32>>> = vec![None; model.params().len()];
                for sample in batch {
                    let (bd, grads) = sample_grads(&model, sample, weights, fg_weight)?;
                    if !bd.l_total.is_finite() {
                        return Err(Error::Diverged {
                            epoch,
                            detail: format!("non-finite loss {}", bd.l_total),
                        });
                    }
                    sum_det += bd.l_det;
                    sum_seg += bd.l_seg;
                    for (a, g) in acc.iter_mut().zip(grads) {
                        match (a.as_mut(), g) {
                            (Some(a), Some(g)) => {
                                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                    *x += *y;
                                }
                            }
                            (None, Some(g)) => *a = Some(g),
                            _ => {}
                        }
                    }
                }
                let inv = 1.0 / batch.len() as f32;
                for a in acc.iter_mut().flatten() {
                    for x in a.data_mut().iter_mut() {
                        *x *= inv;
                    }
                }
                opt.apply(&mut model, &acc);
            }
            let l_det = sum_det / dataset.len() as f64;
            let l_seg = sum_seg / dataset.len() as f64;
            let bd = total_loss(l_det, l_seg, (0.0, 0.0, 0.0), weights);
            log.records.push(EpochRecord {
                epoch,
                phase: pi + 1,
                l_total: bd.l_total,
                l_det,
                l_seg,
                learning_rate: schedule.learning_rate,
            });
        }
    }
    Ok((model, log))
}
