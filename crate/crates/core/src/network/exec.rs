//! Graph execution. One evaluator serves every consumer: plain forward
//! passes (optionally partial, starting from provided intermediate maps)
//! and taped forward passes for training.

use std::collections::HashMap;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::graph::{Graph, NodeOp, BN_EPS, MERGE_EPS};
use crate::network::model::Model;
use crate::tensor::{ops, Tensor};

/// Backbone feature maps at strides 4, 8, 16, 32.
pub struct Pyramid {
    pub c2: Tensor<f32>,
    pub c3: Tensor<f32>,
    pub c4: Tensor<f32>,
    pub c5: Tensor<f32>,
}

/// Neck outputs at strides 8, 16, 32, all `fusion_width` channels.
pub struct Fused {
    pub p3: Tensor<f32>,
    pub p4: Tensor<f32>,
    pub p5: Tensor<f32>,
}

/// Raw head outputs: per-scale detection maps plus both full-resolution
/// segmentation logit maps.
pub struct RawPredictions {
    pub det: [Tensor<f32>; 3],
    pub drivable: Tensor<f32>,
    pub lane: Tensor<f32>,
}

fn check_image(image: &Tensor<f32>) -> Result<()> {
    let [_, c, h, w] = image.dims();
    if c != 3 {
        return Err(Error::InvalidInput(format!("image must have 3 channels, got {c}")));
    }
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::InvalidInput(format!(
            "image resolution {h}x{w} must be divisible by 32"
        )));
    }
    Ok(())
}

fn node_deps(op: &NodeOp, inputs: &[usize]) -> Vec<usize> {
    let mut d = inputs.to_vec();
    if let NodeOp::ResizeLike { reference } = op {
        d.push(*reference);
    }
    d
}

/// Evaluates the subgraph reaching `wanted`, starting from the tensors in
/// `values` (at minimum the input node for a full pass). Intermediate
/// tensors are dropped as soon as their last consumer has run.
pub(crate) fn execute(
    graph: &Graph,
    params: &[Tensor<f32>],
    mut values: HashMap<usize, Tensor<f32>>,
    input_hw: (usize, usize),
    wanted: &[usize],
) -> Result<HashMap<usize, Tensor<f32>>> {
    let n = graph.nodes.len();
    let mut needed = vec![false; n];
    let mut stack: Vec<usize> = wanted.to_vec();
    while let Some(i) = stack.pop() {
        if needed[i] {
            continue;
        }
        needed[i] = true;
        if values.contains_key(&i) {
            continue;
        }
        let node = &graph.nodes[i];
        if matches!(node.op, NodeOp::Input) {
            return Err(Error::InvalidInput(format!(
                "evaluation of '{}' needs the network input, which was not provided",
                node.label
            )));
        }
        stack.extend(node_deps(&node.op, &node.inputs));
    }

    let mut uses = vec![0usize; n];
    for (i, node) in graph.nodes.iter().enumerate() {
        if needed[i] && !values.contains_key(&i) {
            for d in node_deps(&node.op, &node.inputs) {
                uses[d] += 1;
            }
        }
    }
    for &w in wanted {
        uses[w] += 1; // outputs stay alive to the end
    }

    for i in 0..n {
        if !needed[i] || values.contains_key(&i) {
            continue;
        }
        let node = &graph.nodes[i];
        let get = |j: usize| -> Result<&Tensor<f32>> {
            values
                .get(&j)
                .ok_or_else(|| Error::InvalidInput(format!("missing value for node {j}")))
        };
        let out = match &node.op {
            NodeOp::Input => unreachable!("provided inputs are filtered above"),
            NodeOp::Conv {
                w,
                b,
                stride,
                pad,
                groups,
            } => ops::conv2d(
                get(node.inputs[0])?,
                &params[*w],
                b.map(|bi| &params[bi]),
                *stride,
                *pad,
                *groups,
            )?,
            NodeOp::BatchNorm {
                gamma,
                beta,
                mu,
                var,
            } => ops::batchnorm_infer(
                get(node.inputs[0])?,
                &params[*gamma],
                &params[*beta],
                &params[*mu],
                &params[*var],
                BN_EPS as f32,
            )?,
            NodeOp::Relu => ops::relu(get(node.inputs[0])?),
            NodeOp::Relu6 => ops::relu6(get(node.inputs[0])?),
            NodeOp::Add => ops::elementwise_add(get(node.inputs[0])?, get(node.inputs[1])?)?,
            NodeOp::Concat => {
                let parts: Vec<&Tensor<f32>> = node
                    .inputs
                    .iter()
                    .map(|&j| get(j))
                    .collect::<Result<_>>()?;
                ops::concat_channels(&parts)?
            }
            NodeOp::MaxPool { k, s, pad } => ops::maxpool(get(node.inputs[0])?, *k, *s, *pad)?,
            NodeOp::ResizeLike { reference } => {
                let r = get(*reference)?;
                let (h, w) = (r.h(), r.w());
                ops::resize_bilinear(get(node.inputs[0])?, h, w)?
            }
            NodeOp::ResizeToInput => {
                ops::resize_bilinear(get(node.inputs[0])?, input_hw.0, input_hw.1)?
            }
            NodeOp::WeightedMerge { w } => {
                let parts: Vec<&Tensor<f32>> = node
                    .inputs
                    .iter()
                    .map(|&j| get(j))
                    .collect::<Result<_>>()?;
                ops::weighted_merge(&params[*w], &parts, MERGE_EPS as f32)?
            }
        };
        for d in node_deps(&node.op, &node.inputs) {
            uses[d] -= 1;
            if uses[d] == 0 {
                values.remove(&d);
            }
        }
        values.insert(i, out);
    }

    let mut out = HashMap::new();
    for &w in wanted {
        let t = values
            .get(&w)
            .ok_or_else(|| Error::InvalidInput(format!("missing wanted node {w}")))?;
        out.insert(w, t.clone());
    }
    Ok(out)
}

impl Model {
    pub fn backbone_forward(&self, image: &Tensor<f32>) -> Result<Pyramid> {
        check_image(image)?;
        let t = &self.graph.taps;
        let mut values = HashMap::new();
        values.insert(t.input, image.clone());
        let mut r = execute(
            &self.graph,
            self.params(),
            values,
            (image.h(), image.w()),
            &[t.c2, t.c3, t.c4, t.c5],
        )?;
        Ok(Pyramid {
            c2: r.remove(&t.c2).unwrap(),
            c3: r.remove(&t.c3).unwrap(),
            c4: r.remove(&t.c4).unwrap(),
            c5: r.remove(&t.c5).unwrap(),
        })
    }

    pub fn fuse_pyramid(&self, pyr: &Pyramid) -> Result<Fused> {
        let t = &self.graph.taps;
        let mut values = HashMap::new();
        values.insert(t.c3, pyr.c3.clone());
        values.insert(t.c4, pyr.c4.clone());
        values.insert(t.c5, pyr.c5.clone());
        let hw = (pyr.c2.h() * 4, pyr.c2.w() * 4);
        let mut r = execute(&self.graph, self.params(), values, hw, &[t.p3, t.p4, t.p5])?;
        Ok(Fused {
            p3: r.remove(&t.p3).unwrap(),
            p4: r.remove(&t.p4).unwrap(),
            p5: r.remove(&t.p5).unwrap(),
        })
    }

    pub fn heads_forward(&self, fused: &Fused, skip_c2: &Tensor<f32>) -> Result<RawPredictions> {
        let t = &self.graph.taps;
        let mut values = HashMap::new();
        values.insert(t.p3, fused.p3.clone());
        values.insert(t.p4, fused.p4.clone());
        values.insert(t.p5, fused.p5.clone());
        values.insert(t.c2, skip_c2.clone());
        let hw = (skip_c2.h() * 4, skip_c2.w() * 4);
        let wanted = [t.det[0], t.det[1], t.det[2], t.drivable, t.lane];
        let mut r = execute(&self.graph, self.params(), values, hw, &wanted)?;
        Ok(RawPredictions {
            det: [
                r.remove(&t.det[0]).unwrap(),
                r.remove(&t.det[1]).unwrap(),
                r.remove(&t.det[2]).unwrap(),
            ],
            drivable: r.remove(&t.drivable).unwrap(),
            lane: r.remove(&t.lane).unwrap(),
        })
    }

    /// Full forward pass in one evaluation (no recomputation between the
    /// backbone, neck and heads).
    pub fn forward(&self, image: &Tensor<f32>) -> Result<RawPredictions> {
        check_image(image)?;
        let t = &self.graph.taps;
        let mut values = HashMap::new();
        values.insert(t.input, image.clone());
        let wanted = [t.det[0], t.det[1], t.det[2], t.drivable, t.lane];
        let mut r = execute(
            &self.graph,
            self.params(),
            values,
            (image.h(), image.w()),
            &wanted,
        )?;
        Ok(RawPredictions {
            det: [
                r.remove(&t.det[0]).unwrap(),
                r.remove(&t.det[1]).unwrap(),
                r.remove(&t.det[2]).unwrap(),
            ],
            drivable: r.remove(&t.drivable).unwrap(),
            lane: r.remove(&t.lane).unwrap(),
        })
    }
}

/// A forward pass recorded on a tape, for training. `param_vars[i]` is the
/// tape variable of parameter `i`, `None` for batchnorm running statistics
/// (constants under the gradient).
pub struct TapedForward {
    pub tape: Tape<f32>,
    pub param_vars: Vec<Option<Var>>,
    pub det: [Var; 3],
    pub drivable: Var,
    pub lane: Var,
}

fn pvar(
    tape: &mut Tape<f32>,
    pv: &mut [Option<Var>],
    params: &[Tensor<f32>],
    i: usize,
) -> Var {
    if let Some(v) = pv[i] {
        return v;
    }
    let v = tape.leaf(params[i].clone());
    pv[i] = Some(v);
    v
}

pub fn taped_forward(model: &Model, image: &Tensor<f32>) -> Result<TapedForward> {
    check_image(image)?;
    let graph = &model.graph;
    let params = model.params();
    let mut tape = Tape::new();
    let mut pv: Vec<Option<Var>> = vec![None; params.len()];
    let mut nv: Vec<Option<Var>> = vec![None; graph.nodes.len()];
    let (ih, iw) = (image.h(), image.w());

    for (i, node) in graph.nodes.iter().enumerate() {
        let inp = |j: usize, nv: &[Option<Var>]| nv[node.inputs[j]].expect("topological order");
        let v = match &node.op {
            NodeOp::Input => tape.leaf(image.clone()),
            NodeOp::Conv {
                w,
                b,
                stride,
                pad,
                groups,
            } => {
                let x = inp(0, &nv);
                let wv = pvar(&mut tape, &mut pv, params, *w);
                let bv = b.map(|bi| pvar(&mut tape, &mut pv, params, bi));
                tape.conv2d(x, wv, bv, *stride, *pad, *groups)?
            }
            NodeOp::BatchNorm {
                gamma,
                beta,
                mu,
                var,
            } => {
                let x = inp(0, &nv);
                let gv = pvar(&mut tape, &mut pv, params, *gamma);
                let bv = pvar(&mut tape, &mut pv, params, *beta);
                tape.batchnorm(x, gv, bv, &params[*mu], &params[*var], BN_EPS as f32)?
            }
            NodeOp::Relu => {
                let x = inp(0, &nv);
                tape.relu(x)
            }
            NodeOp::Relu6 => {
                let x = inp(0, &nv);
                tape.relu6(x)
            }
            NodeOp::Add => {
                let (a, b) = (inp(0, &nv), inp(1, &nv));
                tape.add(a, b)?
            }
            NodeOp::Concat => {
                let parts: Vec<Var> = node
                    .inputs
                    .iter()
                    .map(|&j| nv[j].expect("topological order"))
                    .collect();
                tape.concat_channels(&parts)?
            }
            NodeOp::MaxPool { k, s, pad } => {
                let x = inp(0, &nv);
                tape.maxpool(x, *k, *s, *pad)?
            }
            NodeOp::ResizeLike { reference } => {
                let x = inp(0, &nv);
                let r = nv[*reference].expect("topological order");
                let (h, w) = {
                    let t = tape.value(r);
                    (t.h(), t.w())
                };
                tape.resize_bilinear(x, h, w)?
            }
            NodeOp::ResizeToInput => {
                let x = inp(0, &nv);
                tape.resize_bilinear(x, ih, iw)?
            }
            NodeOp::WeightedMerge { w } => {
                let parts: Vec<Var> = node
                    .inputs
                    .iter()
                    .map(|&j| nv[j].expect("topological order"))
                    .collect();
                let wv = pvar(&mut tape, &mut pv, params, *w);
                tape.weighted_merge(wv, &parts, MERGE_EPS as f32)?
            }
        };
        nv[i] = Some(v);
    }

    let t = &graph.taps;
    Ok(TapedForward {
        tape,
        param_vars: pv,
        det: [
            nv[t.det[0]].unwrap(),
            nv[t.det[1]].unwrap(),
            nv[t.det[2]].unwrap(),
        ],
        drivable: nv[t.drivable].unwrap(),
        lane: nv[t.lane].unwrap(),
    })
}
