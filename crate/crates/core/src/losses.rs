//! Multi-task loss: L_total = alpha * L_det + beta * L_seg.
//!
//! L_det is a YOLO-style three-term loss (objectness BCE over all
//! anchor-cells, class BCE over positives, 1 - IoU of decoded boxes over
//! positives). L_seg is per-pixel 2-class cross-entropy averaged over both
//! segmentation heads. Loss functions return their gradients with respect
//! to the raw network maps, computed analytically, so training attaches
//! them to the tape as scalar nodes.

use crate::error::{Error, Result};
use crate::network::config::{ModelConfig, ANCHORS_PER_CELL, DET_STRIDES};
use crate::network::decode::{decode_box, encode_box, iou_cxcywh, TWH_CLAMP};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || !(self.alpha.is_finite() && self.beta.is_finite())
        {
            return Err(Error::InvalidConfig("alpha and beta must be finite and >= 0".into()));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::InvalidConfig("alpha and beta cannot both be 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_det: f64,
    pub l_seg: f64,
    pub l_total: f64,
    /// (objectness, classification, box) detection components.
    pub det_components: (f64, f64, f64),
}

/// Combines already-computed component losses: l_total = alpha * l_det +
/// beta * l_seg, in exactly this evaluation order. Logged totals therefore
/// satisfy the identity under exact float comparison.
pub fn total_loss(l_det: f64, l_seg: f64, det_components: (f64, f64, f64), weights: LossWeights) -> LossBreakdown {
    LossBreakdown {
        l_det,
        l_seg,
        l_total: weights.alpha * l_det + weights.beta * l_seg,
        det_components,
    }
}

/// One ground-truth object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub class_id: usize,
    /// (cx, cy, w, h) in input pixels.
    pub bbox: [f64; 4],
}

/// One positive anchor-cell and its regression target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveTarget {
    pub scale: usize,
    pub anchor: usize,
    /// (row, col) grid cell.
    pub cell: (usize, usize),
    pub class_id: usize,
    /// Ground-truth box in pixels.
    pub bbox: [f64; 4],
    /// Encoded (tx, ty, tw, th) regression target.
    pub t: [f64; 4],
}

/// Sparse target assignment: everything not listed is a negative. Grid
/// dims are recorded so losses can validate map shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub positives: Vec<PositiveTarget>,
    /// (h, w) of the detection grid per scale.
    pub grids: [(usize, usize); 3],
}

/// IoU of two box *shapes* compared centered at the origin.
pub fn shape_iou(wh_a: (f64, f64), wh_b: (f64, f64)) -> f64 {
    iou_cxcywh([0.0, 0.0, wh_a.0, wh_a.1], [0.0, 0.0, wh_b.0, wh_b.1])
}

/// Assigns each ground truth to the (scale, anchor) whose anchor shape has
/// maximal IoU with the box (ties: lowest scale, then lowest anchor index)
/// at the grid cell containing the box center. If that slot is already
/// taken by an earlier box, the next-best candidate is used.
pub fn assign_targets(gt_boxes: &[GtBox], config: &ModelConfig) -> Result<TargetAssignment> {
    let (ih, iw) = config.input_res;
    let grids = [
        (ih / DET_STRIDES[0], iw / DET_STRIDES[0]),
        (ih / DET_STRIDES[1], iw / DET_STRIDES[1]),
        (ih / DET_STRIDES[2], iw / DET_STRIDES[2]),
    ];
    let mut taken: std::collections::HashSet<(usize, usize, usize, usize)> =
        std::collections::HashSet::new();
    let mut positives = Vec::with_capacity(gt_boxes.len());
    for (bi, gt) in gt_boxes.iter().enumerate() {
        let [cx, cy, w, h] = gt.bbox;
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "ground-truth box {bi} has degenerate size {w}x{h}"
            )));
        }
        if cx < 0.0 || cy < 0.0 || cx >= iw as f64 || cy >= ih as f64 {
            return Err(Error::InvalidInput(format!(
                "ground-truth box {bi} center ({cx}, {cy}) outside {ih}x{iw} image"
            )));
        }
        if gt.class_id >= config.num_classes {
            return Err(Error::InvalidInput(format!(
                "ground-truth box {bi} class {} >= num_classes {}",
                gt.class_id, config.num_classes
            )));
        }
        // all (scale, anchor) candidates ranked by shape IoU, ties by
        // lowest scale then lowest anchor index
        let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(9);
        for (si, stride) in DET_STRIDES.iter().enumerate() {
            for (ai, anchor) in config.anchors_for_stride(*stride).iter().enumerate() {
                candidates.push((shape_iou((w, h), *anchor), si, ai));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut placed = false;
        for (_, si, ai) in candidates {
            let s = DET_STRIDES[si];
            let cell = (
                ((cy / s as f64) as usize).min(grids[si].0 - 1),
                ((cx / s as f64) as usize).min(grids[si].1 - 1),
            );
            if taken.insert((si, ai, cell.0, cell.1)) {
                let anchor = config.anchors_for_stride(s)[ai];
                positives.push(PositiveTarget {
                    scale: si,
                    anchor: ai,
                    cell,
                    class_id: gt.class_id,
                    bbox: gt.bbox,
                    t: encode_box(gt.bbox, s, anchor, cell),
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidInput(format!(
                "no free anchor slot for ground-truth box {bi}; too many coincident boxes"
            )));
        }
    }
    Ok(TargetAssignment { positives, grids })
}

/// Stable BCE with logits: max(x,0) - x*y + ln(1 + exp(-|x|)).
fn bce_with_logits(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    crate::tensor::ops::sigmoid_scalar(x)
}

pub struct DetLoss<T: Scalar> {
    pub value: f64,
    /// (objectness, classification, box) terms; their sum is `value`.
    pub components: (f64, f64, f64),
    /// d value / d raw map, one gradient per scale.
    pub grads: [Tensor<T>; 3],
}

/// dIoU/d(cx, cy, bw, bh) of the predicted box against a fixed gt box.
/// Zero (subgradient) when the boxes do not overlap.
fn iou_grad(p: [f64; 4], g: [f64; 4]) -> ([f64; 4], f64) {
    let (px0, px1) = (p[0] - p[2] / 2.0, p[0] + p[2] / 2.0);
    let (py0, py1) = (p[1] - p[3] / 2.0, p[1] + p[3] / 2.0);
    let (gx0, gx1) = (g[0] - g[2] / 2.0, g[0] + g[2] / 2.0);
    let (gy0, gy1) = (g[1] - g[3] / 2.0, g[1] + g[3] / 2.0);
    let iw = px1.min(gx1) - px0.max(gx0);
    let ih = py1.min(gy1) - py0.max(gy0);
    if iw <= 0.0 || ih <= 0.0 {
        return ([0.0; 4], 0.0);
    }
    let inter = iw * ih;
    let union = p[2] * p[3] + g[2] * g[3] - inter;
    let iou = inter / union;
    // indicator of which box supplies each intersection edge
    let a1 = if px1 < gx1 { 1.0 } else { 0.0 };
    let a0 = if px0 > gx0 { 1.0 } else { 0.0 };
    let b1 = if py1 < gy1 { 1.0 } else { 0.0 };
    let b0 = if py0 > gy0 { 1.0 } else { 0.0 };
    let diw = [a1 - a0, 0.0, 0.5 * (a1 + a0), 0.0];
    let dih = [0.0, b1 - b0, 0.0, 0.5 * (b1 + b0)];
    let dap = [0.0, 0.0, p[3], p[2]];
    let mut out = [0.0; 4];
    for k in 0..4 {
        let di = ih * diw[k] + iw * dih[k];
        let du = dap[k] - di;
        out[k] = (di * union - inter * du) / (union * union);
    }
    (out, iou)
}

/// Detection loss over the three raw maps. Each term is mean-reduced:
/// objectness over every anchor-cell, classification over positive
/// class entries, box over positives. No positives => class and box are 0.
pub fn detection_loss<T: Scalar>(
    maps: [&Tensor<T>; 3],
    targets: &TargetAssignment,
    config: &ModelConfig,
) -> Result<DetLoss<T>> {
    let nc = config.num_classes;
    let per = 5 + nc;
    for (si, map) in maps.iter().enumerate() {
        let want = [1, ANCHORS_PER_CELL * per, targets.grids[si].0, targets.grids[si].1];
        if map.dims() != want {
            return Err(Error::shape(
                "detection_loss",
                format!("scale {si} map {:?} != expected {:?}", map.dims(), want),
            ));
        }
    }
    let mut grads = [
        Tensor::<T>::zeros(maps[0].dims()),
        Tensor::<T>::zeros(maps[1].dims()),
        Tensor::<T>::zeros(maps[2].dims()),
    ];

    // positive lookup: (scale, anchor, i, j) -> target index
    let mut pos_at = std::collections::HashMap::new();
    for (k, p) in targets.positives.iter().enumerate() {
        pos_at.insert((p.scale, p.anchor, p.cell.0, p.cell.1), k);
    }

    let n_obj: usize = targets
        .grids
        .iter()
        .map(|(h, w)| ANCHORS_PER_CELL * h * w)
        .sum();
    let n_pos = targets.positives.len();

    let mut l_obj = 0.0;
    let mut l_cls = 0.0;
    let mut l_box = 0.0;

    for si in 0..3 {
        let map = maps[si];
        let (gh, gw) = targets.grids[si];
        let stride = DET_STRIDES[si];
        let anchors = config.anchors_for_stride(stride);
        for ai in 0..ANCHORS_PER_CELL {
            let c0 = ai * per;
            for i in 0..gh {
                for j in 0..gw {
                    let pos = pos_at.get(&(si, ai, i, j)).copied();
                    let x_obj = map.at(0, c0 + 4, i, j).to_f64s();
                    let y_obj = if pos.is_some() { 1.0 } else { 0.0 };
                    l_obj += bce_with_logits(x_obj, y_obj) / n_obj as f64;
                    grads[si].set(
                        0,
                        c0 + 4,
                        i,
                        j,
                        T::from_f64((sigmoid(x_obj) - y_obj) / n_obj as f64),
                    );

                    let Some(k) = pos else { continue };
                    let tgt = &targets.positives[k];

                    // classification BCE over this positive's class logits
                    let denom = (n_pos * nc) as f64;
                    for c in 0..nc {
                        let x = map.at(0, c0 + 5 + c, i, j).to_f64s();
                        let y = if c == tgt.class_id { 1.0 } else { 0.0 };
                        l_cls += bce_with_logits(x, y) / denom;
                        grads[si].set(0, c0 + 5 + c, i, j, T::from_f64((sigmoid(x) - y) / denom));
                    }

                    // box term: 1 - IoU of the decoded prediction
                    let t = [
                        map.at(0, c0, i, j).to_f64s(),
                        map.at(0, c0 + 1, i, j).to_f64s(),
                        map.at(0, c0 + 2, i, j).to_f64s(),
                        map.at(0, c0 + 3, i, j).to_f64s(),
                    ];
                    let pred = decode_box(t, stride, anchors[ai], (i, j));
                    let (dbox, iou) = iou_grad(pred, tgt.bbox);
                    l_box += (1.0 - iou) / n_pos as f64;
                    // chain through the decode formulas
                    let s = stride as f64;
                    let sx = sigmoid(t[0]);
                    let sy = sigmoid(t[1]);
                    let dchain = [
                        sx * (1.0 - sx) * s,
                        sy * (1.0 - sy) * s,
                        if t[2].abs() < TWH_CLAMP { pred[2] } else { 0.0 },
                        if t[3].abs() < TWH_CLAMP { pred[3] } else { 0.0 },
                    ];
                    for k4 in 0..4 {
                        grads[si].set(
                            0,
                            c0 + k4,
                            i,
                            j,
                            T::from_f64(-dbox[k4] * dchain[k4] / n_pos as f64),
                        );
                    }
                }
            }
        }
    }

    Ok(DetLoss {
        value: l_obj + l_cls + l_box,
        components: (l_obj, l_cls, l_box),
        grads,
    })
}

pub struct SegLoss<T: Scalar> {
    pub value: f64,
    /// Gradients with respect to the drivable and lane logit maps.
    pub grads: (Tensor<T>, Tensor<T>),
}

fn head_ce<T: Scalar>(logits: &Tensor<T>, gt: &Tensor<T>, fg_weight: f64) -> Result<(f64, Tensor<T>)> {
    let [n, c, h, w] = logits.dims();
    if c != 2 {
        return Err(Error::shape("segmentation_loss", format!("expected 2 channels, got {c}")));
    }
    if gt.dims() != [n, 1, h, w] {
        return Err(Error::shape(
            "segmentation_loss",
            format!("mask {:?} does not match logits {:?}", gt.dims(), logits.dims()),
        ));
    }
    // total weight first, so the mean is well-defined with the knob on
    let mut wsum = 0.0;
    for &m in gt.data() {
        let m = m.to_f64s();
        if m != 0.0 && m != 1.0 {
            return Err(Error::InvalidInput(format!("mask value {m} not in {{0, 1}}")));
        }
        wsum += if m == 1.0 { fg_weight } else { 1.0 };
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.dims());
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                let x0 = logits.at(ni, 0, i, j).to_f64s();
                let x1 = logits.at(ni, 1, i, j).to_f64s();
                let y = gt.at(ni, 0, i, j).to_f64s() as usize;
                let wt = if y == 1 { fg_weight } else { 1.0 } / wsum;
                // stable 2-class log-softmax
                let m = x0.max(x1);
                let lse = m + ((x0 - m).exp() + (x1 - m).exp()).ln();
                let xt = if y == 1 { x1 } else { x0 };
                loss += wt * (lse - xt);
                let p0 = (x0 - lse).exp();
                let p1 = (x1 - lse).exp();
                grad.set(ni, 0, i, j, T::from_f64(wt * (p0 - if y == 0 { 1.0 } else { 0.0 })));
                grad.set(ni, 1, i, j, T::from_f64(wt * (p1 - if y == 1 { 1.0 } else { 0.0 })));
            }
        }
    }
    Ok((loss, grad))
}

/// l_seg = (CE(drivable) + CE(lane)) / 2, each a per-pixel 2-class
/// cross-entropy. `fg_weight` re-weights foreground pixels (1.0 = plain
/// mean, the default).
pub fn segmentation_loss<T: Scalar>(
    drivable_map: &Tensor<T>,
    lane_map: &Tensor<T>,
    drivable_gt: &Tensor<T>,
    lane_gt: &Tensor<T>,
    fg_weight: f64,
) -> Result<SegLoss<T>> {
    if fg_weight <= 0.0 {
        return Err(Error::InvalidConfig("fg_weight must be positive".into()));
    }
    let (ld, mut gd) = head_ce(drivable_map, drivable_gt, fg_weight)?;
    let (ll, mut gl) = head_ce(lane_map, lane_gt, fg_weight)?;
    let half = T::from_f64(0.5);
    for v in gd.data_mut().iter_mut() {
        *v = *v * half;
    }
    for v in gl.data_mut().iter_mut() {
        *v = *v * half;
    }
    Ok(SegLoss {
        value: 0.5 * (ld + ll),
        grads: (gd, gl),
    })
}
