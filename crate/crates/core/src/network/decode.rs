//! Anchor-box decoding and non-maximum suppression.
//!
//! Channel layout of a raw detection map, per anchor slot `a` of the 3:
//! channels `a*(5+C) .. (a+1)*(5+C)` hold `tx, ty, tw, th, t_obj` followed
//! by `C` class logits.

use crate::network::config::{ModelConfig, ANCHORS_PER_CELL, DET_STRIDES};
use crate::network::exec::RawPredictions;
use crate::tensor::ops::sigmoid_scalar;

pub const TWH_CLAMP: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    /// Joint objectness-times-class probability in [0, 1].
    pub score: f64,
    /// (cx, cy, bw, bh) in input-pixel units.
    pub bbox: [f64; 4],
}

/// Decodes raw offsets at grid cell (i, j): cx = (sigma(tx)+j)*s,
/// cy = (sigma(ty)+i)*s, bw = aw*exp(tw), bh = ah*exp(th) with tw, th
/// clamped to [-4, 4].
pub fn decode_box(t: [f64; 4], stride: usize, anchor: (f64, f64), cell: (usize, usize)) -> [f64; 4] {
    let s = stride as f64;
    let cx = (sigmoid_scalar(t[0]) + cell.1 as f64) * s;
    let cy = (sigmoid_scalar(t[1]) + cell.0 as f64) * s;
    let bw = anchor.0 * t[2].clamp(-TWH_CLAMP, TWH_CLAMP).exp();
    let bh = anchor.1 * t[3].clamp(-TWH_CLAMP, TWH_CLAMP).exp();
    [cx, cy, bw, bh]
}

/// Algebraic inverse of [`decode_box`] for boxes interior to the clamp
/// range; used for target assignment and round-trip tests.
pub fn encode_box(b: [f64; 4], stride: usize, anchor: (f64, f64), cell: (usize, usize)) -> [f64; 4] {
    let s = stride as f64;
    let logit = |p: f64| {
        let p = p.clamp(1e-9, 1.0 - 1e-9);
        (p / (1.0 - p)).ln()
    };
    [
        logit(b[0] / s - cell.1 as f64),
        logit(b[1] / s - cell.0 as f64),
        (b[2] / anchor.0).ln(),
        (b[3] / anchor.1).ln(),
    ]
}

/// IoU of two (cx, cy, w, h) boxes.
pub fn iou_cxcywh(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ax0 = a[0] - a[2] / 2.0;
    let ax1 = a[0] + a[2] / 2.0;
    let ay0 = a[1] - a[3] / 2.0;
    let ay1 = a[1] + a[3] / 2.0;
    let bx0 = b[0] - b[2] / 2.0;
    let bx1 = b[0] + b[2] / 2.0;
    let by0 = b[1] - b[3] / 2.0;
    let by1 = b[1] + b[3] / 2.0;
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Decodes all anchors of image 0 of each scale map (the pipeline is
/// batch-1) and keeps detections with score >= conf_thresh.
pub fn decode_detections(
    raw: &RawPredictions,
    config: &ModelConfig,
    conf_thresh: f64,
) -> Vec<Detection> {
    let c = config.num_classes;
    let per = 5 + c;
    let mut out = Vec::new();
    for (si, stride) in DET_STRIDES.iter().enumerate() {
        let map = &raw.det[si];
        let anchors = config.anchors_for_stride(*stride);
        let (h, w) = (map.h(), map.w());
        for (a, anchor) in anchors.iter().enumerate().take(ANCHORS_PER_CELL) {
            let c0 = a * per;
            for i in 0..h {
                for j in 0..w {
                    let at = |ch: usize| map.at(0, c0 + ch, i, j) as f64;
                    let obj = sigmoid_scalar(at(4));
                    let mut best = 0usize;
                    let mut best_logit = at(5);
                    for k in 1..c {
                        let v = at(5 + k);
                        if v > best_logit {
                            best_logit = v;
                            best = k;
                        }
                    }
                    let score = obj * sigmoid_scalar(best_logit);
                    if score >= conf_thresh {
                        out.push(Detection {
                            class_id: best,
                            score,
                            bbox: decode_box(
                                [at(0), at(1), at(2), at(3)],
                                *stride,
                                *anchor,
                                (i, j),
                            ),
                        });
                    }
                }
            }
        }
    }
    out
}

/// Greedy per-class suppression by descending score; ties broken by
/// (class_id, cx, cy) ascending. Survivors of the same class pairwise
/// satisfy IoU < iou_thresh.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted: Vec<&Detection> = dets.iter().collect();
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.class_id.cmp(&b.class_id))
            .then(a.bbox[0].partial_cmp(&b.bbox[0]).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.bbox[1].partial_cmp(&b.bbox[1]).unwrap_or(std::cmp::Ordering::Equal))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou_cxcywh(k.bbox, d.bbox) >= iou_thresh);
        if !suppressed {
            kept.push(d.clone());
        }
    }
    kept
}
