//! Evaluation metrics: mean average precision / recall for detection and
//! mean IoU for the segmentation heads.

use crate::error::{Error, Result};
use crate::losses::GtBox;
use crate::network::decode::{iou_cxcywh, Detection};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum MapResult {
    /// mAP is undefined without ground truth.
    NoGroundTruth,
    Evaluated {
        map: f64,
        recall: f64,
        /// (class_id, AP) for every class with at least one ground truth.
        per_class: Vec<(usize, f64)>,
    },
}

/// Greedy score-ranked matching at a single IoU threshold; AP is the area
/// under the all-point interpolated precision-recall curve, mAP the mean
/// over classes with ground truth, recall the matched fraction of all
/// ground truths.
pub fn compute_map(
    preds: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    iou_thresh: f64,
) -> Result<MapResult> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!(
            "{} prediction lists vs {} ground-truth lists",
            preds.len(),
            gts.len()
        )));
    }
    let total_gt: usize = gts.iter().map(|g| g.len()).sum();
    if total_gt == 0 {
        return Ok(MapResult::NoGroundTruth);
    }
    let mut classes: Vec<usize> = gts
        .iter()
        .flat_map(|g| g.iter().map(|b| b.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class = Vec::with_capacity(classes.len());
    let mut matched_total = 0usize;
    for &cls in &classes {
        let n_gt: usize = gts
            .iter()
            .map(|g| g.iter().filter(|b| b.class_id == cls).count())
            .sum();
        // (image, det index) ranked by descending score, deterministic ties
        let mut dets: Vec<(usize, usize, f64)> = Vec::new();
        for (img, p) in preds.iter().enumerate() {
            for (di, d) in p.iter().enumerate() {
                if d.class_id == cls {
                    dets.push((img, di, d.score));
                }
            }
        }
        dets.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });

        let mut gt_used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = vec![false; dets.len()];
        for (k, &(img, di, _)) in dets.iter().enumerate() {
            let dbox = preds[img][di].bbox;
            let mut best = -1.0;
            let mut best_gi = None;
            for (gi, g) in gts[img].iter().enumerate() {
                if g.class_id != cls || gt_used[img][gi] {
                    continue;
                }
                let iou = iou_cxcywh(dbox, g.bbox);
                if iou > best {
                    best = iou;
                    best_gi = Some(gi);
                }
            }
            if let Some(gi) = best_gi {
                if best >= iou_thresh {
                    gt_used[img][gi] = true;
                    tp[k] = true;
                }
            }
        }
        let matched = tp.iter().filter(|&&t| t).count();
        matched_total += matched;

        // all-point interpolated AP
        let mut ap = 0.0;
        let (mut tps, mut fps) = (0usize, 0usize);
        let mut curve: Vec<(f64, f64)> = Vec::with_capacity(tp.len()); // (recall, precision)
        for &t in &tp {
            if t {
                tps += 1;
            } else {
                fps += 1;
            }
            curve.push((tps as f64 / n_gt as f64, tps as f64 / (tps + fps) as f64));
        }
        // precision envelope p_interp(r) = max over points with recall >= r
        let mut env = vec![0.0; curve.len()];
        let mut run = 0.0f64;
        for (i, &(_, p)) in curve.iter().enumerate().rev() {
            run = run.max(p);
            env[i] = run;
        }
        let mut prev_r = 0.0;
        for (i, &(r, _)) in curve.iter().enumerate() {
            if r > prev_r {
                ap += (r - prev_r) * env[i];
                prev_r = r;
            }
        }
        per_class.push((cls, ap));
    }

    let map = per_class.iter().map(|(_, ap)| ap).sum::<f64>() / per_class.len() as f64;
    Ok(MapResult::Evaluated {
        map,
        recall: matched_total as f64 / total_gt as f64,
        per_class,
    })
}

/// Mean IoU over the two classes {background, foreground} of binary masks;
/// a class absent from both masks is excluded from the mean.
pub fn compute_miou<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    pred.same_shape(gt, "compute_miou")?;
    let mut inter = [0usize; 2];
    let mut union = [0usize; 2];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p.to_f64s(), g.to_f64s());
        if (p != 0.0 && p != 1.0) || (g != 0.0 && g != 1.0) {
            return Err(Error::InvalidInput("masks must be binary".into()));
        }
        for k in 0..2 {
            let kp = p == k as f64;
            let kg = g == k as f64;
            if kp && kg {
                inter[k] += 1;
            }
            if kp || kg {
                union[k] += 1;
            }
        }
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for k in 0..2 {
        if union[k] > 0 {
            sum += inter[k] as f64 / union[k] as f64;
            n += 1;
        }
    }
    // both unions empty cannot happen: every pixel belongs to some class
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(class_id: usize, score: f64, bbox: [f64; 4]) -> Detection {
        Detection { class_id, score, bbox }
    }

    #[test]
    fn perfect_detector_scores_one() {
        let gts = vec![vec![
            GtBox { class_id: 0, bbox: [10.0, 10.0, 8.0, 8.0] },
            GtBox { class_id: 1, bbox: [40.0, 40.0, 10.0, 6.0] },
        ]];
        let preds = vec![vec![
            det(0, 1.0, [10.0, 10.0, 8.0, 8.0]),
            det(1, 1.0, [40.0, 40.0, 10.0, 6.0]),
        ]];
        match compute_map(&preds, &gts, 0.5).unwrap() {
            MapResult::Evaluated { map, recall, per_class } => {
                assert_eq!(map, 1.0);
                assert_eq!(recall, 1.0);
                assert_eq!(per_class.len(), 2);
            }
            _ => panic!("expected evaluated result"),
        }
    }

    #[test]
    fn no_detections_scores_zero_and_no_gt_is_explicit() {
        let gts = vec![vec![GtBox { class_id: 0, bbox: [10.0, 10.0, 8.0, 8.0] }]];
        match compute_map(&[vec![]], &gts, 0.5).unwrap() {
            MapResult::Evaluated { map, recall, .. } => {
                assert_eq!(map, 0.0);
                assert_eq!(recall, 0.0);
            }
            _ => panic!(),
        }
        assert_eq!(
            compute_map(&[vec![]], &[vec![]], 0.5).unwrap(),
            MapResult::NoGroundTruth
        );
    }

    #[test]
    fn duplicate_detections_penalize_precision() {
        let gts = vec![vec![GtBox { class_id: 0, bbox: [10.0, 10.0, 8.0, 8.0] }]];
        let preds = vec![vec![
            det(0, 0.9, [10.0, 10.0, 8.0, 8.0]),
            det(0, 0.8, [10.0, 10.0, 8.0, 8.0]), // duplicate -> FP after match
        ]];
        match compute_map(&preds, &gts, 0.5).unwrap() {
            MapResult::Evaluated { map, recall, .. } => {
                assert_eq!(map, 1.0); // TP comes first, envelope unaffected
                assert_eq!(recall, 1.0);
            }
            _ => panic!(),
        }
        // reversed scores: the FP precedes the TP, AP = 0.5
        let preds2 = vec![vec![
            det(0, 0.9, [100.0, 100.0, 8.0, 8.0]),
            det(0, 0.8, [10.0, 10.0, 8.0, 8.0]),
        ]];
        match compute_map(&preds2, &gts, 0.5).unwrap() {
            MapResult::Evaluated { map, .. } => assert_eq!(map, 0.5),
            _ => panic!(),
        }
    }

    #[test]
    fn map_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gts: Vec<Vec<GtBox>> = (0..3)
            .map(|_| {
                (0..3)
                    .map(|_| GtBox {
                        class_id: rng.gen_range(0..2),
                        bbox: [
                            rng.gen_range(10.0..50.0),
                            rng.gen_range(10.0..50.0),
                            rng.gen_range(4.0..16.0),
                            rng.gen_range(4.0..16.0),
                        ],
                    })
                    .collect()
            })
            .collect();
        let preds: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| {
                g.iter()
                    .map(|b| {
                        det(
                            b.class_id,
                            rng.gen_range(0.1..1.0),
                            [
                                b.bbox[0] + rng.gen_range(-2.0..2.0),
                                b.bbox[1] + rng.gen_range(-2.0..2.0),
                                b.bbox[2],
                                b.bbox[3],
                            ],
                        )
                    })
                    .collect()
            })
            .collect();
        let a = compute_map(&preds, &gts, 0.5).unwrap();
        let mut preds2 = preds.clone();
        for p in preds2.iter_mut() {
            p.reverse();
        }
        let mut gts2 = gts.clone();
        for g in gts2.iter_mut() {
            g.reverse();
        }
        let b = compute_map(&preds2, &gts2, 0.5).unwrap();
        match (a, b) {
            (
                MapResult::Evaluated { map: m1, recall: r1, .. },
                MapResult::Evaluated { map: m2, recall: r2, .. },
            ) => {
                assert!((m1 - m2).abs() < 1e-12);
                assert!((r1 - r2).abs() < 1e-12);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn miou_exact_cases() {
        let gt = Tensor::from_fn([1, 1, 4, 4], |_, _, i, _| if i < 2 { 1.0f32 } else { 0.0 });
        assert_eq!(compute_miou(&gt, &gt).unwrap(), 1.0);
        let comp = gt.map(|v| 1.0 - v);
        assert_eq!(compute_miou(&comp, &gt).unwrap(), 0.0);
        // all-background both -> foreground class excluded, miou 1.0
        let z = Tensor::<f32>::zeros([1, 1, 4, 4]);
        assert_eq!(compute_miou(&z, &z).unwrap(), 1.0);
    }

    #[test]
    fn miou_counting_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let p = Tensor::from_fn([1, 1, 8, 8], |_, _, _, _| f64::from(rng.gen_range(0..2)));
            let g = Tensor::from_fn([1, 1, 8, 8], |_, _, _, _| f64::from(rng.gen_range(0..2)));
            let got = compute_miou(&p, &g).unwrap();
            // direct set arithmetic
            let mut want = 0.0;
            let mut cls = 0;
            for k in 0..2 {
                let kf = k as f64;
                let inter = p
                    .data()
                    .iter()
                    .zip(g.data())
                    .filter(|(a, b)| **a == kf && **b == kf)
                    .count();
                let uni = p
                    .data()
                    .iter()
                    .zip(g.data())
                    .filter(|(a, b)| **a == kf || **b == kf)
                    .count();
                if uni > 0 {
                    want += inter as f64 / uni as f64;
                    cls += 1;
                }
            }
            assert!((got - want / cls as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn miou_rejects_bad_inputs() {
        let a = Tensor::<f32>::zeros([1, 1, 4, 4]);
        let b = Tensor::<f32>::zeros([1, 1, 4, 5]);
        assert!(compute_miou(&a, &b).is_err());
        let c = Tensor::full([1, 1, 4, 4], 0.5f32);
        assert!(compute_miou(&a, &c).is_err());
    }
}
