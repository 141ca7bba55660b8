//! End-to-end single-image inference: forward pass, box decoding with
//! NMS, and per-pixel argmax of both segmentation heads.

use crate::error::Result;
use crate::network::decode::{decode_detections, nms, Detection};
use crate::network::model::Model;
use crate::tensor::Tensor;

pub struct InferOutput {
    pub detections: Vec<Detection>,
    /// (1, 1, H, W) binary masks from per-pixel argmax.
    pub drivable_mask: Tensor<f32>,
    pub lane_mask: Tensor<f32>,
}

fn argmax_mask(logits: &Tensor<f32>) -> Tensor<f32> {
    let [n, _, h, w] = logits.dims();
    Tensor::from_fn([n, 1, h, w], |ni, _, i, j| {
        if logits.at(ni, 1, i, j) > logits.at(ni, 0, i, j) {
            1.0
        } else {
            0.0
        }
    })
}

pub fn infer(
    model: &Model,
    image: &Tensor<f32>,
    conf_thresh: f64,
    iou_thresh: f64,
) -> Result<InferOutput> {
    let raw = model.forward(image)?;
    let dets = decode_detections(&raw, &model.config, conf_thresh);
    Ok(InferOutput {
        detections: nms(&dets, iou_thresh),
        drivable_mask: argmax_mask(&raw.drivable),
        lane_mask: argmax_mask(&raw.lane),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::config::{BackboneKind, ModelConfig};

    #[test]
    fn untrained_model_output_is_well_formed_and_deterministic() {
        let cfg = ModelConfig {
            backbone: BackboneKind::Mobilenetv2,
            fusion_width: 16,
            seg_width: 12,
            skip_proj_width: 4,
            input_res: (64, 96),
            ..Default::default()
        };
        let m = Model::build(cfg, 21).unwrap();
        let img = Tensor::from_fn([1, 3, 64, 96], |_, c, i, j| {
            ((c + i * 3 + j) % 11) as f32 / 11.0
        });
        let a = infer(&m, &img, 0.9, 0.5).unwrap();
        assert_eq!(a.drivable_mask.dims(), [1, 1, 64, 96]);
        assert!(a
            .drivable_mask
            .data()
            .iter()
            .chain(a.lane_mask.data())
            .all(|&v| v == 0.0 || v == 1.0));
        for d in &a.detections {
            assert!((0.0..=1.0).contains(&d.score) && d.score >= 0.9);
            assert!(d.bbox[2] > 0.0 && d.bbox[3] > 0.0);
        }
        let b = infer(&m, &img, 0.9, 0.5).unwrap();
        assert_eq!(a.detections, b.detections);
        assert_eq!(a.drivable_mask.data(), b.drivable_mask.data());
    }
}
