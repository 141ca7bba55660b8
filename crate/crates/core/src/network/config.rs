use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ANCHORS_PER_CELL: usize = 3;
pub const SEG_CLASSES: usize = 2;
/// Detection pyramid strides; the stride-4 feature only feeds the
/// segmentation skip connection.
pub const DET_STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Resnet50,
    Mobilenetv2,
}

impl BackboneKind {
    pub fn label(&self) -> &'static str {
        match self {
            BackboneKind::Resnet50 => "resnet50",
            BackboneKind::Mobilenetv2 => "mobilenetv2",
        }
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "resnet50" => Ok(BackboneKind::Resnet50),
            "mobilenetv2" => Ok(BackboneKind::Mobilenetv2),
            other => Err(Error::InvalidConfig(format!("unknown backbone '{other}'"))),
        }
    }
}

/// Declarative architecture description. Widths default to values
/// calibrated so that both variants' parameter totals match the reference
/// model characteristics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub num_classes: usize,
    pub fusion_width: usize,
    pub fusion_repeats: usize,
    pub seg_width: usize,
    pub skip_proj_width: usize,
    pub aspect_ratios: [f64; 3],
    pub anchor_base_scale: f64,
    pub input_res: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::Mobilenetv2,
            num_classes: 10,
            fusion_width: 160,
            fusion_repeats: 2,
            seg_width: 128,
            skip_proj_width: 64,
            aspect_ratios: [0.5, 1.0, 2.0],
            anchor_base_scale: 4.0,
            input_res: (384, 640),
        }
    }
}

impl ModelConfig {
    pub fn with_backbone(backbone: BackboneKind) -> Self {
        ModelConfig {
            backbone,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_res;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::InvalidConfig(format!(
                "input_res {h}x{w} must be positive and divisible by 32"
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("num_classes must be >= 1".into()));
        }
        if self.fusion_width == 0 || self.seg_width == 0 || self.skip_proj_width == 0 {
            return Err(Error::InvalidConfig("widths must be >= 1".into()));
        }
        if self.fusion_repeats == 0 {
            return Err(Error::InvalidConfig("fusion_repeats must be >= 1".into()));
        }
        for r in self.aspect_ratios {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::InvalidConfig(format!("aspect ratio {r} must be positive")));
            }
        }
        for i in 0..3 {
            for j in i + 1..3 {
                if self.aspect_ratios[i] == self.aspect_ratios[j] {
                    return Err(Error::InvalidConfig("aspect ratios must be distinct".into()));
                }
            }
        }
        if !(self.anchor_base_scale > 0.0) {
            return Err(Error::InvalidConfig("anchor_base_scale must be positive".into()));
        }
        Ok(())
    }

    /// Detection map channel count per scale: 3 anchors x (4 box + 1
    /// objectness + classes).
    pub fn det_channels(&self) -> usize {
        ANCHORS_PER_CELL * (5 + self.num_classes)
    }

    /// Anchor (width, height) in input pixels for a given stride, one per
    /// aspect ratio: base = anchor_base_scale * stride, w = base*sqrt(r),
    /// h = base/sqrt(r).
    pub fn anchors_for_stride(&self, stride: usize) -> [(f64, f64); ANCHORS_PER_CELL] {
        let base = self.anchor_base_scale * stride as f64;
        let mut out = [(0.0, 0.0); ANCHORS_PER_CELL];
        for (i, r) in self.aspect_ratios.iter().enumerate() {
            let s = r.sqrt();
            out[i] = (base * s, base / s);
        }
        out
    }
}
