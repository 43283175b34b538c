//! Anchor-free center-point detector.
//!
//! A small four-stage convolutional pyramid feeds a top-down fusion network
//! whose stride-4 output drives three heads: a center heatmap, box sizes and
//! sub-cell center offsets. Boxes are decoded from local heatmap maxima.

mod backbone;
mod decode;
mod heads;
mod loss;
mod targets;

use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, Fpn, FEATURE_STRIDES, OUTPUT_STRIDE};
pub use decode::decode_detections;
pub use heads::{DetectionHeads, HeadVars, CENTER_PRIOR_BIAS, HEATMAP_EPS};
pub use loss::{detection_loss, detection_loss_grad, detection_loss_on_tape, LossRecord, LossWeights};
pub use targets::{gaussian_radius, render_targets, GroundTruthTargets, MIN_OVERLAP};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::tensor::Tensor;

/// A batch of feature maps and the number of image pixels per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stride: usize,
}

/// Feature-grid geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize, stride: usize) -> Self {
        Self {
            height,
            width,
            stride,
        }
    }

    /// Grid of the fused feature for an image of the given size.
    pub fn for_image(height: usize, width: usize) -> Self {
        Self::new(height / OUTPUT_STRIDE, width / OUTPUT_STRIDE, OUTPUT_STRIDE)
    }
}

/// Center-form box in image pixels with a confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl Detection {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, score: f64) -> Self {
        Self {
            cx,
            cy,
            w,
            h,
            score,
        }
    }

    /// Box spanning `[x1, x2) × [y1, y2)`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Self {
        Self::new(
            0.5 * (x1 + x2),
            0.5 * (y1 + y2),
            x2 - x1,
            y2 - y1,
            score,
        )
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Intersection over union; zero when either box has no area.
    pub fn iou(&self, other: &Detection) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if self.area() <= 0.0 || other.area() <= 0.0 || union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Half-open containment of a point.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x1, y1, x2, y2) = self.corners();
        x >= x1 && x < x2 && y >= y1 && y < y2
    }
}

/// Raw head outputs of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutputs {
    /// `[N, 1, H, W]`, values in `(0, 1)`.
    pub heatmap: Tensor,
    /// `[N, 2, H, W]`: width, height in grid cells.
    pub size: Tensor,
    /// `[N, 2, H, W]`: x, y sub-cell offsets.
    pub offset: Tensor,
}

/// Architecture of the base detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Channel width of each backbone stage (strides 2, 4, 8, 16).
    pub widths: [usize; 4],
    pub fusion_width: usize,
    pub head_width: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 128],
            fusion_width: 64,
            head_width: 64,
        }
    }
}

/// Backbone, fusion network and heads.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub backbone: Backbone,
    pub fpn: Fpn,
    pub heads: DetectionHeads,
}

impl Detector {
    pub fn new(store: &mut ParamStore, seed: u64, config: &DetectorConfig) -> Self {
        let backbone = Backbone::new(store, seed, "backbone", config.widths);
        let fpn = Fpn::new(store, seed, "fpn", config.widths, config.fusion_width);
        let heads = DetectionHeads::new(store, seed, "heads", config.fusion_width, config.head_width);
        Self {
            config: config.clone(),
            backbone,
            fpn,
            heads,
        }
    }

    /// Image batch `[N, 3, H, W]` to the fused stride-4 feature.
    pub fn features(&self, tape: &mut Tape, params: &Bound, image: Var) -> Result<Var> {
        let stages = self.backbone.forward(tape, params, image)?;
        self.fpn.forward(tape, params, &stages)
    }

    pub fn predict(&self, tape: &mut Tape, params: &Bound, feature: Var) -> HeadVars {
        self.heads.forward(tape, params, feature)
    }

    /// Backbone stages as standalone feature maps.
    pub fn extract_features(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<FeatureMap>> {
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let x = tape.leaf(image.clone());
        let stages = self.backbone.forward(&mut tape, &params, x)?;
        Ok(stages
            .into_iter()
            .zip(FEATURE_STRIDES)
            .map(|(v, stride)| FeatureMap {
                data: tape.value(v).clone(),
                stride,
            })
            .collect())
    }

    /// Single-frame detection outputs for an image batch.
    pub fn run(&self, store: &ParamStore, image: &Tensor) -> Result<DetectorOutputs> {
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let x = tape.leaf(image.clone());
        let f = self.features(&mut tape, &params, x)?;
        Ok(self.predict(&mut tape, &params, f).outputs(&tape))
    }
}

pub(crate) fn check_same_batch(tape: &Tape, vars: &[Var]) -> Result<usize> {
    let n = tape.value(vars[0]).shape()[0];
    for &v in vars {
        if tape.value(v).shape()[0] != n {
            return Err(Error::Shape(format!(
                "batch sizes differ: {n} vs {}",
                tape.value(v).shape()[0]
            )));
        }
    }
    Ok(n)
}
