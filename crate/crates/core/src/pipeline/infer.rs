use image::RgbImage;
use serde::Serialize;

use crate::autograd::Tape;
use crate::dataset::VideoSequence;
use crate::detection::{decode_detections, Detection, Grid, OUTPUT_STRIDE};
use crate::error::Result;
use crate::temporal::{align, fta_gate};
use crate::tensor::Tensor;

use super::augment::resize_bilinear;
use super::config::Config;
use super::model::{batch_tensor, image_to_tensor, Model};

/// Fused feature and detections of the previous frame.
#[derive(Debug, Clone)]
pub struct ReferenceState {
    pub feature: Tensor,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameResult {
    pub frame: usize,
    pub detections: Vec<Detection>,
    /// Whether the foreground alignment ran on this frame.
    pub fta_applied: bool,
    pub alpha: Option<f64>,
}

/// Detects on one `[3, H, W]` image (values in `[0, 1]`, already at the
/// configured input size).
///
/// The alignment runs only when `reference` holds a detection scoring above
/// the confidence threshold; without a reference, the frame serves as its
/// own reference for the background alignment. Also returns the state to
/// pass as the next frame's reference.
pub fn infer_frame(
    model: &Model,
    cfg: &Config,
    image: &Tensor,
    reference: Option<&ReferenceState>,
) -> Result<(FrameResult, ReferenceState)> {
    let sw = cfg.modules;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let grid = Grid::for_image(h, w);
    let mut tape = Tape::new();
    let params = model.store.bind(&mut tape);
    let x = tape.leaf(batch_tensor([image])?);
    let fa = model.features(&mut tape, &params, x)?;
    let fr = match reference {
        Some(r) => tape.leaf(r.feature.clone()),
        None => fa,
    };

    let mut feature = fa;
    let mut alpha = None;
    let mut fta_applied = false;
    if sw.fta {
        if let Some(r) = reference {
            let mask = fta_gate(&r.detections, cfg.fta.confidence_threshold, grid);
            if mask.is_usable() {
                let a = align(&mut tape, fa, fr, &[mask], sw.adaptive_weight)?;
                feature = a.enhanced;
                alpha = a.alphas[0];
                fta_applied = true;
            }
        }
    }
    if sw.bda {
        feature = model.bda.forward(&mut tape, &params, feature, fr)?;
    }
    let heads = model.detector.predict(&mut tape, &params, feature);
    let detections = decode_detections(
        &heads.outputs(&tape),
        0,
        OUTPUT_STRIDE,
        cfg.inference.max_detections,
        cfg.inference.score_threshold,
    );
    let state = ReferenceState {
        feature: tape.value(fa).clone(),
        detections: detections.clone(),
    };
    Ok((
        FrameResult {
            frame: 0,
            detections,
            fta_applied,
            alpha,
        },
        state,
    ))
}

/// Stateful frame-by-frame inference over one video.
pub struct VideoInference<'a> {
    model: &'a Model,
    cfg: &'a Config,
    reference: Option<ReferenceState>,
    frame: usize,
}

impl<'a> VideoInference<'a> {
    pub fn new(model: &'a Model, cfg: &'a Config) -> Self {
        Self {
            model,
            cfg,
            reference: None,
            frame: 0,
        }
    }

    /// Detects on the next frame. Frames of another size are resized to the
    /// input size and the boxes mapped back.
    pub fn step(&mut self, frame: &RgbImage) -> Result<FrameResult> {
        let (ih, iw) = (self.cfg.input.height, self.cfg.input.width);
        let (fh, fw) = (frame.height() as usize, frame.width() as usize);
        let image = resize_bilinear(&image_to_tensor(frame), ih, iw);
        let (mut result, state) = infer_frame(self.model, self.cfg, &image, self.reference.as_ref())?;
        if (fh, fw) != (ih, iw) {
            let (sx, sy) = (fw as f64 / iw as f64, fh as f64 / ih as f64);
            for d in &mut result.detections {
                *d = Detection::new(d.cx * sx, d.cy * sy, d.w * sx, d.h * sy, d.score);
            }
        }
        result.frame = self.frame;
        self.frame += 1;
        self.reference = Some(state);
        Ok(result)
    }
}

pub fn infer_video(model: &Model, cfg: &Config, seq: &VideoSequence) -> Result<Vec<FrameResult>> {
    let mut run = VideoInference::new(model, cfg);
    seq.frames.iter().map(|f| run.step(f)).collect()
}
