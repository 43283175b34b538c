use std::time::Instant;

use serde::Serialize;

use crate::dataset::VideoSequence;
use crate::error::{Error, Result};
use crate::pipeline::{Config, Model, VideoInference};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FpsReport {
    pub mean: f64,
    pub std: f64,
    pub repeats: Vec<f64>,
    pub timed_frames: usize,
}

/// Frames per second of sequential inference. The first `warmup` frames of
/// each run are processed but not timed.
pub fn fps_benchmark(
    model: &Model,
    cfg: &Config,
    seq: &VideoSequence,
    warmup: usize,
    repeats: usize,
) -> Result<FpsReport> {
    if warmup == 0 || repeats == 0 {
        return Err(Error::InvalidParam("warmup and repeats must be at least 1".into()));
    }
    if seq.len() <= warmup {
        return Err(Error::InvalidParam(format!(
            "sequence has {} frames, warmup needs more than {warmup}",
            seq.len()
        )));
    }
    let timed = seq.len() - warmup;
    let mut rates = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let mut run = VideoInference::new(model, cfg);
        for f in &seq.frames[..warmup] {
            run.step(f)?;
        }
        let start = Instant::now();
        for f in &seq.frames[warmup..] {
            run.step(f)?;
        }
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        rates.push(timed as f64 / secs);
    }
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rates.len() as f64;
    Ok(FpsReport {
        mean,
        std: var.sqrt(),
        repeats: rates,
        timed_frames: timed,
    })
}
