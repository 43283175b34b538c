use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::error::{Error, Result};

/// Corner-form box with a score, as written to detection files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

impl From<&Detection> for ScoredBox {
    fn from(d: &Detection) -> Self {
        let (x1, y1, x2, y2) = d.corners();
        Self {
            x1,
            y1,
            x2,
            y2,
            score: d.score,
        }
    }
}

impl From<&ScoredBox> for Detection {
    fn from(b: &ScoredBox) -> Self {
        Detection::from_corners(b.x1, b.y1, b.x2, b.y2, b.score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameDetections {
    pub frame: usize,
    pub boxes: Vec<ScoredBox>,
}

/// One JSON object per frame: `{"frame": t, "boxes": [{x1, y1, x2, y2, score}]}`.
pub fn write_detections_jsonl(path: &Path, frames: &[Vec<Detection>]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (frame, dets) in frames.iter().enumerate() {
        let rec = FrameDetections {
            frame,
            boxes: dets.iter().map(ScoredBox::from).collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec).expect("plain record serializes"))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a file written by [`write_detections_jsonl`]; frames must be
/// numbered 0, 1, 2, … in order.
pub fn read_detections_jsonl(path: &Path) -> Result<Vec<Vec<Detection>>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut frames = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: FrameDetections = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if rec.frame != frames.len() {
            return Err(err(format!("expected frame {}, found {}", frames.len(), rec.frame)));
        }
        frames.push(rec.boxes.iter().map(Detection::from).collect());
    }
    Ok(frames)
}
