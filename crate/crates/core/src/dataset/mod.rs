//! Synthetic jittery video, on-disk sequences and motion-speed analysis.

mod io;
mod motion;
mod synth;

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use io::{list_sequences, load_sequence, save_sequence, ANNOTATIONS_FILE, FRAMES_DIR};
pub use motion::{
    motion_iou, render_speed_histogram, speed_histogram, MotionScore, SpeedBins, SpeedProportions,
};
pub use synth::{generate_dataset, generate_sequence, SynthesisParams};

use crate::detection::Detection;

/// Axis-aligned integer box covering `[x1, x2) × [y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl PixelBox {
    pub fn new(x1: i64, y1: i64, x2: i64, y2: i64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> i64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> i64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> i64 {
        self.width().max(0) * self.height().max(0)
    }

    /// Intersection over union; zero if either box is degenerate.
    pub fn iou(&self, other: &PixelBox) -> f64 {
        if self.area() == 0 || other.area() == 0 {
            return 0.0;
        }
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0);
        let inter = iw * ih;
        inter as f64 / (self.area() + other.area() - inter) as f64
    }

    pub fn inside(&self, width: u32, height: u32) -> bool {
        self.x1 >= 0 && self.y1 >= 0 && self.x2 <= width as i64 && self.y2 <= height as i64
    }

    pub fn to_detection(&self) -> Detection {
        Detection::from_corners(
            self.x1 as f64,
            self.y1 as f64,
            self.x2 as f64,
            self.y2 as f64,
            1.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackBox {
    pub track: u32,
    #[serde(flatten)]
    pub bbox: PixelBox,
}

/// Ordered frames with per-frame annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    pub id: String,
    pub frames: Vec<RgbImage>,
    /// `annotations[t]` holds the boxes visible in frame `t`.
    pub annotations: Vec<Vec<TrackBox>>,
}

impl VideoSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Ground-truth boxes of frame `t` with score 1.
    pub fn detections(&self, t: usize) -> Vec<Detection> {
        self.annotations[t].iter().map(|b| b.bbox.to_detection()).collect()
    }
}
