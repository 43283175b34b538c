use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{PixelBox, VideoSequence};

/// Motion IoU of one track at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MotionScore {
    pub track: u32,
    pub frame: usize,
    pub score: f64,
}

/// For every track and frame, the mean IoU between the track's box and its
/// own boxes at offsets `d ∈ [-window, window] \ {0}`, using only frames
/// where the track is present. Tracks seen in fewer than two frames, and
/// frames with no neighbour inside the window, get no score.
///
/// Scores are ordered by track, then frame.
pub fn motion_iou(seq: &VideoSequence, window: usize) -> Vec<MotionScore> {
    let mut tracks: BTreeMap<u32, BTreeMap<usize, PixelBox>> = BTreeMap::new();
    for (t, boxes) in seq.annotations.iter().enumerate() {
        for b in boxes {
            tracks.entry(b.track).or_default().insert(t, b.bbox);
        }
    }
    let mut out = Vec::new();
    for (track, frames) in &tracks {
        if frames.len() < 2 {
            continue;
        }
        for (&t, bbox) in frames {
            let lo = t.saturating_sub(window);
            let (sum, n) = frames
                .range(lo..=t + window)
                .filter(|(&u, _)| u != t)
                .fold((0.0, 0usize), |(s, n), (_, other)| (s + bbox.iou(other), n + 1));
            if n > 0 {
                out.push(MotionScore {
                    track: *track,
                    frame: t,
                    score: sum / n as f64,
                });
            }
        }
    }
    out
}

/// Edges of the speed bins: slow above `slow_above`, fast at or below
/// `fast_at_or_below`, medium in between.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedBins {
    pub slow_above: f64,
    pub fast_at_or_below: f64,
}

impl Default for SpeedBins {
    fn default() -> Self {
        Self {
            slow_above: 0.9,
            fast_at_or_below: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpeedProportions {
    pub slow: f64,
    pub medium: f64,
    pub fast: f64,
}

/// Fractions of scores in each speed bin; all zero for empty input.
pub fn speed_histogram(scores: &[f64], bins: SpeedBins) -> SpeedProportions {
    if scores.is_empty() {
        return SpeedProportions::default();
    }
    let (mut slow, mut medium, mut fast) = (0usize, 0usize, 0usize);
    for &s in scores {
        if s > bins.slow_above {
            slow += 1;
        } else if s > bins.fast_at_or_below {
            medium += 1;
        } else {
            fast += 1;
        }
    }
    let n = scores.len() as f64;
    SpeedProportions {
        slow: slow as f64 / n,
        medium: medium as f64 / n,
        fast: fast as f64 / n,
    }
}

/// Bar chart of the three proportions (slow, medium, fast from left to
/// right) on a white canvas.
pub fn render_speed_histogram(p: &SpeedProportions) -> image::RgbImage {
    const W: u32 = 240;
    const H: u32 = 160;
    const MARGIN: u32 = 10;
    let colors = [[70, 150, 70], [230, 160, 40], [200, 50, 50]];
    let mut img = image::RgbImage::from_pixel(W, H, image::Rgb([255, 255, 255]));
    let bar_w = (W - 4 * MARGIN) / 3;
    let plot_h = (H - 2 * MARGIN) as f64;
    for (k, v) in [p.slow, p.medium, p.fast].into_iter().enumerate() {
        let x0 = MARGIN + k as u32 * (bar_w + MARGIN);
        let bar_h = (v.clamp(0.0, 1.0) * plot_h).round() as u32;
        for y in (H - MARGIN - bar_h)..(H - MARGIN) {
            for x in x0..x0 + bar_w {
                img.put_pixel(x, y, image::Rgb(colors[k]));
            }
        }
    }
    for x in 0..W {
        img.put_pixel(x, H - MARGIN, image::Rgb([0, 0, 0]));
    }
    img
}
