use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Detection, Grid};

/// Minimum IoU a box shifted by the splat radius must keep with the original.
pub const MIN_OVERLAP: f64 = 0.7;

/// Dense supervision for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthTargets {
    /// `[N, 1, H, W]` Gaussian splats, exactly 1 at object centers.
    pub heatmap: Tensor,
    /// `[N, 2, H, W]` box width and height in grid cells at positive cells.
    pub size: Tensor,
    /// `[N, 2, H, W]` fractional center remainder at positive cells.
    pub offset: Tensor,
    /// `[N · H · W]`, true at object-center cells.
    pub positive: Vec<bool>,
}

impl GroundTruthTargets {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

/// Largest radius (in cells) such that a box of `height × width` cells with
/// a corner displaced by it still overlaps the original by `min_overlap`.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let b1 = height + width;
    let c1 = width * height * (1.0 - min_overlap) / (1.0 + min_overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;

    let b2 = 2.0 * (height + width);
    let c2 = (1.0 - min_overlap) * width * height;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;

    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (height + width);
    let c3 = (min_overlap - 1.0) * width * height;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;

    r1.min(r2).min(r3)
}

fn splat(heat: &mut [f64], grid: Grid, cx: usize, cy: usize, radius: usize) {
    let sigma = (2 * radius + 1) as f64 / 6.0;
    let r = radius as isize;
    for dy in -r..=r {
        let y = cy as isize + dy;
        if y < 0 || y >= grid.height as isize {
            continue;
        }
        for dx in -r..=r {
            let x = cx as isize + dx;
            if x < 0 || x >= grid.width as isize {
                continue;
            }
            let g = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            if g < f64::EPSILON {
                continue;
            }
            let slot = &mut heat[y as usize * grid.width + x as usize];
            *slot = slot.max(g);
        }
    }
}

/// Renders center heatmaps, size and offset targets for each sample's boxes.
pub fn render_targets(boxes: &[Vec<Detection>], grid: Grid) -> Result<GroundTruthTargets> {
    let n = boxes.len();
    let (h, w) = (grid.height, grid.width);
    let hw = h * w;
    let stride = grid.stride as f64;
    let mut heatmap = Tensor::zeros(&[n, 1, h, w]);
    let mut size = Tensor::zeros(&[n, 2, h, w]);
    let mut offset = Tensor::zeros(&[n, 2, h, w]);
    let mut positive = vec![false; n * hw];
    for (s, sample_boxes) in boxes.iter().enumerate() {
        for b in sample_boxes {
            if !(b.w > 0.0 && b.h > 0.0) {
                return Err(Error::InvalidBox(format!(
                    "zero-area box at ({}, {}) of {}x{}",
                    b.cx, b.cy, b.w, b.h
                )));
            }
            let (fx, fy) = (b.cx / stride, b.cy / stride);
            let cx = (fx.floor().max(0.0) as usize).min(w - 1);
            let cy = (fy.floor().max(0.0) as usize).min(h - 1);
            let (bw, bh) = (b.w / stride, b.h / stride);
            let radius = gaussian_radius(bh.ceil(), bw.ceil(), MIN_OVERLAP).max(0.0) as usize;
            splat(&mut heatmap.sample_mut(s)[..hw], grid, cx, cy, radius);
            let cell = cy * w + cx;
            positive[s * hw + cell] = true;
            let sz = size.sample_mut(s);
            sz[cell] = bw;
            sz[hw + cell] = bh;
            let off = offset.sample_mut(s);
            off[cell] = fx - cx as f64;
            off[hw + cell] = fy - cy as f64;
        }
    }
    Ok(GroundTruthTargets {
        heatmap,
        size,
        offset,
        positive,
    })
}
