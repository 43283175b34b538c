use rand::Rng;

use crate::detection::Detection;
use crate::tensor::Tensor;

use super::config::AugmentConfig;

/// Anchor frame, the frame before it, and their boxes in pixel coordinates.
/// Images are `[3, H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub anchor: Tensor,
    pub reference: Tensor,
    pub anchor_boxes: Vec<Detection>,
    pub reference_boxes: Vec<Detection>,
}

/// Geometric transform shared by both frames of a pair: integer crop,
/// clockwise quarter turns, resize, then flips.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub crop: (usize, usize, usize, usize),
    pub quarter_turns: u8,
    pub hflip: bool,
    pub vflip: bool,
}

impl Transform {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            crop: (0, 0, width, height),
            quarter_turns: 0,
            hflip: false,
            vflip: false,
        }
    }

    /// Draws a transform for a `height × width` image.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut R) -> Self {
        let scale = if cfg.crop_min_scale < 1.0 {
            rng.gen_range(cfg.crop_min_scale..=1.0)
        } else {
            1.0
        };
        let cw = ((width as f64 * scale).round() as usize).clamp(1, width);
        let ch = ((height as f64 * scale).round() as usize).clamp(1, height);
        let x0 = rng.gen_range(0..=width - cw);
        let y0 = rng.gen_range(0..=height - ch);
        let quarter_turns = if rng.gen_bool(cfg.rotate_prob) {
            rng.gen_range(1..=3)
        } else {
            0
        };
        let hflip = rng.gen_bool(cfg.flip_prob);
        let vflip = rng.gen_bool(cfg.flip_prob);
        Self {
            crop: (x0, y0, cw, ch),
            quarter_turns,
            hflip,
            vflip,
        }
    }

    pub fn apply_image(&self, img: &Tensor, out_h: usize, out_w: usize) -> Tensor {
        let (x0, y0, cw, ch) = self.crop;
        let (_, h, w) = dims3(img);
        let mut t = if (x0, y0, cw, ch) == (0, 0, w, h) {
            img.clone()
        } else {
            Tensor::from_fn(&[3, ch, cw], |i| {
                let (c, r) = (i / (ch * cw), i % (ch * cw));
                let (y, x) = (r / cw, r % cw);
                img.data()[c * h * w + (y + y0) * w + x + x0]
            })
        };
        for _ in 0..self.quarter_turns {
            t = rotate_cw(&t);
        }
        let mut t = resize_bilinear(&t, out_h, out_w);
        if self.hflip {
            t = flip(&t, true);
        }
        if self.vflip {
            t = flip(&t, false);
        }
        t
    }

    /// Maps boxes through the transform, clipping to the output image and
    /// dropping boxes left without area.
    pub fn apply_boxes(&self, boxes: &[Detection], out_h: usize, out_w: usize) -> Vec<Detection> {
        let (x0, y0, cw, ch) = self.crop;
        let (x0, y0) = (x0 as f64, y0 as f64);
        let (w, h) = (cw as f64, ch as f64);
        let mut out = Vec::with_capacity(boxes.len());
        for b in boxes {
            let (bx1, by1, bx2, by2) = b.corners();
            let mut c = [
                (bx1 - x0).clamp(0.0, w),
                (by1 - y0).clamp(0.0, h),
                (bx2 - x0).clamp(0.0, w),
                (by2 - y0).clamp(0.0, h),
            ];
            let (mut cw, mut ch) = (w, h);
            for _ in 0..self.quarter_turns {
                // (x, y) -> (H - y, x) in an image that becomes H wide
                c = [ch - c[3], c[0], ch - c[1], c[2]];
                std::mem::swap(&mut cw, &mut ch);
            }
            let (sx, sy) = (out_w as f64 / cw, out_h as f64 / ch);
            c = [c[0] * sx, c[1] * sy, c[2] * sx, c[3] * sy];
            if self.hflip {
                c = [out_w as f64 - c[2], c[1], out_w as f64 - c[0], c[3]];
            }
            if self.vflip {
                c = [c[0], out_h as f64 - c[3], c[2], out_h as f64 - c[1]];
            }
            if c[2] - c[0] > 0.0 && c[3] - c[1] > 0.0 {
                out.push(Detection::from_corners(c[0], c[1], c[2], c[3], b.score));
            }
        }
        out
    }

    pub fn apply(&self, pair: &FramePair, out_h: usize, out_w: usize) -> FramePair {
        FramePair {
            anchor: self.apply_image(&pair.anchor, out_h, out_w),
            reference: self.apply_image(&pair.reference, out_h, out_w),
            anchor_boxes: self.apply_boxes(&pair.anchor_boxes, out_h, out_w),
            reference_boxes: self.apply_boxes(&pair.reference_boxes, out_h, out_w),
        }
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

fn rotate_cw(t: &Tensor) -> Tensor {
    let (c, h, w) = dims3(t);
    // output is h wide and w tall; out(y', x') = in(h - 1 - x', y')
    Tensor::from_fn(&[c, w, h], |i| {
        let (ch, r) = (i / (w * h), i % (w * h));
        let (yo, xo) = (r / h, r % h);
        t.data()[ch * h * w + (h - 1 - xo) * w + yo]
    })
}

fn flip(t: &Tensor, horizontal: bool) -> Tensor {
    let (c, h, w) = dims3(t);
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, r) = (i / (h * w), i % (h * w));
        let (y, x) = (r / w, r % w);
        let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
        t.data()[ch * h * w + sy * w + sx]
    })
}

/// Half-pixel-centered bilinear resize of a `[C, H, W]` image; returns a
/// copy when the size already matches.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = dims3(t);
    if (h, w) == (out_h, out_w) {
        return t.clone();
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let axis = |o: usize, scale: f64, n: usize| {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    Tensor::from_fn(&[c, out_h, out_w], |i| {
        let (ch, r) = (i / (out_h * out_w), i % (out_h * out_w));
        let (y0, y1, fy) = axis(r / out_w, sy, h);
        let (x0, x1, fx) = axis(r % out_w, sx, w);
        let at = |y: usize, x: usize| t.data()[ch * h * w + y * w + x];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
            + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    })
}

/// Random joint transform of both frames, resized to `out_h × out_w`.
pub fn augment<R: Rng + ?Sized>(
    pair: &FramePair,
    cfg: &AugmentConfig,
    out_h: usize,
    out_w: usize,
    rng: &mut R,
) -> FramePair {
    let (_, h, w) = dims3(&pair.anchor);
    Transform::sample(cfg, h, w, rng).apply(pair, out_h, out_w)
}

/// Deterministic resize only.
pub fn prepare(pair: &FramePair, out_h: usize, out_w: usize) -> FramePair {
    let (_, h, w) = dims3(&pair.anchor);
    Transform::identity(h, w).apply(pair, out_h, out_w)
}
