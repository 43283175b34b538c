//! Foreground temporal alignment.
//!
//! The reference feature is pooled over the reference foreground mask into a
//! channel pattern, min-max normalized to `[0, 1]`, and used as a channel
//! attention vector on the anchor feature:
//!
//! ```text
//! F̃ = α · f_r ⊙ F_a + F_a,    α = exp(cos(f_r, f_a))
//! ```
//!
//! `f_a` is pooled from the anchor feature with the same reference mask.
//! The attention vector has no spatial index, so it is broadcast over every
//! position. Samples whose mask is absent pass through untouched.

use log::debug;

use crate::autograd::{Backward, GradSink, Tape, Var};
use crate::detection::{Detection, Grid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Confidence a reference detection must exceed to gate alignment.
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    GroundTruth,
    Detected,
    /// No usable foreground; alignment must be skipped.
    Absent,
}

/// Feature-resolution foreground map with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub source: MaskSource,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>, source: MaskSource) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidParam("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
            source,
        })
    }

    pub fn absent(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
            source: MaskSource::Absent,
        }
    }

    pub fn is_usable(&self) -> bool {
        self.source != MaskSource::Absent && self.foreground_count() > 0
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1.0).count()
    }

    /// The complementary background map.
    pub fn inverted(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1.0 - v).collect(),
            source: self.source,
        }
    }
}

/// Per-channel activation summary normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPattern(pub Vec<f64>);

impl ChannelPattern {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// `exp(cosine similarity)`; always within `[e⁻¹, e]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveWeight(pub f64);

/// Marks every cell whose center lies inside one of `boxes`.
pub fn rasterize_boxes(boxes: &[Detection], grid: Grid) -> Vec<f64> {
    let mut data = vec![0.0; grid.height * grid.width];
    let s = grid.stride as f64;
    for b in boxes {
        let (x1, y1, x2, y2) = b.corners();
        for i in 0..grid.height {
            let cy = (i as f64 + 0.5) * s;
            if cy < y1 || cy >= y2 {
                continue;
            }
            for j in 0..grid.width {
                let cx = (j as f64 + 0.5) * s;
                if cx >= x1 && cx < x2 {
                    data[i * grid.width + j] = 1.0;
                }
            }
        }
    }
    data
}

/// Mask built from annotated boxes; absent when no cell is covered.
pub fn ground_truth_mask(boxes: &[Detection], grid: Grid) -> BinaryMask {
    mask_from(rasterize_boxes(boxes, grid), grid, MaskSource::GroundTruth)
}

/// Inference-time gate: rasterizes every detection whose score is strictly
/// above `threshold`. Without such a detection the mask is absent and the
/// alignment is skipped.
pub fn fta_gate(detections: &[Detection], threshold: f64, grid: Grid) -> BinaryMask {
    let validated: Vec<Detection> = detections
        .iter()
        .filter(|d| d.score > threshold)
        .copied()
        .collect();
    if validated.is_empty() {
        return BinaryMask::absent(grid.height, grid.width);
    }
    mask_from(rasterize_boxes(&validated, grid), grid, MaskSource::Detected)
}

fn mask_from(data: Vec<f64>, grid: Grid, source: MaskSource) -> BinaryMask {
    if data.iter().all(|&v| v == 0.0) {
        return BinaryMask::absent(grid.height, grid.width);
    }
    BinaryMask {
        height: grid.height,
        width: grid.width,
        data,
        source,
    }
}

fn check_mask(feature: &Tensor, mask: &BinaryMask) -> Result<usize> {
    let (_, _, h, w) = feature.dims4();
    if (mask.height, mask.width) != (h, w) {
        return Err(Error::Shape(format!(
            "mask {}x{} vs feature {h}x{w}",
            mask.height, mask.width
        )));
    }
    match mask.foreground_count() {
        0 => Err(Error::EmptyMask),
        n => Ok(n),
    }
}

fn pool_into(sample: &[f64], mask: &[f64], count: usize, out: &mut [f64]) {
    let hw = mask.len();
    for (c, slot) in out.iter_mut().enumerate() {
        let plane = &sample[c * hw..(c + 1) * hw];
        let sum: f64 = plane.iter().zip(mask).map(|(v, m)| v * m).sum();
        *slot = sum / count as f64;
    }
}

/// Mean of every channel of sample `sample` over the mask's foreground.
pub fn masked_channel_pool(feature: &Tensor, sample: usize, mask: &BinaryMask) -> Result<Vec<f64>> {
    let count = check_mask(feature, mask)?;
    let c = feature.dims4().1;
    let mut out = vec![0.0; c];
    pool_into(feature.sample(sample), &mask.data, count, &mut out);
    Ok(out)
}

/// Min-max normalization; a constant vector maps to all zeros.
pub fn normalize_pattern(raw: &[f64]) -> ChannelPattern {
    let (lo, hi) = min_max(raw);
    let range = hi - lo;
    if range <= 0.0 {
        return ChannelPattern(vec![0.0; raw.len()]);
    }
    ChannelPattern(raw.iter().map(|v| (v - lo) / range).collect())
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn arg_min_max(v: &[f64]) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[lo] {
            lo = i;
        }
        if x > v[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `α = exp(cos(f_r, f_a))`, or 1 when either pattern has zero norm.
pub fn similarity_weight(reference: &ChannelPattern, anchor: &ChannelPattern) -> AdaptiveWeight {
    match cosine(&reference.0, &anchor.0) {
        Some(c) => AdaptiveWeight(c.exp()),
        None => {
            debug!("zero-norm channel pattern, using cosine 0");
            AdaptiveWeight(1.0)
        }
    }
}

/// `F̃ = α · f_r ⊙ F_a + F_a`, applied to every sample of `anchor`.
pub fn fta_fuse(anchor: &Tensor, pattern: &ChannelPattern, alpha: AdaptiveWeight) -> Result<Tensor> {
    let (n, c, h, w) = anchor.dims4();
    if pattern.0.len() != c {
        return Err(Error::Shape(format!(
            "pattern of {} channels vs feature of {c}",
            pattern.0.len()
        )));
    }
    let mut out = anchor.clone();
    for s in 0..n {
        reweight_sample(out.sample_mut(s), &pattern.0, alpha.0, h * w);
    }
    Ok(out)
}

fn reweight_sample(sample: &mut [f64], pattern: &[f64], alpha: f64, hw: usize) {
    for (c, &f) in pattern.iter().enumerate() {
        let k = alpha * f;
        for v in &mut sample[c * hw..(c + 1) * hw] {
            *v += k * *v;
        }
    }
}

/// Result of aligning a batch on the tape.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub enhanced: Var,
    /// α per sample; `None` where the sample was skipped.
    pub alphas: Vec<Option<f64>>,
}

/// Foreground temporal alignment of a batch.
///
/// `masks[s]` is the reference mask of sample `s`; both patterns are pooled
/// with it. With `adaptive` off, α is fixed to 1.
pub fn align(
    tape: &mut Tape,
    anchor: Var,
    reference: Var,
    masks: &[BinaryMask],
    adaptive: bool,
) -> Result<Alignment> {
    let n = tape.value(anchor).dims4().0;
    if tape.value(anchor).shape() != tape.value(reference).shape() {
        return Err(Error::Shape(format!(
            "anchor {:?} vs reference {:?}",
            tape.value(anchor).shape(),
            tape.value(reference).shape()
        )));
    }
    if masks.len() != n {
        return Err(Error::Shape(format!("{} masks for {n} samples", masks.len())));
    }
    let mut entries = Vec::new();
    for (s, mask) in masks.iter().enumerate() {
        if mask.is_usable() {
            let count = check_mask(tape.value(anchor), mask)?;
            entries.push(PoolEntry {
                sample: s,
                mask: mask.data.clone(),
                count,
            });
        }
    }
    if entries.is_empty() {
        return Ok(Alignment {
            enhanced: anchor,
            alphas: vec![None; n],
        });
    }
    let rows: Vec<usize> = entries.iter().map(|e| e.sample).collect();
    let f_r = pooled_patterns(tape, reference, entries.clone());
    let alpha = if adaptive {
        let f_a = pooled_patterns(tape, anchor, entries);
        Some(cosine_exp(tape, f_r, f_a))
    } else {
        None
    };
    let mut alphas = vec![None; n];
    for (k, &s) in rows.iter().enumerate() {
        alphas[s] = Some(alpha.map_or(1.0, |a| tape.value(a).data()[k]));
    }
    let enhanced = reweight(tape, anchor, f_r, alpha, rows);
    Ok(Alignment { enhanced, alphas })
}

/// One pooled row: a sample index and the mask to pool it with.
#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub sample: usize,
    pub mask: Vec<f64>,
    pub count: usize,
}

/// Masked mean pooling followed by min-max normalization, one row per
/// entry: `[K, C]`.
pub fn pooled_patterns(tape: &mut Tape, feature: Var, entries: Vec<PoolEntry>) -> Var {
    let raw = masked_mean(tape, feature, entries);
    min_max_normalize(tape, raw)
}

pub fn masked_mean(tape: &mut Tape, feature: Var, entries: Vec<PoolEntry>) -> Var {
    let x = tape.value(feature);
    let c = x.dims4().1;
    let mut out = Tensor::zeros(&[entries.len(), c]);
    for (k, e) in entries.iter().enumerate() {
        pool_into(
            x.sample(e.sample),
            &e.mask,
            e.count,
            &mut out.data_mut()[k * c..(k + 1) * c],
        );
    }
    tape.push(out, MaskedMeanOp { feature, entries })
}

struct MaskedMeanOp {
    feature: Var,
    entries: Vec<PoolEntry>,
}

impl Backward for MaskedMeanOp {
    fn backward(&self, tape: &Tape, _out: &Tensor, grad: &Tensor, sink: &mut GradSink) {
        let x = tape.value(self.feature);
        let (_, c, h, w) = x.dims4();
        let hw = h * w;
        let mut dx = Tensor::zeros(x.shape());
        for (k, e) in self.entries.iter().enumerate() {
            let ds = dx.sample_mut(e.sample);
            for ch in 0..c {
                let g = grad.data()[k * c + ch] / e.count as f64;
                for (d, m) in ds[ch * hw..(ch + 1) * hw].iter_mut().zip(&e.mask) {
                    *d += g * m;
                }
            }
        }
        sink.accumulate(self.feature, dx);
    }
}

/// Row-wise min-max normalization of a `[K, C]` matrix.
pub fn min_max_normalize(tape: &mut Tape, input: Var) -> Var {
    let x = tape.value(input);
    let (k, c) = x.dims2();
    let mut out = Tensor::zeros(&[k, c]);
    for r in 0..k {
        let row = &x.data()[r * c..(r + 1) * c];
        let normed = normalize_pattern(row);
        out.data_mut()[r * c..(r + 1) * c].copy_from_slice(&normed.0);
    }
    tape.push(out, MinMaxOp { input })
}

struct MinMaxOp {
    input: Var,
}

impl Backward for MinMaxOp {
    fn backward(&self, tape: &Tape, out: &Tensor, grad: &Tensor, sink: &mut GradSink) {
        let x = tape.value(self.input);
        let (k, c) = x.dims2();
        let mut dx = Tensor::zeros(&[k, c]);
        for r in 0..k {
            let row = &x.data()[r * c..(r + 1) * c];
            let (lo, hi) = arg_min_max(row);
            let range = row[hi] - row[lo];
            if range <= 0.0 {
                continue;
            }
            let g = &grad.data()[r * c..(r + 1) * c];
            let y = &out.data()[r * c..(r + 1) * c];
            let d = &mut dx.data_mut()[r * c..(r + 1) * c];
            // y_i = (x_i - x_lo) / (x_hi - x_lo)
            let mut to_lo = 0.0;
            let mut to_hi = 0.0;
            for i in 0..c {
                d[i] += g[i] / range;
                to_lo += g[i] * (y[i] - 1.0) / range;
                to_hi -= g[i] * y[i] / range;
            }
            d[lo] += to_lo;
            d[hi] += to_hi;
        }
        sink.accumulate(self.input, dx);
    }
}

/// Row-wise `exp(cos(a_k, b_k))` of two `[K, C]` matrices: `[K]`.
pub fn cosine_exp(tape: &mut Tape, a: Var, b: Var) -> Var {
    let (ta, tb) = (tape.value(a), tape.value(b));
    let (k, c) = ta.dims2();
    let out = Tensor::from_fn(&[k], |r| {
        let pa = ChannelPattern(ta.data()[r * c..(r + 1) * c].to_vec());
        let pb = ChannelPattern(tb.data()[r * c..(r + 1) * c].to_vec());
        similarity_weight(&pa, &pb).0
    });
    tape.push(out, CosineExpOp { a, b })
}

struct CosineExpOp {
    a: Var,
    b: Var,
}

impl Backward for CosineExpOp {
    fn backward(&self, tape: &Tape, out: &Tensor, grad: &Tensor, sink: &mut GradSink) {
        let (ta, tb) = (tape.value(self.a), tape.value(self.b));
        let (k, c) = ta.dims2();
        let mut da = Tensor::zeros(&[k, c]);
        let mut db = Tensor::zeros(&[k, c]);
        for r in 0..k {
            let va = &ta.data()[r * c..(r + 1) * c];
            let vb = &tb.data()[r * c..(r + 1) * c];
            let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                continue;
            }
            let cos = va.iter().zip(vb).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
            // dα/dcos = α
            let g = grad.data()[r] * out.data()[r];
            for i in 0..c {
                da.data_mut()[r * c + i] = g * (vb[i] / (na * nb) - cos * va[i] / (na * na));
                db.data_mut()[r * c + i] = g * (va[i] / (na * nb) - cos * vb[i] / (nb * nb));
            }
        }
        sink.accumulate(self.a, da);
        sink.accumulate(self.b, db);
    }
}

/// `out[s] = F[s] + α_k f_k ⊙ F[s]` for `s = rows[k]`; other samples are
/// copied unchanged.
pub fn reweight(
    tape: &mut Tape,
    feature: Var,
    patterns: Var,
    alpha: Option<Var>,
    rows: Vec<usize>,
) -> Var {
    let x = tape.value(feature);
    let (_, c, h, w) = x.dims4();
    let p = tape.value(patterns);
    let mut out = x.clone();
    for (k, &s) in rows.iter().enumerate() {
        let a = alpha.map_or(1.0, |v| tape.value(v).data()[k]);
        reweight_sample(out.sample_mut(s), &p.data()[k * c..(k + 1) * c], a, h * w);
    }
    tape.push(
        out,
        ReweightOp {
            feature,
            patterns,
            alpha,
            rows,
        },
    )
}

struct ReweightOp {
    feature: Var,
    patterns: Var,
    alpha: Option<Var>,
    rows: Vec<usize>,
}

impl Backward for ReweightOp {
    fn backward(&self, tape: &Tape, _out: &Tensor, grad: &Tensor, sink: &mut GradSink) {
        let x = tape.value(self.feature);
        let (_, c, h, w) = x.dims4();
        let hw = h * w;
        let p = tape.value(self.patterns);
        let k_rows = self.rows.len();
        let mut dx = grad.clone();
        let mut dp = Tensor::zeros(&[k_rows, c]);
        let mut da = Tensor::zeros(&[k_rows]);
        for (k, &s) in self.rows.iter().enumerate() {
            let a = self.alpha.map_or(1.0, |v| tape.value(v).data()[k]);
            let xs = x.sample(s);
            let gs = grad.sample(s);
            let dxs = dx.sample_mut(s);
            for ch in 0..c {
                let f = p.data()[k * c + ch];
                let range = ch * hw..(ch + 1) * hw;
                let mut gx = 0.0;
                for ((d, &g), &v) in dxs[range.clone()].iter_mut().zip(&gs[range.clone()]).zip(&xs[range]) {
                    *d = g * (1.0 + a * f);
                    gx += g * v;
                }
                dp.data_mut()[k * c + ch] = a * gx;
                da.data_mut()[k] += f * gx;
            }
        }
        sink.accumulate(self.feature, dx);
        sink.accumulate(self.patterns, dp);
        if let Some(alpha) = self.alpha {
            sink.accumulate(alpha, da);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn two_by_two() -> Tensor {
        Tensor::from_vec(&[1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap()
    }

    fn mask(data: Vec<f64>) -> BinaryMask {
        BinaryMask::new(2, 2, data, MaskSource::GroundTruth).unwrap()
    }

    #[test]
    fn diagonal_mask_pooling() {
        let pooled = masked_channel_pool(&two_by_two(), 0, &mask(vec![1., 0., 0., 1.])).unwrap();
        assert_eq!(pooled, vec![2.5, 6.5]);
    }

    #[test]
    fn full_mask_is_average_pooling() {
        let pooled = masked_channel_pool(&two_by_two(), 0, &mask(vec![1.; 4])).unwrap();
        assert_eq!(pooled, vec![2.5, 6.5]);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let err = masked_channel_pool(&two_by_two(), 0, &mask(vec![0.; 4])).unwrap_err();
        assert!(matches!(err, Error::EmptyMask));
    }

    #[test]
    fn normalization_cases() {
        assert_eq!(normalize_pattern(&[2.5, 6.5]).0, vec![0.0, 1.0]);
        assert_eq!(normalize_pattern(&[3.0, 3.0, 3.0]).0, vec![0.0; 3]);
        assert_eq!(normalize_pattern(&[0.0, 0.5, 1.0]).0, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn similarity_weight_cases() {
        let f = ChannelPattern(vec![0.2, 1.0, 0.0]);
        assert!((similarity_weight(&f, &f).0 - E).abs() < 1e-12);
        let x = ChannelPattern(vec![1.0, 0.0]);
        let y = ChannelPattern(vec![0.0, 1.0]);
        assert_eq!(similarity_weight(&x, &y).0, 1.0);
        let ones = ChannelPattern(vec![1.0, 1.0]);
        let alpha = similarity_weight(&x, &ones).0;
        assert!((alpha - (1.0 / 2f64.sqrt()).exp()).abs() < 1e-12);
        assert!((alpha - 2.02812).abs() < 1e-5);
        let zero = ChannelPattern(vec![0.0, 0.0]);
        assert_eq!(similarity_weight(&zero, &ones).0, 1.0);
    }

    #[test]
    fn fusion_cases() {
        let f = two_by_two();
        let zeros = ChannelPattern(vec![0.0, 0.0]);
        assert!(fta_fuse(&f, &zeros, AdaptiveWeight(2.0)).unwrap().bit_eq(&f));
        let ones = ChannelPattern(vec![1.0, 1.0]);
        assert!(fta_fuse(&f, &ones, AdaptiveWeight(1.0)).unwrap().bit_eq(&f.scale(2.0)));

        let pixel = Tensor::from_vec(&[1, 2, 1, 1], vec![3.0, 5.0]).unwrap();
        let out = fta_fuse(&pixel, &ChannelPattern(vec![0.0, 1.0]), AdaptiveWeight(2.0)).unwrap();
        assert_eq!(out.data(), &[3.0, 15.0]);
    }

    #[test]
    fn gate_threshold_is_strict() {
        let grid = Grid::new(8, 8, 4);
        let det = |score| Detection::new(16.0, 16.0, 16.0, 16.0, score);
        assert_eq!(fta_gate(&[det(0.55), det(0.59)], 0.6, grid).source, MaskSource::Absent);
        assert_eq!(fta_gate(&[det(0.6)], 0.6, grid).source, MaskSource::Absent);
        assert_eq!(fta_gate(&[], 0.6, grid).source, MaskSource::Absent);
        assert_eq!(fta_gate(&[det(0.61)], 0.6, grid).source, MaskSource::Detected);
    }

    #[test]
    fn gate_rasterizes_cell_centers() {
        let grid = Grid::new(8, 8, 4);
        // covers x, y in [8, 24): cell centers 10, 14, 18, 22 → cells 2..=5
        let m = fta_gate(&[Detection::new(16.0, 16.0, 16.0, 16.0, 0.9)], 0.6, grid);
        for i in 0..8 {
            for j in 0..8 {
                let inside = (2..=5).contains(&i) && (2..=5).contains(&j);
                assert_eq!(m.data[i * 8 + j], if inside { 1.0 } else { 0.0 }, "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn skipped_alignment_is_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(two_by_two());
        let r = tape.leaf(two_by_two().scale(2.0));
        let out = align(&mut tape, a, r, &[BinaryMask::absent(2, 2)], true).unwrap();
        assert_eq!(out.enhanced, a);
        assert_eq!(out.alphas, vec![None]);
    }

    #[test]
    fn identical_frames_give_alpha_e() {
        let mut tape = Tape::new();
        let a = tape.leaf(two_by_two());
        let r = tape.leaf(two_by_two());
        let out = align(&mut tape, a, r, &[mask(vec![1., 1., 0., 1.])], true).unwrap();
        assert!((out.alphas[0].unwrap() - E).abs() < 1e-12);
    }
}
