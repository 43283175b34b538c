//! Cross-frame box-masked contrastive learning.
//!
//! Anchor and reference features are stacked along the batch axis. Every
//! frame with a box contributes a foreground channel pattern (pooled under
//! its box mask) and every frame with uncovered area a background pattern.
//! Each foreground pattern is used once as a query, paired with a different
//! foreground pattern as the positive and with all background patterns as
//! negatives, and scored with InfoNCE. The contrastive loss is the mean over
//! queries.

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, GradSink, Tape, Var};
use crate::error::{Error, Result};
use crate::temporal::{
    masked_channel_pool, normalize_pattern, pooled_patterns, BinaryMask, ChannelPattern, PoolEntry,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub weight: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            weight: 0.3,
        }
    }
}

/// Foreground and background patterns, tagged with the index of the
/// concatenated sample they came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatternBank {
    pub foreground: Vec<(usize, ChannelPattern)>,
    pub background: Vec<(usize, ChannelPattern)>,
}

/// Indices into [`PatternBank::foreground`] (query, positive) and
/// [`PatternBank::background`] (negatives).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveTuple {
    pub query: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Stacks anchors then references along the batch axis, with their masks in
/// the same order.
pub fn concat_cross_frame(
    anchor: &Tensor,
    reference: &Tensor,
    anchor_masks: &[BinaryMask],
    reference_masks: &[BinaryMask],
) -> Result<(Tensor, Vec<BinaryMask>)> {
    if anchor.shape() != reference.shape() {
        return Err(Error::Shape(format!(
            "anchor {:?} vs reference {:?}",
            anchor.shape(),
            reference.shape()
        )));
    }
    let n = anchor.shape()[0];
    if anchor_masks.len() != n || reference_masks.len() != n {
        return Err(Error::Shape(format!(
            "{} anchor and {} reference masks for batch {n}",
            anchor_masks.len(),
            reference_masks.len()
        )));
    }
    let stacked = Tensor::concat_batch(&[anchor, reference])?;
    let masks = anchor_masks.iter().chain(reference_masks).cloned().collect();
    Ok((stacked, masks))
}

/// Foreground mask for a frame, empty when the frame has no boxes.
fn foreground(mask: &BinaryMask) -> Vec<f64> {
    if mask.is_usable() {
        mask.data.clone()
    } else {
        vec![0.0; mask.data.len()]
    }
}

fn pool_entries(masks: &[BinaryMask]) -> (Vec<PoolEntry>, Vec<PoolEntry>) {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (s, m) in masks.iter().enumerate() {
        let fore = foreground(m);
        let back: Vec<f64> = fore.iter().map(|v| 1.0 - v).collect();
        let nf = fore.iter().filter(|&&v| v == 1.0).count();
        let nb = back.len() - nf;
        if nf > 0 {
            fg.push(PoolEntry {
                sample: s,
                mask: fore,
                count: nf,
            });
        }
        if nb > 0 {
            bg.push(PoolEntry {
                sample: s,
                mask: back,
                count: nb,
            });
        }
    }
    (fg, bg)
}

/// Pools and normalizes the foreground and background pattern of every
/// stacked sample; empty regions contribute no entry.
pub fn extract_pattern_bank(stacked: &Tensor, masks: &[BinaryMask]) -> Result<PatternBank> {
    let (fg, bg) = pool_entries(masks);
    let pool = |entries: Vec<PoolEntry>| -> Result<Vec<(usize, ChannelPattern)>> {
        entries
            .into_iter()
            .map(|e| {
                let (_, _, h, w) = stacked.dims4();
                let m = BinaryMask::new(h, w, e.mask, crate::temporal::MaskSource::GroundTruth)?;
                let raw = masked_channel_pool(stacked, e.sample, &m)?;
                Ok((e.sample, normalize_pattern(&raw)))
            })
            .collect()
    };
    Ok(PatternBank {
        foreground: pool(fg)?,
        background: pool(bg)?,
    })
}

/// One tuple per foreground query. The positive is drawn uniformly from the
/// other foreground entries; the negatives are every background entry.
/// Returns nothing when fewer than two foregrounds or no backgrounds exist.
pub fn sample_pairs<R: Rng + ?Sized>(
    num_foreground: usize,
    num_background: usize,
    rng: &mut R,
) -> Vec<ContrastiveTuple> {
    if num_foreground < 2 || num_background == 0 {
        debug!(
            "contrastive sampling skipped: {num_foreground} foreground, {num_background} background"
        );
        return Vec::new();
    }
    let negatives: Vec<usize> = (0..num_background).collect();
    (0..num_foreground)
        .map(|q| {
            let r = rng.gen_range(0..num_foreground - 1);
            let positive = if r < q { r } else { r + 1 };
            ContrastiveTuple {
                query: q,
                positive,
                negatives: negatives.clone(),
            }
        })
        .collect()
}

/// [`sample_pairs`] over a pattern bank.
pub fn sample_bank_pairs<R: Rng + ?Sized>(bank: &PatternBank, rng: &mut R) -> Vec<ContrastiveTuple> {
    sample_pairs(bank.foreground.len(), bank.background.len(), rng)
}

fn unit(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        (vec![0.0; v.len()], 0.0)
    } else {
        (v.iter().map(|x| x / norm).collect(), norm)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Backpropagates through `u = v / |v|`.
fn unit_backward(u: &[f64], norm: f64, du: &[f64]) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; u.len()];
    }
    let proj = dot(u, du);
    u.iter().zip(du).map(|(ui, gi)| (gi - ui * proj) / norm).collect()
}

/// Gradients of [`info_nce`] with respect to its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceGrad {
    pub loss: f64,
    pub query: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// InfoNCE of L2-normalized patterns at temperature `tau`, stabilized by
/// subtracting the largest logit.
pub fn info_nce_grad(query: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> InfoNceGrad {
    assert!(!negatives.is_empty(), "InfoNCE needs at least one negative");
    let (uq, nq) = unit(query);
    let (up, np) = unit(positive);
    let units: Vec<(Vec<f64>, f64)> = negatives.iter().map(|v| unit(v)).collect();

    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(dot(&uq, &up) / tau);
    logits.extend(units.iter().map(|(u, _)| dot(&uq, u) / tau));
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + max - logits[0];

    // dL/dz_j = softmax_j - [j = 0]
    let dz: Vec<f64> = exps
        .iter()
        .enumerate()
        .map(|(j, e)| e / total - if j == 0 { 1.0 } else { 0.0 })
        .collect();
    let c = query.len();
    let mut duq = vec![0.0; c];
    for i in 0..c {
        duq[i] = dz[0] * up[i] / tau
            + units
                .iter()
                .zip(&dz[1..])
                .map(|((u, _), g)| g * u[i] / tau)
                .sum::<f64>();
    }
    let dup: Vec<f64> = uq.iter().map(|q| dz[0] * q / tau).collect();
    let dnegs = units
        .iter()
        .zip(&dz[1..])
        .map(|((u, n), g)| {
            let du: Vec<f64> = uq.iter().map(|q| g * q / tau).collect();
            unit_backward(u, *n, &du)
        })
        .collect();
    InfoNceGrad {
        loss,
        query: unit_backward(&uq, nq, &duq),
        positive: unit_backward(&up, np, &dup),
        negatives: dnegs,
    }
}

pub fn info_nce(query: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> f64 {
    info_nce_grad(query, positive, negatives, tau).loss
}

/// Mean InfoNCE over `tuples`; zero when there are none.
pub fn contrastive_loss(bank: &PatternBank, tuples: &[ContrastiveTuple], tau: f64) -> f64 {
    if tuples.is_empty() {
        return 0.0;
    }
    let sum: f64 = tuples
        .iter()
        .map(|t| {
            let negs: Vec<&[f64]> = t
                .negatives
                .iter()
                .map(|&k| bank.background[k].1.values())
                .collect();
            info_nce(
                bank.foreground[t.query].1.values(),
                bank.foreground[t.positive].1.values(),
                &negs,
                tau,
            )
        })
        .sum();
    sum / tuples.len() as f64
}

/// Records the contrastive loss on the tape for features stacked as
/// `[anchors; references]`. Returns `None` when no tuple can be formed.
pub fn contrastive_on_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    stacked: Var,
    masks: &[BinaryMask],
    tau: f64,
    rng: &mut R,
) -> Option<(Var, f64)> {
    let (fg, bg) = pool_entries(masks);
    let tuples = sample_pairs(fg.len(), bg.len(), rng);
    if tuples.is_empty() {
        return None;
    }
    let offset = fg.len();
    let entries = fg.into_iter().chain(bg).collect();
    let patterns = pooled_patterns(tape, stacked, entries);
    let rows: Vec<ContrastiveTuple> = tuples
        .into_iter()
        .map(|t| ContrastiveTuple {
            negatives: t.negatives.into_iter().map(|k| k + offset).collect(),
            ..t
        })
        .collect();
    let value = mean_info_nce(tape.value(patterns), &rows, tau, None);
    let v = tape.push(
        Tensor::scalar(value),
        InfoNceOp {
            patterns,
            tuples: rows,
            tau,
        },
    );
    Some((v, value))
}

/// Mean loss over tuples indexing rows of a `[K, C]` pattern matrix;
/// accumulates gradients into `grad` when given.
fn mean_info_nce(
    patterns: &Tensor,
    tuples: &[ContrastiveTuple],
    tau: f64,
    mut grad: Option<(&mut Tensor, f64)>,
) -> f64 {
    let c = patterns.dims2().1;
    let row = |k: usize| &patterns.data()[k * c..(k + 1) * c];
    let scale = 1.0 / tuples.len() as f64;
    let mut sum = 0.0;
    for t in tuples {
        let negs: Vec<&[f64]> = t.negatives.iter().map(|&k| row(k)).collect();
        let g = info_nce_grad(row(t.query), row(t.positive), &negs, tau);
        sum += g.loss;
        if let Some((dst, upstream)) = grad.as_mut() {
            let w = *upstream * scale;
            let d = dst.data_mut();
            let mut add = |k: usize, v: &[f64]| {
                for (slot, x) in d[k * c..(k + 1) * c].iter_mut().zip(v) {
                    *slot += w * x;
                }
            };
            add(t.query, &g.query);
            add(t.positive, &g.positive);
            for (&k, dn) in t.negatives.iter().zip(&g.negatives) {
                add(k, dn);
            }
        }
    }
    sum * scale
}

struct InfoNceOp {
    patterns: Var,
    tuples: Vec<ContrastiveTuple>,
    tau: f64,
}

impl Backward for InfoNceOp {
    fn backward(&self, tape: &Tape, _out: &Tensor, grad: &Tensor, sink: &mut GradSink) {
        let p = tape.value(self.patterns);
        let mut dp = Tensor::zeros(p.shape());
        mean_info_nce(p, &self.tuples, self.tau, Some((&mut dp, grad.data()[0])));
        sink.accumulate(self.patterns, dp);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::temporal::MaskSource;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_logits_give_ln2() {
        let q = [1.0, 0.0];
        let loss = info_nce(&q, &[0.0, 1.0], &[&[0.0, 2.0]], 0.3);
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matching_positive_with_orthogonal_negatives() {
        let q = [1.0, 0.0, 0.0];
        let loss = info_nce(&q, &q, &[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]], 1.0);
        let e = std::f64::consts::E;
        assert!((loss + (e / (e + 2.0)).ln()).abs() < 1e-12);
        assert!((loss - 0.551445).abs() < 1e-6);
    }

    #[test]
    fn loss_falls_as_positive_aligns() {
        let q = [1.0, 0.0];
        let neg: &[f64] = &[0.3, 1.0];
        let mut last = f64::INFINITY;
        for k in 0..10 {
            let t = k as f64 / 10.0;
            let pos = [t, 1.0 - t];
            let l = info_nce(&q, &pos, &[neg], 0.5);
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn sampling_counts_and_guards() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tuples = sample_pairs(4, 4, &mut rng);
        assert_eq!(tuples.len(), 4);
        for (q, t) in tuples.iter().enumerate() {
            assert_eq!(t.query, q);
            assert_ne!(t.positive, q);
            assert_eq!(t.negatives.len(), 4);
        }
        assert!(sample_pairs(1, 4, &mut rng).is_empty());
        assert!(sample_pairs(3, 0, &mut rng).is_empty());
    }

    #[test]
    fn sampling_is_seeded() {
        let a = sample_pairs(6, 2, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_pairs(6, 2, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn stacking_order_and_round_trip() {
        let a = Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64);
        let r = Tensor::from_fn(&[2, 1, 2, 2], |i| 100.0 + i as f64);
        let boxed = BinaryMask::new(2, 2, vec![1., 0., 0., 0.], MaskSource::GroundTruth).unwrap();
        let none = BinaryMask::absent(2, 2);
        let (stacked, masks) =
            concat_cross_frame(&a, &r, &[boxed.clone(), none.clone()], &[none.clone(), boxed]).unwrap();
        assert_eq!(stacked.shape()[0], 4);
        assert_eq!(stacked.sample(1), a.sample(1));
        assert_eq!(stacked.sample(2), r.sample(0));
        assert!(stacked.slice_batch(0, 2).bit_eq(&a));
        assert!(stacked.slice_batch(2, 4).bit_eq(&r));
        assert!(masks[1].data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bank_skips_empty_regions() {
        let f = Tensor::from_fn(&[3, 2, 2, 2], |i| (i % 5) as f64);
        let full = BinaryMask::new(2, 2, vec![1.; 4], MaskSource::GroundTruth).unwrap();
        let part = BinaryMask::new(2, 2, vec![1., 0., 0., 0.], MaskSource::GroundTruth).unwrap();
        let bank = extract_pattern_bank(&f, &[part.clone(), full, part]).unwrap();
        assert_eq!(bank.foreground.len(), 3);
        assert_eq!(bank.background.len(), 2);
        assert_eq!(bank.background[1].0, 2);
    }

    #[test]
    fn empty_loss_is_zero() {
        assert_eq!(contrastive_loss(&PatternBank::default(), &[], 0.07), 0.0);
    }
}
