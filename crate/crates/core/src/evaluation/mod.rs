//! Matching, precision/recall/F1, throughput and overlay images.

mod fps;
mod records;
mod visualize;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use fps::{fps_benchmark, FpsReport};
pub use records::{read_detections_jsonl, write_detections_jsonl, FrameDetections, ScoredBox};
pub use visualize::{render_overlay, save_overlay, GT_COLOR, FP_COLOR, TP_COLOR};

use crate::detection::Detection;
use crate::error::Result;

/// Rule deciding whether a prediction may claim a ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchCriterion {
    /// The prediction's center lies inside the ground-truth box.
    CenterInBox,
    /// IoU with the ground-truth box is at least the threshold.
    Iou(f64),
}

impl MatchCriterion {
    pub fn name(&self) -> &'static str {
        match self {
            MatchCriterion::CenterInBox => "center_in_box",
            MatchCriterion::Iou(_) => "iou",
        }
    }

    fn accepts(&self, pred: &Detection, gt: &Detection) -> bool {
        match *self {
            MatchCriterion::CenterInBox => gt.contains(pred.cx, pred.cy),
            MatchCriterion::Iou(t) => pred.iou(gt) >= t,
        }
    }
}

/// Matching outcome of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameMatch {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// For each prediction (input order), the ground-truth index it matched.
    pub pred_matches: Vec<Option<usize>>,
}

impl FrameMatch {
    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
        }
    }
}

/// Greedy one-to-one matching in order of descending score.
///
/// Equal scores keep input order. Among the unmatched ground-truth boxes a
/// prediction qualifies for, it takes the one with the highest IoU, the
/// lowest index on ties.
pub fn match_detections(preds: &[Detection], gts: &[Detection], criterion: MatchCriterion) -> FrameMatch {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut taken = vec![false; gts.len()];
    let mut pred_matches = vec![None; preds.len()];
    for &p in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || !criterion.accepts(&preds[p], gt) {
                continue;
            }
            let iou = preds[p].iou(gt);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            pred_matches[p] = Some(g);
        }
    }
    let tp = pred_matches.iter().filter(|m| m.is_some()).count();
    FrameMatch {
        tp,
        fp: preds.len() - tp,
        fn_: gts.len() - tp,
        pred_matches,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

impl std::iter::Sum for Counts {
    fn sum<I: Iterator<Item = Counts>>(iter: I) -> Self {
        let mut c = Counts::default();
        for x in iter {
            c += x;
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1. A 0/0 ratio counts as 1 when the split is
/// completely empty (no predictions, no ground truth) and 0 otherwise.
pub fn precision_recall_f1(c: Counts) -> Scores {
    let vacuous = c.tp == 0 && c.fp == 0 && c.fn_ == 0;
    let ratio = |num: f64, den: f64| {
        if den == 0.0 {
            if vacuous {
                1.0
            } else {
                0.0
            }
        } else {
            num / den
        }
    };
    let precision = ratio(c.tp as f64, (c.tp + c.fp) as f64);
    let recall = ratio(c.tp as f64, (c.tp + c.fn_) as f64);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    Scores {
        precision,
        recall,
        f1,
    }
}

/// One line of the metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub split: String,
    pub criterion: MatchCriterion,
    pub threshold: f64,
    pub counts: Counts,
    pub scores: Scores,
}

pub const METRICS_HEADER: &str = "split,criterion,threshold,TP,FP,FN,precision,recall,f1";

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{:.6},{:.6}",
            r.split,
            r.criterion.name(),
            r.threshold,
            r.counts.tp,
            r.counts.fp,
            r.counts.fn_,
            r.scores.precision,
            r.scores.recall,
            r.scores.f1
        )?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(x1: f64, y1: f64, x2: f64, y2: f64) -> Detection {
        Detection::from_corners(x1, y1, x2, y2, 1.0)
    }

    #[test]
    fn single_hit() {
        let m = match_detections(
            &[Detection::new(5.0, 5.0, 4.0, 4.0, 0.9)],
            &[gt(0.0, 0.0, 10.0, 10.0)],
            MatchCriterion::CenterInBox,
        );
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));
        assert_eq!(m.pred_matches, vec![Some(0)]);
    }

    #[test]
    fn one_to_one() {
        let preds = [
            Detection::new(5.0, 5.0, 4.0, 4.0, 0.5),
            Detection::new(4.0, 4.0, 4.0, 4.0, 0.9),
        ];
        let m = match_detections(&preds, &[gt(0.0, 0.0, 10.0, 10.0)], MatchCriterion::CenterInBox);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
        assert_eq!(m.pred_matches, vec![None, Some(0)]);
    }

    #[test]
    fn center_just_outside() {
        let m = match_detections(
            &[Detection::new(11.0, 5.0, 4.0, 4.0, 0.9)],
            &[gt(0.0, 0.0, 10.0, 10.0)],
            MatchCriterion::CenterInBox,
        );
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
    }

    #[test]
    fn iou_one_needs_exact_box() {
        let g = gt(2.0, 2.0, 8.0, 8.0);
        let exact = match_detections(&[g], &[g], MatchCriterion::Iou(1.0));
        assert_eq!(exact.tp, 1);
        let shifted = Detection::from_corners(2.0, 2.0, 8.0, 9.0, 1.0);
        assert_eq!(match_detections(&[shifted], &[g], MatchCriterion::Iou(1.0)).tp, 0);
    }

    #[test]
    fn metrics_arithmetic() {
        let s = precision_recall_f1(Counts { tp: 2, fp: 1, fn_: 1 });
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        let p = precision_recall_f1(Counts { tp: 3, fp: 0, fn_: 0 });
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let e = precision_recall_f1(Counts::default());
        assert_eq!((e.precision, e.recall, e.f1), (1.0, 1.0, 1.0));
        let miss = precision_recall_f1(Counts { tp: 0, fp: 0, fn_: 2 });
        assert_eq!((miss.precision, miss.recall, miss.f1), (0.0, 0.0, 0.0));
    }
}
