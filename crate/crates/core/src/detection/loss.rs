use serde::{Deserialize, Serialize};

use crate::autograd::{Backward, GradSink, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{DetectorOutputs, GroundTruthTargets, HeadVars};

const FOCAL_ALPHA: i32 = 2;
const FOCAL_BETA: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub size: f64,
    pub offset: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            size: 0.1,
            offset: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossRecord {
    pub center: f64,
    pub size: f64,
    pub offset: f64,
    pub total: f64,
}

fn check_shapes(out: &DetectorOutputs, t: &GroundTruthTargets) -> Result<()> {
    if out.heatmap.shape() != t.heatmap.shape()
        || out.size.shape() != t.size.shape()
        || out.offset.shape() != t.offset.shape()
    {
        return Err(Error::Shape(format!(
            "outputs {:?}/{:?}/{:?} vs targets {:?}/{:?}/{:?}",
            out.heatmap.shape(),
            out.size.shape(),
            out.offset.shape(),
            t.heatmap.shape(),
            t.size.shape(),
            t.offset.shape()
        )));
    }
    Ok(())
}

/// Focal + weighted L1 detection loss and its gradients with respect to the
/// three output maps.
///
/// The center term is the penalty-reduced pixelwise focal loss
/// (α = 2, β = 4); both it and the L1 terms are divided by the number of
/// positive cells, clamped to at least one. The L1 terms read positive cells
/// only and sum both channels.
pub fn detection_loss_grad(
    out: &DetectorOutputs,
    targets: &GroundTruthTargets,
    weights: LossWeights,
) -> Result<(LossRecord, DetectorOutputs)> {
    check_shapes(out, targets)?;
    let (n, _, h, w) = out.heatmap.dims4();
    let hw = h * w;
    let norm = targets.num_positive().max(1) as f64;

    let mut d_heat = Tensor::zeros(out.heatmap.shape());
    let mut center = 0.0;
    for (i, (&p, &y)) in out.heatmap.data().iter().zip(targets.heatmap.data()).enumerate() {
        if targets.positive[i] {
            let q = 1.0 - p;
            let qa = q.powi(FOCAL_ALPHA);
            if qa != 0.0 {
                center -= qa * p.ln();
                d_heat.data_mut()[i] = (2.0 * q * p.ln() - qa / p) / norm;
            }
        } else {
            let wneg = (1.0 - y).powi(FOCAL_BETA);
            let pa = p.powi(FOCAL_ALPHA);
            if wneg != 0.0 && pa != 0.0 {
                let l = (1.0 - p).ln();
                center -= wneg * pa * l;
                d_heat.data_mut()[i] = -wneg * (2.0 * p * l - pa / (1.0 - p)) / norm;
            }
        }
    }
    center /= norm;

    let l1 = |pred: &Tensor, target: &Tensor| {
        let mut grad = Tensor::zeros(pred.shape());
        let mut sum = 0.0;
        for s in 0..n {
            for ch in 0..2 {
                for cell in 0..hw {
                    if !targets.positive[s * hw + cell] {
                        continue;
                    }
                    let idx = (s * 2 + ch) * hw + cell;
                    let diff = pred.data()[idx] - target.data()[idx];
                    sum += diff.abs();
                    grad.data_mut()[idx] = if diff > 0.0 {
                        1.0 / norm
                    } else if diff < 0.0 {
                        -1.0 / norm
                    } else {
                        0.0
                    };
                }
            }
        }
        (sum / norm, grad)
    };
    let (size, d_size) = l1(&out.size, &targets.size);
    let (offset, d_offset) = l1(&out.offset, &targets.offset);

    let record = LossRecord {
        center,
        size,
        offset,
        total: center + weights.size * size + weights.offset * offset,
    };
    let grads = DetectorOutputs {
        heatmap: d_heat,
        size: d_size.scale(weights.size),
        offset: d_offset.scale(weights.offset),
    };
    Ok((record, grads))
}

pub fn detection_loss(
    out: &DetectorOutputs,
    targets: &GroundTruthTargets,
    weights: LossWeights,
) -> Result<LossRecord> {
    detection_loss_grad(out, targets, weights).map(|(r, _)| r)
}

struct DetectionLossOp {
    heads: HeadVars,
    targets: GroundTruthTargets,
    weights: LossWeights,
}

impl Backward for DetectionLossOp {
    fn backward(&self, tape: &Tape, _out: &Tensor, grad: &Tensor, sink: &mut GradSink) {
        let outputs = self.heads.outputs(tape);
        let (_, grads) = detection_loss_grad(&outputs, &self.targets, self.weights)
            .expect("shapes were checked in the forward pass");
        let g = grad.data()[0];
        sink.accumulate(self.heads.heatmap, grads.heatmap.scale(g));
        sink.accumulate(self.heads.size, grads.size.scale(g));
        sink.accumulate(self.heads.offset, grads.offset.scale(g));
    }
}

/// Records the detection loss; the returned variable holds the total.
pub fn detection_loss_on_tape(
    tape: &mut Tape,
    heads: HeadVars,
    targets: &GroundTruthTargets,
    weights: LossWeights,
) -> Result<(Var, LossRecord)> {
    let record = detection_loss(&heads.outputs(tape), targets, weights)?;
    let v = tape.push(
        Tensor::scalar(record.total),
        DetectionLossOp {
            heads,
            targets: targets.clone(),
            weights,
        },
    );
    Ok((v, record))
}
