use crate::autograd::{Tape, Var};
use crate::conv::ConvGeom;
use crate::nn::{Bound, Conv2d, Init, ParamStore};

use super::DetectorOutputs;

/// Initial center-logit bias, a foreground prior of 0.1.
pub const CENTER_PRIOR_BIAS: f64 = -2.19;
/// Heatmap values are clamped to `[HEATMAP_EPS, 1 - HEATMAP_EPS]`.
pub const HEATMAP_EPS: f64 = 1e-4;

#[derive(Debug, Clone)]
struct Branch {
    hidden: Conv2d,
    out: Conv2d,
}

impl Branch {
    fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        in_ch: usize,
        hidden: usize,
        out_ch: usize,
        out_bias: f64,
    ) -> Self {
        let h = Conv2d::new(store, seed, &format!("{name}.hidden"), in_ch, hidden, ConvGeom::new(3, 1, 1));
        let out = Conv2d::with_init(
            store,
            seed,
            &format!("{name}.out"),
            hidden,
            out_ch,
            ConvGeom::new(1, 1, 0),
            Init::Normal { std: 0.01 },
            Init::Constant(out_bias),
        );
        Self { hidden: h, out }
    }

    fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Var {
        let h = self.hidden.forward(tape, params, x);
        let h = tape.relu(h);
        self.out.forward(tape, params, h)
    }
}

/// Center, size and offset branches, each 3×3 conv → ReLU → 1×1 conv.
#[derive(Debug, Clone)]
pub struct DetectionHeads {
    center: Branch,
    size: Branch,
    offset: Branch,
}

/// Head outputs recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    /// Squashed center heatmap.
    pub heatmap: Var,
    /// Center logits before squashing.
    pub center_logits: Var,
    pub size: Var,
    pub offset: Var,
}

impl HeadVars {
    pub fn outputs(&self, tape: &Tape) -> DetectorOutputs {
        DetectorOutputs {
            heatmap: tape.value(self.heatmap).clone(),
            size: tape.value(self.size).clone(),
            offset: tape.value(self.offset).clone(),
        }
    }
}

impl DetectionHeads {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, in_ch: usize, hidden: usize) -> Self {
        Self {
            center: Branch::new(store, seed, &format!("{name}.center"), in_ch, hidden, 1, CENTER_PRIOR_BIAS),
            size: Branch::new(store, seed, &format!("{name}.size"), in_ch, hidden, 2, 0.0),
            offset: Branch::new(store, seed, &format!("{name}.offset"), in_ch, hidden, 2, 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, feature: Var) -> HeadVars {
        let center_logits = self.center.forward(tape, params, feature);
        let heatmap = tape.sigmoid_clamped(center_logits, HEATMAP_EPS);
        let size = self.size.forward(tape, params, feature);
        let offset = self.offset.forward(tape, params, feature);
        HeadVars {
            heatmap,
            center_logits,
            size,
            offset,
        }
    }
}
