use crate::autograd::{Tape, Var};
use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore};

use super::check_same_batch;

/// Strides of the four backbone stages.
pub const FEATURE_STRIDES: [usize; 4] = [2, 4, 8, 16];
/// Stride of the fused feature that the heads read.
pub const OUTPUT_STRIDE: usize = 4;

/// Four stages, each a stride-2 3×3 convolution followed by a stride-1 3×3
/// convolution, both with ReLU.
#[derive(Debug, Clone)]
pub struct Backbone {
    stages: Vec<(Conv2d, Conv2d)>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, widths: [usize; 4]) -> Self {
        let mut in_ch = 3;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let down = Conv2d::new(
                    store,
                    seed,
                    &format!("{name}.stage{i}.down"),
                    in_ch,
                    w,
                    ConvGeom::new(3, 2, 1),
                );
                let refine = Conv2d::new(
                    store,
                    seed,
                    &format!("{name}.stage{i}.refine"),
                    w,
                    w,
                    ConvGeom::new(3, 1, 1),
                );
                in_ch = w;
                (down, refine)
            })
            .collect();
        Self { stages }
    }

    /// Stage outputs in order of increasing stride.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, image: Var) -> Result<Vec<Var>> {
        let (_, c, h, w) = tape.value(image).dims4();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 image channels, got {c}")));
        }
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::InputSize {
                height: h,
                width: w,
                divisor: 16,
            });
        }
        let mut x = image;
        let mut outs = Vec::with_capacity(4);
        for (down, refine) in &self.stages {
            let y = down.forward(tape, params, x);
            let y = tape.relu(y);
            let y = refine.forward(tape, params, y);
            x = tape.relu(y);
            outs.push(x);
        }
        Ok(outs)
    }
}

/// Top-down fusion of the stride-4, -8 and -16 stages: 1×1 laterals,
/// nearest-neighbour upsampling, elementwise sum, then a 3×3 smoothing
/// convolution with ReLU. The stride-2 stage only feeds the deeper stages.
#[derive(Debug, Clone)]
pub struct Fpn {
    pub laterals: Vec<Conv2d>,
    pub smooth: Conv2d,
}

impl Fpn {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        widths: [usize; 4],
        fusion_width: usize,
    ) -> Self {
        let laterals = (1..4)
            .map(|i| {
                Conv2d::new(
                    store,
                    seed,
                    &format!("{name}.lateral{i}"),
                    widths[i],
                    fusion_width,
                    ConvGeom::new(1, 1, 0),
                )
            })
            .collect();
        let smooth = Conv2d::new(
            store,
            seed,
            &format!("{name}.smooth"),
            fusion_width,
            fusion_width,
            ConvGeom::new(3, 1, 1),
        );
        Self { laterals, smooth }
    }

    /// The summed pyramid before smoothing.
    pub fn top_down(&self, tape: &mut Tape, params: &Bound, stages: &[Var]) -> Result<Var> {
        if stages.len() != 4 {
            return Err(Error::Shape(format!("expected 4 stages, got {}", stages.len())));
        }
        check_same_batch(tape, stages)?;
        let mut acc = self.laterals[2].forward(tape, params, stages[3]);
        for i in (1..3).rev() {
            let up = tape.upsample2x(acc);
            let lat = self.laterals[i - 1].forward(tape, params, stages[i]);
            if tape.value(up).shape() != tape.value(lat).shape() {
                return Err(Error::Shape(format!(
                    "stage {i} {:?} does not match upsampled {:?}",
                    tape.value(lat).shape(),
                    tape.value(up).shape()
                )));
            }
            acc = tape.add(lat, up);
        }
        Ok(acc)
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, stages: &[Var]) -> Result<Var> {
        let summed = self.top_down(tape, params, stages)?;
        let smoothed = self.smooth.forward(tape, params, summed);
        Ok(tape.relu(smoothed))
    }
}
