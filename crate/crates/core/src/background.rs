//! Background dynamic alignment.
//!
//! The inter-frame difference `F̃ − F_r` is projected by a 1×1 convolution
//! into a dynamic field of 18 channels: one `(Δy, Δx)` pair per tap of a
//! 3×3 kernel. A deformable 3×3 convolution then samples `F̃` at the
//! displaced tap positions with bilinear interpolation (zero outside the
//! grid). The projection starts at zero, so an untrained block is a plain
//! 3×3 convolution.

use crate::autograd::{Backward, GradSink, Tape, Var};
use crate::conv::{gemm_backward_cols, gemm_backward_params, gemm_forward, ConvGeom};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Two offsets per tap of a 3×3 kernel.
pub const OFFSET_CHANNELS: usize = 18;
const TAPS: usize = 9;

/// Reads channel `channel` of sample `sample` at the fractional position
/// `(y, x)`. Neighbours outside the grid contribute zero.
pub fn bilinear_sample(f: &Tensor, y: f64, x: f64, channel: usize, sample: usize) -> f64 {
    let (_, c, h, w) = f.dims4();
    let plane = &f.sample(sample)[channel * h * w..(channel + 1) * h * w];
    debug_assert!(channel < c);
    SamplePoint::new(y, x).value(plane, h, w)
}

/// Bilinear stencil of one fractional position.
#[derive(Debug, Clone, Copy)]
struct SamplePoint {
    y0: isize,
    x0: isize,
    ly: f64,
    lx: f64,
}

impl SamplePoint {
    fn new(y: f64, x: f64) -> Self {
        let fy = y.floor();
        let fx = x.floor();
        Self {
            y0: fy as isize,
            x0: fx as isize,
            ly: y - fy,
            lx: x - fx,
        }
    }

    /// `(flat index, weight, ∂weight/∂y, ∂weight/∂x)` of the in-grid corners.
    #[inline]
    fn corners(&self, h: usize, w: usize) -> impl Iterator<Item = (usize, f64, f64, f64)> {
        let (ly, lx) = (self.ly, self.lx);
        let (hy, hx) = (1.0 - ly, 1.0 - lx);
        let (y0, x0) = (self.y0, self.x0);
        [
            (y0, x0, hy * hx, -hx, -hy),
            (y0, x0 + 1, hy * lx, -lx, hy),
            (y0 + 1, x0, ly * hx, hx, -ly),
            (y0 + 1, x0 + 1, ly * lx, lx, ly),
        ]
        .into_iter()
        .filter(move |&(yy, xx, ..)| yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w)
        .map(move |(yy, xx, wt, dy, dx)| (yy as usize * w + xx as usize, wt, dy, dx))
    }

    #[inline]
    fn value(&self, plane: &[f64], h: usize, w: usize) -> f64 {
        self.corners(h, w).map(|(i, wt, ..)| wt * plane[i]).sum()
    }
}

/// Tap positions `p + r_k + Δ_k(p)` for every tap `k` and output cell `p`,
/// laid out `[k][p]`.
fn sample_points(offsets: &[f64], h: usize, w: usize) -> Vec<SamplePoint> {
    let hw = h * w;
    let mut points = Vec::with_capacity(TAPS * hw);
    for k in 0..TAPS {
        let (ky, kx) = ((k / 3) as f64 - 1.0, (k % 3) as f64 - 1.0);
        let dy = &offsets[2 * k * hw..(2 * k + 1) * hw];
        let dx = &offsets[(2 * k + 1) * hw..(2 * k + 2) * hw];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                points.push(SamplePoint::new(y as f64 + ky + dy[p], x as f64 + kx + dx[p]));
            }
        }
    }
    points
}

/// Deformable columns `[C·9, H·W]` for one sample.
fn deform_cols(x: &[f64], c: usize, h: usize, w: usize, points: &[SamplePoint]) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * TAPS * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for k in 0..TAPS {
            let row = &mut cols[(ci * TAPS + k) * hw..(ci * TAPS + k + 1) * hw];
            for (p, slot) in row.iter_mut().enumerate() {
                *slot = points[k * hw + p].value(plane, h, w);
            }
        }
    }
    cols
}

fn check_deform_shapes(x: &Tensor, offset: &Tensor, weight: &Tensor) -> Result<()> {
    let (n, c, h, w) = x.dims4();
    if offset.shape() != [n, OFFSET_CHANNELS, h, w] {
        return Err(Error::Shape(format!(
            "offset field {:?} does not match feature {:?}",
            offset.shape(),
            x.shape()
        )));
    }
    let ws = weight.shape();
    if ws.len() != 4 || ws[1] != c || ws[2] != 3 || ws[3] != 3 {
        return Err(Error::Shape(format!(
            "deformable kernel {ws:?} does not fit {c} input channels"
        )));
    }
    Ok(())
}

/// Deformable 3×3 convolution (stride 1, same-size output). Returns the
/// output and the sampled columns of each sample.
pub fn deform_conv_forward(
    x: &Tensor,
    offset: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    check_deform_shapes(x, offset, weight)?;
    let (n, c, h, w) = x.dims4();
    let out_ch = weight.shape()[0];
    let mut out = Tensor::zeros(&[n, out_ch, h, w]);
    let mut all_cols = Vec::with_capacity(n);
    for s in 0..n {
        let points = sample_points(offset.sample(s), h, w);
        let cols = deform_cols(x.sample(s), c, h, w, &points);
        gemm_forward(
            weight.data(),
            bias.map(Tensor::data),
            &cols,
            out_ch,
            c * TAPS,
            h * w,
            out.sample_mut(s),
        );
        all_cols.push(cols);
    }
    Ok((out, all_cols))
}

/// Gradients of [`deform_conv_forward`]: `(dx, doffset, dweight, dbias)`.
pub fn deform_conv_backward(
    x: &Tensor,
    offset: &Tensor,
    weight: &Tensor,
    cols: &[Vec<f64>],
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor, Tensor) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let out_ch = weight.shape()[0];
    let rows = c * TAPS;
    let mut dx = Tensor::zeros(x.shape());
    let mut doff = Tensor::zeros(offset.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[out_ch]);
    for s in 0..n {
        gemm_backward_params(
            dy.sample(s),
            &cols[s],
            out_ch,
            rows,
            hw,
            dw.data_mut(),
            Some(db.data_mut()),
        );
        let dcols = gemm_backward_cols(weight.data(), dy.sample(s), out_ch, rows, hw);
        let points = sample_points(offset.sample(s), h, w);
        let xs = x.sample(s);
        let dxs = dx.sample_mut(s);
        let doffs = doff.sample_mut(s);
        for ci in 0..c {
            let plane = &xs[ci * hw..(ci + 1) * hw];
            for k in 0..TAPS {
                let grow = &dcols[(ci * TAPS + k) * hw..(ci * TAPS + k + 1) * hw];
                for p in 0..hw {
                    let g = grow[p];
                    if g == 0.0 {
                        continue;
                    }
                    let (mut gy, mut gx) = (0.0, 0.0);
                    for (idx, wt, dwy, dwx) in points[k * hw + p].corners(h, w) {
                        dxs[ci * hw + idx] += g * wt;
                        gy += dwy * plane[idx];
                        gx += dwx * plane[idx];
                    }
                    doffs[2 * k * hw + p] += g * gy;
                    doffs[(2 * k + 1) * hw + p] += g * gx;
                }
            }
        }
    }
    (dx, doff, dw, db)
}

struct DeformConvOp {
    input: Var,
    offset: Var,
    weight: Var,
    bias: Var,
    cols: Vec<Vec<f64>>,
}

impl Backward for DeformConvOp {
    fn backward(&self, tape: &Tape, _out: &Tensor, grad: &Tensor, sink: &mut GradSink) {
        let (dx, doff, dw, db) = deform_conv_backward(
            tape.value(self.input),
            tape.value(self.offset),
            tape.value(self.weight),
            &self.cols,
            grad,
        );
        sink.accumulate(self.input, dx);
        sink.accumulate(self.offset, doff);
        sink.accumulate(self.weight, dw);
        sink.accumulate(self.bias, db);
    }
}

/// Records a deformable convolution on the tape.
pub fn deform_conv(tape: &mut Tape, input: Var, offset: Var, weight: Var, bias: Var) -> Result<Var> {
    let (out, cols) = deform_conv_forward(
        tape.value(input),
        tape.value(offset),
        tape.value(weight),
        Some(tape.value(bias)),
    )?;
    Ok(tape.push(
        out,
        DeformConvOp {
            input,
            offset,
            weight,
            bias,
            cols,
        },
    ))
}

/// Learned parameters of the alignment block.
#[derive(Debug, Clone)]
pub struct BackgroundAlignment {
    /// 1×1 projection of the frame difference to the dynamic field.
    pub field_proj: Conv2d,
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

impl BackgroundAlignment {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, channels: usize) -> Self {
        let field_proj = Conv2d::with_init(
            store,
            seed,
            &format!("{name}.field"),
            channels,
            OFFSET_CHANNELS,
            ConvGeom::new(1, 1, 0),
            Init::Constant(0.0),
            Init::Constant(0.0),
        );
        let wname = format!("{name}.deform.weight");
        let bname = format!("{name}.deform.bias");
        let weight = store.add(
            &wname,
            Init::KaimingNormal {
                fan_in: channels * TAPS,
            }
            .build(&[channels, channels, 3, 3], seed, &wname),
        );
        let bias = store.add(&bname, Tensor::zeros(&[channels]));
        Self {
            field_proj,
            weight,
            bias,
            channels,
        }
    }

    /// `D = Conv1×1(F̃ − F_r)`.
    pub fn dynamic_field(
        &self,
        tape: &mut Tape,
        params: &Bound,
        enhanced: Var,
        reference: Var,
    ) -> Result<Var> {
        if tape.value(enhanced).shape() != tape.value(reference).shape() {
            return Err(Error::Shape(format!(
                "enhanced anchor {:?} vs reference {:?}",
                tape.value(enhanced).shape(),
                tape.value(reference).shape()
            )));
        }
        let diff = tape.sub(enhanced, reference);
        Ok(self.field_proj.forward(tape, params, diff))
    }

    /// `F* = DeformConv3×3(F̃; D)`.
    pub fn deformable_align(
        &self,
        tape: &mut Tape,
        params: &Bound,
        enhanced: Var,
        field: Var,
    ) -> Result<Var> {
        deform_conv(
            tape,
            enhanced,
            field,
            params.var(self.weight),
            params.var(self.bias),
        )
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        enhanced: Var,
        reference: Var,
    ) -> Result<Var> {
        let field = self.dynamic_field(tape, params, enhanced, reference)?;
        self.deformable_align(tape, params, enhanced, field)
    }
}
