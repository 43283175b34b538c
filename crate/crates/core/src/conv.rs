//! Standard 2-D convolution via im2col + GEMM, forward and backward.

use crate::tensor::{gemm_acc, gemm_strided, Tensor};

/// Square-kernel convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// 1×1, stride 1, no padding: im2col is the identity.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `[C, H, W]` sample into `[C·k·k, Ho·Wo]` columns.
pub fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_size(h, w);
    let k = g.kernel;
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx`.
pub fn col2im(cols: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = g.out_size(h, w);
    let k = g.kernel;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[co, p] = bias[co] + Σ_r weight[co, r] · cols[r, p]` for one sample.
pub(crate) fn gemm_forward(
    weight: &[f64],
    bias: Option<&[f64]>,
    cols: &[f64],
    out_ch: usize,
    rows: usize,
    positions: usize,
    out: &mut [f64],
) {
    if let Some(bias) = bias {
        for (co, chunk) in out.chunks_mut(positions).enumerate() {
            chunk.fill(bias[co]);
        }
    }
    gemm_acc(out_ch, rows, positions, weight, cols, out);
}

/// Accumulates `dweight += dy · colsᵀ` and `dbias += Σ_p dy` for one sample.
pub(crate) fn gemm_backward_params(
    dy: &[f64],
    cols: &[f64],
    out_ch: usize,
    rows: usize,
    positions: usize,
    dweight: &mut [f64],
    dbias: Option<&mut [f64]>,
) {
    gemm_strided(
        out_ch,
        positions,
        rows,
        dy,
        (positions as isize, 1),
        cols,
        (1, positions as isize),
        dweight,
        1.0,
    );
    if let Some(dbias) = dbias {
        for (co, chunk) in dy.chunks(positions).enumerate() {
            dbias[co] += chunk.iter().sum::<f64>();
        }
    }
}

/// `dcols = weightᵀ · dy` for one sample.
pub(crate) fn gemm_backward_cols(
    weight: &[f64],
    dy: &[f64],
    out_ch: usize,
    rows: usize,
    positions: usize,
) -> Vec<f64> {
    let mut dcols = vec![0.0; rows * positions];
    gemm_strided(
        rows,
        out_ch,
        positions,
        weight,
        (1, rows as isize),
        dy,
        (positions as isize, 1),
        &mut dcols,
        0.0,
    );
    dcols
}

/// Full convolution forward on a batch. Returns the output and the per-sample
/// column buffers (empty for pointwise convolutions, whose columns are the
/// input itself).
pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    g: ConvGeom,
) -> (Tensor, Vec<Vec<f64>>) {
    let (n, c, h, w) = x.dims4();
    let out_ch = weight.shape()[0];
    let rows = c * g.kernel * g.kernel;
    assert_eq!(weight.len(), out_ch * rows, "weight shape does not match input");
    let (ho, wo) = g.out_size(h, w);
    let mut out = Tensor::zeros(&[n, out_ch, ho, wo]);
    let mut all_cols = Vec::with_capacity(n);
    for s in 0..n {
        let cols = if g.is_pointwise() {
            Vec::new()
        } else {
            im2col(x.sample(s), c, h, w, g)
        };
        let src = if g.is_pointwise() { x.sample(s) } else { &cols };
        gemm_forward(
            weight.data(),
            bias.map(|b| b.data()),
            src,
            out_ch,
            rows,
            ho * wo,
            out.sample_mut(s),
        );
        all_cols.push(cols);
    }
    (out, all_cols)
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    cols: &[Vec<f64>],
    dy: &Tensor,
    g: ConvGeom,
    with_bias: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (n, c, h, w) = x.dims4();
    let out_ch = weight.shape()[0];
    let rows = c * g.kernel * g.kernel;
    let (ho, wo) = g.out_size(h, w);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = with_bias.then(|| Tensor::zeros(&[out_ch]));
    for s in 0..n {
        let src = if g.is_pointwise() { x.sample(s) } else { &cols[s][..] };
        gemm_backward_params(
            dy.sample(s),
            src,
            out_ch,
            rows,
            ho * wo,
            dw.data_mut(),
            db.as_mut().map(|b| b.data_mut()),
        );
        let dcols = gemm_backward_cols(weight.data(), dy.sample(s), out_ch, rows, ho * wo);
        if g.is_pointwise() {
            dx.sample_mut(s).copy_from_slice(&dcols);
        } else {
            col2im(&dcols, c, h, w, g, dx.sample_mut(s));
        }
    }
    (dx, dw, db)
}
