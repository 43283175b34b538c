//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every intermediate value together with the operation
//! that produced it. Operations live next to the math they implement (the
//! convolution op in this file, the alignment ops in their own modules) and
//! implement [`Backward`].

use std::fmt;

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one recorded operation.
pub trait Backward {
    /// Propagates `grad` (the gradient of the output) into the op inputs.
    fn backward(&self, tape: &Tape, out: &Tensor, grad: &Tensor, sink: &mut GradSink);
}

struct Node {
    value: Tensor,
    op: Option<Box<dyn Backward>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: None });
        Var(self.nodes.len() - 1)
    }

    pub fn push(&mut self, value: Tensor, op: impl Backward + 'static) -> Var {
        self.nodes.push(Node {
            value,
            op: Some(Box::new(op)),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradients of the scalar `root` with respect to every recorded value.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward needs a scalar root, got shape {:?}",
            self.value(root).shape()
        );
        let mut sink = GradSink {
            grads: (0..=root.0).map(|_| None).collect(),
        };
        sink.grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(grad) = sink.grads[i].take() else {
                continue;
            };
            if let Some(op) = &self.nodes[i].op {
                op.backward(self, &self.nodes[i].value, &grad, &mut sink);
            }
            sink.grads[i] = Some(grad);
        }
        Gradients(sink.grads)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Var {
        let (out, cols) = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        );
        self.push(
            out,
            Conv2dOp {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        )
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(0.0));
        self.push(out, ReluOp { input })
    }

    /// Logistic squashing clamped to `[eps, 1 - eps]`.
    pub fn sigmoid_clamped(&mut self, input: Var, eps: f64) -> Var {
        let out = self
            .value(input)
            .map(|v| (1.0 / (1.0 + (-v).exp())).clamp(eps, 1.0 - eps));
        self.push(out, SigmoidOp { input, eps })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, AddOp { a, b, sign: 1.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        assert_eq!(ta.shape(), tb.shape());
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_vec(ta.shape(), data).expect("same shape");
        self.push(out, AddOp { a, b, sign: -1.0 })
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        for s in 0..n {
            for ch in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        out.set4(s, ch, y, xx, x.at4(s, ch, y / 2, xx / 2));
                    }
                }
            }
        }
        self.push(out, UpsampleOp { input })
    }

    /// Stacks two batches: all samples of `a`, then all samples of `b`.
    pub fn concat_batch(&mut self, a: Var, b: Var) -> Var {
        let out = Tensor::concat_batch(&[self.value(a), self.value(b)])
            .expect("concat_batch needs matching trailing shapes");
        let split = self.value(a).shape()[0];
        self.push(out, ConcatOp { a, b, split })
    }

    /// `Σ input ⊙ weights`, a scalar; handy for probing gradients.
    pub fn dot(&mut self, input: Var, weights: &Tensor) -> Var {
        assert_eq!(self.value(input).shape(), weights.shape(), "dot needs equal shapes");
        let total = self
            .value(input)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        self.push(
            Tensor::scalar(total),
            DotOp {
                input,
                weights: weights.clone(),
            },
        )
    }

    /// `Σ weight_i · term_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms
            .iter()
            .map(|&(v, w)| w * self.value(v).data()[0])
            .fold(0.0, |acc, x| acc + x);
        self.push(
            Tensor::scalar(total),
            WeightedSumOp {
                terms: terms.to_vec(),
            },
        )
    }
}

/// Accumulator handed to [`Backward::backward`].
pub struct GradSink {
    grads: Vec<Option<Tensor>>,
}

impl GradSink {
    pub fn accumulate(&mut self, v: Var, grad: Tensor) {
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }
}

pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

struct Conv2dOp {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    geom: ConvGeom,
    cols: Vec<Vec<f64>>,
}

impl Backward for Conv2dOp {
    fn backward(&self, tape: &Tape, _out: &Tensor, grad: &Tensor, sink: &mut GradSink) {
        let (dx, dw, db) = conv2d_backward(
            tape.value(self.input),
            tape.value(self.weight),
            &self.cols,
            grad,
            self.geom,
            self.bias.is_some(),
        );
        sink.accumulate(self.input, dx);
        sink.accumulate(self.weight, dw);
        if let (Some(b), Some(db)) = (self.bias, db) {
            sink.accumulate(b, db);
        }
    }
}

struct ReluOp {
    input: Var,
}

impl Backward for ReluOp {
    fn backward(&self, tape: &Tape, _out: &Tensor, grad: &Tensor, sink: &mut GradSink) {
        let x = tape.value(self.input);
        let data = x
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect();
        sink.accumulate(self.input, Tensor::from_vec(x.shape(), data).unwrap());
    }
}

struct SigmoidOp {
    input: Var,
    eps: f64,
}

impl Backward for SigmoidOp {
    fn backward(&self, _tape: &Tape, out: &Tensor, grad: &Tensor, sink: &mut GradSink) {
        let lo = self.eps;
        let hi = 1.0 - self.eps;
        let data = out
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&p, &g)| {
                // clamped region has zero slope
                if p <= lo || p >= hi {
                    0.0
                } else {
                    g * p * (1.0 - p)
                }
            })
            .collect();
        sink.accumulate(self.input, Tensor::from_vec(out.shape(), data).unwrap());
    }
}

struct AddOp {
    a: Var,
    b: Var,
    sign: f64,
}

impl Backward for AddOp {
    fn backward(&self, _tape: &Tape, _out: &Tensor, grad: &Tensor, sink: &mut GradSink) {
        sink.accumulate(self.a, grad.clone());
        sink.accumulate(self.b, grad.scale(self.sign));
    }
}

struct UpsampleOp {
    input: Var,
}

impl Backward for UpsampleOp {
    fn backward(&self, tape: &Tape, _out: &Tensor, grad: &Tensor, sink: &mut GradSink) {
        let x = tape.value(self.input);
        let (n, c, h, w) = x.dims4();
        let mut dx = Tensor::zeros(x.shape());
        for s in 0..n {
            for ch in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let v = dx.at4(s, ch, y / 2, xx / 2) + grad.at4(s, ch, y, xx);
                        dx.set4(s, ch, y / 2, xx / 2, v);
                    }
                }
            }
        }
        sink.accumulate(self.input, dx);
    }
}

struct ConcatOp {
    a: Var,
    b: Var,
    split: usize,
}

impl Backward for ConcatOp {
    fn backward(&self, _tape: &Tape, _out: &Tensor, grad: &Tensor, sink: &mut GradSink) {
        let n = grad.shape()[0];
        sink.accumulate(self.a, grad.slice_batch(0, self.split));
        sink.accumulate(self.b, grad.slice_batch(self.split, n));
    }
}

struct WeightedSumOp {
    terms: Vec<(Var, f64)>,
}

impl Backward for WeightedSumOp {
    fn backward(&self, tape: &Tape, _out: &Tensor, grad: &Tensor, sink: &mut GradSink) {
        let g = grad.data()[0];
        for &(v, w) in &self.terms {
            let shape = tape.value(v).shape().to_vec();
            sink.accumulate(v, Tensor::full(&shape, g * w));
        }
    }
}

struct DotOp {
    input: Var,
    weights: Tensor,
}

impl Backward for DotOp {
    fn backward(&self, _tape: &Tape, _out: &Tensor, grad: &Tensor, sink: &mut GradSink) {
        sink.accumulate(self.input, self.weights.scale(grad.data()[0]));
    }
}
