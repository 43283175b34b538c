//! Parameters, layers and the optimizer.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Tape, Var};
use crate::conv::ConvGeom;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of model parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_owned(), self.values.len());
        self.names.push(name.to_owned());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }
}

/// Tape variables of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients in store order; `None` for parameters the
    /// loss does not depend on.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

/// Parameter initialization rule.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He-normal with standard deviation `sqrt(2 / fan_in)`.
    KaimingNormal { fan_in: usize },
    Normal { std: f64 },
    Constant(f64),
}

impl Init {
    /// Draws a tensor from a generator seeded by `(seed, name)`, so that a
    /// parameter's initial value does not depend on which other parameters
    /// exist.
    pub fn build(self, shape: &[usize], seed: u64, name: &str) -> Tensor {
        let std = match self {
            Init::Constant(v) => return Tensor::full(shape, v),
            Init::KaimingNormal { fan_in } => (2.0 / fan_in as f64).sqrt(),
            Init::Normal { std } => std,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
        let normal = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| normal.sample(&mut rng))
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    /// He-initialized weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
    ) -> Self {
        let fan_in = in_channels * geom.kernel * geom.kernel;
        Self::with_init(
            store,
            seed,
            name,
            in_channels,
            out_channels,
            geom,
            Init::KaimingNormal { fan_in },
            Init::Constant(0.0),
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        weight_init: Init,
        bias_init: Init,
    ) -> Self {
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        let shape = [out_channels, in_channels, geom.kernel, geom.kernel];
        let weight = store.add(&wname, weight_init.build(&shape, seed, &wname));
        let bias = store.add(&bname, bias_init.build(&[out_channels], seed, &bname));
        Self {
            weight,
            bias,
            geom,
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Var {
        tape.conv2d(x, params.var(self.weight), Some(params.var(self.bias)), self.geom)
    }
}

/// Cosine annealing from `initial` to `last` over `total` epochs.
pub fn cosine_lr(initial: f64, last: f64, epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return initial;
    }
    let t = epoch.min(total - 1) as f64 / (total - 1) as f64;
    last + 0.5 * (initial - last) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(num_params: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            first: vec![None; num_params],
            second: vec![None; num_params],
            steps: vec![0; num_params],
        }
    }

    /// One update. Parameters without a gradient are left untouched,
    /// including their moment estimates.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        assert_eq!(grads.len(), store.len());
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let param = store.get_mut(ParamId(i));
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let p = param.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for j in 0..p.len() {
                let g = grad.data()[j] + self.weight_decay * p[j];
                md[j] = self.beta1 * md[j] + (1.0 - self.beta1) * g;
                vd[j] = self.beta2 * vd[j] + (1.0 - self.beta2) * g * g;
                let mhat = md[j] / bc1;
                let vhat = vd[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
