//! Minimal dense building blocks with explicit forward/backward passes.
//!
//! Every parameter carries its own gradient buffer. Backward passes
//! accumulate into those buffers and return the gradient w.r.t. the input.

use ndarray::{
    Array, Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Dimension, Ix1,
    Ix2,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<D: Dimension> {
    pub value: Array<f64, D>,
    pub grad: Array<f64, D>,
}

impl<D: Dimension> Param<D> {
    pub fn new(value: Array<f64, D>) -> Self {
        let grad = Array::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Read-only walk over named parameters.
pub type Visit<'a> = dyn FnMut(&str, ArrayViewD<'_, f64>) + 'a;
/// Mutable walk over named parameters: (name, value, grad).
pub type VisitMut<'a> = dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>) + 'a;

/// Anything that owns trainable parameters. Both walks must visit the
/// same parameters in the same order.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>);
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>);

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, _, mut g| g.fill(0.0));
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, v| n += v.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<D: Dimension> Parameterized for Param<D> {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        f(prefix, self.value.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        f(
            prefix,
            self.value.view_mut().into_dyn(),
            self.grad.view_mut().into_dyn(),
        );
    }
}

/// Glorot-uniform matrix of shape (rows, cols).
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

pub fn normal_init(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<f64> {
    // Box-Muller
    Array2::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// `y = W x + b` with `W` of shape (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param<Ix2>,
    pub bias: Option<Param<Ix1>>,
}

impl Linear {
    pub fn new(input: usize, output: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Param::new(glorot(output, input, rng)),
            bias: bias.then(|| Param::new(Array1::zeros(output))),
        }
    }

    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Linear {
            weight: Param::new(Array2::zeros((output, input))),
            bias: bias.then(|| Param::new(Array1::zeros(output))),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let mut y = self.weight.value.dot(&x);
        if let Some(b) = &self.bias {
            y += &b.value;
        }
        y
    }

    pub fn backward(&mut self, x: ArrayView1<f64>, dy: ArrayView1<f64>) -> Array1<f64> {
        let dy2 = dy.insert_axis(Axis(1));
        let x2 = x.insert_axis(Axis(0));
        self.weight.grad += &dy2.dot(&x2);
        if let Some(b) = &mut self.bias {
            b.grad += &dy;
        }
        self.weight.value.t().dot(&dy)
    }

    /// Row-wise application to a (n, in) matrix.
    pub fn forward_seq(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.value.t());
        if let Some(b) = &self.bias {
            y += &b.value;
        }
        y
    }

    pub fn backward_seq(&mut self, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        self.weight.grad += &dy.t().dot(&x);
        if let Some(b) = &mut self.bias {
            b.grad += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.weight.value)
    }
}

impl Parameterized for Linear {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        self.weight.visit(&join(prefix, "weight"), f);
        if let Some(b) = &self.bias {
            b.visit(&join(prefix, "bias"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        self.weight.visit_mut(&join(prefix, "weight"), f);
        if let Some(b) = &mut self.bias {
            b.visit_mut(&join(prefix, "bias"), f);
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalisation with learnable scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: Param<Ix1>,
    pub shift: Param<Ix1>,
}

/// Saved normalised input and inverse standard deviation.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normed: Array1<f64>,
    inv_std: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormSeqCache {
    normed: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            scale: Param::new(Array1::ones(dim)),
            shift: Param::new(Array1::zeros(dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.value.len()
    }

    pub fn normalize(x: ArrayView1<f64>) -> (Array1<f64>, f64) {
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        (x.mapv(|v| (v - mean) * inv_std), inv_std)
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> (Array1<f64>, LayerNormCache) {
        let (normed, inv_std) = Self::normalize(x);
        let y = &normed * &self.scale.value + &self.shift.value;
        (y, LayerNormCache { normed, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: ArrayView1<f64>) -> Array1<f64> {
        self.scale.grad += &(&dy * &cache.normed);
        self.shift.grad += &dy;
        let dn = &dy * &self.scale.value;
        norm_backward(dn.view(), cache.normed.view(), cache.inv_std)
    }

    pub fn forward_seq(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormSeqCache) {
        let mut normed = Array2::zeros(x.raw_dim());
        let mut inv_std = Array1::zeros(x.nrows());
        for (i, row) in x.rows().into_iter().enumerate() {
            let (n, s) = Self::normalize(row);
            normed.row_mut(i).assign(&n);
            inv_std[i] = s;
        }
        let y = &normed * &self.scale.value + &self.shift.value;
        (y, LayerNormSeqCache { normed, inv_std })
    }

    pub fn backward_seq(&mut self, cache: &LayerNormSeqCache, dy: ArrayView2<f64>) -> Array2<f64> {
        self.scale.grad += &(&dy * &cache.normed).sum_axis(Axis(0));
        self.shift.grad += &dy.sum_axis(Axis(0));
        let dn = &dy * &self.scale.value;
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            dx.row_mut(i).assign(&norm_backward(
                dn.row(i),
                cache.normed.row(i),
                cache.inv_std[i],
            ));
        }
        dx
    }
}

fn norm_backward(dn: ArrayView1<f64>, normed: ArrayView1<f64>, inv_std: f64) -> Array1<f64> {
    let n = dn.len() as f64;
    let mean_dn = dn.sum() / n;
    let mean_dn_n = dn.dot(&normed) / n;
    (&dn - mean_dn - &normed * mean_dn_n) * inv_std
}

impl Parameterized for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        self.scale.visit(&join(prefix, "scale"), f);
        self.shift.visit(&join(prefix, "shift"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_>) {
        self.scale.visit_mut(&join(prefix, "scale"), f);
        self.shift.visit_mut(&join(prefix, "shift"), f);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices only;
/// biases and normalisation parameters are left undecayed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub first: Vec<Array<f64, ndarray::IxDyn>>,
    pub second: Vec<Array<f64, ndarray::IxDyn>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, model: &impl Parameterized) -> Self {
        let mut first = Vec::new();
        model.visit("", &mut |_, v| first.push(Array::zeros(v.raw_dim())));
        let second = first.clone();
        AdamW {
            cfg,
            step: 0,
            first,
            second,
        }
    }

    pub fn step(&mut self, model: &mut impl Parameterized, lr: f64) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut i = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_mut("", &mut |_, mut value, grad| {
            let m = &mut first[i];
            let v = &mut second[i];
            let decay = if value.ndim() >= 2 {
                lr * c.weight_decay
            } else {
                0.0
            };
            ndarray::Zip::from(&mut value)
                .and(&grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= decay * *p;
                    *p -= lr * mhat / (vhat.sqrt() + c.eps);
                });
            i += 1;
        });
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(model: &mut impl Parameterized, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit_mut("", &mut |_, _, g| {
        sq += g.iter().map(|x| x * x).sum::<f64>()
    });
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        model.visit_mut("", &mut |_, _, mut g| g.mapv_inplace(|x| x * s));
    }
    norm
}
