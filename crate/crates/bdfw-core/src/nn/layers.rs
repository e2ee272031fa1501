//! Activations, dense layers, pooling heads, and time conditioning.

use super::{Param, Tensor4};
use crate::rng::RngStream;
use ndarray::{s, Array1, Array2};

/// ReLU with cached sign mask.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Tensor4>,
}

impl Relu {
    pub fn new() -> Self {
        Relu::default()
    }

    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Tensor4 {
        let y = x.mapv(|v| v.max(0.0));
        if train {
            self.mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Tensor4 {
        let mask = self.mask.take().expect("forward(train) before backward");
        dy * &mask
    }
}

/// LeakyReLU with fixed negative slope.
#[derive(Debug, Clone)]
pub struct LeakyRelu {
    pub slope: f64,
    mask: Option<Tensor4>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        LeakyRelu { slope, mask: None }
    }

    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Tensor4 {
        let s = self.slope;
        let y = x.mapv(|v| if v > 0.0 { v } else { s * v });
        if train {
            self.mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { s }));
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Tensor4 {
        let mask = self.mask.take().expect("forward(train) before backward");
        dy * &mask
    }
}

/// Elementwise logistic sigmoid; caches the output for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Sigmoid {
    out: Option<Tensor4>,
}

impl Sigmoid {
    pub fn new() -> Self {
        Sigmoid::default()
    }

    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Tensor4 {
        let y = x.mapv(sigmoid_scalar);
        if train {
            self.out = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Tensor4 {
        let y = self.out.take().expect("forward(train) before backward");
        dy * &y.mapv(|v| v * (1.0 - v))
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fully connected layer over (N, D) activations.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param, // (O, D)
    pub b: Param, // (O,)
    cache: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        Linear {
            w: Param::he(&[out_dim, in_dim], in_dim, rng),
            b: Param::zeros(&[out_dim]),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f64>, train: bool) -> Array2<f64> {
        let w = self
            .w
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut y = x.dot(&w.t());
        let b = self
            .b
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        for mut row in y.outer_iter_mut() {
            row += &b;
        }
        if train {
            self.cache = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self.cache.take().expect("forward(train) before backward");
        let mut wg = self
            .w
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        wg += &dy.t().dot(&x);
        let mut bg = self
            .b
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        for row in dy.outer_iter() {
            bg += &row;
        }
        let w = self
            .w
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        dy.dot(&w)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Global average pooling (N,C,H,W) -> (N,C).
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    in_dim: (usize, usize, usize, usize),
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool::default()
    }

    pub fn forward(&mut self, x: &Tensor4) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        self.in_dim = (n, c, h, w);
        let mut y = Array2::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                y[[ni, ci]] = x.slice(s![ni, ci, .., ..]).sum() / (h * w) as f64;
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Tensor4 {
        let (n, c, h, w) = self.in_dim;
        let mut dx = Tensor4::zeros((n, c, h, w));
        let scale = 1.0 / (h * w) as f64;
        for ni in 0..n {
            for ci in 0..c {
                dx.slice_mut(s![ni, ci, .., ..]).fill(dy[[ni, ci]] * scale);
            }
        }
        dx
    }
}

/// Sinusoidal timestep embedding of even dimension `dim`.
pub fn time_embedding(t: usize, dim: usize) -> Array1<f64> {
    assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut e = Array1::zeros(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        e[i] = arg.sin();
        e[half + i] = arg.cos();
    }
    e
}

/// Batched embeddings for a slice of timesteps.
pub fn time_embedding_batch(ts: &[usize], dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((ts.len(), dim));
    for (i, &t) in ts.iter().enumerate() {
        out.row_mut(i).assign(&time_embedding(t, dim));
    }
    out
}

/// Row-wise softmax of (N, K) logits.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean cross-entropy over a batch plus its gradient w.r.t. the logits.
pub fn cross_entropy_with_grad(
    logits: &Array2<f64>,
    labels: &[usize],
) -> (f64, Array2<f64>) {
    let probs = softmax(logits);
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs[[i, y]].max(1e-300).ln();
        grad[[i, y]] -= 1.0;
    }
    grad.mapv_inplace(|v| v / n);
    (loss / n, grad)
}
