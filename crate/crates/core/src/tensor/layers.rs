//! Small parameterised layers built on [`ParamStore`].

use rand::Rng;

use super::{ConvMode, ParamId, ParamStore, Result, Tensor};
use super::param::Bound;

pub const LN_EPS: f64 = 1e-5;

fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// `y = x W + b` over the last axis; `W` is `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), &[fan_in, fan_out], uniform(rng, fan_in * fan_out, bound))?;
        let b = store.add(format!("{name}.b"), &[fan_out], vec![0.0; fan_out])?;
        Ok(Linear { w, b, fan_in, fan_out })
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        x.matmul(p.get(self.w))?.add(p.get(self.b))
    }
}

/// 1x1 convolution on `(C, H, W)`; kernel `[out, in]`.
#[derive(Clone, Copy, Debug)]
pub struct Pointwise {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Pointwise {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let bound = 1.0 / (c_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), &[c_out, c_in], uniform(rng, c_in * c_out, bound))?;
        let b = store.add(format!("{name}.b"), &[c_out], vec![0.0; c_out])?;
        Ok(Pointwise { w, b, c_in, c_out })
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(p.get(self.w), ConvMode::Pointwise)?;
        y.add(&p.get(self.b).reshape(&[self.c_out, 1, 1])?)
    }
}

/// Per-channel `k x k` convolution; kernel `[C, k, k]`.
#[derive(Clone, Copy, Debug)]
pub struct Depthwise {
    pub w: ParamId,
    pub b: ParamId,
    pub channels: usize,
}

impl Depthwise {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize, k: usize) -> Result<Self> {
        let bound = 1.0 / k as f64;
        let w = store.add(format!("{name}.w"), &[channels, k, k], uniform(rng, channels * k * k, bound))?;
        let b = store.add(format!("{name}.b"), &[channels], vec![0.0; channels])?;
        Ok(Depthwise { w, b, channels })
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(p.get(self.w), ConvMode::Depthwise)?;
        y.add(&p.get(self.b).reshape(&[self.channels, 1, 1])?)
    }
}

/// Layer normalisation with learnable scale and offset.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), &[width], vec![1.0; width])?;
        let beta = store.add(format!("{name}.beta"), &[width], vec![0.0; width])?;
        Ok(LayerNorm { gamma, beta, width })
    }

    /// Normalises a `(C, H, W)` map over its channel axis.
    pub fn forward_channels(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let g = p.get(self.gamma).reshape(&[self.width, 1, 1])?;
        let b = p.get(self.beta).reshape(&[self.width, 1, 1])?;
        x.layer_norm(0, &g, &b, LN_EPS)
    }

    /// Normalises each row of an `[N, C]` matrix.
    pub fn forward_rows(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(1, p.get(self.gamma), p.get(self.beta), LN_EPS)
    }
}
