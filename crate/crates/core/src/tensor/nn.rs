//! Softmax, normalisation and activation functions.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::shape::check_axis;
use super::{numel, Result, Tensor};

/// (outer, dim, inner) decomposition around `axis`.
fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

/// Exact-erf GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", axis, self.rank())?;
        let (outer, dim, inner) = split3(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * dim + k) * inner + i;
                let max = (0..dim).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..dim {
                    let e = (x[at(k)] - max).exp();
                    y[at(k)] = e;
                    z += e;
                }
                for k in 0..dim {
                    y[at(k)] /= z;
                }
            }
        }
        Tensor::from_op("softmax", self.shape().to_vec(), y, &[self], move |y, g, _| {
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * dim + k) * inner + i;
                    let dot: f64 = (0..dim).map(|k| g[at(k)] * y[at(k)]).sum();
                    for k in 0..dim {
                        gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("log_softmax", axis, self.rank())?;
        let (outer, dim, inner) = split3(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * dim + k) * inner + i;
                let max = (0..dim).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..dim).map(|k| (x[at(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..dim {
                    y[at(k)] = x[at(k)] - lse;
                }
            }
        }
        Tensor::from_op("log_softmax", self.shape().to_vec(), y, &[self], move |y, g, _| {
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * dim + k) * inner + i;
                    let gs: f64 = (0..dim).map(|k| g[at(k)]).sum();
                    for k in 0..dim {
                        gx[at(k)] = g[at(k)] - y[at(k)].exp() * gs;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Zero-mean, unit-variance normalisation along `axis` (population variance).
    pub fn normalize(&self, axis: usize, eps: f64) -> Result<Tensor> {
        check_axis("normalize", axis, self.rank())?;
        let (outer, dim, inner) = split3(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let n = dim as f64;
        let mut col = vec![0.0; dim];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                for (k, c) in col.iter_mut().enumerate() {
                    *c = x[base + k * inner];
                }
                let mean = col.iter().sum::<f64>() / n;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let r = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = r;
                for (k, c) in col.iter().enumerate() {
                    y[base + k * inner] = (c - mean) * r;
                }
            }
        }
        Tensor::from_op("normalize", self.shape().to_vec(), y, &[self], move |y, g, _| {
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * dim * inner + i;
                    let (mut gm, mut gy) = (0.0, 0.0);
                    for k in 0..dim {
                        gm += g[base + k * inner];
                        gy += g[base + k * inner] * y[base + k * inner];
                    }
                    let (gm, gy) = (gm / n, gy / n);
                    let r = inv_std[o * inner + i];
                    for k in 0..dim {
                        let at = base + k * inner;
                        gx[at] = r * (g[at] - gm - y[at] * gy);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Normalise along `axis`, then scale and shift; `gamma`/`beta` broadcast
    /// against the input.
    pub fn layer_norm(&self, axis: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        self.normalize(axis, eps)?.mul(gamma)?.add(beta)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.map("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn gelu(&self) -> Result<Tensor> {
        self.map("gelu", gelu_scalar, |x, _| gelu_grad(x))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.map("sigmoid", sigmoid_scalar, |_, y| y * (1.0 - y))
    }
}
