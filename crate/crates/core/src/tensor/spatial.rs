//! Convolution, adaptive pooling and bilinear resampling on `(C, H, W)` maps.

use serde::{Deserialize, Serialize};

use super::{Result, Tensor};
use crate::error::TensorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// One `k x k` filter per channel, kernel `[C, k, k]`.
    Depthwise,
    /// `1 x 1` channel mixing, kernel `[C_out, C_in]`.
    Pointwise,
    /// Full convolution, kernel `[C_out, C_in, k, k]`.
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Average,
    Max,
}

/// Source taps for one output coordinate of a half-pixel (align-corners false)
/// bilinear resize: `(i0, i1, weight of i1)`.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|j| {
            let src = ((j as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let lambda = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, lambda)
        })
        .collect()
}

/// Inclusive-exclusive bin bounds of adaptive pooling along one axis.
pub(crate) fn adaptive_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

fn chw(op: &str, x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(TensorError::Argument(format!(
            "{op}: expected a (C, H, W) tensor, got {:?}",
            x.shape()
        ))),
    }
}

impl Tensor {
    /// Zero-padded `same` convolution.
    pub fn conv2d(&self, kernel: &Tensor, mode: ConvMode) -> Result<Tensor> {
        let (c_in, h, w) = chw("conv2d", self)?;
        let mismatch = || TensorError::Shape {
            op: "conv2d",
            lhs: self.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        };
        match mode {
            ConvMode::Pointwise => {
                let [c_out, k_in] = *kernel.shape() else {
                    return Err(mismatch());
                };
                if k_in != c_in {
                    return Err(mismatch());
                }
                kernel
                    .matmul(&self.reshape(&[c_in, h * w])?)?
                    .reshape(&[c_out, h, w])
            }
            ConvMode::Depthwise => {
                let [kc, kh, kw] = *kernel.shape() else {
                    return Err(mismatch());
                };
                if kc != c_in || kh != kw || kh % 2 == 0 {
                    return Err(mismatch());
                }
                self.conv_general(kernel, c_in, 1, kh, true)
            }
            ConvMode::Dense => {
                let [c_out, k_in, kh, kw] = *kernel.shape() else {
                    return Err(mismatch());
                };
                if k_in != c_in || kh != kw || kh % 2 == 0 {
                    return Err(mismatch());
                }
                self.conv_general(kernel, c_out, c_in, kh, false)
            }
        }
    }

    /// Shared loop for depthwise (`groups == channels`) and dense convolution.
    fn conv_general(
        &self,
        kernel: &Tensor,
        c_out: usize,
        c_in_per_out: usize,
        k: usize,
        depthwise: bool,
    ) -> Result<Tensor> {
        let (c_in, h, w) = chw("conv2d", self)?;
        let pad = (k / 2) as isize;
        let (x, kd) = (self.data(), kernel.data());
        // (out channel, in channel, kernel base offset)
        let taps: Vec<(usize, usize, usize)> = (0..c_out)
            .flat_map(|o| {
                (0..c_in_per_out).map(move |i| {
                    if depthwise {
                        (o, o, o * k * k)
                    } else {
                        (o, i, (o * c_in_per_out + i) * k * k)
                    }
                })
            })
            .collect();
        let visit = |f: &mut dyn FnMut(usize, usize, usize)| {
            for &(o, i, kb) in &taps {
                for a in 0..k {
                    for b in 0..k {
                        for r in 0..h {
                            let sr = r as isize + a as isize - pad;
                            if sr < 0 || sr >= h as isize {
                                continue;
                            }
                            for c in 0..w {
                                let sc = c as isize + b as isize - pad;
                                if sc < 0 || sc >= w as isize {
                                    continue;
                                }
                                f(
                                    (o * h + r) * w + c,
                                    (i * h + sr as usize) * w + sc as usize,
                                    kb + a * k + b,
                                );
                            }
                        }
                    }
                }
            }
        };
        let mut out = vec![0.0; c_out * h * w];
        visit(&mut |yo, xi, ki| out[yo] += kd[ki] * x[xi]);
        let (xc, kc) = (self.clone(), kernel.clone());
        let n_in = c_in * h * w;
        Tensor::from_op("conv2d", vec![c_out, h, w], out, &[self, kernel], move |_, g, needs| {
            let (x, kd) = (xc.data(), kc.data());
            let mut gx = needs[0].then(|| vec![0.0; n_in]);
            let mut gk = needs[1].then(|| vec![0.0; kd.len()]);
            for &(o, i, kb) in &taps {
                for a in 0..k {
                    for b in 0..k {
                        let ki = kb + a * k + b;
                        let mut acc = 0.0;
                        for r in 0..h {
                            let sr = r as isize + a as isize - pad;
                            if sr < 0 || sr >= h as isize {
                                continue;
                            }
                            for c in 0..w {
                                let sc = c as isize + b as isize - pad;
                                if sc < 0 || sc >= w as isize {
                                    continue;
                                }
                                let yo = (o * h + r) * w + c;
                                let xi = (i * h + sr as usize) * w + sc as usize;
                                if let Some(gx) = gx.as_mut() {
                                    gx[xi] += g[yo] * kd[ki];
                                }
                                acc += g[yo] * x[xi];
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk[ki] += acc;
                        }
                    }
                }
            }
            vec![gx, gk]
        })
    }

    pub fn pool_adaptive(&self, out_h: usize, out_w: usize, kind: PoolKind) -> Result<Tensor> {
        let (c, h, w) = chw("pool_adaptive", self)?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(TensorError::Argument(format!(
                "pool_adaptive: cannot pool {h}x{w} to {out_h}x{out_w}"
            )));
        }
        if out_h == h && out_w == w {
            return Ok(self.clone());
        }
        let rows = adaptive_bins(h, out_h);
        let cols = adaptive_bins(w, out_w);
        let x = self.data();
        let mut out = vec![0.0; c * out_h * out_w];
        // winning input index per output cell, max pooling only
        let mut arg = vec![0usize; if kind == PoolKind::Max { out.len() } else { 0 }];
        for ch in 0..c {
            for (i, &(r0, r1)) in rows.iter().enumerate() {
                for (j, &(c0, c1)) in cols.iter().enumerate() {
                    let o = (ch * out_h + i) * out_w + j;
                    match kind {
                        PoolKind::Average => {
                            let mut s = 0.0;
                            for r in r0..r1 {
                                for cc in c0..c1 {
                                    s += x[(ch * h + r) * w + cc];
                                }
                            }
                            out[o] = s / ((r1 - r0) * (c1 - c0)) as f64;
                        }
                        PoolKind::Max => {
                            let mut best = (f64::NEG_INFINITY, 0);
                            for r in r0..r1 {
                                for cc in c0..c1 {
                                    let idx = (ch * h + r) * w + cc;
                                    if x[idx] > best.0 {
                                        best = (x[idx], idx);
                                    }
                                }
                            }
                            out[o] = best.0;
                            arg[o] = best.1;
                        }
                    }
                }
            }
        }
        let n = self.numel();
        Tensor::from_op("pool_adaptive", vec![c, out_h, out_w], out, &[self], move |_, g, _| {
            let mut gx = vec![0.0; n];
            match kind {
                PoolKind::Max => {
                    for (o, &i) in arg.iter().enumerate() {
                        gx[i] += g[o];
                    }
                }
                PoolKind::Average => {
                    for ch in 0..c {
                        for (i, &(r0, r1)) in rows.iter().enumerate() {
                            for (j, &(c0, c1)) in cols.iter().enumerate() {
                                let go = g[(ch * out_h + i) * out_w + j]
                                    / ((r1 - r0) * (c1 - c0)) as f64;
                                for r in r0..r1 {
                                    for cc in c0..c1 {
                                        gx[(ch * h + r) * w + cc] += go;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Bilinear resize with half-pixel centres (align corners false).
    pub fn interpolate_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (c, h, w) = chw("interpolate_bilinear", self)?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::Argument("interpolate_bilinear: zero output extent".into()));
        }
        if out_h == h && out_w == w {
            return Ok(self.clone());
        }
        let ry = bilinear_taps(h, out_h);
        let rx = bilinear_taps(w, out_w);
        let x = self.data();
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            for (i, &(y0, y1, ly)) in ry.iter().enumerate() {
                for (j, &(x0, x1, lx)) in rx.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                    let bot = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                    out[(ch * out_h + i) * out_w + j] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        let n = self.numel();
        Tensor::from_op("interpolate_bilinear", vec![c, out_h, out_w], out, &[self], move |_, g, _| {
            let mut gx = vec![0.0; n];
            for ch in 0..c {
                let base = ch * h * w;
                for (i, &(y0, y1, ly)) in ry.iter().enumerate() {
                    for (j, &(x0, x1, lx)) in rx.iter().enumerate() {
                        let go = g[(ch * out_h + i) * out_w + j];
                        gx[base + y0 * w + x0] += go * (1.0 - ly) * (1.0 - lx);
                        gx[base + y0 * w + x1] += go * (1.0 - ly) * lx;
                        gx[base + y1 * w + x0] += go * ly * (1.0 - lx);
                        gx[base + y1 * w + x1] += go * ly * lx;
                    }
                }
            }
            vec![Some(gx)]
        })
    }
}
