//! Network stages: squeeze-and-excitation gating, encoder and decoder
//! stages, cross feature interaction (CFI) and discriminative feature
//! selection (DFS) with its adaptive threshold.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsrt::{DsrtConfig, DsrtLayer};
use crate::error::{Error, Result};
use crate::tensor::{Bound, Depthwise, LayerNorm, Linear, ParamStore, Pointwise, PoolKind, Tensor};

fn grid(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Dimension(format!("expected a (C, H, W) map, got {:?}", x.shape()))),
    }
}

/// Threshold `T = max(tau, mean + std)` over a probability field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub tau: f64,
}

impl ThresholdPolicy {
    pub fn threshold(&self, probs: &[f64]) -> Result<f64> {
        if probs.is_empty() {
            return Err(Error::Argument("threshold of an empty probability map".into()));
        }
        let n = probs.len() as f64;
        let mean = probs.iter().sum::<f64>() / n;
        let var = probs.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
        Ok(self.tau.max(mean + var.sqrt()))
    }

    /// `(mask, T)` where `mask[i]` is `probs[i] >= T`.
    pub fn mask(&self, probs: &[f64]) -> Result<(Vec<bool>, f64)> {
        let t = self.threshold(probs)?;
        Ok((probs.iter().map(|&p| p >= t).collect(), t))
    }
}

pub fn adaptive_threshold_mask(probs: &[f64], tau: f64) -> Result<(Vec<bool>, f64)> {
    ThresholdPolicy { tau }.mask(probs)
}

/// Squeeze-and-excitation channel gate.
#[derive(Clone, Debug)]
pub struct Se {
    pub reduce: Linear,
    pub expand: Linear,
    pub channels: usize,
}

impl Se {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(Error::Argument(format!(
                "SE reduction ratio {ratio} does not divide {channels} channels"
            )));
        }
        let hidden = channels / ratio;
        Ok(Se {
            reduce: Linear::new(store, rng, &format!("{name}.reduce"), channels, hidden)?,
            expand: Linear::new(store, rng, &format!("{name}.expand"), hidden, channels)?,
            channels,
        })
    }

    /// Per-channel gates in `(0, 1)`, shape `[C]`.
    pub fn gates(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = grid(x)?;
        if c != self.channels {
            return Err(Error::Dimension(format!("SE expects {} channels, got {c}", self.channels)));
        }
        let pooled = x.reshape(&[1, c, h * w])?.mean_axis(2, false)?;
        let hidden = self.reduce.forward(p, &pooled)?.relu()?;
        Ok(self.expand.forward(p, &hidden)?.sigmoid()?.reshape(&[c])?)
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let g = self.gates(p, x)?.reshape(&[self.channels, 1, 1])?;
        Ok(x.mul(&g)?)
    }
}

/// `Norm(SE(DSRT(ReLU(PW(DW(x))))) + x)`, shared by encoder and decoder.
#[derive(Clone, Debug)]
pub struct ResidualPipeline {
    pub depthwise: Depthwise,
    pub pointwise: Pointwise,
    pub dsrt: DsrtLayer,
    pub se: Se,
    pub norm: LayerNorm,
}

impl ResidualPipeline {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: DsrtConfig, se_ratio: usize) -> Result<Self> {
        let d = cfg.dim;
        Ok(ResidualPipeline {
            depthwise: Depthwise::new(store, rng, &format!("{name}.dw"), d, 3)?,
            pointwise: Pointwise::new(store, rng, &format!("{name}.pw"), d, d)?,
            dsrt: DsrtLayer::new(store, rng, &format!("{name}.dsrt"), cfg)?,
            se: Se::new(store, rng, &format!("{name}.se"), d, se_ratio)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
        })
    }

    fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        let local = self.pointwise.forward(p, &self.depthwise.forward(p, x)?)?.relu()?;
        let branch = self.se.forward(p, &self.dsrt.forward(p, &local)?)?;
        Ok(self.norm.forward_channels(p, &branch.add(x)?)?)
    }
}

/// Encoder stage from an `in_grid` square map to an `out_grid` one.
#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub in_grid: usize,
    pub out_grid: usize,
    pub body: ResidualPipeline,
}

impl EncoderStage {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        in_grid: usize,
        out_grid: usize,
        se_ratio: usize,
    ) -> Result<Self> {
        if out_grid == 0 || out_grid > in_grid {
            return Err(Error::Argument(format!("encoder cannot map grid {in_grid} to {out_grid}")));
        }
        let cfg = DsrtConfig { heads, dim, grid_h: out_grid, grid_w: out_grid };
        Ok(EncoderStage {
            in_grid,
            out_grid,
            body: ResidualPipeline::new(store, rng, name, cfg, se_ratio)?,
        })
    }

    pub fn forward(&self, p: &Bound, e_prev: &Tensor) -> Result<Tensor> {
        let (_, h, w) = grid(e_prev)?;
        if (h, w) != (self.in_grid, self.in_grid) {
            return Err(Error::Dimension(format!(
                "encoder stage expects a {0}x{0} grid, got {h}x{w}",
                self.in_grid
            )));
        }
        let pooled = e_prev.pool_adaptive(self.out_grid, self.out_grid, PoolKind::Average)?;
        self.body.forward(p, &pooled)
    }
}

/// Decoder stage that upsamples `d_lo` onto the skip grid and fuses both.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub grid: usize,
    pub align: Pointwise,
    pub fuse: Pointwise,
    pub body: ResidualPipeline,
}

impl DecoderStage {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        grid: usize,
        se_ratio: usize,
    ) -> Result<Self> {
        let cfg = DsrtConfig { heads, dim, grid_h: grid, grid_w: grid };
        Ok(DecoderStage {
            grid,
            align: Pointwise::new(store, rng, &format!("{name}.align"), dim, dim)?,
            fuse: Pointwise::new(store, rng, &format!("{name}.fuse"), 2 * dim, dim)?,
            body: ResidualPipeline::new(store, rng, name, cfg, se_ratio)?,
        })
    }

    /// The fused map before the residual pipeline.
    pub fn fused(&self, p: &Bound, d_lo: &Tensor, e_skip: &Tensor) -> Result<Tensor> {
        let (_, lh, lw) = grid(d_lo)?;
        let (_, sh, sw) = grid(e_skip)?;
        if (sh, sw) != (self.grid, self.grid) || lh >= sh || lw >= sw {
            return Err(Error::Dimension(format!(
                "decoder stage needs a skip grid of {0}x{0} finer than {lh}x{lw}, got {sh}x{sw}",
                self.grid
            )));
        }
        let up = d_lo.interpolate_bilinear(sh, sw)?;
        let skip = self.align.forward(p, e_skip)?;
        self.fuse.forward(p, &Tensor::concat(&[&up, &skip], 0)?).map_err(Into::into)
    }

    pub fn forward(&self, p: &Bound, d_lo: &Tensor, e_skip: &Tensor) -> Result<Tensor> {
        let fused = self.fused(p, d_lo, e_skip)?;
        self.body.forward(p, &fused)
    }
}

/// Symmetric cross attention between a fine map and a coarser (or equal) one.
#[derive(Clone, Debug)]
pub struct Cfi {
    /// `d -> 3d` projection producing Q, K, V of the fine side.
    pub qkv_hi: Pointwise,
    pub qkv_lo: Pointwise,
    pub dim: usize,
    pub heads: usize,
}

/// CFI results and the two `[heads, M, M]` attention matrices.
#[derive(Clone, Debug)]
pub struct CfiOutput {
    pub hi: Tensor,
    pub lo: Tensor,
    pub attn_hi: Tensor,
    pub attn_lo: Tensor,
}

impl Cfi {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Argument(format!("CFI width {dim} not divisible by {heads} heads")));
        }
        Ok(Cfi {
            qkv_hi: Pointwise::new(store, rng, &format!("{name}.qkv_hi"), dim, 3 * dim)?,
            qkv_lo: Pointwise::new(store, rng, &format!("{name}.qkv_lo"), dim, 3 * dim)?,
            dim,
            heads,
        })
    }

    /// Zeroes both value projections, which turns CFI into the identity.
    pub fn zero_values(&self, store: &mut ParamStore) {
        let d = self.dim;
        for pw in [self.qkv_hi, self.qkv_lo] {
            store.update(pw.w, |i, v| if i >= 2 * d * d { 0.0 } else { v });
            store.update(pw.b, |i, v| if i >= 2 * d { 0.0 } else { v });
        }
    }

    /// Splits a `[3d, h, w]` projection into per-head `[heads, M, dk]` Q, K, V.
    fn split(&self, qkv: &Tensor) -> Result<[Tensor; 3]> {
        let (_, h, w) = grid(qkv)?;
        let m = h * w;
        let dk = self.dim / self.heads;
        let part = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(0, i * self.dim, self.dim)?
                .reshape(&[self.heads, dk, m])?
                .permute(&[0, 2, 1])?)
        };
        Ok([part(0)?, part(1)?, part(2)?])
    }

    pub fn forward(&self, p: &Bound, e_hi: &Tensor, d_lo: &Tensor) -> Result<CfiOutput> {
        let (c1, h1, w1) = grid(e_hi)?;
        let (c2, h2, w2) = grid(d_lo)?;
        if c1 != self.dim || c2 != self.dim {
            return Err(Error::Dimension(format!(
                "CFI of width {} got channels {c1} and {c2}",
                self.dim
            )));
        }
        if h2 > h1 || w2 > w1 {
            return Err(Error::Dimension(format!(
                "CFI coarse side {h2}x{w2} exceeds fine side {h1}x{w1}"
            )));
        }
        let hi = e_hi.pool_adaptive(h2, w2, PoolKind::Max)?;
        let lo = d_lo.pool_adaptive(h2, w2, PoolKind::Average)?;
        let [qe, ke, ve] = self.split(&self.qkv_hi.forward(p, &hi)?)?;
        let [qd, kd, vd] = self.split(&self.qkv_lo.forward(p, &lo)?)?;
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        let attn_hi = qe.matmul(&kd.t()?)?.scale(scale)?.softmax(2)?;
        let attn_lo = qd.matmul(&ke.t()?)?.scale(scale)?.softmax(2)?;
        let back = |a: &Tensor, v: &Tensor, h: usize, w: usize| -> Result<Tensor> {
            let mixed = a
                .matmul(v)?
                .permute(&[0, 2, 1])?
                .reshape(&[self.dim, h2, w2])?
                .gelu()?;
            Ok(mixed.interpolate_bilinear(h, w)?)
        };
        let hi_out = e_hi.add(&back(&attn_hi, &ve, h1, w1)?)?;
        let lo_out = d_lo.add(&back(&attn_lo, &vd, h2, w2)?)?;
        Ok(CfiOutput { hi: hi_out, lo: lo_out, attn_hi, attn_lo })
    }
}

/// Pool -> pointwise conv -> norm -> interpolate, added onto a residual.
#[derive(Clone, Debug)]
pub struct PyramidStep {
    pub conv: Pointwise,
    pub norm: LayerNorm,
}

impl PyramidStep {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Result<Self> {
        Ok(PyramidStep {
            conv: Pointwise::new(store, rng, &format!("{name}.conv"), dim, dim)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
        })
    }

    /// Context pooled to half the grid, brought to `out` and added onto `x`
    /// resampled to `out`.
    fn forward(&self, p: &Bound, x: &Tensor, out: usize) -> Result<Tensor> {
        let (_, h, w) = grid(x)?;
        let pooled = x.pool_adaptive((h / 2).max(1), (w / 2).max(1), PoolKind::Average)?;
        let ctx = self.norm.forward_channels(p, &self.conv.forward(p, &pooled)?)?;
        let ctx = ctx.interpolate_bilinear(out, out)?;
        Ok(ctx.add(&x.interpolate_bilinear(out, out)?)?)
    }
}

/// Discriminative feature selection at one decoder scale.
#[derive(Clone, Debug)]
pub struct DfsStage {
    pub grid: usize,
    /// Grid of the following scale; `None` at the finest scale.
    pub next_grid: Option<usize>,
    pub refine: PyramidStep,
    pub advance: Option<PyramidStep>,
    pub classifier: Pointwise,
    pub policy: ThresholdPolicy,
}

#[derive(Clone, Debug)]
pub struct DfsOutput {
    pub o_next: Option<Tensor>,
    pub masked_d: Tensor,
    /// Class probabilities `[K, H, W]`.
    pub class_map: Tensor,
    pub mask: Vec<bool>,
    pub threshold: f64,
}

impl DfsOutput {
    pub fn density(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

impl DfsStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        classes: usize,
        grid: usize,
        next_grid: Option<usize>,
        tau: f64,
    ) -> Result<Self> {
        let advance = match next_grid {
            Some(_) => Some(PyramidStep::new(store, rng, &format!("{name}.advance"), dim)?),
            None => None,
        };
        Ok(DfsStage {
            grid,
            next_grid,
            refine: PyramidStep::new(store, rng, &format!("{name}.refine"), dim)?,
            advance,
            classifier: Pointwise::new(store, rng, &format!("{name}.classifier"), dim, classes)?,
            policy: ThresholdPolicy { tau },
        })
    }

    pub fn forward(&self, p: &Bound, o_in: &Tensor, d_same: &Tensor) -> Result<DfsOutput> {
        let (_, h, w) = grid(o_in)?;
        let (c, dh, dw) = grid(d_same)?;
        if (h, w) != (self.grid, self.grid) || (dh, dw) != (h, w) {
            return Err(Error::Dimension(format!(
                "DFS stage at grid {0}x{0} got {h}x{w} and {dh}x{dw}",
                self.grid
            )));
        }
        let o_mid = self.refine.forward(p, o_in, self.grid)?;
        let class_map = self.classifier.forward(p, &o_mid)?.softmax(0)?;
        let k = class_map.shape()[0];
        let n = h * w;
        let probs: Vec<f64> = (0..n)
            .map(|i| (0..k).map(|j| class_map.data()[j * n + i]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let (mask, threshold) = self.policy.mask(&probs)?;
        let m = Tensor::new(
            &[1, h, w],
            mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            d_same.dtype(),
        )?;
        let masked_d = d_same.mul(&m)?;
        debug_assert_eq!(masked_d.shape()[0], c);
        let o_next = match (&self.advance, self.next_grid) {
            (Some(step), Some(g)) => Some(step.forward(p, &o_mid, g)?),
            _ => None,
        };
        Ok(DfsOutput { o_next, masked_d, class_map, mask, threshold })
    }
}
