//! Single- and multi-branch segmentation models, their losses and the
//! `HSW1` checkpoint format.
//!
//! The down ladder `[r, g2, .., gL]` lists the grid after each encoder stage;
//! the first stage keeps the input grid. Decoders climb the same ladder back
//! to `r`. A DFS stage sits at every decoder scale, masking the decoder input
//! at all scales except the finest, where it only emits the class map.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Cfi, DecoderStage, DfsStage, EncoderStage};
use crate::error::{Error, Result};
use crate::tensor::{Bound, ConvMode, DType, ParamId, ParamStore, Pointwise, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HSW1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Spectral bands after PCA.
    pub in_bands: usize,
    /// Encoder output grids; the first entry is the model input size `r`.
    pub ladder: Vec<usize>,
    pub dim: usize,
    pub heads: usize,
    pub classes: usize,
    pub aux_bands: usize,
    pub tau1: f64,
    pub dropout: f64,
    pub multibranch: bool,
    pub se_ratio: usize,
    pub dtype: DType,
    /// Seed of the parameter initialisation.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_bands: 8,
            ladder: vec![12, 10, 8],
            dim: 16,
            heads: 2,
            classes: 4,
            aux_bands: 1,
            tau1: 0.8,
            dropout: 0.0,
            multibranch: false,
            se_ratio: 4,
            dtype: DType::F32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn stage_count(&self) -> usize {
        self.ladder.len()
    }

    pub fn model_size(&self) -> usize {
        self.ladder[0]
    }

    /// Grids visited by a forward pass, e.g. `12, 10, 8, 10, 12`.
    pub fn full_ladder(&self) -> Vec<usize> {
        let mut out = self.ladder.clone();
        out.extend(self.ladder.iter().rev().skip(1));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Argument(msg));
        if !(2..=5).contains(&self.stage_count()) {
            return bad(format!("stage count {} outside 2..=5", self.stage_count()));
        }
        if self.ladder.windows(2).any(|w| w[1] >= w[0]) || self.ladder.contains(&0) {
            return bad(format!("ladder {:?} must strictly decrease", self.ladder));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.se_ratio == 0 || !self.dim.is_multiple_of(self.se_ratio) {
            return bad(format!("SE ratio {} does not divide dim {}", self.se_ratio, self.dim));
        }
        if self.in_bands == 0 || self.classes == 0 {
            return bad("input bands and classes must be positive".into());
        }
        if self.multibranch && self.aux_bands == 0 {
            return bad("multi-branch model needs auxiliary bands".into());
        }
        if !(0.0..=1.0).contains(&self.tau1) || !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("tau1 {} or dropout {} out of range", self.tau1, self.dropout));
        }
        Ok(())
    }
}

/// One encoder/decoder stack.
#[derive(Clone, Debug)]
pub struct Branch {
    pub init: Pointwise,
    pub encoders: Vec<EncoderStage>,
    /// Skip interaction feeding each decoder, coarse to fine.
    pub skip_cfis: Vec<Cfi>,
    pub decoders: Vec<DecoderStage>,
    pub head: Pointwise,
}

impl Branch {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &ModelConfig, in_ch: usize, out_ch: usize) -> Result<Self> {
        let (d, h, lad) = (cfg.dim, cfg.heads, &cfg.ladder);
        let init = Pointwise::new(store, rng, &format!("{name}.init"), in_ch, d)?;
        let mut encoders = Vec::new();
        let mut prev = lad[0];
        for (l, &g) in lad.iter().enumerate() {
            encoders.push(EncoderStage::new(store, rng, &format!("{name}.enc{l}"), d, h, prev, g, cfg.se_ratio)?);
            prev = g;
        }
        let mut skip_cfis = Vec::new();
        let mut decoders = Vec::new();
        for (j, &g) in lad.iter().rev().skip(1).enumerate() {
            skip_cfis.push(Cfi::new(store, rng, &format!("{name}.skip{j}"), d, h)?);
            decoders.push(DecoderStage::new(store, rng, &format!("{name}.dec{j}"), d, h, g, cfg.se_ratio)?);
        }
        let head = Pointwise::new(store, rng, &format!("{name}.head"), d, out_ch)?;
        Ok(Branch { init, encoders, skip_cfis, decoders, head })
    }

    fn decode_step(&self, p: &Bound, j: usize, d: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let x = self.skip_cfis[j].forward(p, skip, d)?;
        self.decoders[j].forward(p, &x.lo, &x.hi)
    }
}

/// Per-pass diagnostics.
#[derive(Clone, Debug, Default)]
pub struct Diagnostics {
    /// Fraction of selected pixels per DFS mask, coarse to fine.
    pub mask_density: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Largest deviation of any CFI attention row sum from 1.
    pub attention_row_error: f64,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[K, r, r]`.
    pub seg_logits: Tensor,
    /// Full-resolution DFS class probabilities `[K, r, r]`.
    pub class_map: Tensor,
    /// `[K2, r, r]` for the multi-branch model.
    pub aux_reconstruction: Option<Tensor>,
    pub diagnostics: Diagnostics,
}

/// Inverted dropout on stage outputs; inactive when no RNG is supplied.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Dropout<'_> {
    pub fn off() -> Dropout<'static> {
        Dropout { rate: 0.0, rng: None }
    }

    fn apply(&mut self, x: Tensor) -> Result<Tensor> {
        let Some(rng) = self.rng.as_deref_mut() else { return Ok(x) };
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        Ok(x.mul(&Tensor::new(x.shape(), mask, x.dtype())?)?)
    }
}

fn attention_error(t: &Tensor) -> f64 {
    let row = *t.shape().last().unwrap_or(&1);
    t.data()
        .chunks(row)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub hsi: Branch,
    /// DFS stages coarse to fine; the last one sits at the model size.
    pub dfs: Vec<DfsStage>,
    pub aux: Option<Branch>,
    pub exchange_enc: Vec<Cfi>,
    pub exchange_dec: Vec<Cfi>,
    /// Four raw balance scalars.
    pub loss_raw: ParamId,
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

impl Model {
    /// Builds and initialises a model. Each part draws from its own RNG
    /// stream, so the HSI branch of a multi-branch model starts identical to
    /// the single-branch model with the same seed.
    pub fn new(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.dtype);
        let mut rng = stream(cfg.seed, 0);
        let hsi = Branch::new(&mut store, &mut rng, "hsi", &cfg, cfg.in_bands, cfg.classes)?;
        let scales: Vec<usize> = cfg.ladder.iter().rev().copied().collect();
        let mut dfs = Vec::new();
        for (s, &g) in scales.iter().enumerate() {
            let next = scales.get(s + 1).copied();
            dfs.push(DfsStage::new(&mut store, &mut rng, &format!("hsi.dfs{s}"), cfg.dim, cfg.classes, g, next, cfg.tau1)?);
        }
        let (mut aux, mut exchange_enc, mut exchange_dec) = (None, Vec::new(), Vec::new());
        if cfg.multibranch {
            let mut rng = stream(cfg.seed, 1);
            aux = Some(Branch::new(&mut store, &mut rng, "aux", &cfg, cfg.aux_bands, cfg.aux_bands)?);
            let mut rng = stream(cfg.seed, 2);
            for l in 0..cfg.stage_count() {
                exchange_enc.push(Cfi::new(&mut store, &mut rng, &format!("xenc{l}"), cfg.dim, cfg.heads)?);
            }
            for j in 0..cfg.stage_count() - 1 {
                exchange_dec.push(Cfi::new(&mut store, &mut rng, &format!("xdec{j}"), cfg.dim, cfg.heads)?);
            }
        }
        let loss_raw = store.add("loss.raw", &[4], vec![0.0; 4])?;
        Ok(Model { cfg, store, hsi, dfs, aux, exchange_enc, exchange_dec, loss_raw })
    }

    /// Zeroes the value projections of every cross-branch exchange.
    pub fn zero_exchange_values(&mut self) {
        for cfi in self.exchange_enc.iter().chain(&self.exchange_dec) {
            cfi.zero_values(&mut self.store);
        }
    }

    fn check_input(&self, x: &Tensor, channels: usize, what: &str) -> Result<()> {
        let r = self.cfg.model_size();
        if x.shape() != [channels, r, r] {
            return Err(Error::Dimension(format!(
                "{what} input must be ({channels}, {r}, {r}), got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, p: &Bound, x: &Tensor, aux: Option<&Tensor>, drop: &mut Dropout) -> Result<ForwardOutput> {
        if self.cfg.multibranch {
            let aux = aux.ok_or_else(|| Error::Argument("multi-branch forward needs an auxiliary patch".into()))?;
            self.forward_multi_branch(p, x, aux, drop)
        } else {
            self.forward_single_branch(p, x, drop)
        }
    }

    pub fn forward_single_branch(&self, p: &Bound, x: &Tensor, drop: &mut Dropout) -> Result<ForwardOutput> {
        self.check_input(x, self.cfg.in_bands, "spectral")?;
        let b = &self.hsi;
        let mut diag = Diagnostics::default();
        let mut e = b.init.forward(p, x)?;
        let mut skips = Vec::new();
        for enc in &b.encoders {
            e = drop.apply(enc.forward(p, &e)?)?;
            skips.push(e.clone());
        }
        let (mut d, mut o) = (e.clone(), e);
        for j in 0..b.decoders.len() {
            let sel = self.dfs[j].forward(p, &o, &d)?;
            diag.mask_density.push(sel.density());
            diag.thresholds.push(sel.threshold);
            o = sel.o_next.expect("intermediate DFS stages advance");
            let skip = &skips[skips.len() - 2 - j];
            let x = b.skip_cfis[j].forward(p, skip, &sel.masked_d)?;
            diag.attention_row_error = diag
                .attention_row_error
                .max(attention_error(&x.attn_hi))
                .max(attention_error(&x.attn_lo));
            d = drop.apply(b.decoders[j].forward(p, &x.lo, &x.hi)?)?;
        }
        let last = self.dfs.last().expect("at least one DFS stage").forward(p, &o, &d)?;
        diag.thresholds.push(last.threshold);
        diag.mask_density.push(last.density());
        Ok(ForwardOutput {
            seg_logits: b.head.forward(p, &d)?,
            class_map: last.class_map,
            aux_reconstruction: None,
            diagnostics: diag,
        })
    }

    pub fn forward_multi_branch(&self, p: &Bound, x: &Tensor, aux_in: &Tensor, drop: &mut Dropout) -> Result<ForwardOutput> {
        let ab = self
            .aux
            .as_ref()
            .ok_or_else(|| Error::Argument("model has no auxiliary branch".into()))?;
        self.check_input(x, self.cfg.in_bands, "spectral")?;
        self.check_input(aux_in, self.cfg.aux_bands, "auxiliary")?;
        let hb = &self.hsi;
        let mut diag = Diagnostics::default();
        let mut eh = hb.init.forward(p, x)?;
        let mut ea = ab.init.forward(p, aux_in)?;
        let (mut skips_h, mut skips_a) = (Vec::new(), Vec::new());
        for l in 0..hb.encoders.len() {
            let h = drop.apply(hb.encoders[l].forward(p, &eh)?)?;
            let a = drop.apply(ab.encoders[l].forward(p, &ea)?)?;
            let x = self.exchange_enc[l].forward(p, &h, &a)?;
            diag.attention_row_error = diag.attention_row_error.max(attention_error(&x.attn_hi));
            eh = x.hi;
            ea = x.lo;
            skips_h.push(eh.clone());
            skips_a.push(ea.clone());
        }
        let (mut dh, mut oh, mut da) = (eh.clone(), eh, ea);
        let n = skips_h.len();
        for j in 0..hb.decoders.len() {
            let sel = self.dfs[j].forward(p, &oh, &dh)?;
            diag.mask_density.push(sel.density());
            diag.thresholds.push(sel.threshold);
            oh = sel.o_next.expect("intermediate DFS stages advance");
            let h = drop.apply(hb.decode_step(p, j, &sel.masked_d, &skips_h[n - 2 - j])?)?;
            let a = drop.apply(ab.decode_step(p, j, &da, &skips_a[n - 2 - j])?)?;
            let x = self.exchange_dec[j].forward(p, &h, &a)?;
            dh = x.hi;
            da = x.lo;
        }
        let last = self.dfs.last().expect("at least one DFS stage").forward(p, &oh, &dh)?;
        diag.thresholds.push(last.threshold);
        diag.mask_density.push(last.density());
        Ok(ForwardOutput {
            seg_logits: hb.head.forward(p, &dh)?,
            class_map: last.class_map,
            aux_reconstruction: Some(ab.head.forward(p, &da)?),
            diagnostics: diag,
        })
    }

    /// Balance weights: softmax over four raw scalars, or over the first two
    /// for a single-branch model. The last weight is taken as one minus the
    /// others so that the weights sum to exactly 1 in floating point.
    pub fn loss_weights(&self, p: &Bound) -> Result<Tensor> {
        let raw = p.get(self.loss_raw);
        let n = if self.cfg.multibranch { 4 } else { 2 };
        let soft = raw.narrow(0, 0, n)?.softmax(0)?;
        let head = soft.narrow(0, 0, n - 1)?;
        let last = head.sum_all()?.neg()?.add_scalar(1.0)?.reshape(&[1])?;
        Ok(Tensor::concat(&[&head, &last], 0)?)
    }

    /// Current `(alpha, beta, gamma, delta)`; the last two are 0 for a
    /// single-branch model.
    pub fn loss_weight_values(&self) -> [f64; 4] {
        let raw = &self.store.get(self.loss_raw).data;
        let n = if self.cfg.multibranch { 4 } else { 2 };
        let m = raw[..n].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = raw[..n].iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut out = [0.0; 4];
        for k in 0..n - 1 {
            out[k] = e[k] / z;
        }
        out[n - 1] = 1.0 - out[..n - 1].iter().sum::<f64>();
        out
    }
}

fn check_labels(labels: &[u16], k: usize, n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} positions", labels.len())));
    }
    if let Some(at) = labels.iter().position(|&l| l as usize > k) {
        return Err(Error::Validation(format!(
            "label {} at position {at} exceeds class count {k}",
            labels[at]
        )));
    }
    Ok(())
}

/// `[K, H, W]` one-hot of the labelled positions (zero elsewhere).
fn one_hot(labels: &[u16], k: usize, h: usize, w: usize, dtype: DType) -> Result<Tensor> {
    let n = h * w;
    let mut data = vec![0.0; k * n];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            data[(l as usize - 1) * n + i] = 1.0;
        }
    }
    Ok(Tensor::new(&[k, h, w], data, dtype)?)
}

fn map_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [k, h, w] => Ok((k, h, w)),
        _ => Err(Error::Dimension(format!("expected (K, H, W), got {:?}", x.shape()))),
    }
}

/// Mean negative log-likelihood over labelled positions; 0 if none.
pub fn seg_cross_entropy(logits: &Tensor, labels: &[u16]) -> Result<Tensor> {
    let (k, h, w) = map_dims(logits)?;
    check_labels(labels, k, h * w)?;
    let count = labels.iter().filter(|&&l| l > 0).count();
    if count == 0 {
        return Ok(Tensor::scalar(0.0, logits.dtype()));
    }
    let y = one_hot(labels, k, h, w, logits.dtype())?;
    let nll = logits.log_softmax(0)?.mul(&y)?.sum_all()?;
    Ok(nll.scale(-1.0 / count as f64)?)
}

pub const DICE_EPS: f64 = 1e-6;

/// Soft Dice over labelled positions, averaged over the classes present.
pub fn dice_loss(class_map: &Tensor, labels: &[u16]) -> Result<Tensor> {
    let (k, h, w) = map_dims(class_map)?;
    check_labels(labels, k, h * w)?;
    let n = h * w;
    let mut present = vec![0.0; k];
    let mut y_sq = vec![0.0; k];
    for &l in labels.iter().filter(|&&l| l > 0) {
        present[l as usize - 1] = 1.0;
        y_sq[l as usize - 1] += 1.0;
    }
    let classes = present.iter().sum::<f64>();
    if classes == 0.0 {
        return Ok(Tensor::scalar(0.0, class_map.dtype()));
    }
    let dt = class_map.dtype();
    let support = Tensor::new(&[1, n], labels.iter().map(|&l| (l > 0) as u8 as f64).collect(), dt)?;
    let p = class_map.reshape(&[k, n])?.mul(&support)?;
    let y = one_hot(labels, k, h, w, dt)?.reshape(&[k, n])?;
    let inter = p.mul(&y)?.sum_axis(1, false)?;
    let p_sq = p.square()?.sum_axis(1, false)?;
    let denom = p_sq.add(&Tensor::new(&[k], y_sq, dt)?)?.add_scalar(DICE_EPS)?;
    let ratio = inter.scale(2.0)?.add_scalar(DICE_EPS)?.div(&denom)?;
    let per_class = ratio.neg()?.add_scalar(1.0)?;
    let kept = per_class.mul(&Tensor::new(&[k], present, dt)?)?;
    Ok(kept.sum_all()?.scale(1.0 / classes)?)
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Side of the uniform SSIM window for an `h x w` map: 7, or the largest odd
/// size that fits.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = SSIM_WINDOW.min(h).min(w);
    if m.is_multiple_of(2) {
        m - 1
    } else {
        m
    }
}

/// `(mse, 1 - mean SSIM)` between a reconstruction and its target.
pub fn reconstruction_losses(recon: &Tensor, target: &Tensor) -> Result<(Tensor, Tensor)> {
    if recon.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "reconstruction {:?} vs target {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    let (c, h, w) = map_dims(recon)?;
    let mse = recon.sub(target)?.square()?.mean_all()?;
    let k = ssim_window(h, w);
    let kernel = Tensor::full(&[c, k, k], 1.0 / (k * k) as f64, recon.dtype());
    let half = k / 2;
    let (vh, vw) = (h - k + 1, w - k + 1);
    let local = |t: &Tensor| -> Result<Tensor> {
        Ok(t.conv2d(&kernel, ConvMode::Depthwise)?.narrow(1, half, vh)?.narrow(2, half, vw)?)
    };
    let mx = local(recon)?;
    let my = local(target)?;
    let vx = local(&recon.square()?)?.sub(&mx.square()?)?;
    let vy = local(&target.square()?)?.sub(&my.square()?)?;
    let cxy = local(&recon.mul(target)?)?.sub(&mx.mul(&my)?)?;
    let num = mx.mul(&my)?.scale(2.0)?.add_scalar(SSIM_C1)?.mul(&cxy.scale(2.0)?.add_scalar(SSIM_C2)?)?;
    let den = mx
        .square()?
        .add(&my.square()?)?
        .add_scalar(SSIM_C1)?
        .mul(&vx.add(&vy)?.add_scalar(SSIM_C2)?)?;
    let ssim = num.div(&den)?.mean_all()?;
    Ok((mse, ssim.neg()?.add_scalar(1.0)?))
}

/// Individual loss terms of one sample.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub seg: Tensor,
    pub dice: Tensor,
    pub mse: Option<Tensor>,
    pub ssim: Option<Tensor>,
}

/// `sum_i w_i L_i` over the active terms.
pub fn total_loss(parts: &LossParts, weights: &Tensor) -> Result<Tensor> {
    let mut terms = vec![&parts.seg, &parts.dice];
    if let (Some(m), Some(s)) = (&parts.mse, &parts.ssim) {
        terms.push(m);
        terms.push(s);
    }
    if weights.numel() != terms.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} loss terms",
            weights.numel(),
            terms.len()
        )));
    }
    let stacked = Tensor::concat(&terms.iter().map(|t| t.reshape(&[1])).collect::<std::result::Result<Vec<_>, _>>()?.iter().collect::<Vec<_>>(), 0)?;
    Ok(stacked.mul(weights)?.sum_all()?)
}

impl Model {
    /// Loss terms and weighted total for one sample.
    pub fn sample_loss(
        &self,
        p: &Bound,
        x: &Tensor,
        labels: &[u16],
        aux: Option<&Tensor>,
        drop: &mut Dropout,
    ) -> Result<(Tensor, LossParts)> {
        let out = self.forward(p, x, aux, drop)?;
        let seg = seg_cross_entropy(&out.seg_logits, labels)?;
        let dice = dice_loss(&out.class_map, labels)?;
        let (mse, ssim) = match (&out.aux_reconstruction, aux) {
            (Some(r), Some(a)) => {
                let (m, s) = reconstruction_losses(r, a)?;
                (Some(m), Some(s))
            }
            _ => (None, None),
        };
        let parts = LossParts { seg, dice, mse, ssim };
        let total = total_loss(&parts, &self.loss_weights(p)?)?;
        Ok((total, parts))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: ModelConfig,
    params: Vec<ManifestEntry>,
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: model.cfg.clone(),
        params: model
            .store
            .iter()
            .map(|p| ManifestEntry { name: p.name.clone(), shape: p.shape.clone() })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.store.iter() {
        p.data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes()));
    }
    Ok(out)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Model> {
    let fmt = |offset: usize, msg: String| Error::Format { offset: offset as u64, msg };
    if buf.len() < 8 || &buf[..4] != CHECKPOINT_MAGIC {
        return Err(fmt(0, "bad magic, expected HSW1".into()));
    }
    let len = u32::from_le_bytes([buf[4], buf[5], buf[6], buf[7]]) as usize;
    let body = buf
        .get(8..8 + len)
        .ok_or_else(|| fmt(buf.len(), format!("truncated header of {len} bytes")))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| fmt(8, format!("bad header: {e}")))?;
    let mut model = Model::new(header.config)?;
    let manifest_ok = header.params.len() == model.store.len()
        && header
            .params
            .iter()
            .zip(model.store.iter())
            .all(|(m, p)| m.name == p.name && m.shape == p.shape);
    if !manifest_ok {
        return Err(fmt(8, "parameter manifest does not match the configuration".into()));
    }
    let mut pos = 8 + len;
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let n = model.store.get(id).data.len();
        let raw = buf
            .get(pos..pos + 4 * n)
            .ok_or_else(|| fmt(buf.len(), format!("truncated payload of {}", model.store.get(id).name)))?;
        let vals = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        model.store.set_data(id, vals)?;
        pos += 4 * n;
    }
    if pos != buf.len() {
        return Err(fmt(pos, format!("{} trailing bytes", buf.len() - pos)));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;

    fn random_map(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_f64(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_labels(n: usize, k: u16, seed: u64) -> Vec<u16> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0..=k)).collect()
    }

    fn micro(multibranch: bool) -> ModelConfig {
        ModelConfig {
            in_bands: 3,
            ladder: vec![6, 4],
            dim: 4,
            heads: 1,
            classes: 2,
            aux_bands: 1,
            tau1: 0.8,
            dropout: 0.0,
            multibranch,
            se_ratio: 2,
            dtype: DType::F64,
            seed: 3,
        }
    }

    #[test]
    fn config_validation() {
        let ok = ModelConfig::default();
        ok.validate().unwrap();
        assert_eq!(ok.full_ladder(), vec![12, 10, 8, 10, 12]);
        for bad in [
            ModelConfig { ladder: vec![12], ..ok.clone() },
            ModelConfig { ladder: vec![12, 12], ..ok.clone() },
            ModelConfig { ladder: vec![12, 10, 8, 6, 4, 2], ..ok.clone() },
            ModelConfig { heads: 3, ..ok.clone() },
            ModelConfig { se_ratio: 3, ..ok.clone() },
        ] {
            assert!(Model::new(bad).is_err());
        }
    }

    #[test]
    fn output_shapes_and_smoke() {
        let cfg = ModelConfig { in_bands: 5, ladder: vec![12, 10], dtype: DType::F64, ..ModelConfig::default() };
        let model = Model::new(cfg).unwrap();
        let out = model
            .forward(&model.store.bind(false), &random_map(&[5, 12, 12], 1), None, &mut Dropout::off())
            .unwrap();
        assert_eq!(out.seg_logits.shape(), &[4, 12, 12]);
        assert_eq!(out.class_map.shape(), &[4, 12, 12]);
        assert!(out.seg_logits.data().iter().all(|v| v.is_finite()));
        assert!(out.diagnostics.attention_row_error < 1e-6);
        let probs = out.seg_logits.softmax(0).unwrap();
        for i in 0..144 {
            let s: f64 = (0..4).map(|k| probs.data()[k * 144 + i]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(model
            .forward(&model.store.bind(false), &random_map(&[5, 10, 10], 1), None, &mut Dropout::off())
            .is_err());
    }

    #[test]
    fn multi_branch_with_zeroed_exchange_matches_single() {
        let single = Model::new(micro(false)).unwrap();
        let mut multi = Model::new(micro(true)).unwrap();
        multi.zero_exchange_values();
        let x = random_map(&[3, 6, 6], 2);
        let aux = random_map(&[1, 6, 6], 3);
        let a = single.forward(&single.store.bind(false), &x, None, &mut Dropout::off()).unwrap();
        let b = multi.forward(&multi.store.bind(false), &x, Some(&aux), &mut Dropout::off()).unwrap();
        assert_eq!(a.seg_logits.data(), b.seg_logits.data());
        assert_eq!(a.class_map.data(), b.class_map.data());
        assert_eq!(b.aux_reconstruction.unwrap().shape(), &[1, 6, 6]);
        assert!(multi.forward(&multi.store.bind(false), &x, None, &mut Dropout::off()).is_err());
    }

    #[test]
    fn reconstruction_gradient_reaches_hsi_branch() {
        let model = Model::new(micro(true)).unwrap();
        let p = model.store.bind(true);
        let x = random_map(&[3, 6, 6], 4);
        let aux = random_map(&[1, 6, 6], 5);
        let out = model.forward(&p, &x, Some(&aux), &mut Dropout::off()).unwrap();
        let (mse, _) = reconstruction_losses(out.aux_reconstruction.as_ref().unwrap(), &aux).unwrap();
        let grads = p.grads(&mse.backward().unwrap());
        let hsi_norm: f64 = model
            .store
            .iter()
            .zip(&grads)
            .filter(|(prm, _)| prm.name.starts_with("hsi.enc"))
            .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
            .sum();
        assert!(hsi_norm > 0.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut logits = vec![-40.0; 2 * 4];
        for i in 0..4 {
            logits[(i % 2) * 4 + i] = 40.0;
        }
        let labels = [1, 2, 1, 2];
        let l = seg_cross_entropy(&Tensor::from_f64(&[2, 2, 2], logits).unwrap(), &labels).unwrap();
        assert!(l.item().unwrap() < 1e-12);

        let uniform = Tensor::zeros(&[4, 3, 3], DType::F64);
        let labels = [1, 0, 2, 3, 4, 0, 0, 1, 2];
        let l = seg_cross_entropy(&uniform, &labels).unwrap().item().unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert_eq!(seg_cross_entropy(&uniform, &[0; 9]).unwrap().item().unwrap(), 0.0);
        assert!(matches!(seg_cross_entropy(&uniform, &[5; 9]), Err(Error::Validation(_))));
    }

    #[test]
    fn dice_examples_and_oracle() {
        let labels = [1u16, 2, 2, 0];
        let perfect = Tensor::from_f64(&[2, 2, 2], vec![1., 0., 0., 0.5, 0., 1., 1., 0.5]).unwrap();
        assert!(dice_loss(&perfect, &labels).unwrap().item().unwrap() <= 1e-5);
        let disjoint = Tensor::from_f64(&[2, 2, 2], vec![0., 1., 1., 0.5, 1., 0., 0., 0.5]).unwrap();
        assert!(dice_loss(&disjoint, &labels).unwrap().item().unwrap() >= 1.0 - 1e-5);

        let (k, n) = (3, 16);
        let p = random_map(&[k, 4, 4], 6).softmax(0).unwrap();
        let labels = vec![1, 3, 0, 3, 1, 1, 0, 0, 3, 3, 1, 0, 1, 3, 3, 0];
        let got = dice_loss(&p, &labels).unwrap().item().unwrap();
        let mut total = 0.0;
        let mut present = 0.0;
        for c in 0..k {
            let ys: Vec<f64> = labels.iter().map(|&l| (l as usize == c + 1) as u8 as f64).collect();
            if ys.iter().sum::<f64>() == 0.0 {
                continue;
            }
            let (mut inter, mut pp, mut yy) = (0.0, 0.0, 0.0);
            for i in 0..n {
                if labels[i] == 0 {
                    continue;
                }
                let pv = p.data()[c * n + i];
                inter += pv * ys[i];
                pp += pv * pv;
                yy += ys[i] * ys[i];
            }
            total += 1.0 - (2.0 * inter + DICE_EPS) / (pp + yy + DICE_EPS);
            present += 1.0;
        }
        assert!((got - total / present).abs() < 1e-10);
    }

    #[test]
    fn unlabeled_logits_do_not_move_losses() {
        let labels = random_labels(36, 3, 7);
        let base = random_map(&[3, 6, 6], 8);
        let mut bumped = base.to_vec();
        for (i, &l) in labels.iter().enumerate() {
            if l == 0 {
                for c in 0..3 {
                    bumped[c * 36 + i] += 17.0 * (c as f64 + 1.0);
                }
            }
        }
        let bumped = Tensor::from_f64(&[3, 6, 6], bumped).unwrap();
        let ce = |t: &Tensor| seg_cross_entropy(t, &labels).unwrap().item().unwrap().to_bits();
        let dice = |t: &Tensor| dice_loss(&t.softmax(0).unwrap(), &labels).unwrap().item().unwrap().to_bits();
        assert_eq!(ce(&base), ce(&bumped));
        assert_eq!(dice(&base), dice(&bumped));
    }

    fn ssim_oracle(x: &[f64], y: &[f64], c: usize, h: usize, w: usize) -> f64 {
        let k = ssim_window(h, w);
        let mut sum = 0.0;
        let mut count = 0.0;
        for ch in 0..c {
            for i in 0..=h - k {
                for j in 0..=w - k {
                    let mut vals = Vec::new();
                    for a in 0..k {
                        for b in 0..k {
                            let at = (ch * h + i + a) * w + j + b;
                            vals.push((x[at], y[at]));
                        }
                    }
                    let m = vals.len() as f64;
                    let mx = vals.iter().map(|v| v.0).sum::<f64>() / m;
                    let my = vals.iter().map(|v| v.1).sum::<f64>() / m;
                    let vx = vals.iter().map(|v| (v.0 - mx).powi(2)).sum::<f64>() / m;
                    let vy = vals.iter().map(|v| (v.1 - my).powi(2)).sum::<f64>() / m;
                    let cxy = vals.iter().map(|v| (v.0 - mx) * (v.1 - my)).sum::<f64>() / m;
                    sum += (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)
                        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                    count += 1.0;
                }
            }
        }
        sum / count
    }

    #[test]
    fn reconstruction_examples_and_oracle() {
        let aux = random_map(&[2, 9, 8], 9);
        let (mse, ssim) = reconstruction_losses(&aux, &aux).unwrap();
        assert_eq!(mse.item().unwrap(), 0.0);
        assert!(ssim.item().unwrap() <= 1e-6);
        let shifted = aux.add_scalar(0.5).unwrap();
        let (mse, _) = reconstruction_losses(&shifted, &aux).unwrap();
        assert!((mse.item().unwrap() - 0.25).abs() < 1e-15);

        let recon = random_map(&[2, 9, 8], 10);
        let (_, ssim) = reconstruction_losses(&recon, &aux).unwrap();
        let want = 1.0 - ssim_oracle(recon.data(), aux.data(), 2, 9, 8);
        assert!((ssim.item().unwrap() - want).abs() < 1e-8);

        let small = random_map(&[1, 4, 6], 11);
        let (_, s) = reconstruction_losses(&small, &aux.narrow(0, 0, 1).unwrap().narrow(1, 0, 4).unwrap().narrow(2, 0, 6).unwrap()).unwrap();
        assert!(s.item().unwrap().is_finite());
        assert!(reconstruction_losses(&small, &aux).is_err());
    }

    #[test]
    fn loss_weights_are_a_softmax() {
        let mut model = Model::new(micro(true)).unwrap();
        let w = model.loss_weight_values();
        assert_eq!(w, [0.25; 4]);
        model.store.set_data(model.loss_raw, vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..1000 {
            let raw: Vec<f64> = (0..4).map(|_| rng.random_range(-6.0..6.0)).collect();
            model.store.set_data(model.loss_raw, raw.clone()).unwrap();
            let w = model.loss_weight_values();
            assert_eq!(w.iter().sum::<f64>(), 1.0);
            assert!(w.iter().all(|&v| v > 0.0 && v < 1.0));
            let z: f64 = raw.iter().map(|v| v.exp()).sum();
            for (wk, rk) in w.iter().zip(&raw) {
                assert!((wk - rk.exp() / z).abs() < 1e-14);
            }
            let t = model.loss_weights(&model.store.bind(false)).unwrap();
            assert_eq!(t.data(), &w[..]);
        }
        let single = Model::new(micro(false)).unwrap();
        assert_eq!(single.loss_weight_values(), [0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn weight_gradients_follow_softmax_coupling() {
        let mut store = ParamStore::new(DType::F64);
        let raw = store.add("raw", &[4], vec![0.2, -0.1, 0.4, 0.0]).unwrap();
        let losses = [1.5, 0.7, 0.3, 0.9];
        let loss = |p: &Bound| -> Result<Tensor> {
            let parts = LossParts {
                seg: Tensor::scalar(losses[0], DType::F64),
                dice: Tensor::scalar(losses[1], DType::F64),
                mse: Some(Tensor::scalar(losses[2], DType::F64)),
                ssim: Some(Tensor::scalar(losses[3], DType::F64)),
            };
            total_loss(&parts, &p.get(raw).softmax(0)?)
        };
        let r = check_params(&store, 1e-5, 4, 12, loss).unwrap();
        assert!(r.max_rel_err <= 1e-4);
        // d total / d raw_0 = a0 (L0 - total): grows with L0
        let p = store.bind(true);
        let g_before = p.grads(&loss(&p).unwrap().backward().unwrap())[0][0];
        let bumped = |p: &Bound| -> Result<Tensor> {
            let parts = LossParts {
                seg: Tensor::scalar(losses[0] + 1.0, DType::F64),
                dice: Tensor::scalar(losses[1], DType::F64),
                mse: Some(Tensor::scalar(losses[2], DType::F64)),
                ssim: Some(Tensor::scalar(losses[3], DType::F64)),
            };
            total_loss(&parts, &p.get(raw).softmax(0)?)
        };
        let p = store.bind(true);
        let g_after = p.grads(&bumped(&p).unwrap().backward().unwrap())[0][0];
        assert!(g_before > 0.0 && g_after > g_before);
    }

    #[test]
    fn micro_model_gradients() {
        let model = Model::new(micro(false)).unwrap();
        let x = random_map(&[3, 6, 6], 13);
        let labels = random_labels(36, 2, 14);
        let r = check_params(&model.store, 1e-5, 300, 15, |p| {
            Ok(model.sample_loss(p, &x, &labels, None, &mut Dropout::off())?.0)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");

        let model = Model::new(micro(true)).unwrap();
        let aux = random_map(&[1, 6, 6], 16).scale(0.5).unwrap().add_scalar(0.5).unwrap();
        let r = check_params(&model.store, 1e-5, 300, 17, |p| {
            Ok(model.sample_loss(p, &x, &labels, Some(&aux), &mut Dropout::off())?.0)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut cfg = micro(true);
        cfg.dtype = DType::F32;
        let mut model = Model::new(cfg).unwrap();
        let ids: Vec<_> = model.store.ids().collect();
        model.store.update(ids[3], |i, v| v + 0.01 * i as f64);
        let bytes = encode_checkpoint(&model).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.cfg, model.cfg);
        for (a, b) in back.store.iter().zip(model.store.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn dropout_only_when_training() {
        let cfg = ModelConfig { dropout: 0.5, ..micro(false) };
        let model = Model::new(cfg).unwrap();
        let x = random_map(&[3, 6, 6], 18);
        let p = model.store.bind(false);
        let a = model.forward(&p, &x, None, &mut Dropout::off()).unwrap();
        let b = model.forward(&p, &x, None, &mut Dropout::off()).unwrap();
        assert_eq!(a.seg_logits.data(), b.seg_logits.data());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = model
            .forward(&p, &x, None, &mut Dropout { rate: 0.5, rng: Some(&mut rng) })
            .unwrap();
        assert_ne!(a.seg_logits.data(), c.seg_logits.data());
    }
}
