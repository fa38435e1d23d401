//! Optimisation, tiled full-scene inference and the progressive
//! pseudo-labeling loop.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::adaptive_threshold_mask;
use crate::dataio::{encode_scene, make_sample, Coord, HsiScene, PatchSample, Split};
use crate::error::{Error, Result, TensorError};
use crate::eval::{confusion, metrics, MetricsReport};
use crate::network::{Dropout, Model};
use crate::tensor::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Odd side of the scene crop that is resized to the model grid.
    pub patch_size: usize,
    /// Patches drawn per fine-tuning epoch at most.
    pub finetune_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 32,
            learning_rate: 0.0015,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patch_size: 33,
            finetune_samples: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.epochs == 0 || self.batch_size == 0 || self.finetune_samples == 0 {
            return bad("epochs, batch size and fine-tune samples must be positive".into());
        }
        // a zero rate is accepted: it freezes the parameters
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("moment decays must lie in [0, 1) and epsilon must be positive".into());
        }
        if self.patch_size.is_multiple_of(2) {
            return bad(format!("patch size {} must be odd", self.patch_size));
        }
        Ok(())
    }

    /// Epoch budget of each fine-tuning round: a quarter of the initial one.
    pub fn finetune_epochs(&self) -> usize {
        (self.epochs / 4).max(1)
    }
}

/// Adaptive-moment optimiser with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Adam { lr, beta1, beta2, epsilon, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn from_config(store: &ParamStore, cfg: &TrainConfig) -> Self {
        Adam::new(store, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            }
            if self.lr == 0.0 {
                continue;
            }
            let (lr, eps) = (self.lr, self.epsilon);
            store.update(id, |i, x| x - lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps));
        }
    }
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub epoch: usize,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("iteration,epoch,total,alpha,beta,gamma,delta\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iteration, r.epoch, r.total, r.alpha, r.beta, r.gamma, r.delta
        ));
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub curves: Vec<CurveRow>,
    pub steps: usize,
    /// `(alpha, beta, gamma, delta)` after every optimiser step.
    pub weight_trace: Vec<[f64; 4]>,
}

fn check_scene(model: &Model, scene: &HsiScene) -> Result<()> {
    let cfg = &model.cfg;
    if scene.bands != cfg.in_bands || scene.class_count != cfg.classes {
        return Err(Error::Dimension(format!(
            "model expects {} bands and {} classes, scene has {} and {}",
            cfg.in_bands, cfg.classes, scene.bands, scene.class_count
        )));
    }
    if cfg.multibranch && (scene.aux.is_none() || scene.aux_bands != cfg.aux_bands) {
        return Err(Error::Dimension(format!(
            "multi-branch model expects {} auxiliary bands",
            cfg.aux_bands
        )));
    }
    Ok(())
}

/// Fails if any supervised pixel or patch centre is a test coordinate.
pub fn assert_no_leakage(labels: &[u16], width: usize, centers: &[Coord], test: &HashSet<Coord>) -> Result<()> {
    if let Some(c) = centers.iter().find(|c| test.contains(c)) {
        return Err(Error::Leakage(format!("test pixel {c:?} is a training patch centre")));
    }
    if let Some(c) = test.iter().find(|&&(i, j)| labels[i * width + j] != 0) {
        return Err(Error::Leakage(format!("test pixel {c:?} carries a training label")));
    }
    Ok(())
}

struct FitPlan<'a> {
    labels: &'a [u16],
    centers: &'a [Coord],
    test: &'a HashSet<Coord>,
    epochs: usize,
    iteration: usize,
    per_epoch: Option<usize>,
}

fn fit(model: &mut Model, scene: &HsiScene, cfg: &TrainConfig, plan: FitPlan, rng: &mut ChaCha8Rng, report: &mut TrainReport) -> Result<()> {
    if plan.centers.is_empty() {
        return Err(Error::Argument("no training pixels".into()));
    }
    let r = model.cfg.model_size();
    let samples: Vec<PatchSample> = plan
        .centers
        .iter()
        .map(|&c| make_sample(scene, plan.labels, c, cfg.patch_size, r))
        .collect::<Result<_>>()?;
    let mut adam = Adam::from_config(&model.store, cfg);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(1 + plan.iteration as u64);
    for epoch in 0..plan.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(rng);
        if let Some(cap) = plan.per_epoch {
            order.truncate(cap);
        }
        let chosen: Vec<Coord> = order.iter().map(|&k| samples[k].center).collect();
        assert_no_leakage(plan.labels, scene.width, &chosen, plan.test)?;
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Vec<Vec<f64>> = model.store.iter().map(|p| vec![0.0; p.data.len()]).collect();
            for &k in batch {
                let s = &samples[k];
                let nan = |what: String| {
                    Error::NonFinite(format!(
                        "iteration {} epoch {epoch} batch {b}, patch centred at {:?}: {what}",
                        plan.iteration, s.center
                    ))
                };
                let bound = model.store.bind(true);
                let mut drop = Dropout { rate: model.cfg.dropout, rng: Some(&mut drop_rng) };
                let (loss, _) = model
                    .sample_loss(&bound, &s.spectral, &s.label_patch, s.aux_patch.as_ref(), &mut drop)
                    .map_err(|e| match e {
                        Error::Tensor(TensorError::NonFinite { op }) => nan(format!("{op} produced a non-finite value")),
                        other => other,
                    })?;
                let value = loss.item()?;
                if !value.is_finite() {
                    return Err(nan(format!("loss {value}")));
                }
                epoch_loss += value;
                let grads = bound.grads(&loss.backward()?);
                for (a, g) in acc.iter_mut().zip(grads) {
                    a.iter_mut().zip(g).for_each(|(a, g)| *a += g);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            acc.iter_mut().for_each(|a| a.iter_mut().for_each(|v| *v *= scale));
            adam.step(&mut model.store, &acc);
            report.steps += 1;
            report.weight_trace.push(model.loss_weight_values());
        }
        let [alpha, beta, gamma, delta] = model.loss_weight_values();
        report.curves.push(CurveRow {
            iteration: plan.iteration,
            epoch,
            total: epoch_loss / order.len() as f64,
            alpha,
            beta,
            gamma,
            delta,
        });
    }
    Ok(())
}

fn test_set(split: &Split) -> HashSet<Coord> {
    split.test.iter().copied().collect()
}

/// Trains on the labelled training pixels of `split`. Only their labels are
/// visible to the model.
pub fn train(model: &mut Model, scene: &HsiScene, split: &Split, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_scene(model, scene)?;
    let labels = scene.labels_at(&split.train);
    let test = test_set(split);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let plan = FitPlan {
        labels: &labels,
        centers: &split.train,
        test: &test,
        epochs: cfg.epochs,
        iteration: 0,
        per_epoch: None,
    };
    fit(model, scene, cfg, plan, &mut rng, &mut report)?;
    Ok(report)
}

/// Per-pixel class probabilities of a whole scene, pixel-major `[H, W, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVolume {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl ProbVolume {
    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let at = (i * self.width + j) * self.classes;
        &self.data[at..at + self.classes]
    }

    pub fn max_prob(&self) -> Vec<f64> {
        self.data
            .chunks(self.classes)
            .map(|p| p.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    /// Most probable class per pixel, as `1..=K` (first wins ties).
    pub fn argmax(&self) -> Vec<u16> {
        self.data
            .chunks(self.classes)
            .map(|p| {
                let mut best = 0;
                for k in 1..p.len() {
                    if p[k] > p[best] {
                        best = k;
                    }
                }
                best as u16 + 1
            })
            .collect()
    }
}

/// Tile centres along one axis of length `n` so that patches of size `p`
/// placed every `stride` pixels cover every position.
pub fn tile_centers(n: usize, p: usize, stride: usize) -> Vec<usize> {
    let half = p / 2;
    if n <= p {
        return vec![(n - 1) / 2];
    }
    let last = n - 1 - half;
    let mut out: Vec<usize> = (half..last).step_by(stride).collect();
    out.push(last);
    out
}

/// `[K, p, p]` probabilities of one tile.
fn tile_probs(model: &Model, scene: &HsiScene, blank: &[u16], center: Coord, p: usize) -> Result<Vec<f64>> {
    let r = model.cfg.model_size();
    let s = make_sample(scene, blank, center, p, r)?;
    let bound = model.store.bind(false);
    let out = model.forward(&bound, &s.spectral, s.aux_patch.as_ref(), &mut Dropout::off())?;
    let probs = out.seg_logits.softmax(0)?;
    let probs = if p == r { probs } else { probs.interpolate_bilinear(p, p)? };
    Ok(probs.to_vec())
}

/// Overlapping-tile inference: averages the softmax of every tile covering a
/// pixel. Tiles run on `workers` threads; accumulation happens in tile order
/// so the result does not depend on the worker count.
pub fn infer_full_scene(model: &Model, scene: &HsiScene, patch: usize, stride: usize, workers: usize) -> Result<ProbVolume> {
    if stride == 0 || stride > patch {
        return Err(Error::Argument(format!("stride {stride} must lie in 1..={patch}")));
    }
    if patch.is_multiple_of(2) {
        return Err(Error::Argument(format!("patch size {patch} must be odd")));
    }
    check_scene(model, scene)?;
    let (h, w, k) = (scene.height, scene.width, model.cfg.classes);
    let tiles: Vec<Coord> = tile_centers(h, patch, stride)
        .into_iter()
        .flat_map(|i| tile_centers(w, patch, stride).into_iter().map(move |j| (i, j)))
        .collect();
    let blank = vec![0u16; h * w];
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Argument(format!("cannot start {workers} workers: {e}")))?;
    let per_tile: Vec<Vec<f64>> = pool.install(|| {
        tiles
            .par_iter()
            .map(|&c| tile_probs(model, scene, &blank, c, patch))
            .collect::<Result<_>>()
    })?;
    let mut sum = vec![0.0; h * w * k];
    let mut visits = vec![0u32; h * w];
    let half = patch / 2;
    for (&(ci, cj), probs) in tiles.iter().zip(&per_tile) {
        for a in 0..patch {
            let Some(i) = (ci + a).checked_sub(half).filter(|&i| i < h) else { continue };
            for b in 0..patch {
                let Some(j) = (cj + b).checked_sub(half).filter(|&j| j < w) else { continue };
                visits[i * w + j] += 1;
                for c in 0..k {
                    sum[(i * w + j) * k + c] += probs[(c * patch + a) * patch + b];
                }
            }
        }
    }
    for (px, &n) in visits.iter().enumerate() {
        debug_assert!(n > 0, "pixel {px} not covered");
        sum[px * k..(px + 1) * k].iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(ProbVolume { height: h, width: w, classes: k, data: sum })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<u16>,
    /// Applied confidence bound `max(tau2, mean + std)`.
    pub threshold: f64,
    /// Pixels selected by confidence (before preservation).
    pub selected: usize,
}

/// Confident pixels receive their most probable class; the rest stay 0.
/// Nonzero entries of `preserve` (the original training labels) are then
/// written over the result.
pub fn generate_pseudo_labels(prob: &ProbVolume, tau2: f64, preserve: Option<&[u16]>) -> Result<PseudoLabels> {
    if let Some(px) = prob
        .data
        .chunks(prob.classes)
        .position(|p| (p.iter().sum::<f64>() - 1.0).abs() > 1e-6)
    {
        return Err(Error::Validation(format!("probabilities at pixel {px} do not sum to 1")));
    }
    let (mask, threshold) = adaptive_threshold_mask(&prob.max_prob(), tau2)?;
    let mut labels: Vec<u16> = prob
        .argmax()
        .into_iter()
        .zip(&mask)
        .map(|(c, &m)| if m { c } else { 0 })
        .collect();
    let selected = mask.iter().filter(|&&m| m).count();
    if let Some(y0) = preserve {
        for (l, &y) in labels.iter_mut().zip(y0) {
            if y != 0 {
                *l = y;
            }
        }
    }
    Ok(PseudoLabels { labels, threshold, selected })
}

/// Argmax map and test-split metrics of a model.
pub fn evaluate(model: &Model, scene: &HsiScene, split: &Split, patch: usize, workers: usize) -> Result<(MetricsReport, Vec<u16>)> {
    let prob = infer_full_scene(model, scene, patch, (patch / 2).max(1), workers)?;
    let pred = prob.argmax();
    let cm = confusion(&pred, &scene.labels, scene.width, &split.test, scene.class_count)?;
    Ok((metrics(&cm)?, pred))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgressiveConfig {
    pub iterations: usize,
    pub tau2: f64,
    pub zeta: f64,
    /// Re-impose the original training labels on every pseudo-label map.
    pub preserve_train: bool,
}

impl Default for ProgressiveConfig {
    fn default() -> Self {
        ProgressiveConfig { iterations: 14, tau2: 0.7, zeta: 0.005, preserve_train: true }
    }
}

/// Confidence bound used at iteration `t` (0-based).
pub fn tau2_at(tau2: f64, zeta: f64, t: usize) -> f64 {
    (tau2 + t as f64 * zeta).min(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelState {
    pub y_temp: Vec<u16>,
    pub tau2: f64,
    pub zeta: f64,
    pub iteration: usize,
    pub coverage_log: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    pub tau2: f64,
    pub threshold: f64,
    pub coverage: f64,
    pub selected: usize,
    /// Max-probability field the pseudo-labels were drawn from.
    pub max_prob: Vec<f64>,
    pub y_temp: Vec<u16>,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct ProgressiveReport {
    pub state: PseudoLabelState,
    pub records: Vec<IterationRecord>,
    pub curves: Vec<CurveRow>,
    pub final_metrics: MetricsReport,
}

/// Repeats {full-scene inference, pseudo-labeling, fine-tuning} starting
/// from a trained model, raising the confidence bound by `zeta` each round.
/// Test pixels never supervise fine-tuning. With `run_dir`, each round
/// writes its label map (`y_temp_<t>.hsc`) and metrics (`metrics_<t>.json`),
/// and the loss log goes to `curves.csv`.
pub fn progressive_learn(
    model: &mut Model,
    scene: &HsiScene,
    split: &Split,
    cfg: &TrainConfig,
    prog: &ProgressiveConfig,
    workers: usize,
    run_dir: Option<&Path>,
) -> Result<ProgressiveReport> {
    cfg.validate()?;
    check_scene(model, scene)?;
    if prog.iterations == 0 {
        return Err(Error::Argument("at least one iteration is required".into()));
    }
    let y0_train = scene.labels_at(&split.train);
    let test = test_set(split);
    let stride = (cfg.patch_size / 2).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(100);
    let mut report = TrainReport::default();
    let mut state = PseudoLabelState {
        y_temp: y0_train.clone(),
        tau2: prog.tau2,
        zeta: prog.zeta,
        iteration: 0,
        coverage_log: Vec::new(),
    };
    let mut records = Vec::new();
    for t in 0..prog.iterations {
        state.tau2 = tau2_at(prog.tau2, prog.zeta, t);
        state.iteration = t + 1;
        let prob = infer_full_scene(model, scene, cfg.patch_size, stride, workers)?;
        let pseudo = generate_pseudo_labels(&prob, state.tau2, prog.preserve_train.then_some(&y0_train[..]))?;
        state.y_temp = pseudo.labels;
        let coverage = state.y_temp.iter().filter(|&&l| l != 0).count() as f64 / scene.pixels() as f64;
        state.coverage_log.push(coverage);

        let mut supervised = state.y_temp.clone();
        for &(i, j) in &split.test {
            supervised[i * scene.width + j] = 0;
        }
        let centers: Vec<Coord> = (0..scene.pixels())
            .filter(|&px| supervised[px] != 0)
            .map(|px| (px / scene.width, px % scene.width))
            .collect();
        let plan = FitPlan {
            labels: &supervised,
            centers: &centers,
            test: &test,
            epochs: cfg.finetune_epochs(),
            iteration: t + 1,
            per_epoch: Some(cfg.finetune_samples),
        };
        fit(model, scene, cfg, plan, &mut rng, &mut report)?;
        let (m, _) = evaluate(model, scene, split, cfg.patch_size, workers)?;
        if let Some(dir) = run_dir {
            let map = HsiScene::label_only(scene.height, scene.width, scene.class_count, state.y_temp.clone());
            fs::write(dir.join(format!("y_temp_{}.hsc", t + 1)), encode_scene(&map)?)?;
            fs::write(dir.join(format!("metrics_{}.json", t + 1)), serde_json::to_string_pretty(&m)?)?;
        }
        records.push(IterationRecord {
            iteration: t + 1,
            tau2: state.tau2,
            threshold: pseudo.threshold,
            coverage,
            selected: pseudo.selected,
            max_prob: prob.max_prob(),
            y_temp: state.y_temp.clone(),
            metrics: m,
        });
    }
    if let Some(dir) = run_dir {
        fs::write(dir.join("curves.csv"), curves_csv(&report.curves))?;
    }
    let final_metrics = records.last().expect("at least one iteration").metrics.clone();
    Ok(ProgressiveReport { state, records, curves: report.curves, final_metrics })
}
