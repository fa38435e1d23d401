//! Acceptance suite: one pass/fail line per criterion, pinned tolerances.
//!
//! Lines are written to the process stdout directly so they show up even
//! when the harness captures test output.

use std::collections::HashSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::rc::Rc;
use std::time::{Duration, Instant};

use hsiseg_core::blocks::{adaptive_threshold_mask, Cfi, DecoderStage, DfsStage, EncoderStage};
use hsiseg_core::dataio::{make_split, pca_reduce, synth_scene, Coord, HsiScene, Split, SplitSpec, SynthParams};
use hsiseg_core::dsrt::{partition_regions, DsrtConfig, DsrtLayer};
use hsiseg_core::eval::{confusion, metrics, ConfusionMatrix};
use hsiseg_core::gradcheck::{check_inputs, check_params, GradCheck};
use hsiseg_core::network::{dice_loss, seg_cross_entropy, Dropout, Model, ModelConfig};
use hsiseg_core::tensor::{Bound, ConvMode, ParamStore, PoolKind};
use hsiseg_core::trainer::{evaluate, progressive_learn, train, ProgressiveConfig, TrainConfig};
use hsiseg_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const DSRT_TOL: f64 = 1e-6;
const METRIC_TOL: f64 = 1e-12;
const LEARN_OA: f64 = 0.90;
const LEARN_EPOCHS: usize = 40;
const LEARN_BUDGET: Duration = Duration::from_secs(600);
const PROGRESSIVE_SLACK: f64 = 0.01;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_map(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_f64(shape, rand_vec(&mut rng, shape.iter().product())).unwrap()
}

fn weighted(t: &Tensor, seed: u64) -> hsiseg_core::Result<Tensor> {
    Ok(t.mul(&random_map(t.shape(), seed))?.sum_all()?)
}

// --- 1. gradient suite ---------------------------------------------------

struct GradLog {
    worst: f64,
    checks: usize,
    failures: Vec<String>,
}

impl GradLog {
    fn record(&mut self, name: &str, r: hsiseg_core::Result<GradCheck>) {
        self.checks += 1;
        match r {
            Ok(g) => {
                self.worst = self.worst.max(g.max_rel_err);
                if g.max_rel_err > FD_TOL {
                    self.failures.push(format!("{name}: {:.2e}", g.max_rel_err));
                }
            }
            Err(e) => self.failures.push(format!("{name}: {e}")),
        }
    }

    fn op(&mut self, name: &str, seed: u64, shapes: &[&[usize]], f: impl Fn(&[Tensor]) -> hsiseg_core::Result<Tensor>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<(Vec<usize>, Vec<f64>)> =
            shapes.iter().map(|s| (s.to_vec(), rand_vec(&mut rng, s.iter().product()))).collect();
        let probe: Vec<Tensor> = inputs.iter().map(|(s, v)| Tensor::from_f64(s, v.clone()).unwrap()).collect();
        let shape = match f(&probe) {
            Ok(t) => t.shape().to_vec(),
            Err(e) => return self.failures.push(format!("{name}: {e}")),
        };
        let w = Tensor::from_f64(&shape, rand_vec(&mut rng, shape.iter().product())).unwrap();
        let r = check_inputs(&inputs, FD_H, 64, seed, |xs| Ok(f(xs)?.mul(&w)?.sum_all()?));
        self.record(name, r);
    }
}

fn store_rng(seed: u64) -> (ParamStore, ChaCha8Rng) {
    (ParamStore::new(DType::F64), ChaCha8Rng::seed_from_u64(seed))
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

fn random_labels(n: usize, k: u16, seed: u64) -> Vec<u16> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..=k)).collect()
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut log = GradLog { worst: 0.0, checks: 0, failures: Vec::new() };
    let offs = Rc::new(vec![0, 2, 3, 6]);
    let queries = Rc::new(vec![1, 0, 1]);
    let rows = Rc::new(vec![3, 0, 0, 2]);
    for seed in 0..3u64 {
        log.op("matmul", seed, &[&[3, 4], &[4, 2]], |x| Ok(x[0].matmul(&x[1])?));
        log.op("batched matmul", seed, &[&[2, 3, 4], &[4, 2]], |x| Ok(x[0].matmul(&x[1])?));
        log.op("add", seed, &[&[2, 3], &[3]], |x| Ok(x[0].add(&x[1])?));
        log.op("sub", seed, &[&[2, 3], &[2, 1]], |x| Ok(x[0].sub(&x[1])?));
        log.op("mul", seed, &[&[2, 3], &[1, 3]], |x| Ok(x[0].mul(&x[1])?));
        log.op("div", seed, &[&[2, 3], &[2, 3]], |x| Ok(x[0].div(&x[1].square()?.add_scalar(1.0)?)?));
        log.op("softmax", seed, &[&[3, 4]], |x| Ok(x[0].softmax(1)?));
        log.op("log_softmax", seed, &[&[3, 4]], |x| Ok(x[0].log_softmax(0)?));
        log.op("normalize", seed, &[&[4, 5]], |x| Ok(x[0].normalize(1, 1e-5)?));
        log.op("layer_norm", seed, &[&[3, 2, 2], &[3, 1, 1], &[3, 1, 1]], |x| {
            Ok(x[0].layer_norm(0, &x[1], &x[2], 1e-5)?)
        });
        log.op("gelu", seed, &[&[4, 5]], |x| Ok(x[0].gelu()?));
        log.op("sigmoid", seed, &[&[4, 5]], |x| Ok(x[0].sigmoid()?));
        log.op("relu", seed, &[&[4, 5]], |x| Ok(x[0].relu()?));
        log.op("exp", seed, &[&[4, 5]], |x| Ok(x[0].exp()?));
        log.op("sqrt/ln", seed, &[&[4, 5]], |x| Ok(x[0].square()?.add_scalar(0.5)?.sqrt()?.ln()?));
        log.op("sum_axis", seed, &[&[2, 3, 4]], |x| Ok(x[0].sum_axis(1, false)?));
        log.op("mean_axis", seed, &[&[2, 3, 4]], |x| Ok(x[0].mean_axis(2, true)?));
        log.op("permute", seed, &[&[2, 3, 4]], |x| Ok(x[0].permute(&[2, 0, 1])?));
        log.op("narrow", seed, &[&[2, 3, 4]], |x| Ok(x[0].narrow(1, 1, 2)?));
        log.op("concat", seed, &[&[2, 3], &[2, 2]], |x| Ok(Tensor::concat(&[&x[0], &x[1]], 1)?));
        log.op("gather_rows", seed, &[&[4, 3]], |x| Ok(x[0].gather_rows(&rows)?));
        log.op("segment_softmax", seed, &[&[6]], |x| Ok(x[0].segment_softmax(&offs)?));
        log.op("segment_sum", seed, &[&[6, 2]], |x| Ok(x[0].segment_sum(&offs)?));
        log.op("segment_attend", seed, &[&[6, 3], &[2, 3]], |x| Ok(x[0].segment_attend(&x[1], &queries, &offs)?.0));
        log.op("depthwise conv", seed, &[&[2, 5, 5], &[2, 3, 3]], |x| Ok(x[0].conv2d(&x[1], ConvMode::Depthwise)?));
        log.op("dense conv", seed, &[&[2, 4, 4], &[3, 2, 3, 3]], |x| Ok(x[0].conv2d(&x[1], ConvMode::Dense)?));
        log.op("pointwise conv", seed, &[&[2, 4, 4], &[3, 2]], |x| Ok(x[0].conv2d(&x[1], ConvMode::Pointwise)?));
        log.op("average pool", seed, &[&[2, 6, 5]], |x| Ok(x[0].pool_adaptive(4, 3, PoolKind::Average)?));
        log.op("max pool", seed, &[&[2, 6, 5]], |x| Ok(x[0].pool_adaptive(3, 2, PoolKind::Max)?));
        log.op("bilinear up", seed, &[&[2, 3, 4]], |x| Ok(x[0].interpolate_bilinear(5, 7)?));
        log.op("bilinear down", seed, &[&[2, 6, 7]], |x| Ok(x[0].interpolate_bilinear(4, 3)?));
    }

    let (mut store, mut rng) = store_rng(28);
    let enc = EncoderStage::new(&mut store, &mut rng, "enc", 4, 1, 4, 3, 2).unwrap();
    let x = random_map(&[4, 4, 4], 29);
    log.record("encoder params", check_params(&store, FD_H, 150, 30, |p| weighted(&enc.forward(p, &x)?, 31)));
    log.record(
        "encoder input",
        check_inputs(&[(vec![4, 4, 4], x.to_vec())], FD_H, 64, 32, |xs| weighted(&enc.forward(&store.bind(false), &xs[0])?, 31)),
    );

    let (mut store, mut rng) = store_rng(33);
    let dec = DecoderStage::new(&mut store, &mut rng, "dec", 4, 2, 4, 2).unwrap();
    let lo = random_map(&[4, 3, 3], 34);
    let skip = random_map(&[4, 4, 4], 35);
    log.record("decoder params", check_params(&store, FD_H, 150, 36, |p| weighted(&dec.forward(p, &lo, &skip)?, 37)));

    let (mut store, mut rng) = store_rng(38);
    let cfi = Cfi::new(&mut store, &mut rng, "cfi", 4, 2).unwrap();
    let hi = random_map(&[4, 5, 5], 39);
    let cfi_loss = |p: &Bound, hi: &Tensor, lo: &Tensor| -> hsiseg_core::Result<Tensor> {
        let o = cfi.forward(p, hi, lo)?;
        Ok(weighted(&o.hi, 41)?.add(&weighted(&o.lo, 42)?)?)
    };
    log.record("cfi params", check_params(&store, FD_H, 100, 40, |p| cfi_loss(p, &hi, &lo)));
    log.record(
        "cfi inputs",
        check_inputs(&[(vec![4, 5, 5], hi.to_vec()), (vec![4, 3, 3], lo.to_vec())], FD_H, 40, 43, |xs| {
            cfi_loss(&store.bind(false), &xs[0], &xs[1])
        }),
    );

    let (mut store, mut rng) = store_rng(44);
    let dfs = DfsStage::new(&mut store, &mut rng, "dfs", 4, 3, 4, Some(5), 0.0).unwrap();
    let o = random_map(&[4, 4, 4], 45);
    let d = random_map(&[4, 4, 4], 46);
    log.record(
        "dfs params",
        check_params(&store, FD_H, 150, 47, |p| {
            let out = dfs.forward(p, &o, &d)?;
            Ok(weighted(&out.class_map, 48)?.add(&weighted(out.o_next.as_ref().unwrap(), 49)?)?)
        }),
    );

    let (mut store, mut rng) = store_rng(20);
    let layer = DsrtLayer::new(&mut store, &mut rng, "dsrt", DsrtConfig { heads: 1, dim: 4, grid_h: 3, grid_w: 3 }).unwrap();
    let mut prng = ChaCha8Rng::seed_from_u64(21);
    store.update(layer.window.pos, |_, _| prng.random_range(-0.5..0.5));
    let x = random_map(&[4, 3, 3], 22);
    log.record("dsrt params", check_params(&store, FD_H, 200, 24, |p| weighted(&layer.forward(p, &x)?, 23)));
    log.record(
        "dsrt input",
        check_inputs(&[(vec![4, 3, 3], x.to_vec())], FD_H, 36, 25, |xs| weighted(&layer.forward(&store.bind(false), &xs[0])?, 23)),
    );

    let x = random_map(&[3, 6, 6], 13);
    let labels = random_labels(36, 2, 14);
    let model = Model::new(micro(false)).unwrap();
    log.record(
        "micro model",
        check_params(&model.store, FD_H, 300, 15, |p| Ok(model.sample_loss(p, &x, &labels, None, &mut Dropout::off())?.0)),
    );
    let model = Model::new(micro(true)).unwrap();
    let aux = random_map(&[1, 6, 6], 16).scale(0.5).unwrap().add_scalar(0.5).unwrap();
    log.record(
        "multi-branch micro model",
        check_params(&model.store, FD_H, 300, 17, |p| {
            Ok(model.sample_loss(p, &x, &labels, Some(&aux), &mut Dropout::off())?.0)
        }),
    );

    let elapsed = start.elapsed();
    let detail = format!(
        "{} checks, max rel err {:.2e} (tol {FD_TOL:.0e}), {:.1}s (budget {}s)",
        log.checks,
        log.worst,
        elapsed.as_secs_f64(),
        GRAD_BUDGET.as_secs()
    );
    ensure(log.failures.is_empty(), || format!("{detail}; failing: {}", log.failures.join("; ")))?;
    ensure(elapsed <= GRAD_BUDGET, || format!("{detail}; over time budget"))?;
    Ok(detail)
}

// --- 2. DSRT geometry ------------------------------------------------------

/// Materialises every region of every query and runs the window attention
/// and aggregation one query at a time.
fn dsrt_unrolled(layer: &DsrtLayer, p: &Bound, x: &Tensor) -> Vec<f64> {
    let c = layer.cfg;
    let (n, hd) = (c.cells(), c.head_dim());
    let cells = layer.head_cells(x).unwrap();
    let mut merged = vec![0.0; n * c.dim];
    for head in 0..c.heads {
        for h in 0..c.grid_h {
            for w in 0..c.grid_w {
                let qi = h * c.grid_w + w;
                let part = partition_regions(h, w, c.grid_h, c.grid_w).unwrap();
                let mut tokens = Vec::new();
                for (g, rect) in part.regions.iter().enumerate() {
                    let rows: Vec<usize> = rect.cells().map(|(r, cc)| head * n + r * c.grid_w + cc).collect();
                    let region = cells.gather_rows(&Rc::new(rows)).unwrap();
                    let token = layer.window.forward_region(p, &region, g).unwrap().0;
                    tokens.push(token.reshape(&[1, hd]).unwrap());
                }
                let stacked = Tensor::concat(&tokens.iter().collect::<Vec<_>>(), 0).unwrap();
                let q = layer.agg_q.forward(p, &cells.narrow(0, head * n + qi, 1).unwrap()).unwrap();
                let k = layer.agg_k.forward(p, &stacked).unwrap();
                let v = layer.agg_v.forward(p, &stacked).unwrap();
                let s: Vec<f64> = (0..4)
                    .map(|r| (0..hd).map(|d| q.data()[d] * k.data()[r * hd + d]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                for d in 0..hd {
                    merged[qi * c.dim + head * hd + d] = (0..4).map(|r| (s[r] - m).exp() / z * v.data()[r * hd + d]).sum();
                }
            }
        }
    }
    let merged = Tensor::from_f64(&[n, c.dim], merged).unwrap();
    layer.mix.forward(p, &merged).unwrap().t().unwrap().to_vec()
}

fn criterion_dsrt() -> Outcome {
    let mut partitions = 0;
    for gh in 1..=8 {
        for gw in 1..=8 {
            for h in 0..gh {
                for w in 0..gw {
                    let part = partition_regions(h, w, gh, gw).map_err(err)?;
                    partitions += 1;
                    let want = [(h + 1) * (w + 1), (h + 1) * (gw - w), (gh - h) * (w + 1), (gh - h) * (gw - w)];
                    for (g, rect) in part.regions.iter().enumerate() {
                        ensure(rect.contains(h, w), || format!("query ({h},{w}) outside region {g} on {gh}x{gw}"))?;
                        let count = (0..gh).flat_map(|r| (0..gw).map(move |c| (r, c))).filter(|&(r, c)| rect.contains(r, c)).count();
                        ensure(count == want[g] && rect.len() == want[g], || {
                            format!("region {g} of ({h},{w}) on {gh}x{gw} has {count} cells, want {}", want[g])
                        })?;
                    }
                    for r in 0..gh {
                        for c in 0..gw {
                            ensure(part.regions.iter().any(|x| x.contains(r, c)), || {
                                format!("cell ({r},{c}) uncovered for query ({h},{w}) on {gh}x{gw}")
                            })?;
                        }
                    }
                }
            }
        }
    }
    let mut worst: f64 = 0.0;
    for (k, cfg) in [
        DsrtConfig { heads: 2, dim: 6, grid_h: 3, grid_w: 3 },
        DsrtConfig { heads: 1, dim: 4, grid_h: 2, grid_w: 4 },
        DsrtConfig { heads: 2, dim: 8, grid_h: 4, grid_w: 4 },
    ]
    .into_iter()
    .enumerate()
    {
        let (mut store, mut rng) = store_rng(11 + k as u64);
        let layer = DsrtLayer::new(&mut store, &mut rng, "dsrt", cfg).map_err(err)?;
        let mut prng = ChaCha8Rng::seed_from_u64(50 + k as u64);
        store.update(layer.window.pos, |_, _| prng.random_range(-0.5..0.5));
        let p = store.bind(false);
        let x = random_map(&[cfg.dim, cfg.grid_h, cfg.grid_w], 60 + k as u64);
        let y = layer.forward(&p, &x).map_err(err)?;
        let want = dsrt_unrolled(&layer, &p, &x);
        worst = worst.max(y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let detail = format!("{partitions} partitions on grids up to 8x8; layer vs per-query reference max diff {worst:.2e} (tol {DSRT_TOL:.0e})");
    ensure(worst <= DSRT_TOL, || detail.clone())?;
    Ok(detail)
}

// --- 3. threshold law ------------------------------------------------------

fn criterion_threshold() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let taus: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let mut invariant_cases = 0;
    for field in 0..1000 {
        let n = rng.random_range(1..200);
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let nf = n as f64;
        let mean = probs.iter().sum::<f64>() / nf;
        let std = (probs.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / nf).sqrt();
        let (free_mask, _) = adaptive_threshold_mask(&probs, 0.0).map_err(err)?;
        for &tau in &taus {
            let (mask, t) = adaptive_threshold_mask(&probs, tau).map_err(err)?;
            ensure(t == tau.max(mean + std), || format!("field {field} tau {tau}: T {t} != max(tau, mean + std)"))?;
            ensure(mask.iter().zip(&probs).all(|(&m, &p)| m == (p >= t)), || format!("field {field} tau {tau}: mask != {{p >= T}}"))?;
            if tau < mean + std {
                invariant_cases += 1;
                ensure(mask == free_mask, || format!("field {field}: mask at tau {tau} depends on tau below mean + std"))?;
            }
        }
    }
    Ok(format!("1000 fields x 11 taus exact; {invariant_cases} tau-below-(mean+std) cases tau-invariant"))
}

// --- 4. loss balance -------------------------------------------------------

fn small_scene(h: usize, w: usize, bands: usize, classes: usize, comps: usize, per_class: usize) -> (HsiScene, Split) {
    let raw = synth_scene(&SynthParams { h, w, bands, classes, noise_sigma: 0.05, seed: 9 }).unwrap();
    let (scene, _) = pca_reduce(&raw, comps).unwrap();
    let split = make_split(&scene, &SplitSpec { per_class_train: per_class, seed: 9 }).unwrap();
    (scene, split)
}

fn criterion_loss_balance() -> Outcome {
    let (scene, split) = small_scene(16, 16, 6, 3, 3, 5);
    let cfg = ModelConfig {
        in_bands: 3,
        ladder: vec![6, 4],
        dim: 4,
        heads: 1,
        classes: 3,
        multibranch: true,
        se_ratio: 2,
        dropout: 0.1,
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg).map_err(err)?;
    let tc = TrainConfig { epochs: 10, batch_size: 3, learning_rate: 0.01, patch_size: 7, ..TrainConfig::default() };
    let report = train(&mut model, &scene, &split, &tc).map_err(err)?;
    ensure(report.weight_trace.len() == 50, || format!("probe took {} steps, want 50", report.weight_trace.len()))?;
    for (step, w) in report.weight_trace.iter().enumerate() {
        ensure(w.iter().sum::<f64>() == 1.0, || format!("step {step}: weights {w:?} sum to {}", w.iter().sum::<f64>()))?;
        ensure(w.iter().all(|&v| v > 0.0 && v < 1.0), || format!("step {step}: weights {w:?} leave (0, 1)"))?;
    }
    let last = report.weight_trace[49];
    ensure(last.iter().any(|&v| v != 0.25), || "weights never moved".into())?;
    Ok(format!("50 steps, every sum exactly 1, final weights {:.4?}", last))
}

// --- 5. metrics oracle -----------------------------------------------------

fn criterion_metrics() -> Outcome {
    let hand = metrics(&ConfusionMatrix::from_counts(2, vec![40, 10, 20, 30]).map_err(err)?).map_err(err)?;
    ensure((hand.oa - 0.70).abs() <= METRIC_TOL && (hand.kappa - 0.40).abs() <= METRIC_TOL, || {
        format!("hand case OA {} kappa {}", hand.oa, hand.kappa)
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let k = rng.random_range(2..7usize);
        let n = rng.random_range(1..400usize);
        let truth: Vec<u16> = (0..n).map(|_| rng.random_range(1..=k as u16)).collect();
        let pred: Vec<u16> = truth
            .iter()
            .map(|&t| if rng.random_bool(0.6) { t } else { rng.random_range(1..=k as u16) })
            .collect();
        let coords: Vec<Coord> = (0..n).map(|j| (0, j)).collect();
        let m = metrics(&confusion(&pred, &truth, n, &coords, k).map_err(err)?).map_err(err)?;

        let nf = n as f64;
        let oa = truth.iter().zip(&pred).filter(|(t, p)| t == p).count() as f64 / nf;
        let mut accs = Vec::new();
        let mut pe = 0.0;
        for c in 1..=k as u16 {
            let support = truth.iter().filter(|&&t| t == c).count();
            let predicted = pred.iter().filter(|&&p| p == c).count();
            pe += (support as f64 / nf) * (predicted as f64 / nf);
            if support > 0 {
                let hit = truth.iter().zip(&pred).filter(|&(&t, &p)| t == c && p == c).count();
                accs.push(hit as f64 / support as f64);
            }
        }
        let aa = accs.iter().sum::<f64>() / accs.len() as f64;
        let kappa = if pe == 1.0 { if oa == 1.0 { 1.0 } else { 0.0 } } else { (oa - pe) / (1.0 - pe) };
        let diff = (m.oa - oa).abs().max((m.aa - aa).abs()).max((m.kappa - kappa).abs());
        worst = worst.max(diff);
        ensure(diff <= METRIC_TOL, || format!("case {case}: diff {diff:e}"))?;
    }
    Ok(format!("hand case OA 0.70 kappa 0.40; 100 random tallies max diff {worst:.1e} (tol {METRIC_TOL:.0e})"))
}

// --- 6 and 7. learnability and progressive loop ---------------------------

fn learn_scene() -> (HsiScene, Split) {
    let raw = synth_scene(&SynthParams { h: 48, w: 48, bands: 16, classes: 4, noise_sigma: 0.05, seed: 0 }).unwrap();
    let (scene, _) = pca_reduce(&raw, 8).unwrap();
    let split = make_split(&scene, &SplitSpec { per_class_train: 10, seed: 0 }).unwrap();
    (scene, split)
}

fn learn_train_config() -> TrainConfig {
    TrainConfig {
        epochs: LEARN_EPOCHS,
        batch_size: 8,
        learning_rate: 0.0015,
        patch_size: 13,
        finetune_samples: 64,
        seed: 0,
        ..TrainConfig::default()
    }
}

fn criterion_learnability() -> (Outcome, Option<Model>) {
    let (scene, split) = learn_scene();
    let cfg = ModelConfig {
        in_bands: 8,
        ladder: vec![12, 10, 8],
        dim: 16,
        heads: 2,
        classes: 4,
        ..ModelConfig::default()
    };
    let start = Instant::now();
    let run = || -> hsiseg_core::Result<(Model, f64)> {
        let mut model = Model::new(cfg)?;
        train(&mut model, &scene, &split, &learn_train_config())?;
        let (m, _) = evaluate(&model, &scene, &split, 13, 1)?;
        Ok((model, m.oa))
    };
    let (model, oa) = match run() {
        Ok(v) => v,
        Err(e) => return (Err(e.to_string()), None),
    };
    let elapsed = start.elapsed();
    let detail = format!(
        "held-out OA {oa:.4} (min {LEARN_OA}) after {LEARN_EPOCHS} epochs, {:.1}s (budget {}s), {} test pixels",
        elapsed.as_secs_f64(),
        LEARN_BUDGET.as_secs(),
        split.test.len()
    );
    let ok = oa >= LEARN_OA && elapsed <= LEARN_BUDGET;
    (if ok { Ok(detail) } else { Err(detail) }, Some(model))
}

fn criterion_progressive(model: Option<Model>) -> Outcome {
    let mut model = model.ok_or("no trained model from the learnability run")?;
    let (scene, split) = learn_scene();
    let prog = ProgressiveConfig { iterations: 3, tau2: 0.7, zeta: 0.005, preserve_train: true };
    let report = progressive_learn(&mut model, &scene, &split, &learn_train_config(), &prog, 1, None).map_err(err)?;
    let train_set: HashSet<Coord> = split.train.iter().copied().collect();
    for rec in &report.records {
        let n = rec.max_prob.len() as f64;
        let mean = rec.max_prob.iter().sum::<f64>() / n;
        let std = (rec.max_prob.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n).sqrt();
        ensure(rec.threshold == rec.tau2.max(mean + std), || format!("iteration {}: threshold {} is not max(tau2, mean + std)", rec.iteration, rec.threshold))?;
        for px in 0..scene.pixels() {
            let c = (px / scene.width, px % scene.width);
            if train_set.contains(&c) {
                ensure(rec.y_temp[px] == scene.label(c.0, c.1), || format!("iteration {}: training label at {c:?} lost", rec.iteration))?;
            } else if rec.y_temp[px] != 0 {
                ensure(rec.max_prob[px] >= rec.threshold, || {
                    format!("iteration {}: pixel {c:?} labeled at max-prob {} < T2 {}", rec.iteration, rec.max_prob[px], rec.threshold)
                })?;
            }
        }
    }
    let first = report.records[0].metrics.oa;
    let last = report.final_metrics.oa;
    let tau2 = report.state.tau2;
    let coverage: Vec<String> = report.state.coverage_log.iter().map(|c| format!("{c:.3}")).collect();
    let picks: Vec<String> = report.records.iter().map(|r| format!("{}@T2={:.4}", r.selected, r.threshold)).collect();
    let detail = format!(
        "(a) confidence ok (b) training labels kept (c) OA {first:.4} -> {last:.4} (slack {PROGRESSIVE_SLACK}) (d) final tau2 {tau2}; selected [{}], coverage [{}]",
        picks.join(", "),
        coverage.join(", ")
    );
    ensure(last >= first - PROGRESSIVE_SLACK, || detail.clone())?;
    ensure(tau2 == 0.71, || detail.clone())?;
    Ok(detail)
}

// --- 8. decoupling identity ------------------------------------------------

fn criterion_decoupling() -> Outcome {
    let mut worst_bits = 0usize;
    for seed in 0..3u64 {
        let mut cfg = ModelConfig { in_bands: 5, ladder: vec![8, 6, 4], dim: 8, heads: 2, classes: 3, seed, ..ModelConfig::default() };
        cfg.dtype = DType::F64;
        let single = Model::new(cfg.clone()).map_err(err)?;
        let mut multi = Model::new(ModelConfig { multibranch: true, ..cfg }).map_err(err)?;
        multi.zero_exchange_values();
        let x = random_map(&[5, 8, 8], 70 + seed);
        let aux = random_map(&[1, 8, 8], 80 + seed);
        let a = single.forward(&single.store.bind(false), &x, None, &mut Dropout::off()).map_err(err)?;
        let b = multi.forward(&multi.store.bind(false), &x, Some(&aux), &mut Dropout::off()).map_err(err)?;
        let differing = a.seg_logits.data().iter().zip(b.seg_logits.data()).filter(|(p, q)| p.to_bits() != q.to_bits()).count();
        worst_bits = worst_bits.max(differing);
    }
    ensure(worst_bits == 0, || format!("{worst_bits} logits differ"))?;
    Ok("3 seeds, multi-branch HSI logits bit-identical to single-branch".into())
}

// --- 9. unlabeled-pixel isolation ------------------------------------------

fn criterion_isolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    for case in 0..50 {
        let k = rng.random_range(2..6usize);
        let (h, w) = (rng.random_range(2..9usize), rng.random_range(2..9usize));
        let labels: Vec<u16> = (0..h * w).map(|_| rng.random_range(0..=k as u16)).collect();
        let base = random_map(&[k, h, w], 100 + case);
        let mut bumped = base.to_vec();
        for (i, &l) in labels.iter().enumerate() {
            if l == 0 {
                for c in 0..k {
                    bumped[c * h * w + i] += rng.random_range(-50.0..50.0);
                }
            }
        }
        let bumped = Tensor::from_f64(&[k, h, w], bumped).unwrap();
        let ce = |t: &Tensor| seg_cross_entropy(t, &labels).and_then(|v| Ok(v.item()?.to_bits()));
        let dice = |t: &Tensor| dice_loss(&t.softmax(0)?, &labels).and_then(|v| Ok(v.item()?.to_bits()));
        ensure(ce(&base).map_err(err)? == ce(&bumped).map_err(err)?, || format!("case {case}: cross-entropy moved"))?;
        ensure(dice(&base).map_err(err)? == dice(&bumped).map_err(err)?, || format!("case {case}: Dice moved"))?;
    }
    Ok("50 random maps: cross-entropy and Dice bit-identical under label-0 perturbation".into())
}

// --- 10. reproducibility ---------------------------------------------------

fn criterion_reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let args = |out: &str| {
        let out = dir.path().join(out);
        vec![
            "train".to_string(),
            "--set=synth.h=20".into(),
            "--set=synth.w=20".into(),
            "--set=synth.bands=8".into(),
            "--set=synth.classes=3".into(),
            "--set=data.pca=4".into(),
            "--set=data.per_class_train=4".into(),
            "--set=model.ladder=[6,4]".into(),
            "--set=model.dim=8".into(),
            "--set=train.patch_size=7".into(),
            "--set=train.batch_size=4".into(),
            "--epochs=3".into(),
            "--seed=7".into(),
            format!("--out={}", out.display()),
        ]
    };
    for run in ["a", "b"] {
        let status = Command::new(env!("CARGO_BIN_EXE_hsiseg")).args(args(run)).output().map_err(err)?;
        ensure(status.status.success(), || format!("train run {run} failed: {}", String::from_utf8_lossy(&status.stderr)))?;
    }
    for file in ["model.hsw", "metrics.json", "manifest.json"] {
        let a = std::fs::read(dir.path().join("a").join(file)).map_err(err)?;
        let b = std::fs::read(dir.path().join("b").join(file)).map_err(err)?;
        if file == "manifest.json" {
            // the manifests differ only in the output directory
            let strip = |v: &[u8]| {
                let mut j: serde_json::Value = serde_json::from_slice(v).unwrap();
                j["config"]["out"] = serde_json::Value::Null;
                j
            };
            ensure(strip(&a) == strip(&b), || "manifests differ beyond the output path".into())?;
        } else {
            ensure(a == b, || format!("{file} differs between identical runs"))?;
        }
    }
    Ok("two `train` runs: model.hsw and metrics.json byte-identical".into())
}

// --- driver ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    })
}

fn report(id: usize, name: &str, outcome: &Outcome) {
    let line = match outcome {
        Ok(d) => format!("[PASS] criterion {id:>2} {name}: {d}\n"),
        Err(d) => format!("[FAIL] criterion {id:>2} {name}: {d}\n"),
    };
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

#[test]
fn acceptance_criteria() {
    let (learn, repro) = std::thread::scope(|s| {
        let learn = s.spawn(|| {
            let mut model = None;
            let c6 = guarded(|| {
                let (o, m) = criterion_learnability();
                model = m;
                o
            });
            let c7 = guarded(|| criterion_progressive(model));
            (c6, c7)
        });
        let repro = s.spawn(|| guarded(criterion_reproducibility));
        let quick = vec![
            (1, "gradient suite", guarded(criterion_gradients)),
            (2, "DSRT geometry", guarded(criterion_dsrt)),
            (3, "threshold law", guarded(criterion_threshold)),
            (4, "loss balance", guarded(criterion_loss_balance)),
            (5, "metrics oracle", guarded(criterion_metrics)),
        ];
        let tail = vec![
            (8, "decoupling identity", guarded(criterion_decoupling)),
            (9, "unlabeled-pixel isolation", guarded(criterion_isolation)),
        ];
        (learn.join().map(|(a, b)| (quick, a, b, tail)).unwrap(), repro.join().unwrap())
    });
    let (quick, c6, c7, tail) = learn;
    let mut all = quick;
    all.push((6, "end-to-end learnability", c6));
    all.push((7, "progressive loop", c7));
    all.extend(tail);
    all.push((10, "reproducibility", repro));
    for (id, name, outcome) in &all {
        report(*id, name, outcome);
    }
    let failed: Vec<usize> = all.iter().filter(|(_, _, o)| o.is_err()).map(|(id, _, _)| *id).collect();
    let summary = format!("acceptance: {}/{} criteria passed\n", all.len() - failed.len(), all.len());
    let _ = std::io::stdout().lock().write_all(summary.as_bytes());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
