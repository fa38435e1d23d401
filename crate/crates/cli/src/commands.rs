//! Subcommand implementations. Each one writes its artifacts into a run
//! directory, re-reads and validates them, then writes `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hsiseg_core::dataio::{
    decode_scene, encode_scene, load_scene, make_split, pca_reduce, synth_scene, HsiScene, Split, SplitSpec,
};
use hsiseg_core::eval::{render_map, MetricsReport, PALETTE};
use hsiseg_core::network::{decode_checkpoint, encode_checkpoint, Model, ModelConfig};
use hsiseg_core::trainer::{curves_csv, evaluate, infer_full_scene, progressive_learn, train};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::Resolved;

/// Scene after dimensionality reduction, with its split.
pub struct Session {
    pub scene: HsiScene,
    pub split: Split,
}

pub fn raw_scene(cfg: &Resolved) -> Result<HsiScene> {
    match &cfg.run.scene {
        Some(path) => load_scene(path).with_context(|| format!("loading scene {}", path.display())),
        None => Ok(synth_scene(&cfg.run.synth)?),
    }
}

pub fn prepare(cfg: &Resolved) -> Result<Session> {
    let raw = raw_scene(cfg)?;
    let comps = match cfg.run.pca {
        0 => raw.bands,
        n => n.min(raw.bands),
    };
    let (scene, _) = pca_reduce(&raw, comps)?;
    let split = make_split(&scene, &SplitSpec { per_class_train: cfg.run.per_class_train, seed: cfg.run.seed })?;
    Ok(Session { scene, split })
}

pub fn model_config(cfg: &Resolved, scene: &HsiScene) -> ModelConfig {
    ModelConfig {
        in_bands: scene.bands,
        classes: scene.class_count,
        aux_bands: scene.aux_bands.max(1),
        ..cfg.run.model.clone()
    }
}

fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    decode_checkpoint(&bytes).with_context(|| format!("decoding checkpoint {}", path.display()))
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

/// Collects artifacts of one run and seals them with a manifest.
pub struct RunDir {
    pub path: PathBuf,
    command: String,
    files: Vec<String>,
}

impl RunDir {
    pub fn create(path: PathBuf, command: &str) -> Result<RunDir> {
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(RunDir { path, command: command.to_string(), files: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.path.join(name), bytes).with_context(|| format!("writing {name}"))?;
        self.track(name);
        Ok(())
    }

    /// Registers a file written by someone else.
    pub fn track(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    /// Re-reads every artifact, checks it parses, and writes the manifest.
    pub fn seal(self, cfg: &Resolved) -> Result<PathBuf> {
        let mut artifacts = Vec::new();
        for name in &self.files {
            let bytes = fs::read(self.path.join(name)).with_context(|| format!("re-reading {name}"))?;
            validate_artifact(name, &bytes).with_context(|| format!("validating {name}"))?;
            artifacts.push(json!({ "file": name, "bytes": bytes.len(), "sha256": hex::encode(Sha256::digest(&bytes)) }));
        }
        let manifest = json!({
            "command": self.command,
            "config_hash": cfg.hash(),
            "config": cfg.effective,
            "seed": cfg.run.seed,
            "versions": { "hsiseg-cli": env!("CARGO_PKG_VERSION"), "hsiseg-core": hsiseg_core::VERSION },
            "artifacts": artifacts,
        });
        fs::write(self.path.join("manifest.json"), pretty(&manifest)?)?;
        Ok(self.path)
    }
}

fn validate_artifact(name: &str, bytes: &[u8]) -> Result<()> {
    match Path::new(name).extension().and_then(|e| e.to_str()) {
        Some("hsc") => {
            decode_scene(bytes)?;
        }
        Some("hsw") => {
            decode_checkpoint(bytes)?;
        }
        Some("json") => {
            serde_json::from_slice::<Value>(bytes)?;
        }
        Some("ppm") => {
            if !bytes.starts_with(b"P6\n") {
                bail!("not a binary PPM");
            }
        }
        Some("csv") if !bytes.ends_with(b"\n") => bail!("truncated CSV"),
        _ => {}
    }
    Ok(())
}

pub fn synth(cfg: &Resolved) -> Result<PathBuf> {
    let scene = synth_scene(&cfg.run.synth)?;
    let mut dir = RunDir::create(cfg.out_dir("synth"), "synth")?;
    dir.write("scene.hsc", &encode_scene(&scene)?)?;
    dir.seal(cfg)
}

pub fn metrics_json(m: &MetricsReport) -> Result<Vec<u8>> {
    pretty(m)
}

/// Trains from scratch, then scores the checkpoint as written.
pub fn train_cmd(cfg: &Resolved, workers: usize) -> Result<(PathBuf, MetricsReport)> {
    let s = prepare(cfg)?;
    let mut model = Model::new(model_config(cfg, &s.scene))?;
    let report = train(&mut model, &s.scene, &s.split, &cfg.run.train)?;
    let ckpt = encode_checkpoint(&model)?;
    let reloaded = decode_checkpoint(&ckpt)?;
    let (m, _) = evaluate(&reloaded, &s.scene, &s.split, cfg.run.train.patch_size, workers)?;
    let mut dir = RunDir::create(cfg.out_dir("train"), "train")?;
    dir.write("model.hsw", &ckpt)?;
    dir.write("metrics.json", &metrics_json(&m)?)?;
    dir.write("curves.csv", curves_csv(&report.curves).as_bytes())?;
    dir.write("split.json", &pretty(&s.split)?)?;
    Ok((dir.seal(cfg)?, m))
}

pub fn eval_cmd(cfg: &Resolved, checkpoint: &Path, workers: usize) -> Result<(PathBuf, MetricsReport)> {
    let s = prepare(cfg)?;
    let model = load_model(checkpoint)?;
    let (m, _) = evaluate(&model, &s.scene, &s.split, cfg.run.train.patch_size, workers)?;
    let mut dir = RunDir::create(cfg.out_dir("eval"), "eval")?;
    dir.write("metrics.json", &metrics_json(&m)?)?;
    Ok((dir.seal(cfg)?, m))
}

#[derive(Serialize)]
struct IterationLog {
    iteration: usize,
    tau2: f64,
    threshold: f64,
    coverage: f64,
    selected: usize,
    oa: f64,
    aa: f64,
    kappa: f64,
}

#[derive(Serialize)]
pub struct ProgressiveSummary {
    pub initial_oa: f64,
    pub final_tau2: f64,
    pub final_metrics: MetricsReport,
}

/// Runs the pseudo-labeling loop, starting from `checkpoint` or from a
/// freshly trained model.
pub fn progressive_cmd(cfg: &Resolved, checkpoint: Option<&Path>, workers: usize) -> Result<(PathBuf, ProgressiveSummary)> {
    let s = prepare(cfg)?;
    let mut dir = RunDir::create(cfg.out_dir("progressive"), "progressive")?;
    let mut model = match checkpoint {
        Some(path) => load_model(path)?,
        None => {
            let mut model = Model::new(model_config(cfg, &s.scene))?;
            let report = train(&mut model, &s.scene, &s.split, &cfg.run.train)?;
            dir.write("initial_curves.csv", curves_csv(&report.curves).as_bytes())?;
            model
        }
    };
    let (initial, _) = evaluate(&model, &s.scene, &s.split, cfg.run.train.patch_size, workers)?;
    let report = progressive_learn(
        &mut model,
        &s.scene,
        &s.split,
        &cfg.run.train,
        &cfg.run.progressive,
        workers,
        Some(&dir.path),
    )?;
    for t in 1..=report.records.len() {
        dir.track(&format!("y_temp_{t}.hsc"));
        dir.track(&format!("metrics_{t}.json"));
    }
    dir.track("curves.csv");
    let log: Vec<IterationLog> = report
        .records
        .iter()
        .map(|r| IterationLog {
            iteration: r.iteration,
            tau2: r.tau2,
            threshold: r.threshold,
            coverage: r.coverage,
            selected: r.selected,
            oa: r.metrics.oa,
            aa: r.metrics.aa,
            kappa: r.metrics.kappa,
        })
        .collect();
    let summary = ProgressiveSummary {
        initial_oa: initial.oa,
        final_tau2: report.state.tau2,
        final_metrics: report.final_metrics.clone(),
    };
    dir.write("iterations.json", &pretty(&log)?)?;
    dir.write("summary.json", &pretty(&summary)?)?;
    dir.write("metrics.json", &metrics_json(&report.final_metrics)?)?;
    dir.write("model.hsw", &encode_checkpoint(&model)?)?;
    Ok((dir.seal(cfg)?, summary))
}

/// Renders predictions of `checkpoint`, or the reference labels when none is
/// given.
pub fn render_cmd(cfg: &Resolved, checkpoint: Option<&Path>, workers: usize) -> Result<PathBuf> {
    let s = prepare(cfg)?;
    let map = match checkpoint {
        Some(path) => {
            let model = load_model(path)?;
            let patch = cfg.run.train.patch_size;
            infer_full_scene(&model, &s.scene, patch, (patch / 2).max(1), workers)?.argmax()
        }
        None => s.scene.labels.clone(),
    };
    let mut dir = RunDir::create(cfg.out_dir("render"), "render")?;
    dir.write("map.ppm", &render_map(&map, s.scene.height, s.scene.width, &PALETTE)?)?;
    dir.seal(cfg)
}
