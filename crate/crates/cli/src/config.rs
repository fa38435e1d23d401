//! Run configuration: flat dotted keys layered as defaults, dataset profile,
//! config file, then command-line overrides.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use hsiseg_core::dataio::SynthParams;
use hsiseg_core::network::ModelConfig;
use hsiseg_core::trainer::{ProgressiveConfig, TrainConfig};
use hsiseg_core::DType;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// Environment variable naming the root under which default run
/// directories are created.
pub const OUT_ROOT_ENV: &str = "HSISEG_OUT_ROOT";

/// Grid ladder of the full-size model; a profile keeps its first `layers`.
pub const FULL_LADDER: [usize; 5] = [12, 10, 8, 6, 4];

pub const PROFILES: [&str; 5] = ["ip", "pu", "mg", "ag", "hu"];

/// Every accepted key with a short description.
pub const KEYS: &[(&str, &str)] = &[
    ("profile", "dataset profile applied before the config file: ip, pu, mg, ag or hu"),
    ("scene", "path of an HSC1 scene; excludes the synth.* keys"),
    ("synth.h", "synthetic scene height"),
    ("synth.w", "synthetic scene width"),
    ("synth.bands", "synthetic spectral bands"),
    ("synth.classes", "synthetic class count"),
    ("synth.noise_sigma", "standard deviation of the additive spectral noise"),
    ("synth.seed", "synthetic scene seed"),
    ("data.pca", "principal components kept (0 keeps all bands; capped at the band count)"),
    ("data.per_class_train", "training pixels drawn per class"),
    ("model.ladder", "encoder grid ladder, strictly decreasing"),
    ("model.dim", "feature width d"),
    ("model.heads", "attention heads"),
    ("model.tau1", "feature-selection masking bound"),
    ("model.dropout", "feature dropout rate"),
    ("model.multibranch", "fuse the auxiliary modality through a second branch"),
    ("model.se_ratio", "squeeze-excitation reduction ratio"),
    ("model.dtype", "parameter precision: f32 or f64"),
    ("train.epochs", "initial training epochs"),
    ("train.batch_size", "patches per optimiser step"),
    ("train.learning_rate", "Adam step size"),
    ("train.beta1", "Adam first-moment decay"),
    ("train.beta2", "Adam second-moment decay"),
    ("train.epsilon", "Adam denominator offset"),
    ("train.patch_size", "odd side of the scene crop resized to the model grid"),
    ("train.finetune_samples", "patches drawn per fine-tuning epoch at most"),
    ("progressive.iterations", "pseudo-labeling iterations"),
    ("progressive.tau2", "initial pseudo-label confidence bound"),
    ("progressive.zeta", "confidence bound increment per iteration"),
    ("progressive.preserve_train", "re-impose training labels on every pseudo-label map"),
    ("seed", "seed of the split, the initialisation and the training order"),
    ("out", "output directory (not hashed)"),
];

/// Table values of one dataset profile as key/value pairs.
pub fn profile_values(name: &str) -> Result<Vec<(&'static str, Value)>> {
    // pca, patch, d, layers, heads, tau1, tau2, epochs, batch, lr, dropout, iterations
    let row: (u64, u64, u64, usize, u64, f64, f64, u64, u64, f64, f64, u64) = match name {
        "ip" => (30, 33, 64, 4, 2, 0.8, 0.7, 300, 32, 0.0015, 0.1, 14),
        "pu" => (15, 49, 32, 2, 2, 0.9, 0.9, 200, 64, 0.001, 0.15, 8),
        "mg" => (30, 41, 64, 4, 4, 0.8, 0.7, 300, 32, 0.0015, 0.1, 10),
        "ag" => (15, 33, 64, 4, 4, 0.6, 0.7, 300, 32, 0.0015, 0.1, 10),
        "hu" => (30, 57, 32, 3, 2, 0.9, 0.8, 200, 64, 0.001, 0.15, 8),
        other => bail!("unknown profile {other:?}; expected one of {}", PROFILES.join(", ")),
    };
    Ok(vec![
        ("data.pca", json!(row.0)),
        ("train.patch_size", json!(row.1)),
        ("model.dim", json!(row.2)),
        ("model.ladder", json!(FULL_LADDER[..row.3])),
        ("model.heads", json!(row.4)),
        ("model.tau1", json!(row.5)),
        ("progressive.tau2", json!(row.6)),
        ("train.epochs", json!(row.7)),
        ("train.batch_size", json!(row.8)),
        ("train.learning_rate", json!(row.9)),
        ("model.dropout", json!(row.10)),
        ("progressive.iterations", json!(row.11)),
    ])
}

fn defaults() -> BTreeMap<String, Value> {
    let train = TrainConfig::default();
    let model = ModelConfig::default();
    let prog = ProgressiveConfig::default();
    let mut map: BTreeMap<String, Value> = [
        ("profile", Value::Null),
        ("scene", Value::Null),
        ("synth.h", json!(48)),
        ("synth.w", json!(48)),
        ("synth.bands", json!(16)),
        ("synth.classes", json!(4)),
        ("synth.noise_sigma", json!(0.05)),
        ("synth.seed", json!(0)),
        ("data.per_class_train", json!(10)),
        ("model.multibranch", json!(false)),
        ("model.se_ratio", json!(model.se_ratio)),
        ("model.dtype", json!(model.dtype)),
        ("train.beta1", json!(train.beta1)),
        ("train.beta2", json!(train.beta2)),
        ("train.epsilon", json!(train.epsilon)),
        ("train.finetune_samples", json!(train.finetune_samples)),
        ("progressive.zeta", json!(prog.zeta)),
        ("progressive.preserve_train", json!(prog.preserve_train)),
        ("seed", json!(0)),
        ("out", Value::Null),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    for (k, v) in profile_values("ip").expect("built-in profile") {
        map.insert(k.to_string(), v);
    }
    debug_assert!(KEYS.iter().all(|(k, _)| map.contains_key(*k)));
    map
}

fn unknown_key(key: &str) -> anyhow::Error {
    let valid: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
    anyhow!("unknown config key {key:?}; valid keys: {}", valid.join(", "))
}

/// Parses a command-line override value: JSON when it parses, else a string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Splits `key=value`.
pub fn parse_assignment(raw: &str) -> Result<(String, Value)> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| anyhow!("override {raw:?} is not of the form key=value"))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Option<String>,
    pub scene: Option<PathBuf>,
    pub synth: SynthParams,
    pub pca: usize,
    pub per_class_train: usize,
    /// Band, class and auxiliary counts are filled in from the scene.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub progressive: ProgressiveConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

/// The merged key map, the keys set explicitly, and the typed view.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub effective: BTreeMap<String, Value>,
    pub explicit: BTreeSet<String>,
    pub run: RunConfig,
}

impl Resolved {
    /// Builds the effective configuration from an optional JSON file of flat
    /// keys and ordered overrides (later wins).
    pub fn build(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Resolved> {
        let mut explicit: BTreeMap<String, Value> = BTreeMap::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let parsed: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            let Value::Object(obj) = parsed else {
                bail!("config {} must be a JSON object of flat keys", path.display());
            };
            explicit.extend(obj);
        }
        for (k, v) in overrides {
            explicit.insert(k.clone(), v.clone());
        }
        let mut effective = defaults();
        if let Some(k) = explicit.keys().find(|k| !effective.contains_key(k.as_str())) {
            return Err(unknown_key(k));
        }
        if let Some(profile) = explicit.get("profile").filter(|v| !v.is_null()) {
            let name = profile.as_str().ok_or_else(|| anyhow!("profile must be a string"))?;
            for (k, v) in profile_values(name)? {
                effective.insert(k.to_string(), v);
            }
        }
        let scene_set = explicit.get("scene").is_some_and(|v| !v.is_null());
        if scene_set {
            if let Some(k) = explicit.keys().find(|k| k.starts_with("synth.")) {
                bail!("scene and {k} are mutually exclusive: use a scene file or synthetic parameters, not both");
            }
        }
        effective.extend(explicit.iter().map(|(k, v)| (k.clone(), v.clone())));
        let run = typed(&effective)?;
        run.validate()?;
        Ok(Resolved { explicit: explicit.into_keys().collect(), effective, run })
    }

    /// SHA-256 of the canonical JSON of every hashed key.
    pub fn hash(&self) -> String {
        let hashed: BTreeMap<&String, &Value> = self.effective.iter().filter(|(k, _)| k.as_str() != "out").collect();
        let bytes = serde_json::to_vec(&hashed).expect("JSON values serialise");
        hex::encode(Sha256::digest(&bytes))
    }

    /// `out` when set, else `$HSISEG_OUT_ROOT/<command>-<hash prefix>`
    /// (root defaults to `runs`).
    pub fn out_dir(&self, command: &str) -> PathBuf {
        match &self.run.out {
            Some(p) => p.clone(),
            None => {
                let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
                root.join(format!("{command}-{}", &self.hash()[..12]))
            }
        }
    }
}

fn get<T: DeserializeOwned>(map: &BTreeMap<String, Value>, key: &str) -> Result<T> {
    let v = map.get(key).ok_or_else(|| unknown_key(key))?;
    serde_json::from_value(v.clone()).map_err(|e| anyhow!("config key {key}: {e} (got {v})"))
}

fn typed(m: &BTreeMap<String, Value>) -> Result<RunConfig> {
    let seed: u64 = get(m, "seed")?;
    let dtype: DType = get(m, "model.dtype")?;
    Ok(RunConfig {
        profile: get(m, "profile")?,
        scene: get(m, "scene")?,
        synth: SynthParams {
            h: get(m, "synth.h")?,
            w: get(m, "synth.w")?,
            bands: get(m, "synth.bands")?,
            classes: get(m, "synth.classes")?,
            noise_sigma: get(m, "synth.noise_sigma")?,
            seed: get(m, "synth.seed")?,
        },
        pca: get(m, "data.pca")?,
        per_class_train: get(m, "data.per_class_train")?,
        model: ModelConfig {
            ladder: get(m, "model.ladder")?,
            dim: get(m, "model.dim")?,
            heads: get(m, "model.heads")?,
            tau1: get(m, "model.tau1")?,
            dropout: get(m, "model.dropout")?,
            multibranch: get(m, "model.multibranch")?,
            se_ratio: get(m, "model.se_ratio")?,
            dtype,
            seed,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: get(m, "train.epochs")?,
            batch_size: get(m, "train.batch_size")?,
            learning_rate: get(m, "train.learning_rate")?,
            seed,
            beta1: get(m, "train.beta1")?,
            beta2: get(m, "train.beta2")?,
            epsilon: get(m, "train.epsilon")?,
            patch_size: get(m, "train.patch_size")?,
            finetune_samples: get(m, "train.finetune_samples")?,
        },
        progressive: ProgressiveConfig {
            iterations: get(m, "progressive.iterations")?,
            tau2: get(m, "progressive.tau2")?,
            zeta: get(m, "progressive.zeta")?,
            preserve_train: get(m, "progressive.preserve_train")?,
        },
        seed,
        out: get(m, "out")?,
    })
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(path) = &self.scene {
            if !path.is_file() {
                bail!("scene file {} does not exist", path.display());
            }
        }
        if self.per_class_train == 0 {
            bail!("data.per_class_train must be positive");
        }
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.progressive.tau2) || !(self.progressive.zeta >= 0.0) {
            bail!("progressive.tau2 must lie in [0, 1] and progressive.zeta must be non-negative");
        }
        Ok(())
    }
}
