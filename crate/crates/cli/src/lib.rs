//! Command-line driver: scene synthesis, training, progressive
//! pseudo-labeling, evaluation and map rendering.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::config::{parse_assignment, Resolved};

#[derive(Debug, Parser)]
#[command(name = "hsiseg", version, about = "Hyperspectral segmentation with progressive pseudo-labeling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON file of flat dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset profile: ip, pu, mg, ag or hu.
    #[arg(long)]
    pub profile: Option<String>,
    /// Override one key, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run directory (default `$HSISEG_OUT_ROOT/<command>-<hash>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Threads for tiled inference.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    /// HSC1 scene file; without it a synthetic scene is generated.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Seed of the split, initialisation and training order.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long = "h")]
        h: Option<usize>,
        #[arg(long = "w")]
        w: Option<usize>,
        #[arg(long)]
        bands: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        /// Scene seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and score it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scene: SceneArgs,
    },
    /// Run the pseudo-labeling loop.
    Progressive {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scene: SceneArgs,
        /// Start from this checkpoint instead of training first.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        tau2: Option<f64>,
        #[arg(long)]
        zeta: Option<f64>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write a class map as PPM.
    Render {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scene: SceneArgs,
        /// Predict with this checkpoint; without it the reference labels are drawn.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn push<T: serde::Serialize>(out: &mut Vec<(String, Value)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push((key.to_string(), json!(v)));
    }
}

fn resolve(common: &Common, extra: Vec<(String, Value)>) -> Result<Resolved> {
    let mut ov = Vec::new();
    push(&mut ov, "profile", common.profile.as_ref());
    push(&mut ov, "out", common.out.as_ref());
    ov.extend(extra);
    for raw in &common.set {
        ov.push(parse_assignment(raw)?);
    }
    Resolved::build(common.config.as_deref(), &ov)
}

fn scene_overrides(s: &SceneArgs) -> Vec<(String, Value)> {
    let mut ov = Vec::new();
    push(&mut ov, "scene", s.scene.as_ref());
    push(&mut ov, "seed", s.seed);
    push(&mut ov, "train.epochs", s.epochs);
    ov
}

/// Parses arguments and runs the command, printing a short summary.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    match cli.command {
        Command::Synth { common, h, w, bands, classes, noise, seed } => {
            let mut ov = Vec::new();
            push(&mut ov, "synth.h", h);
            push(&mut ov, "synth.w", w);
            push(&mut ov, "synth.bands", bands);
            push(&mut ov, "synth.classes", classes);
            push(&mut ov, "synth.noise_sigma", noise);
            push(&mut ov, "synth.seed", seed);
            let cfg = resolve(&common, ov)?;
            let dir = commands::synth(&cfg)?;
            println!("scene written to {}", dir.join("scene.hsc").display());
        }
        Command::Train { common, scene } => {
            let cfg = resolve(&common, scene_overrides(&scene))?;
            let (dir, m) = commands::train_cmd(&cfg, common.workers)?;
            println!("OA {:.4}  AA {:.4}  kappa {:.4}", m.oa, m.aa, m.kappa);
            println!("run written to {}", dir.display());
        }
        Command::Progressive { common, scene, checkpoint, iterations, tau2, zeta } => {
            let mut ov = scene_overrides(&scene);
            push(&mut ov, "progressive.iterations", iterations);
            push(&mut ov, "progressive.tau2", tau2);
            push(&mut ov, "progressive.zeta", zeta);
            let cfg = resolve(&common, ov)?;
            let (dir, s) = commands::progressive_cmd(&cfg, checkpoint.as_deref(), common.workers)?;
            println!("initial OA {:.4}  final OA {:.4}", s.initial_oa, s.final_metrics.oa);
            println!("final tau2 = {}", s.final_tau2);
            println!("run written to {}", dir.display());
        }
        Command::Eval { common, scene, checkpoint } => {
            let cfg = resolve(&common, scene_overrides(&scene))?;
            let (dir, m) = commands::eval_cmd(&cfg, &checkpoint, common.workers)?;
            println!("OA {:.4}  AA {:.4}  kappa {:.4}", m.oa, m.aa, m.kappa);
            println!("run written to {}", dir.display());
        }
        Command::Render { common, scene, checkpoint } => {
            let cfg = resolve(&common, scene_overrides(&scene))?;
            let dir = commands::render_cmd(&cfg, checkpoint.as_deref(), common.workers)?;
            println!("map written to {}", dir.join("map.ppm").display());
        }
    }
    Ok(())
}
