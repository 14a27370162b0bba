//! `granp` subcommands. [`run`] parses arguments, executes one command and
//! returns the process exit code: 0 success, 2 usage error, 3 data or
//! format error, 4 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use granp_core::autodiff::{Precision, Real};
use granp_core::data::{synth_scenes, SceneArchive, TrajectoryScene, RATE_HZ};
use granp_core::gradsuite::{format_table, run_suite};
use granp_core::model::{
    attention_weights, latent_noise, ModelConfig, CI_Z, SUPPORTED_HEADS, SUPPORTED_HIDDEN,
};
use granp_core::train::{
    evaluate, train_with, write_loss_history, Checkpoint, TrainConfig, DEFAULT_LR, DEFAULT_SAMPLES,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Loss history written beside the checkpoint unless `--loss-csv` is given.
pub const LOSS_CSV: &str = "loss_history.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] granp_core::Error),
    #[error("gradient check above threshold in {0} row(s)")]
    GradCheck(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use granp_core::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::GradCheck(_) => EXIT_NUMERIC,
            CliError::Core(E::NanLoss { .. } | E::NonFinite(_)) => EXIT_NUMERIC,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "granp",
    version,
    about = "Graph-attentive neural process trajectory prediction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic highway scene archive.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint and loss history.
    Train(TrainArgs),
    /// Per-horizon RMSE and NLL of a checkpoint on an archive.
    Eval(EvalArgs),
    /// Predictive distribution and latent samples for one scene.
    Predict(PredictArgs),
    /// Ego-row graph attention weights for one scene.
    Attention(AttentionArgs),
    /// 64-bit finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Lane-change share of the scenes.
    #[arg(long, default_value_t = 0.3)]
    pub mix: f64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_hidden(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if SUPPORTED_HIDDEN.contains(&v) {
        Ok(v)
    } else {
        Err(format!("must be one of {SUPPORTED_HIDDEN:?}"))
    }
}

fn parse_heads(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if SUPPORTED_HEADS.contains(&v) {
        Ok(v)
    } else {
        Err(format!("must be one of {SUPPORTED_HEADS:?}"))
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = DEFAULT_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = 64, value_parser = parse_hidden)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4, value_parser = parse_heads)]
    pub heads: usize,
    /// Latent dimension; defaults to the hidden dimension.
    #[arg(long)]
    pub latent: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stop after this many epochs without validation improvement.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub reference_size: usize,
    /// Defaults to `<out>/loss_history.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub scene: i64,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub scene: i64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Also write the rows as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    let precision = Precision::from_env();
    match command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => match precision {
            Precision::F32 => train_cmd::<f32>(&a),
            Precision::F64 => train_cmd::<f64>(&a),
        },
        Command::Eval(a) => match precision {
            Precision::F32 => eval_cmd::<f32>(&a),
            Precision::F64 => eval_cmd::<f64>(&a),
        },
        Command::Predict(a) => match precision {
            Precision::F32 => predict_cmd::<f32>(&a),
            Precision::F64 => predict_cmd::<f64>(&a),
        },
        Command::Attention(a) => match precision {
            Precision::F32 => attention_cmd::<f32>(&a),
            Precision::F64 => attention_cmd::<f64>(&a),
        },
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| granp_core::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| {
        granp_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(granp_core::Error::from)?;
    write_file(path, text)
}

fn synth(a: &SynthArgs) -> CliResult<()> {
    if a.scenes == 0 {
        return Err(CliError::Usage("--scenes must be positive".into()));
    }
    if !(0.0..=1.0).contains(&a.mix) {
        return Err(CliError::Usage("--mix must be in [0, 1]".into()));
    }
    let scenes = synth_scenes(a.scenes, a.seed, a.mix)?;
    SceneArchive::new(scenes).save_dir(&a.out)?;
    eprintln!("wrote {} scenes to {}", a.scenes, a.out.display());
    Ok(())
}

fn load_scenes(path: &Path) -> CliResult<Vec<TrajectoryScene>> {
    Ok(SceneArchive::load(path)?.scenes)
}

fn scene_index(i: i64, len: usize) -> CliResult<usize> {
    usize::try_from(i).ok().filter(|&i| i < len).ok_or_else(|| {
        CliError::Usage(format!(
            "--scene {i} out of range for an archive of {len} scenes"
        ))
    })
}

fn train_cmd<R: Real>(a: &TrainArgs) -> CliResult<()> {
    let scenes = load_scenes(&a.data)?;
    let model = ModelConfig {
        latent: a.latent.unwrap_or(a.hidden),
        ..ModelConfig::new(a.hidden, a.heads).map_err(|e| CliError::Usage(e.to_string()))?
    };
    let config = TrainConfig {
        model,
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        reference_size: a.reference_size,
        patience: a.patience,
        ..Default::default()
    };
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let out = train_with::<R, _>(&config, &scenes, |e| {
        eprintln!(
            "epoch {:>4}  loss {:.5}  recon_nll {:.5}  kl {:.5}  val_nll {:.5}",
            e.epoch, e.loss, e.recon_nll, e.kl, e.val_nll
        );
    })?;
    out.checkpoint.save(&a.out)?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| a.out.join(LOSS_CSV));
    write_loss_history(&csv, &out.history)?;
    eprintln!(
        "best epoch {} of {}; checkpoint in {}",
        out.best_epoch,
        out.history.len(),
        a.out.display()
    );
    Ok(())
}

fn eval_cmd<R: Real>(a: &EvalArgs) -> CliResult<()> {
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be positive".into()));
    }
    let scenes = load_scenes(&a.data)?;
    let ckpt = Checkpoint::<R>::load(&a.ckpt)?;
    let report = evaluate(&ckpt, &scenes, a.samples, a.seed)?;
    write_file(&a.report, report.to_json()?)?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct StepOut {
    pub t_s: f64,
    pub mean: [f64; 2],
    pub std: [f64; 2],
    pub lower: [f64; 2],
    pub upper: [f64; 2],
}

#[derive(Debug, Serialize)]
pub struct SampleOut {
    pub mean: Vec<[f64; 2]>,
    pub std: Vec<[f64; 2]>,
}

/// Plot-ready prediction of one scene, meters.
#[derive(Debug, Serialize)]
pub struct PredictOut {
    pub scene: usize,
    pub ego: u64,
    pub ci_z: f64,
    /// Observed ego positions.
    pub history: Vec<[f64; 2]>,
    /// Recorded future, when the archive has one.
    pub truth: Vec<[f64; 2]>,
    pub steps: Vec<StepOut>,
    /// One decoded trajectory per latent draw.
    pub samples: Vec<SampleOut>,
}

fn predict_cmd<R: Real>(a: &PredictArgs) -> CliResult<()> {
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be positive".into()));
    }
    let scenes = load_scenes(&a.data)?;
    let i = scene_index(a.scene, scenes.len())?;
    let ckpt = Checkpoint::<R>::load(&a.ckpt)?;
    let scene = &scenes[i];
    let query = ckpt.prepare(std::slice::from_ref(scene))?;
    let noise = latent_noise(a.seed, a.samples, ckpt.config().latent);
    let pred = ckpt.predictor()?.predict(&[&query[0]], &noise)?.remove(0);
    let (lower, upper) = (pred.pooled.lower(), pred.pooled.upper());
    let dt = 1.0 / RATE_HZ as f64;
    let steps = (0..pred.pooled.mean.len())
        .map(|t| StepOut {
            t_s: (t + 1) as f64 * dt,
            mean: pred.pooled.mean[t],
            std: pred.pooled.std[t],
            lower: lower[t],
            upper: upper[t],
        })
        .collect();
    let out = PredictOut {
        scene: i,
        ego: scene.ego,
        ci_z: CI_Z,
        history: scene.ego_history().iter().map(|s| [s[0], s[1]]).collect(),
        truth: scene.future.clone(),
        steps,
        samples: pred
            .samples
            .into_iter()
            .map(|s| SampleOut {
                mean: s.mean,
                std: s.std,
            })
            .collect(),
    };
    write_json(&a.out, &out)
}

#[derive(Debug, Serialize)]
pub struct AttentionOut {
    pub scene: usize,
    #[serde(flatten)]
    pub export: granp_core::model::AttentionExport,
}

fn attention_cmd<R: Real>(a: &AttentionArgs) -> CliResult<()> {
    let scenes = load_scenes(&a.data)?;
    let i = scene_index(a.scene, scenes.len())?;
    let ckpt = Checkpoint::<R>::load(&a.ckpt)?;
    let prepared = ckpt.prepare(std::slice::from_ref(&scenes[i]))?;
    let export = attention_weights(&ckpt.model, &ckpt.store, &prepared[0])?;
    write_json(&a.out, &AttentionOut { scene: i, export })
}

fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let rows = run_suite()?;
    print!("{}", format_table(&rows));
    if let Some(path) = &a.json {
        write_json(path, &rows)?;
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(CliError::GradCheck(failed));
    }
    Ok(())
}
