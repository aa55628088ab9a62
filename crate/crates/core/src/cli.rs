//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::synth::{self, SynthSpec};
use crate::data::{load_features, load_videos, segment_pool, Annotations, Manifest, Split};
use crate::error::{DataError, Error, LossError, Result, TensorError};
use crate::eval::{evaluate, ReportFiles};
use crate::gradcheck::{gradcheck, GradcheckConfig};
use crate::model::{model_forward, read_checkpoint, ModelConfig, ModelParams};
use crate::parallel::Execution;
use crate::train::train;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "milattn", version, about = "Joint video anomaly detection and classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Print per-segment scores and class posteriors for one feature file.
    Score(ScoreArgs),
    /// Generate a planted-anomaly synthetic dataset.
    Synth(SynthArgs),
    /// Compare analytic gradients with finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat `key = value` run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub features_dir: Option<PathBuf>,
    /// Needed only for held-out AUC during training.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Start from this checkpoint's parameters instead of a fresh init.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub features_dir: Option<PathBuf>,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Report directory (summary.txt, roc.csv, confusion.csv).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Leave the Normal class out of mAA.
    #[arg(long)]
    pub exclude_normal: bool,
    /// Run per-video forward passes on one thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Clip feature file to score.
    pub features: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub segments: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 60)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 20)]
    pub test_per_class: usize,
    /// Normal training videos (default: as many as anomaly ones).
    #[arg(long)]
    pub normal_train: Option<usize>,
    /// Normal test videos (default: as many as anomaly ones).
    #[arg(long)]
    pub normal_test: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub clips: usize,
    #[arg(long, default_value_t = 0.25)]
    pub anomaly_fraction: f64,
    #[arg(long, default_value_t = 4.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 16)]
    pub frames_per_clip: usize,
}

impl SynthArgs {
    pub fn spec(&self) -> SynthSpec {
        SynthSpec {
            feature_dim: self.feature_dim,
            segments: self.segments,
            classes: self.classes,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            normal_train: self.normal_train,
            normal_test: self.normal_test,
            clips_per_video: self.clips,
            anomaly_fraction: self.anomaly_fraction,
            delta: self.delta,
            sigma: self.sigma,
            frames_per_clip: self.frames_per_clip,
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub segments: usize,
    #[arg(long, default_value_t = 6)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 5)]
    pub hidden: usize,
    #[arg(long, default_value_t = 5)]
    pub det_hidden: usize,
    #[arg(long, default_value_t = 3)]
    pub det_latent: usize,
    #[arg(long, default_value_t = 4)]
    pub attn1_dim: usize,
    #[arg(long, default_value_t = 3)]
    pub attn2_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub cls_hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Corrupt the backward pass of this op (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

/// Maps an error to the documented exit status.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFiniteGradient(_) | Error::NonFiniteLoss(_) => EXIT_NUMERIC,
        Error::Tensor(TensorError::NonFinite { .. }) => EXIT_NUMERIC,
        Error::Config(_) | Error::Loss(LossError::InvalidWeight(_)) => EXIT_USAGE,
        Error::Data(_) | Error::Format(_) | Error::Loss(_) | Error::Tensor(_) => EXIT_DATA,
    }
}

/// Parses `args` and runs the command, writing regular output to `out`.
/// Returns the process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Score(a) => cmd_score(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Data(DataError::Io(e))
}

fn load_checkpoint_params(path: &Path) -> Result<ModelParams> {
    let ckpt = read_checkpoint(path).map_err(|source| DataError::File {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(ckpt.params)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if a.manifest.is_some() {
        cfg.manifest.clone_from(&a.manifest);
    }
    if a.features_dir.is_some() {
        cfg.features_dir.clone_from(&a.features_dir);
    }
    if a.annotations.is_some() {
        cfg.annotations.clone_from(&a.annotations);
    }
    if a.checkpoint.is_some() {
        cfg.checkpoint.clone_from(&a.checkpoint);
    }
    if a.out_dir.is_some() {
        cfg.out_dir.clone_from(&a.out_dir);
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let manifest_path = cfg
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("no manifest given (--manifest or `manifest` key)".into()))?;
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory given (--out-dir or `out_dir` key)".into()))?;
    std::fs::create_dir_all(&out_dir).map_err(io_err)?;
    let text = cfg.to_text();
    for line in text.lines() {
        log::info!("config {line}");
    }
    std::fs::write(out_dir.join("run_config.txt"), &text).map_err(io_err)?;

    let manifest = Manifest::load(&manifest_path, cfg.features_dir.as_deref(), cfg.model.classes)?;
    let annotations = cfg.annotations.as_deref().map(Annotations::load).transpose()?;
    let videos = load_videos(
        &manifest.split(Split::Train),
        cfg.model.segments,
        cfg.model.feature_dim,
        cfg.train.exec,
    )?;
    let params = match &cfg.checkpoint {
        Some(p) => {
            let params = load_checkpoint_params(p)?;
            if *params.config() != cfg.model {
                return Err(Error::Config(format!(
                    "checkpoint model {:?} differs from configured {:?}",
                    params.config(),
                    cfg.model
                )));
            }
            params
        }
        None => ModelParams::init(cfg.model, cfg.train.seed)?,
    };
    let outcome = train(params, &videos, annotations.as_ref(), &cfg.train, Some(&out_dir))?;
    if let Some(last) = outcome.log.last() {
        writeln!(
            out,
            "trained {} iterations; final loss {} (detection {}, classification {}, attention {})",
            last.iteration, last.loss.total, last.loss.detection, last.loss.classification, last.loss.attention
        )
        .map_err(io_err)?;
    }
    if let Some(p) = &outcome.final_checkpoint {
        writeln!(out, "checkpoint {}", p.display()).map_err(io_err)?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let params = load_checkpoint_params(&a.checkpoint)?;
    let cfg = *params.config();
    let manifest = Manifest::load(&a.manifest, a.features_dir.as_deref(), cfg.classes)?;
    let annotations = Annotations::load(&a.annotations)?;
    let exec = if a.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let videos = load_videos(&manifest.split(Split::Test), cfg.segments, cfg.feature_dim, exec)?;
    let report = evaluate(&params, &videos, &annotations, !a.exclude_normal, exec)?;
    write!(out, "{}", report.summary()).map_err(io_err)?;
    if let Some(dir) = &a.out_dir {
        let ReportFiles { summary, .. } = report.write(dir)?;
        writeln!(out, "report {}", summary.display()).map_err(io_err)?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_score(a: &ScoreArgs, out: &mut dyn Write) -> Result<i32> {
    let params = load_checkpoint_params(&a.checkpoint)?;
    let cfg = *params.config();
    let clips = load_features(&a.features).map_err(|source| DataError::File {
        path: a.features.clone(),
        source,
    })?;
    if clips.dim() != cfg.feature_dim {
        return Err(DataError::DimMismatch {
            what: a.features.display().to_string(),
            expected: cfg.feature_dim,
            found: clips.dim(),
        }
        .into());
    }
    let x = segment_pool(clips.matrix(), cfg.segments)?;
    let trace = model_forward(&x, &params)?;
    let mut text = String::from("segment,score,alpha,beta\n");
    for t in 0..cfg.segments {
        text.push_str(&format!(
            "{t},{},{},{}\n",
            trace.scores.data()[t],
            trace.alpha.data()[t],
            trace.beta.data()[t]
        ));
    }
    text.push_str("class,probability\n");
    for (c, p) in trace.probs.data().iter().enumerate() {
        text.push_str(&format!("{c},{p}\n"));
    }
    out.write_all(text.as_bytes()).map_err(io_err)?;
    Ok(EXIT_OK)
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let dataset = synth::generate(&a.spec())?;
    let files = dataset.write(&a.out_dir)?;
    writeln!(
        out,
        "wrote {} videos: {} {} {}",
        dataset.manifest.records.len(),
        files.manifest.display(),
        files.annotations.display(),
        files.spec.display()
    )
    .map_err(io_err)?;
    Ok(EXIT_OK)
}

const FAULT_OPS: [&str; 8] = ["matmul", "tanh", "sigmoid", "relu", "softmax", "l2_normalize", "max", "concat"];

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    if a.segments > 4 || a.feature_dim > 8 {
        return Err(Error::Config(format!(
            "gradcheck is meant for tiny models (segments <= 4, feature_dim <= 8), got {} and {}",
            a.segments, a.feature_dim
        )));
    }
    let fault = match &a.inject_fault {
        Some(op) => Some(
            *FAULT_OPS
                .iter()
                .find(|o| **o == op.as_str())
                .ok_or_else(|| Error::Config(format!("unknown fault op {op:?}")))?,
        ),
        None => None,
    };
    let model = ModelConfig {
        segments: a.segments,
        feature_dim: a.feature_dim,
        hidden: a.hidden,
        attn1_dim: a.attn1_dim,
        det_hidden: a.det_hidden,
        det_latent: a.det_latent,
        attn2_dim: a.attn2_dim,
        cls_hidden: a.cls_hidden,
        classes: a.classes,
        use_first_attention: true,
        use_second_attention: true,
    };
    let labels = (1..=a.classes).chain(std::iter::repeat_n(0, a.classes)).collect();
    let report = gradcheck(&GradcheckConfig {
        model,
        seed: a.seed,
        tolerance: a.tolerance,
        labels,
        fault,
        ..GradcheckConfig::default()
    })?;
    writeln!(out, "{report}").map_err(io_err)?;
    Ok(if report.passed() { EXIT_OK } else { EXIT_NUMERIC })
}
