//! Run configuration: a flat `key = value` file.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and repeated
//! keys are errors. [`RunConfig::to_text`] writes every key, and parsing that
//! text gives back the same config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, MilPairing};
use crate::model::ModelConfig;
use crate::optimizer::AdamConfig;
use crate::parallel::Execution;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub manifest: Option<PathBuf>,
    pub features_dir: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

fn cfg_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| cfg_err(line, format!("{key} = {v:?}: {e}")))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or(String::new(), |p| p.display().to_string())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let (key, value) = l
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| cfg_err(line, format!("expected `key = value`, got {l:?}")))?;
            if !seen.insert(key.to_string()) {
                return Err(cfg_err(line, format!("{key} set twice")));
            }
            c.set(line, key, value)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "segments" => m.segments = parse_num(line, key, v)?,
            "feature_dim" => m.feature_dim = parse_num(line, key, v)?,
            "hidden" => m.hidden = parse_num(line, key, v)?,
            "attn1_dim" => m.attn1_dim = parse_num(line, key, v)?,
            "det_hidden" => m.det_hidden = parse_num(line, key, v)?,
            "det_latent" => m.det_latent = parse_num(line, key, v)?,
            "attn2_dim" => m.attn2_dim = parse_num(line, key, v)?,
            "cls_hidden" => m.cls_hidden = parse_num(line, key, v)?,
            "classes" => m.classes = parse_num(line, key, v)?,
            "use_first_attention" => m.use_first_attention = parse_num(line, key, v)?,
            "use_second_attention" => m.use_second_attention = parse_num(line, key, v)?,
            "lambda_smooth" => t.weights.smooth = parse_num(line, key, v)?,
            "lambda_sparse" => t.weights.sparse = parse_num(line, key, v)?,
            "lambda_detection" => t.weights.detection = parse_num(line, key, v)?,
            "lambda_attention" => t.weights.attention = parse_num(line, key, v)?,
            "mil_pairing" => {
                t.pairing = match v {
                    "paired" => MilPairing::Paired,
                    "batch_max" => MilPairing::BatchMax,
                    _ => return Err(cfg_err(line, format!("mil_pairing must be paired or batch_max, got {v:?}"))),
                }
            }
            "lr" => t.adam.lr = parse_num(line, key, v)?,
            "beta1" => t.adam.beta1 = parse_num(line, key, v)?,
            "beta2" => t.adam.beta2 = parse_num(line, key, v)?,
            "adam_eps" => t.adam.eps = parse_num(line, key, v)?,
            "clip_norm" => t.adam.clip_norm = if v == "none" { None } else { Some(parse_num(line, key, v)?) },
            "anomaly_per_batch" => t.anomaly_per_batch = parse_num(line, key, v)?,
            "normal_per_batch" => t.normal_per_batch = parse_num(line, key, v)?,
            "iterations" => t.iterations = parse_num(line, key, v)?,
            "seed" => t.seed = parse_num(line, key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse_num(line, key, v)?,
            "eval_every" => t.eval_every = parse_num(line, key, v)?,
            "holdout_fraction" => t.holdout_fraction = parse_num(line, key, v)?,
            "include_normal_in_maa" => t.include_normal_in_maa = parse_num(line, key, v)?,
            "parallel" => {
                t.exec = if parse_num::<bool>(line, key, v)? {
                    Execution::Parallel
                } else {
                    Execution::Sequential
                }
            }
            "manifest" => self.manifest = path(v),
            "features_dir" => self.features_dir = path(v),
            "annotations" => self.annotations = path(v),
            "out_dir" => self.out_dir = path(v),
            "checkpoint" => self.checkpoint = path(v),
            _ => return Err(cfg_err(line, format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.weights.validate()?;
        let a = &self.train.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {a:?}")));
        }
        if !(0.0..1.0).contains(&self.train.holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout_fraction {} outside [0, 1)",
                self.train.holdout_fraction
            )));
        }
        Ok(())
    }

    /// Every key with its value, in the order [`RunConfig::parse`] accepts.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let LossWeights {
            smooth,
            sparse,
            detection,
            attention,
        } = t.weights;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            clip_norm,
        } = t.adam;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("segments", m.segments.to_string());
        kv("feature_dim", m.feature_dim.to_string());
        kv("hidden", m.hidden.to_string());
        kv("attn1_dim", m.attn1_dim.to_string());
        kv("det_hidden", m.det_hidden.to_string());
        kv("det_latent", m.det_latent.to_string());
        kv("attn2_dim", m.attn2_dim.to_string());
        kv("cls_hidden", m.cls_hidden.to_string());
        kv("classes", m.classes.to_string());
        kv("use_first_attention", m.use_first_attention.to_string());
        kv("use_second_attention", m.use_second_attention.to_string());
        kv("lambda_smooth", smooth.to_string());
        kv("lambda_sparse", sparse.to_string());
        kv("lambda_detection", detection.to_string());
        kv("lambda_attention", attention.to_string());
        kv(
            "mil_pairing",
            match t.pairing {
                MilPairing::Paired => "paired",
                MilPairing::BatchMax => "batch_max",
            }
            .into(),
        );
        kv("lr", lr.to_string());
        kv("beta1", beta1.to_string());
        kv("beta2", beta2.to_string());
        kv("adam_eps", eps.to_string());
        kv("clip_norm", clip_norm.map_or("none".into(), |c| c.to_string()));
        kv("anomaly_per_batch", t.anomaly_per_batch.to_string());
        kv("normal_per_batch", t.normal_per_batch.to_string());
        kv("iterations", t.iterations.to_string());
        kv("seed", t.seed.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("holdout_fraction", t.holdout_fraction.to_string());
        kv("include_normal_in_maa", t.include_normal_in_maa.to_string());
        kv("parallel", (t.exec == Execution::Parallel).to_string());
        kv("manifest", path_text(&self.manifest));
        kv("features_dir", path_text(&self.features_dir));
        kv("annotations", path_text(&self.annotations));
        kv("out_dir", path_text(&self.out_dir));
        kv("checkpoint", path_text(&self.checkpoint));
        s
    }
}
