//! Joint training loop.
//!
//! A batch gradient is computed in two stages. Every video gets its own
//! graph, built and differentiated independently (in parallel when enabled).
//! A small loss graph takes the per-video outputs as leaves; its gradients
//! seed the backward pass of each video graph. Per-video parameter
//! gradients are then summed in batch order, so the result does not depend
//! on how the videos were scheduled.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::data::{Annotations, BatchSampler, Video};
use crate::error::{DataError, Error, Result};
use crate::eval::{classify_videos, evaluate, score_video};
use crate::losses::{compute_class_weights, total_loss, ClassWeights, LossWeights, MilPairing, VideoOutputs};
use crate::model::{forward_graph, write_checkpoint, Checkpoint, ModelParams, TraceNodes};
use crate::optimizer::{AdamConfig, AdamState};
use crate::parallel::{map_indexed, Execution};
use crate::tensor::Tensor;

/// Scalar values of the loss components for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub detection: f64,
    pub classification: f64,
    pub attention: f64,
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.detection.is_finite() && self.classification.is_finite() && self.attention.is_finite()
    }
}

/// Loss and parameter gradients (in storage order) for one batch.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: LossValues,
    pub grads: Vec<Tensor>,
}

/// Objective settings shared by training and gradient checking.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub class_weights: ClassWeights,
    pub pairing: MilPairing,
}

struct VideoGraph {
    graph: Graph,
    nodes: TraceNodes,
}

fn video_graph(features: &Tensor, params: &ModelParams, fault: Option<&'static str>) -> Result<VideoGraph> {
    let mut graph = Graph::new();
    if let Some(op) = fault {
        graph.inject_backward_fault(op);
    }
    let bound = params.bind(&mut graph);
    let x = graph.constant(features.clone());
    let nodes = forward_graph(&mut graph, &bound, params.config(), x)?;
    Ok(VideoGraph { graph, nodes })
}

/// Loss values and gradients over `inputs`: one T×n matrix and label per
/// video. Anomaly and normal videos are paired in the order given.
pub fn batch_gradient(
    params: &ModelParams,
    inputs: &[(&Tensor, usize)],
    objective: &Objective,
    exec: Execution,
) -> Result<BatchGradient> {
    batch_gradient_with_fault(params, inputs, objective, exec, None)
}

/// [`batch_gradient`] with a deliberately corrupted backward for `fault`
/// ops in the video graphs; used to check that gradient checking notices.
pub(crate) fn batch_gradient_with_fault(
    params: &ModelParams,
    inputs: &[(&Tensor, usize)],
    objective: &Objective,
    exec: Execution,
    fault: Option<&'static str>,
) -> Result<BatchGradient> {
    let graphs: Vec<VideoGraph> = map_indexed(exec, inputs.len(), |i| video_graph(inputs[i].0, params, fault))
        .into_iter()
        .collect::<Result<_>>()?;

    let mut lg = Graph::new();
    let leaves: Vec<VideoOutputs> = graphs
        .iter()
        .zip(inputs)
        .map(|(vg, &(_, label))| VideoOutputs {
            scores: lg.param(vg.graph.value_arc(vg.nodes.scores)),
            probs: lg.param(vg.graph.value_arc(vg.nodes.probs)),
            alpha: lg.param(vg.graph.value_arc(vg.nodes.alpha)),
            beta: lg.param(vg.graph.value_arc(vg.nodes.beta)),
            label,
        })
        .collect();
    let terms = total_loss(&mut lg, &leaves, &objective.weights, &objective.class_weights, objective.pairing)?;
    let loss = LossValues {
        total: lg.value(terms.total).item(),
        detection: lg.value(terms.detection).item(),
        classification: lg.value(terms.classification).item(),
        attention: lg.value(terms.attention).item(),
    };
    let seeds = lg.backward(terms.total)?;

    let per_video: Vec<Vec<Tensor>> = map_indexed(exec, graphs.len(), |i| {
        let (vg, leaf) = (&graphs[i], &leaves[i]);
        let grad = |id| seeds.get(id).expect("loss leaf").clone();
        let n = vg.nodes;
        vg.graph
            .backward_from(vec![
                (n.scores, grad(leaf.scores)),
                (n.probs, grad(leaf.probs)),
                (n.alpha, grad(leaf.alpha)),
                (n.beta, grad(leaf.beta)),
            ])
            .map(|g| g.into_vec())
    })
    .into_iter()
    .collect::<Result<_, _>>()?;

    let mut grads: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    for video in &per_video {
        for (acc, g) in grads.iter_mut().zip(video) {
            acc.add_assign(g);
        }
    }
    Ok(BatchGradient { loss, grads })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub anomaly_per_batch: usize,
    pub normal_per_batch: usize,
    pub weights: LossWeights,
    pub pairing: MilPairing,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0 = only the final one).
    pub checkpoint_every: usize,
    /// Held-out evaluation cadence in iterations (0 = never).
    pub eval_every: usize,
    /// Share of each polarity of the training split held out for evaluation
    /// when `eval_every > 0`.
    pub holdout_fraction: f64,
    pub include_normal_in_maa: bool,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 8000,
            anomaly_per_batch: 30,
            normal_per_batch: 30,
            weights: LossWeights::default(),
            pairing: MilPairing::Paired,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 1000,
            eval_every: 500,
            holdout_fraction: 0.1,
            include_normal_in_maa: true,
            exec: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub loss: LossValues,
}

/// Held-out metrics recorded during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoldoutEntry {
    pub iteration: usize,
    pub mean_accuracy: f64,
    /// Present when every held-out anomaly video is annotated.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub optimizer: AdamState,
    pub log: Vec<LogEntry>,
    pub holdout: Vec<HoldoutEntry>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Splits off a deterministic held-out slice per polarity.
fn split_holdout(videos: &[Video], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_401d);
    let mut train = Vec::new();
    let mut held = Vec::new();
    for anomaly in [true, false] {
        let mut idx: Vec<usize> = (0..videos.len())
            .filter(|&i| videos[i].record.is_anomaly() == anomaly)
            .collect();
        idx.shuffle(&mut rng);
        let k = (fraction * idx.len() as f64).round() as usize;
        held.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

fn holdout_metrics(
    params: &ModelParams,
    videos: &[Video],
    annotations: Option<&Annotations>,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<HoldoutEntry> {
    let annotated = annotations.filter(|a| {
        videos
            .iter()
            .filter(|v| v.record.is_anomaly())
            .all(|v| a.get(&v.record.video_id).is_some())
    });
    if let Some(a) = annotated {
        let report = evaluate(params, videos, a, cfg.include_normal_in_maa, cfg.exec)?;
        return Ok(HoldoutEntry {
            iteration,
            mean_accuracy: report.mean_accuracy(),
            auc: Some(report.auc()),
        });
    }
    let predicted = map_indexed(cfg.exec, videos.len(), |i| {
        score_video(&videos[i], params).map(|s| crate::model::forward::argmax(s.probs.data()))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = videos.iter().map(Video::label).collect();
    let c = classify_videos(&predicted, &labels, params.config().outputs(), cfg.include_normal_in_maa)?;
    Ok(HoldoutEntry {
        iteration,
        mean_accuracy: c.mean_accuracy,
        auc: None,
    })
}

/// Trains from `params` on `videos` (training split, first view of each).
///
/// With `out_dir`, writes `checkpoint-<iter>.ckpt` periodically,
/// `final.ckpt` at the end and `train_log.csv`. A non-finite loss or
/// gradient stops training with an error and leaves earlier checkpoints
/// untouched.
pub fn train(
    mut params: ModelParams,
    videos: &[Video],
    annotations: Option<&Annotations>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.weights.validate()?;
    let outputs = params.config().outputs();
    for v in videos {
        if v.views.is_empty() {
            return Err(DataError::Invalid(format!("video {} has no features", v.record.video_id)).into());
        }
        let (t, n) = v.views[0].dims2();
        let mc = params.config();
        if (t, n) != (mc.segments, mc.feature_dim) {
            return Err(DataError::Invalid(format!(
                "video {} has {t}x{n} segment features, model expects {}x{}",
                v.record.video_id, mc.segments, mc.feature_dim
            ))
            .into());
        }
    }
    let (train_idx, held_idx) = if cfg.eval_every > 0 {
        split_holdout(videos, cfg.holdout_fraction, cfg.seed)
    } else {
        ((0..videos.len()).collect(), Vec::new())
    };
    let held: Vec<Video> = held_idx.iter().map(|&i| videos[i].clone()).collect();
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| videos[i].label()).collect();
    let objective = Objective {
        weights: cfg.weights,
        class_weights: compute_class_weights(train_labels.iter().copied(), outputs)?,
        pairing: cfg.pairing,
    };
    let mut sampler = BatchSampler::new(&train_labels, cfg.anomaly_per_batch, cfg.normal_per_batch, cfg.seed.wrapping_add(1))?;
    let mut adam = AdamState::for_model(cfg.adam, &params);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(DataError::Io)?;
    }

    let mut log = Vec::with_capacity(cfg.iterations);
    let mut holdout = Vec::new();
    for it in 1..=cfg.iterations {
        let batch = sampler.sample();
        let inputs: Vec<(&Tensor, usize)> = batch
            .all()
            .map(|b| {
                let v = &videos[train_idx[b]];
                (&v.views[0], v.label())
            })
            .collect();
        let step = batch_gradient(&params, &inputs, &objective, cfg.exec)?;
        if !step.loss.is_finite() {
            if let Some(dir) = out_dir {
                write_log(dir, &log)?;
            }
            return Err(Error::NonFiniteLoss(it));
        }
        adam.step_model(&mut params, &step.grads)?;
        let l = step.loss;
        log::info!(
            "iter {it} total {:.6} detection {:.6} classification {:.6} attention {:.6}",
            l.total,
            l.detection,
            l.classification,
            l.attention
        );
        log.push(LogEntry { iteration: it, loss: l });

        if cfg.eval_every > 0 && it % cfg.eval_every == 0 && !held.is_empty() {
            let entry = holdout_metrics(&params, &held, annotations, cfg, it)?;
            log::info!("iter {it} held-out mAA {:.4} AUC {:?}", entry.mean_accuracy, entry.auc);
            holdout.push(entry);
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && it != cfg.iterations {
                save(dir.join(format!("checkpoint-{it}.ckpt")), &params, &adam)?;
            }
        }
    }

    let final_checkpoint = match out_dir {
        Some(dir) => {
            write_log(dir, &log)?;
            let path = dir.join("final.ckpt");
            save(path.clone(), &params, &adam)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        params,
        optimizer: adam,
        log,
        holdout,
        final_checkpoint,
    })
}

fn save(path: PathBuf, params: &ModelParams, adam: &AdamState) -> Result<()> {
    let ckpt = Checkpoint {
        params: params.clone(),
        optimizer: Some(adam.clone()),
    };
    write_checkpoint(&path, &ckpt).map_err(|source| DataError::File { path, source })?;
    Ok(())
}

fn write_log(dir: &Path, log: &[LogEntry]) -> Result<()> {
    let mut out = String::from("iteration,total,detection,classification,attention\n");
    for e in log {
        let l = e.loss;
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.iteration, l.total, l.detection, l.classification, l.attention
        ));
    }
    let mut f = std::fs::File::create(dir.join("train_log.csv")).map_err(DataError::Io)?;
    f.write_all(out.as_bytes()).map_err(DataError::Io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ParamGroup, ParamKey};
    use rand::Rng;

    fn random_batch(cfg: &ModelConfig, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = vec![1, 2, 0, 0];
        let xs = labels
            .iter()
            .map(|_| {
                let n = cfg.segments * cfg.feature_dim;
                Tensor::new(
                    vec![cfg.segments, cfg.feature_dim],
                    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        (xs, labels)
    }

    fn objective(outputs: usize) -> Objective {
        Objective {
            weights: LossWeights::default(),
            class_weights: ClassWeights::uniform(outputs),
            pairing: MilPairing::Paired,
        }
    }

    #[test]
    fn staged_gradient_matches_single_graph() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(cfg, 4).unwrap();
        let (xs, labels) = random_batch(&cfg, 8);
        let inputs: Vec<(&Tensor, usize)> = xs.iter().zip(labels.iter().copied()).collect();
        let obj = objective(cfg.outputs());
        let staged = batch_gradient(&params, &inputs, &obj, Execution::Sequential).unwrap();

        // the same objective as one graph over the whole batch
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let outs: Vec<VideoOutputs> = inputs
            .iter()
            .map(|&(x, label)| {
                let xn = g.constant(x.clone());
                let n = forward_graph(&mut g, &bound, &cfg, xn).unwrap();
                VideoOutputs {
                    scores: n.scores,
                    probs: n.probs,
                    alpha: n.alpha,
                    beta: n.beta,
                    label,
                }
            })
            .collect();
        let terms = total_loss(&mut g, &outs, &obj.weights, &obj.class_weights, obj.pairing).unwrap();
        assert!((g.value(terms.total).item() - staged.loss.total).abs() < 1e-14);
        let whole = g.backward(terms.total).unwrap();
        for (a, b) in whole.as_slice().iter().zip(&staged.grads) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn execution_modes_are_bit_identical() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(cfg, 1).unwrap();
        let (xs, labels) = random_batch(&cfg, 2);
        let inputs: Vec<(&Tensor, usize)> = xs.iter().zip(labels.iter().copied()).collect();
        let obj = objective(cfg.outputs());
        let a = batch_gradient(&params, &inputs, &obj, Execution::Sequential).unwrap();
        let b = batch_gradient(&params, &inputs, &obj, Execution::Parallel).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn every_group_gets_gradient() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(cfg, 3).unwrap();
        let (xs, labels) = random_batch(&cfg, 5);
        let inputs: Vec<(&Tensor, usize)> = xs.iter().zip(labels.iter().copied()).collect();
        let step = batch_gradient(&params, &inputs, &objective(cfg.outputs()), Execution::Parallel).unwrap();
        for group in ParamGroup::ALL {
            let norm: f64 = ParamKey::ALL
                .iter()
                .filter(|k| k.group() == group)
                .map(|k| step.grads[k.index()].norm().powi(2))
                .sum();
            assert!(norm > 0.0, "group {} has zero gradient", group.name());
        }
    }

    #[test]
    fn pure_detection_weight_leaves_classifier_untouched() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(cfg, 3).unwrap();
        let (xs, labels) = random_batch(&cfg, 5);
        let inputs: Vec<(&Tensor, usize)> = xs.iter().zip(labels.iter().copied()).collect();
        let mut obj = objective(cfg.outputs());
        obj.weights.detection = 1.0;
        obj.weights.attention = 0.0;
        let step = batch_gradient(&params, &inputs, &obj, Execution::Sequential).unwrap();
        assert!(step.loss.classification > 0.0);
        for k in ParamKey::ALL.iter().filter(|k| k.group() == ParamGroup::Cls) {
            assert_eq!(step.grads[k.index()].max_abs(), 0.0);
        }
    }
}
