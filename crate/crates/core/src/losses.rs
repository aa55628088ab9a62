//! Training objective: MIL ranking loss for detection, class-weighted
//! cross-entropy for classification, and the attention regularizer.
//!
//! Every loss is built on a [`Graph`] so it can be differentiated; the
//! `*_value` helpers evaluate the same code on plain tensors.

use crate::autodiff::{Graph, NodeId};
use crate::error::{LossError, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Temporal smoothness of anomaly-video scores.
    pub smooth: f64,
    /// Sparsity of anomaly-video scores.
    pub sparse: f64,
    /// Detection share of the joint objective; classification gets the rest.
    pub detection: f64,
    pub attention: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            smooth: 8e-5,
            sparse: 8e-5,
            detection: 0.9,
            attention: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.detection) {
            return Err(LossError::InvalidWeight(format!(
                "detection weight {} outside [0, 1]",
                self.detection
            )));
        }
        for (name, v) in [
            ("smooth", self.smooth),
            ("sparse", self.sparse),
            ("attention", self.attention),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::InvalidWeight(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// How anomaly and normal bags are compared in the ranking hinge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MilPairing {
    /// k-th anomaly video against k-th normal video, hinges averaged.
    #[default]
    Paired,
    /// One hinge between the batch-wide maxima.
    BatchMax,
}

/// Class frequencies over the training split, Normal (class 0) included.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    freqs: Vec<f64>,
}

impl ClassWeights {
    pub fn from_frequencies(freqs: Vec<f64>) -> Self {
        Self { freqs }
    }

    /// All classes equally frequent.
    pub fn uniform(outputs: usize) -> Self {
        Self {
            freqs: vec![1.0 / outputs as f64; outputs],
        }
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freqs
    }

    /// Loss weight `1 - f_i`.
    pub fn weight(&self, class: usize) -> f64 {
        1.0 - self.freqs[class]
    }

    pub fn outputs(&self) -> usize {
        self.freqs.len()
    }
}

/// Frequencies of `labels` over `outputs` classes. Every class needs at
/// least one sample.
pub fn compute_class_weights(
    labels: impl IntoIterator<Item = usize>,
    outputs: usize,
) -> Result<ClassWeights> {
    let mut counts = vec![0usize; outputs];
    let mut total = 0usize;
    for l in labels {
        if l >= outputs {
            return Err(LossError::LabelOutOfRange { label: l, outputs }.into());
        }
        counts[l] += 1;
        total += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(crate::error::DataError::EmptyClass(empty).into());
    }
    Ok(ClassWeights {
        freqs: counts.iter().map(|&c| c as f64 / total as f64).collect(),
    })
}

fn mean_of(g: &mut Graph, scalars: &[NodeId]) -> Result<NodeId> {
    let all = g.concat(scalars, 0)?;
    Ok(g.mean(all, None)?)
}

fn sum_of(g: &mut Graph, scalars: &[NodeId]) -> Result<NodeId> {
    let all = g.concat(scalars, 0)?;
    Ok(g.sum(all, None)?)
}

/// Ranking hinge plus smoothness and sparsity on anomaly-video scores.
///
/// Smoothness differences stay within each video; both regularizers are
/// summed over anomaly videos, the hinge is averaged over pairs.
pub fn mil_ranking_loss(
    g: &mut Graph,
    anomaly: &[NodeId],
    normal: &[NodeId],
    smooth: f64,
    sparse: f64,
    pairing: MilPairing,
) -> Result<NodeId> {
    if anomaly.is_empty() || normal.is_empty() {
        return Err(LossError::EmptyBatch.into());
    }
    let hinge = match pairing {
        MilPairing::Paired => {
            if anomaly.len() != normal.len() {
                return Err(LossError::Unpaired {
                    anomaly: anomaly.len(),
                    normal: normal.len(),
                }
                .into());
            }
            let mut hinges = Vec::with_capacity(anomaly.len());
            for (&a, &n) in anomaly.iter().zip(normal) {
                hinges.push(hinge_term(g, a, n)?);
            }
            mean_of(g, &hinges)?
        }
        MilPairing::BatchMax => {
            let a = g.concat(anomaly, 0)?;
            let n = g.concat(normal, 0)?;
            hinge_term(g, a, n)?
        }
    };

    let mut regular = Vec::with_capacity(anomaly.len() * 2);
    for &a in anomaly {
        let len = g.shape(a)[0];
        if len > 1 && smooth != 0.0 {
            let head = g.slice(a, 0, 0, len - 1)?;
            let tail = g.slice(a, 0, 1, len - 1)?;
            let diff = g.sub(head, tail)?;
            let sq = g.square(diff)?;
            let s = g.sum(sq, None)?;
            regular.push(g.scale(s, smooth)?);
        }
        if sparse != 0.0 {
            let s = g.sum(a, None)?;
            regular.push(g.scale(s, sparse)?);
        }
    }
    if regular.is_empty() {
        return Ok(hinge);
    }
    let reg = sum_of(g, &regular)?;
    Ok(g.add(hinge, reg)?)
}

/// `max(0, 1 - max(a) + max(n))`
fn hinge_term(g: &mut Graph, a: NodeId, n: NodeId) -> Result<NodeId> {
    let ma = g.max(a, None)?;
    let mn = g.max(n, None)?;
    let gap = g.sub(mn, ma)?;
    let margin = g.add_scalar(gap, 1.0)?;
    Ok(g.relu(margin)?)
}

/// Mean over videos of `-(1 - f_y) · ln ŷ_y`.
pub fn classification_loss(
    g: &mut Graph,
    probs: &[NodeId],
    labels: &[usize],
    weights: &ClassWeights,
) -> Result<NodeId> {
    if probs.is_empty() {
        return Err(LossError::EmptyBatch.into());
    }
    assert_eq!(probs.len(), labels.len(), "one label per video");
    let mut terms = Vec::with_capacity(probs.len());
    for (&p, &y) in probs.iter().zip(labels) {
        let outputs = g.shape(p)[0];
        if y >= outputs || y >= weights.outputs() {
            return Err(LossError::LabelOutOfRange { label: y, outputs }.into());
        }
        let py = g.slice(p, 0, y, 1)?;
        let log_py = g.log_clamped(py, PROB_FLOOR)?;
        terms.push(g.scale(log_py, -weights.weight(y))?);
    }
    mean_of(g, &terms)
}

/// Mean over videos of `Σ_j (1 - α_j)² + ‖β‖₂`.
pub fn attention_regularizer(g: &mut Graph, alphas: &[NodeId], betas: &[NodeId]) -> Result<NodeId> {
    if alphas.is_empty() {
        return Err(LossError::EmptyBatch.into());
    }
    assert_eq!(alphas.len(), betas.len(), "one β per α");
    let mut terms = Vec::with_capacity(alphas.len());
    for (&a, &b) in alphas.iter().zip(betas) {
        let (la, lb) = (g.shape(a)[0], g.shape(b)[0]);
        if la != lb {
            return Err(LossError::LengthMismatch { alpha: la, beta: lb }.into());
        }
        let neg = g.scale(a, -1.0)?;
        let gap = g.add_scalar(neg, 1.0)?;
        let sq = g.square(gap)?;
        let alpha_term = g.sum(sq, None)?;
        let beta_term = g.norm2(b)?;
        terms.push(g.add(alpha_term, beta_term)?);
    }
    mean_of(g, &terms)
}

/// Per-video network outputs on a loss graph.
#[derive(Debug, Clone, Copy)]
pub struct VideoOutputs {
    pub scores: NodeId,
    pub probs: NodeId,
    pub alpha: NodeId,
    pub beta: NodeId,
    /// 0 = Normal, 1..=C anomaly classes.
    pub label: usize,
}

/// Node ids of the joint objective and its three components.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: NodeId,
    pub detection: NodeId,
    pub classification: NodeId,
    pub attention: NodeId,
}

/// `λ_d·L_D + (1 − λ_d)·L_C + λ_att·L_att` over a batch.
///
/// Anomaly and normal videos are paired in batch order for the ranking
/// hinge; classification and attention terms average over every video.
pub fn total_loss(
    g: &mut Graph,
    batch: &[VideoOutputs],
    weights: &LossWeights,
    class_weights: &ClassWeights,
    pairing: MilPairing,
) -> Result<LossTerms> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(LossError::EmptyBatch.into());
    }
    let anomaly: Vec<NodeId> = batch.iter().filter(|v| v.label != 0).map(|v| v.scores).collect();
    let normal: Vec<NodeId> = batch.iter().filter(|v| v.label == 0).map(|v| v.scores).collect();
    if anomaly.is_empty() {
        return Err(LossError::MissingPolarity("anomaly").into());
    }
    if normal.is_empty() {
        return Err(LossError::MissingPolarity("normal").into());
    }
    let detection = mil_ranking_loss(g, &anomaly, &normal, weights.smooth, weights.sparse, pairing)?;
    let probs: Vec<NodeId> = batch.iter().map(|v| v.probs).collect();
    let labels: Vec<usize> = batch.iter().map(|v| v.label).collect();
    let classification = classification_loss(g, &probs, &labels, class_weights)?;
    let alphas: Vec<NodeId> = batch.iter().map(|v| v.alpha).collect();
    let betas: Vec<NodeId> = batch.iter().map(|v| v.beta).collect();
    let attention = attention_regularizer(g, &alphas, &betas)?;

    let d = g.scale(detection, weights.detection)?;
    let c = g.scale(classification, 1.0 - weights.detection)?;
    let a = g.scale(attention, weights.attention)?;
    let dc = g.add(d, c)?;
    let total = g.add(dc, a)?;
    Ok(LossTerms {
        total,
        detection,
        classification,
        attention,
    })
}

fn consts(g: &mut Graph, ts: &[Tensor]) -> Vec<NodeId> {
    ts.iter().map(|t| g.constant(t.clone())).collect()
}

pub fn mil_ranking_loss_value(
    anomaly: &[Tensor],
    normal: &[Tensor],
    smooth: f64,
    sparse: f64,
    pairing: MilPairing,
) -> Result<f64> {
    let mut g = Graph::new();
    let (a, n) = (consts(&mut g, anomaly), consts(&mut g, normal));
    let l = mil_ranking_loss(&mut g, &a, &n, smooth, sparse, pairing)?;
    Ok(g.value(l).item())
}

pub fn classification_loss_value(probs: &[Tensor], labels: &[usize], weights: &ClassWeights) -> Result<f64> {
    let mut g = Graph::new();
    let p = consts(&mut g, probs);
    let l = classification_loss(&mut g, &p, labels, weights)?;
    Ok(g.value(l).item())
}

pub fn attention_regularizer_value(alphas: &[Tensor], betas: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (consts(&mut g, alphas), consts(&mut g, betas));
    let l = attention_regularizer(&mut g, &a, &b)?;
    Ok(g.value(l).item())
}
