//! Central finite-difference check of the full batch gradient.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::Result;
use crate::losses::{total_loss, ClassWeights, LossWeights, MilPairing, VideoOutputs};
use crate::model::{model_forward, ModelConfig, ModelParams, ParamGroup, ParamKey};
use crate::parallel::Execution;
use crate::tensor::Tensor;
use crate::train::{batch_gradient_with_fault, Objective};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Magnitudes below this are compared absolutely rather than relatively.
    pub floor: f64,
    /// Class of every video in the check batch (0 = Normal).
    pub labels: Vec<usize>,
    /// Loss weights large enough that every term moves the gradient.
    pub weights: LossWeights,
    pub pairing: MilPairing,
    /// Biases are redrawn uniformly in `±bias_jitter` after init so that no
    /// ReLU input sits exactly on its kink (zero bias on an all-zero row).
    pub bias_jitter: f64,
    /// Corrupt the backward of this op (negative control).
    pub fault: Option<&'static str>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            labels: vec![1, 2, 0, 0],
            weights: LossWeights {
                smooth: 0.1,
                sparse: 0.1,
                detection: 0.5,
                attention: 0.1,
            },
            pairing: MilPairing::Paired,
            bias_jitter: 0.1,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub key: ParamKey,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn group_error(&self, group: ParamGroup) -> f64 {
        self.tensors
            .iter()
            .filter(|t| t.key.group() == group)
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < self.tolerance)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<20} {:>12} {:>12} {:>12}  status", "tensor", "grad_norm", "max_abs", "max_rel")?;
        for t in &self.tensors {
            let status = if t.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<20} {:>12.4e} {:>12.4e} {:>12.4e}  {status}",
                t.key.name(),
                t.grad_norm,
                t.max_abs_error,
                t.max_rel_error
            )?;
        }
        for g in ParamGroup::ALL {
            writeln!(f, "group {:<6} max_rel {:.4e}", g.name(), self.group_error(g))?;
        }
        write!(
            f,
            "overall max_rel {:.4e} tolerance {:.1e}: {}",
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "pass" } else { "fail" }
        )
    }
}

fn loss_value(params: &ModelParams, inputs: &[(Tensor, usize)], objective: &Objective) -> Result<f64> {
    let mut g = Graph::new();
    let mut outs = Vec::with_capacity(inputs.len());
    for (x, label) in inputs {
        let t = model_forward(x, params)?;
        outs.push(VideoOutputs {
            scores: g.constant(t.scores),
            probs: g.constant(t.probs),
            alpha: g.constant(t.alpha),
            beta: g.constant(t.beta),
            label: *label,
        });
    }
    let terms = total_loss(&mut g, &outs, &objective.weights, &objective.class_weights, objective.pairing)?;
    Ok(g.value(terms.total).item())
}

/// Compares the analytic gradient of the joint loss on a random batch with
/// central differences, entry by entry for every parameter tensor.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let m = cfg.model;
    m.validate()?;
    let mut params = ModelParams::init(m, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    if cfg.bias_jitter > 0.0 {
        for key in ParamKey::ALL.into_iter().filter(|k| k.is_bias()) {
            for b in params.get_mut(key).data_mut() {
                *b = rng.random_range(-cfg.bias_jitter..cfg.bias_jitter);
            }
        }
    }
    let inputs: Vec<(Tensor, usize)> = cfg
        .labels
        .iter()
        .map(|&label| {
            let data = (0..m.segments * m.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            (Tensor::new(vec![m.segments, m.feature_dim], data).expect("input shape"), label)
        })
        .collect();
    let objective = Objective {
        weights: cfg.weights,
        class_weights: ClassWeights::uniform(m.outputs()),
        pairing: cfg.pairing,
    };
    let refs: Vec<(&Tensor, usize)> = inputs.iter().map(|(x, l)| (x, *l)).collect();
    let analytic = batch_gradient_with_fault(&params, &refs, &objective, Execution::Sequential, cfg.fault)?.grads;

    let mut tensors = Vec::with_capacity(ParamKey::ALL.len());
    for key in ParamKey::ALL {
        let grad = &analytic[key.index()];
        let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
        for j in 0..grad.len() {
            let orig = params.get(key).data()[j];
            params.get_mut(key).data_mut()[j] = orig + cfg.step;
            let plus = loss_value(&params, &inputs, &objective)?;
            params.get_mut(key).data_mut()[j] = orig - cfg.step;
            let minus = loss_value(&params, &inputs, &objective)?;
            params.get_mut(key).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.data()[j];
            let err = (a - numeric).abs();
            max_abs = max_abs.max(err);
            max_rel = max_rel.max(err / a.abs().max(numeric.abs()).max(cfg.floor));
        }
        tensors.push(TensorCheck {
            key,
            max_abs_error: max_abs,
            max_rel_error: max_rel,
            grad_norm: grad.norm(),
        });
    }
    Ok(GradcheckReport {
        tensors,
        tolerance: cfg.tolerance,
    })
}
