use crate::autodiff::{Graph, NodeId};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

use super::{BoundParams, ModelConfig, ModelParams, ParamKey};

type OpResult = Result<NodeId, TensorError>;

fn expect_shape(g: &Graph, id: NodeId, shape: &[usize], op: &'static str) -> Result<(), TensorError> {
    if g.shape(id) != shape {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: g.shape(id).to_vec(),
            rhs: shape.to_vec(),
        });
    }
    Ok(())
}

/// `x · W + b` applied to every row of `x`.
fn dense(g: &mut Graph, p: &BoundParams, x: NodeId, w: ParamKey, b: ParamKey) -> OpResult {
    let xw = g.matmul(x, p.id(w))?;
    g.add_row(xw, p.id(b))
}

/// Many-to-many LSTM over the rows of `features` (T×n), zero initial state.
/// Returns the stacked hidden states (T×n_h).
pub fn lstm_forward(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    features: NodeId,
) -> OpResult {
    let (t_len, n, nh) = (cfg.segments, cfg.feature_dim, cfg.hidden);
    expect_shape(g, features, &[t_len, n], "lstm_forward")?;

    // Each gate acts on [F_t ; h_{t-1}]; split its weight into the input rows
    // and the recurrent rows so the input part is one T×n matmul.
    let gates = [
        (ParamKey::LstmInputW, ParamKey::LstmInputB),
        (ParamKey::LstmForgetW, ParamKey::LstmForgetB),
        (ParamKey::LstmCellW, ParamKey::LstmCellB),
        (ParamKey::LstmOutputW, ParamKey::LstmOutputB),
    ];
    let mut input_part = [features; 4];
    let mut recurrent_w = [features; 4];
    for (slot, &(w, b)) in gates.iter().enumerate() {
        let wx = g.slice(p.id(w), 0, 0, n)?;
        recurrent_w[slot] = g.slice(p.id(w), 0, n, nh)?;
        let xw = g.matmul(features, wx)?;
        input_part[slot] = g.add_row(xw, p.id(b))?;
    }

    let mut hidden: Option<NodeId> = None;
    let mut cell: Option<NodeId> = None;
    let mut outputs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut pre = [features; 4];
        for slot in 0..4 {
            let x_t = g.slice(input_part[slot], 0, t, 1)?;
            pre[slot] = match hidden {
                Some(h) => {
                    let hw = g.matmul(h, recurrent_w[slot])?;
                    g.add(x_t, hw)?
                }
                None => x_t,
            };
        }
        let i = g.sigmoid(pre[0])?;
        let f = g.sigmoid(pre[1])?;
        let c_hat = g.tanh(pre[2])?;
        let o = g.sigmoid(pre[3])?;
        let write = g.hadamard(i, c_hat)?;
        let c = match cell {
            Some(prev) => {
                let keep = g.hadamard(f, prev)?;
                g.add(keep, write)?
            }
            None => write,
        };
        let squashed = g.tanh(c)?;
        let h = g.hadamard(o, squashed)?;
        outputs.push(h);
        hidden = Some(h);
        cell = Some(c);
    }
    g.concat(&outputs, 0)
}

/// Row-wise `[h_t ; F_t]`: LSTM output columns first, then the raw feature.
pub fn skip_concat(g: &mut Graph, hidden: NodeId, features: NodeId) -> OpResult {
    if g.value(hidden).dims2().0 != g.value(features).dims2().0 {
        return Err(TensorError::ShapeMismatch {
            op: "skip_concat",
            lhs: g.shape(hidden).to_vec(),
            rhs: g.shape(features).to_vec(),
        });
    }
    g.concat(&[hidden, features], 1)
}

/// First-level attention weights α (length T) from the raw features.
///
/// Rows are l2-normalized and projected by a shared latent layer; their time
/// average is a global descriptor from which a T-wide layer emits one score
/// per segment, softmax-normalized.
pub fn attention_first(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    features: NodeId,
) -> OpResult {
    expect_shape(g, features, &[cfg.segments, cfg.feature_dim], "attention_first")?;
    let normalized = g.l2_normalize(features)?;
    let latent = dense(g, p, normalized, ParamKey::Attn1LatentW, ParamKey::Attn1LatentB)?;
    let global = g.mean(latent, Some(0))?;
    let global = g.reshape(global, &[1, cfg.attn1_dim])?;
    let scores = dense(g, p, global, ParamKey::Attn1GlobalW, ParamKey::Attn1GlobalB)?;
    let scores = g.reshape(scores, &[cfg.segments])?;
    g.softmax(scores)
}

/// `X_t + w_t · X_t` for every row t.
pub fn modulate(g: &mut Graph, x: NodeId, weights: NodeId) -> OpResult {
    let scaled = g.scale_rows(x, weights)?;
    g.add(x, scaled)
}

/// Time-distributed three-layer detector. Returns the per-segment scores S
/// (length T) and the second-layer activations F' (T×n_L).
pub fn detection_forward(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    modulated: NodeId,
) -> Result<(NodeId, NodeId), TensorError> {
    expect_shape(g, modulated, &[cfg.segments, cfg.joint_dim()], "detection_forward")?;
    let h1 = dense(g, p, modulated, ParamKey::DetW1, ParamKey::DetB1)?;
    let h1 = g.relu(h1)?;
    let h2 = dense(g, p, h1, ParamKey::DetW2, ParamKey::DetB2)?;
    let latent = g.relu(h2)?;
    let logits = dense(g, p, latent, ParamKey::DetW3, ParamKey::DetB3)?;
    let scores = g.sigmoid(logits)?;
    let scores = g.reshape(scores, &[cfg.segments])?;
    Ok((scores, latent))
}

/// Second-level attention weights β (length T) from the detector latents.
pub fn attention_second(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    latent: NodeId,
) -> OpResult {
    expect_shape(g, latent, &[cfg.segments, cfg.det_latent], "attention_second")?;
    let v = dense(g, p, latent, ParamKey::Attn2LatentW, ParamKey::Attn2LatentB)?;
    // row-major flattening of T×d is the concatenation v_1 ⊕ … ⊕ v_T
    let z = g.reshape(v, &[1, cfg.segments * cfg.attn2_dim])?;
    let scores = dense(g, p, z, ParamKey::Attn2GlobalW, ParamKey::Attn2GlobalB)?;
    let scores = g.reshape(scores, &[cfg.segments])?;
    g.sigmoid(scores)
}

/// Class posteriors ŷ (length C+1) from the time-averaged features.
pub fn classify_forward(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    modulated: NodeId,
) -> OpResult {
    expect_shape(g, modulated, &[cfg.segments, cfg.joint_dim()], "classify_forward")?;
    let pooled = g.mean(modulated, Some(0))?;
    let pooled = g.reshape(pooled, &[1, cfg.joint_dim()])?;
    let h = dense(g, p, pooled, ParamKey::ClsW1, ParamKey::ClsB1)?;
    let h = g.relu(h)?;
    let logits = dense(g, p, h, ParamKey::ClsW2, ParamKey::ClsB2)?;
    let logits = g.reshape(logits, &[cfg.outputs()])?;
    g.softmax(logits)
}

/// Node ids of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TraceNodes {
    pub alpha: NodeId,
    pub beta: NodeId,
    pub scores: NodeId,
    pub probs: NodeId,
    pub joint: NodeId,
    pub first_modulated: NodeId,
    pub det_latent: NodeId,
    pub second_modulated: NodeId,
}

/// Builds the full network on `g` for input `features` (T×n).
///
/// A disabled attention level contributes a constant (uniform α or zero β)
/// and skips its modulation.
pub fn forward_graph(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    features: NodeId,
) -> Result<TraceNodes, TensorError> {
    let hidden = lstm_forward(g, p, cfg, features)?;
    let joint = skip_concat(g, hidden, features)?;
    let (alpha, first_modulated) = if cfg.use_first_attention {
        let alpha = attention_first(g, p, cfg, features)?;
        (alpha, modulate(g, joint, alpha)?)
    } else {
        let uniform = Tensor::full(&[cfg.segments], 1.0 / cfg.segments as f64);
        (g.constant(uniform), joint)
    };
    let (scores, det_latent) = detection_forward(g, p, cfg, first_modulated)?;
    let (beta, second_modulated) = if cfg.use_second_attention {
        let beta = attention_second(g, p, cfg, det_latent)?;
        (beta, modulate(g, first_modulated, beta)?)
    } else {
        (g.constant(Tensor::zeros(&[cfg.segments])), first_modulated)
    };
    let probs = classify_forward(g, p, cfg, second_modulated)?;
    Ok(TraceNodes {
        alpha,
        beta,
        scores,
        probs,
        joint,
        first_modulated,
        det_latent,
        second_modulated,
    })
}

/// Values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub alpha: Tensor,
    pub beta: Tensor,
    pub scores: Tensor,
    pub probs: Tensor,
    pub joint: Tensor,
    pub first_modulated: Tensor,
    pub det_latent: Tensor,
    pub second_modulated: Tensor,
}

impl ForwardTrace {
    pub fn from_graph(g: &Graph, nodes: &TraceNodes) -> Self {
        let v = |id| g.value(id).clone();
        Self {
            alpha: v(nodes.alpha),
            beta: v(nodes.beta),
            scores: v(nodes.scores),
            probs: v(nodes.probs),
            joint: v(nodes.joint),
            first_modulated: v(nodes.first_modulated),
            det_latent: v(nodes.det_latent),
            second_modulated: v(nodes.second_modulated),
        }
    }

    /// Predicted class: argmax of ŷ, ties to the lowest index.
    pub fn predicted_class(&self) -> usize {
        argmax(self.probs.data())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Inference-only forward pass for one video.
pub fn model_forward(features: &Tensor, params: &ModelParams) -> Result<ForwardTrace> {
    let cfg = *params.config();
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(features.clone());
    let nodes = forward_graph(&mut g, &bound, &cfg, x)?;
    Ok(ForwardTrace::from_graph(&g, &nodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn toy_config(t: usize, n: usize, nh: usize) -> ModelConfig {
        ModelConfig {
            segments: t,
            feature_dim: n,
            hidden: nh,
            attn1_dim: 2,
            det_hidden: 1,
            det_latent: 1,
            attn2_dim: 1,
            cls_hidden: 2,
            classes: 2,
            use_first_attention: true,
            use_second_attention: true,
        }
    }

    #[test]
    fn lstm_zero_weights_gives_zero_output() {
        let cfg = ModelConfig::tiny();
        let mut params = ModelParams::zeros(cfg);
        params.set(ParamKey::LstmForgetB, Tensor::full(&[cfg.hidden], 1.0));
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[cfg.segments, cfg.feature_dim]));
        let h = lstm_forward(&mut g, &b, &cfg, x).unwrap();
        assert_eq!(g.shape(h), &[cfg.segments, cfg.hidden]);
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_is_causal() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(cfg, 5).unwrap();
        let a = random(&[cfg.segments, cfg.feature_dim], 1);
        let mut b = a.clone();
        // change only the last two segments
        for v in &mut b.data_mut()[2 * cfg.feature_dim..] {
            *v += 0.7;
        }
        let run = |f: &Tensor| {
            let mut g = Graph::new();
            let bp = params.bind(&mut g);
            let x = g.constant(f.clone());
            let h = lstm_forward(&mut g, &bp, &cfg, x).unwrap();
            g.value(h).clone()
        };
        let (ha, hb) = (run(&a), run(&b));
        assert_eq!(&ha.data()[..2 * cfg.hidden], &hb.data()[..2 * cfg.hidden]);
        assert_ne!(&ha.data()[2 * cfg.hidden..], &hb.data()[2 * cfg.hidden..]);
    }

    #[test]
    fn lstm_single_step_matches_hand_unrolled_gates() {
        // T=1, n=2, n_h=2; weights chosen by hand.
        let cfg = toy_config(1, 2, 2);
        let mut params = ModelParams::zeros(cfg);
        let wi = [0.1, -0.2, 0.3, 0.4, 0.5, 0.6, -0.7, 0.8];
        let wf = [0.2, 0.1, -0.1, 0.3, 0.0, 0.2, 0.4, -0.5];
        let wc = [-0.3, 0.2, 0.5, -0.4, 0.1, 0.1, 0.2, 0.3];
        let wo = [0.6, -0.1, 0.2, 0.2, -0.3, 0.4, 0.1, 0.0];
        for (k, w) in [
            (ParamKey::LstmInputW, wi),
            (ParamKey::LstmForgetW, wf),
            (ParamKey::LstmCellW, wc),
            (ParamKey::LstmOutputW, wo),
        ] {
            params.set(k, Tensor::matrix(4, 2, w.to_vec()).unwrap());
        }
        params.set(ParamKey::LstmInputB, Tensor::vector(vec![0.05, -0.05]));
        params.set(ParamKey::LstmForgetB, Tensor::vector(vec![1.0, 1.0]));
        params.set(ParamKey::LstmCellB, Tensor::vector(vec![0.0, 0.1]));
        params.set(ParamKey::LstmOutputB, Tensor::vector(vec![-0.1, 0.0]));
        let x = [0.9, -1.3];

        // Hand computation: only the input rows (0,1) matter since h_0 = 0.
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let pre = |w: &[f64; 8], b: [f64; 2], j: usize| x[0] * w[j] + x[1] * w[2 + j] + b[j];
        let mut expected = [0.0; 2];
        for j in 0..2 {
            let i = sig(pre(&wi, [0.05, -0.05], j));
            let c_hat = pre(&wc, [0.0, 0.1], j).tanh();
            let o = sig(pre(&wo, [-0.1, 0.0], j));
            let c = i * c_hat; // f · c_0 vanishes
            expected[j] = o * c.tanh();
        }

        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let f = g.constant(Tensor::matrix(1, 2, x.to_vec()).unwrap());
        let h = lstm_forward(&mut g, &b, &cfg, f).unwrap();
        for j in 0..2 {
            assert!((g.value(h).data()[j] - expected[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn skip_concat_order_and_errors() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let f = g.constant(Tensor::matrix(1, 2, vec![2.0, 3.0]).unwrap());
        let j = skip_concat(&mut g, h, f).unwrap();
        assert_eq!(g.value(j).data(), &[1.0, 2.0, 3.0]);
        let h2 = g.constant(Tensor::zeros(&[2, 1]));
        assert!(skip_concat(&mut g, h2, f).is_err());
    }

    #[test]
    fn attention_first_examples() {
        let cfg = ModelConfig::tiny();
        let mut g = Graph::new();
        let zero = ModelParams::zeros(cfg).bind(&mut g);
        let x = g.constant(random(&[cfg.segments, cfg.feature_dim], 3));
        let a = attention_first(&mut g, &zero, &cfg, x).unwrap();
        for v in g.value(a).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }

        // T=2: zero latent weights with bias 1 give global = [1, 0]; pick
        // the global layer so s¹ = [ln 3, 0].
        let cfg2 = toy_config(2, 3, 1);
        let mut p = ModelParams::zeros(cfg2);
        p.set(ParamKey::Attn1LatentB, Tensor::vector(vec![1.0, 0.0]));
        p.set(
            ParamKey::Attn1GlobalW,
            Tensor::matrix(2, 2, vec![3f64.ln(), 0.0, 0.0, 0.0]).unwrap(),
        );
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = g.constant(random(&[2, 3], 4));
        let a = attention_first(&mut g, &b, &cfg2, x).unwrap();
        let alpha = g.value(a).data();
        assert!((alpha[0] - 0.75).abs() < 1e-12 && (alpha[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn modulate_scales_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w0 = g.constant(Tensor::zeros(&[2]));
        let m = modulate(&mut g, x, w0).unwrap();
        assert_eq!(g.value(m).data(), g.value(x).data());
        let w = g.constant(Tensor::vector(vec![1.0, 0.5]));
        let m = modulate(&mut g, x, w).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 4.0, 4.5, 6.0]);
        let bad = g.constant(Tensor::zeros(&[3]));
        assert!(modulate(&mut g, x, bad).is_err());
    }

    #[test]
    fn detection_zero_weights_and_hand_toy() {
        let cfg = ModelConfig::tiny();
        let mut g = Graph::new();
        let zero = ModelParams::zeros(cfg).bind(&mut g);
        let x = g.constant(random(&[cfg.segments, cfg.joint_dim()], 9));
        let (s, lat) = detection_forward(&mut g, &zero, &cfg, x).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.5));
        assert_eq!(g.shape(lat), &[cfg.segments, cfg.det_latent]);

        // 1-unit layers: joint dim 2 (n=1, n_h=1).
        let cfg1 = toy_config(1, 1, 1);
        let mut p = ModelParams::zeros(cfg1);
        p.set(ParamKey::DetW1, Tensor::matrix(2, 1, vec![0.5, -0.25]).unwrap());
        p.set(ParamKey::DetB1, Tensor::vector(vec![0.1]));
        p.set(ParamKey::DetW2, Tensor::matrix(1, 1, vec![2.0]).unwrap());
        p.set(ParamKey::DetB2, Tensor::vector(vec![-0.3]));
        p.set(ParamKey::DetW3, Tensor::matrix(1, 1, vec![1.5]).unwrap());
        p.set(ParamKey::DetB3, Tensor::vector(vec![0.2]));
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let x = g.constant(Tensor::matrix(1, 2, vec![1.2, -0.8]).unwrap());
        let (s, _) = detection_forward(&mut g, &b, &cfg1, x).unwrap();
        let h1 = (0.5f64 * 1.2 + 0.25 * 0.8 + 0.1).max(0.0);
        let h2 = (2.0 * h1 - 0.3f64).max(0.0);
        let expected = 1.0 / (1.0 + (-(1.5 * h2 + 0.2f64)).exp());
        assert!((g.value(s).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn attention_second_closed_forms() {
        let cfg = ModelConfig::tiny();
        let mut g = Graph::new();
        let zero = ModelParams::zeros(cfg).bind(&mut g);
        let x = g.constant(random(&[cfg.segments, cfg.det_latent], 2));
        let b = attention_second(&mut g, &zero, &cfg, x).unwrap();
        assert!(g.value(b).data().iter().all(|&v| v == 0.5));

        let cfg2 = toy_config(2, 1, 1);
        let mut p = ModelParams::zeros(cfg2);
        p.set(ParamKey::Attn2GlobalB, Tensor::vector(vec![0.0, 3f64.ln()]));
        let mut g = Graph::new();
        let bp = p.bind(&mut g);
        let x = g.constant(random(&[2, 1], 2));
        let b = attention_second(&mut g, &bp, &cfg2, x).unwrap();
        let beta = g.value(b).data();
        assert!((beta[0] - 0.5).abs() < 1e-12 && (beta[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn classify_zero_weights_uniform_and_permutation_invariant() {
        let cfg = ModelConfig::tiny();
        let mut g = Graph::new();
        let zero = ModelParams::zeros(cfg).bind(&mut g);
        let x = g.constant(random(&[cfg.segments, cfg.joint_dim()], 2));
        let y = classify_forward(&mut g, &zero, &cfg, x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let params = ModelParams::init(cfg, 1).unwrap();
        let rows = random(&[cfg.segments, cfg.joint_dim()], 6);
        let mut permuted = Vec::new();
        for r in [2, 0, 3, 1] {
            permuted.extend_from_slice(rows.row(r));
        }
        let permuted = Tensor::new(rows.shape().to_vec(), permuted).unwrap();
        let run = |t: &Tensor| {
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let x = g.constant(t.clone());
            let y = classify_forward(&mut g, &b, &cfg, x).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (run(&rows), run(&permuted));
        assert!((a.sum() - 1.0).abs() < 1e-9);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn model_forward_trace_invariants_and_determinism() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(cfg, 21).unwrap();
        let f = random(&[cfg.segments, cfg.feature_dim], 8);
        let tr = model_forward(&f, &params).unwrap();
        assert!((tr.alpha.sum() - 1.0).abs() < 1e-9);
        assert!((tr.probs.sum() - 1.0).abs() < 1e-9);
        assert!(tr.beta.data().iter().all(|&b| b > 0.0 && b < 1.0));
        assert!(tr.scores.data().iter().all(|&s| s > 0.0 && s < 1.0));
        assert_eq!(tr, model_forward(&f, &params).unwrap());
        assert!(model_forward(&Tensor::zeros(&[3, cfg.feature_dim]), &params).is_err());
    }
}
