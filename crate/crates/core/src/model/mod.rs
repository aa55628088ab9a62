//! The joint detection/classification network.
//!
//! Pipeline per video (T segments of n-dim features):
//!
//! ```text
//! F ──► LSTM ──► H ─┐
//! │                 ├─ skip concat ─► F_h ─► modulate(α) ─► F* ─► detection MLP ─► S
//! ├─────────────────┘                                        │          │
//! └─► first-level attention ─► α                            │          └─► F' ─► second-level attention ─► β
//!                                                            └─► modulate(β) ─► F** ─► time mean ─► classifier ─► ŷ
//! ```

mod checkpoint;
pub(crate) mod forward;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    attention_first, attention_second, classify_forward, detection_forward, forward_graph,
    lstm_forward, model_forward, modulate, skip_concat, ForwardTrace, TraceNodes,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of temporal segments per video.
    pub segments: usize,
    /// Input feature dimension.
    pub feature_dim: usize,
    /// LSTM hidden units.
    pub hidden: usize,
    pub attn1_dim: usize,
    pub det_hidden: usize,
    /// Width of the second detection layer, which feeds the second-level attention.
    pub det_latent: usize,
    pub attn2_dim: usize,
    pub cls_hidden: usize,
    /// Anomaly classes, excluding Normal (class 0).
    pub classes: usize,
    pub use_first_attention: bool,
    pub use_second_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            segments: 32,
            feature_dim: 7168,
            hidden: 1024,
            attn1_dim: 256,
            det_hidden: 512,
            det_latent: 96,
            attn2_dim: 32,
            cls_hidden: 256,
            classes: 13,
            use_first_attention: true,
            use_second_attention: true,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            segments: 4,
            feature_dim: 6,
            hidden: 5,
            attn1_dim: 4,
            det_hidden: 5,
            det_latent: 3,
            attn2_dim: 3,
            cls_hidden: 4,
            classes: 2,
            use_first_attention: true,
            use_second_attention: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("segments", self.segments),
            ("feature_dim", self.feature_dim),
            ("hidden", self.hidden),
            ("attn1_dim", self.attn1_dim),
            ("det_hidden", self.det_hidden),
            ("det_latent", self.det_latent),
            ("attn2_dim", self.attn2_dim),
            ("cls_hidden", self.cls_hidden),
            ("classes", self.classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Width of the skip-connected feature `[h_t ; F_t]`.
    pub fn joint_dim(&self) -> usize {
        self.feature_dim + self.hidden
    }

    /// Output classes including Normal.
    pub fn outputs(&self) -> usize {
        self.classes + 1
    }

    pub fn param_shape(&self, key: ParamKey) -> Vec<usize> {
        use ParamKey::*;
        let joint = self.joint_dim();
        match key {
            LstmInputW | LstmForgetW | LstmCellW | LstmOutputW => vec![joint, self.hidden],
            LstmInputB | LstmForgetB | LstmCellB | LstmOutputB => vec![self.hidden],
            Attn1LatentW => vec![self.feature_dim, self.attn1_dim],
            Attn1LatentB => vec![self.attn1_dim],
            Attn1GlobalW => vec![self.attn1_dim, self.segments],
            Attn1GlobalB => vec![self.segments],
            DetW1 => vec![joint, self.det_hidden],
            DetB1 => vec![self.det_hidden],
            DetW2 => vec![self.det_hidden, self.det_latent],
            DetB2 => vec![self.det_latent],
            DetW3 => vec![self.det_latent, 1],
            DetB3 => vec![1],
            Attn2LatentW => vec![self.det_latent, self.attn2_dim],
            Attn2LatentB => vec![self.attn2_dim],
            Attn2GlobalW => vec![self.segments * self.attn2_dim, self.segments],
            Attn2GlobalB => vec![self.segments],
            ClsW1 => vec![joint, self.cls_hidden],
            ClsB1 => vec![self.cls_hidden],
            ClsW2 => vec![self.cls_hidden, self.outputs()],
            ClsB2 => vec![self.outputs()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Lstm,
    Attn1,
    Det,
    Attn2,
    Cls,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Lstm,
        ParamGroup::Attn1,
        ParamGroup::Det,
        ParamGroup::Attn2,
        ParamGroup::Cls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Lstm => "lstm",
            ParamGroup::Attn1 => "attn1",
            ParamGroup::Det => "det",
            ParamGroup::Attn2 => "attn2",
            ParamGroup::Cls => "cls",
        }
    }
}

/// Every trainable tensor of the network, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKey {
    LstmInputW,
    LstmInputB,
    LstmForgetW,
    LstmForgetB,
    LstmCellW,
    LstmCellB,
    LstmOutputW,
    LstmOutputB,
    Attn1LatentW,
    Attn1LatentB,
    Attn1GlobalW,
    Attn1GlobalB,
    DetW1,
    DetB1,
    DetW2,
    DetB2,
    DetW3,
    DetB3,
    Attn2LatentW,
    Attn2LatentB,
    Attn2GlobalW,
    Attn2GlobalB,
    ClsW1,
    ClsB1,
    ClsW2,
    ClsB2,
}

impl ParamKey {
    pub const ALL: [ParamKey; 26] = {
        use ParamKey::*;
        [
            LstmInputW,
            LstmInputB,
            LstmForgetW,
            LstmForgetB,
            LstmCellW,
            LstmCellB,
            LstmOutputW,
            LstmOutputB,
            Attn1LatentW,
            Attn1LatentB,
            Attn1GlobalW,
            Attn1GlobalB,
            DetW1,
            DetB1,
            DetW2,
            DetB2,
            DetW3,
            DetB3,
            Attn2LatentW,
            Attn2LatentB,
            Attn2GlobalW,
            Attn2GlobalB,
            ClsW1,
            ClsB1,
            ClsW2,
            ClsB2,
        ]
    };

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        use ParamKey::*;
        match self {
            LstmInputW => "lstm.input.w",
            LstmInputB => "lstm.input.b",
            LstmForgetW => "lstm.forget.w",
            LstmForgetB => "lstm.forget.b",
            LstmCellW => "lstm.cell.w",
            LstmCellB => "lstm.cell.b",
            LstmOutputW => "lstm.output.w",
            LstmOutputB => "lstm.output.b",
            Attn1LatentW => "attn1.latent.w",
            Attn1LatentB => "attn1.latent.b",
            Attn1GlobalW => "attn1.global.w",
            Attn1GlobalB => "attn1.global.b",
            DetW1 => "det.fc1.w",
            DetB1 => "det.fc1.b",
            DetW2 => "det.fc2.w",
            DetB2 => "det.fc2.b",
            DetW3 => "det.fc3.w",
            DetB3 => "det.fc3.b",
            Attn2LatentW => "attn2.latent.w",
            Attn2LatentB => "attn2.latent.b",
            Attn2GlobalW => "attn2.global.w",
            Attn2GlobalB => "attn2.global.b",
            ClsW1 => "cls.fc1.w",
            ClsB1 => "cls.fc1.b",
            ClsW2 => "cls.fc2.w",
            ClsB2 => "cls.fc2.b",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn group(self) -> ParamGroup {
        match self.index() {
            0..=7 => ParamGroup::Lstm,
            8..=11 => ParamGroup::Attn1,
            12..=17 => ParamGroup::Det,
            18..=21 => ParamGroup::Attn2,
            _ => ParamGroup::Cls,
        }
    }

    pub fn is_bias(self) -> bool {
        self.name().ends_with(".b")
    }
}

/// The trainable tensors, shared behind `Arc` so graphs can borrow them
/// without copying.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Arc<Tensor>>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, forget-gate bias 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = ParamKey::ALL
            .iter()
            .map(|&key| {
                let shape = config.param_shape(key);
                let t = if key == ParamKey::LstmForgetB {
                    Tensor::full(&shape, 1.0)
                } else if key.is_bias() {
                    Tensor::zeros(&shape)
                } else {
                    let bound = glorot_bound(shape[0], shape[1]);
                    let data = (0..shape[0] * shape[1])
                        .map(|_| rng.random_range(-bound..bound))
                        .collect();
                    Tensor::new(shape, data).expect("param shape")
                };
                Arc::new(t)
            })
            .collect();
        Ok(Self { config, tensors })
    }

    /// All-zero parameters (forget bias included).
    pub fn zeros(config: ModelConfig) -> Self {
        let tensors = ParamKey::ALL
            .iter()
            .map(|&k| Arc::new(Tensor::zeros(&config.param_shape(k))))
            .collect();
        Self { config, tensors }
    }

    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        if tensors.len() != ParamKey::ALL.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                ParamKey::ALL.len(),
                tensors.len()
            )));
        }
        for (key, t) in ParamKey::ALL.iter().zip(&tensors) {
            if t.shape() != config.param_shape(*key).as_slice() {
                return Err(Error::Config(format!(
                    "{}: shape {:?} does not match config {:?}",
                    key.name(),
                    t.shape(),
                    config.param_shape(*key)
                )));
            }
        }
        Ok(Self {
            config,
            tensors: tensors.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Replaces the ablation switches; shapes are unaffected.
    pub fn set_attention(&mut self, first: bool, second: bool) {
        self.config.use_first_attention = first;
        self.config.use_second_attention = second;
    }

    pub fn get(&self, key: ParamKey) -> &Tensor {
        &self.tensors[key.index()]
    }

    /// Mutable access; clones the tensor first if a graph still shares it.
    pub fn get_mut(&mut self, key: ParamKey) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[key.index()])
    }

    /// Mutable views of every tensor in [`ParamKey::ALL`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.iter_mut().map(Arc::make_mut).collect()
    }

    pub fn set(&mut self, key: ParamKey, value: Tensor) {
        assert_eq!(value.shape(), self.config.param_shape(key).as_slice());
        self.tensors[key.index()] = Arc::new(value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, &Tensor)> {
        ParamKey::ALL.iter().map(|&k| (k, self.get(k)))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Registers every tensor as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        BoundParams {
            ids: self.tensors.iter().map(|t| graph.param(Arc::clone(t))).collect(),
        }
    }
}

pub(crate) fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Graph node ids of a bound [`ModelParams`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn id(&self, key: ParamKey) -> NodeId {
        self.ids[key.index()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let c = ModelConfig::tiny();
        assert_eq!(ModelParams::init(c, 7).unwrap(), ModelParams::init(c, 7).unwrap());
        assert_ne!(ModelParams::init(c, 7).unwrap(), ModelParams::init(c, 8).unwrap());
    }

    #[test]
    fn biases_zero_except_forget_gate() {
        let p = ModelParams::init(ModelConfig::tiny(), 3).unwrap();
        for (key, t) in p.iter().filter(|(k, _)| k.is_bias()) {
            let expect = if key == ParamKey::LstmForgetB { 1.0 } else { 0.0 };
            assert!(t.data().iter().all(|&v| v == expect), "{}", key.name());
        }
    }

    #[test]
    fn weights_within_glorot_bound() {
        let p = ModelParams::init(ModelConfig::tiny(), 11).unwrap();
        for (key, t) in p.iter().filter(|(k, _)| !k.is_bias()) {
            let s = t.shape();
            assert!(t.max_abs() <= glorot_bound(s[0], s[1]), "{}", key.name());
        }
    }

    #[test]
    fn names_round_trip_and_groups_cover_all() {
        for k in ParamKey::ALL {
            assert_eq!(ParamKey::from_name(k.name()), Some(k));
            assert!(k.name().starts_with(k.group().name()));
        }
    }

    #[test]
    fn zero_dims_rejected() {
        let c = ModelConfig {
            det_latent: 0,
            ..ModelConfig::tiny()
        };
        assert!(ModelParams::init(c, 0).is_err());
    }
}
