//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MILATTN1"
//! 11 × u64      segments, feature_dim, hidden, attn1_dim, det_hidden,
//!               det_latent, attn2_dim, cls_hidden, classes,
//!               use_first_attention, use_second_attention
//! "PARAMS01"  u32 count, then count × entry
//! ["ADAMST01" u64 step, f64 lr, beta1, beta2, eps, u8 has_clip, f64 clip,
//!             count × (first-moment entry, second-moment entry)]
//!
//! entry:  u32 name_len, name bytes, u32 rank, rank × u64 dims, f64 data
//! ```

use std::fs;
use std::path::Path;

use crate::binio::{checked_bytes, Reader};
use crate::error::{FormatError, Result};
use crate::optimizer::{AdamConfig, AdamState};
use crate::tensor::Tensor;

use super::{ModelConfig, ModelParams, ParamKey};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MILATTN1";
const PARAMS_TAG: &[u8; 8] = b"PARAMS01";
const ADAM_TAG: &[u8; 8] = b"ADAMST01";
const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let c = self.params.config();
        for v in [
            c.segments,
            c.feature_dim,
            c.hidden,
            c.attn1_dim,
            c.det_hidden,
            c.det_latent,
            c.attn2_dim,
            c.cls_hidden,
            c.classes,
            c.use_first_attention as usize,
            c.use_second_attention as usize,
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(PARAMS_TAG);
        out.extend_from_slice(&(ParamKey::ALL.len() as u32).to_le_bytes());
        for (key, t) in self.params.iter() {
            write_entry(&mut out, key.name(), t);
        }
        if let Some(adam) = &self.optimizer {
            out.extend_from_slice(ADAM_TAG);
            out.extend_from_slice(&adam.step.to_le_bytes());
            let a = adam.config;
            for v in [a.lr, a.beta1, a.beta2, a.eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(a.clip_norm.is_some() as u8);
            out.extend_from_slice(&a.clip_norm.unwrap_or(0.0).to_le_bytes());
            for (key, (m, v)) in ParamKey::ALL.iter().zip(adam.first.iter().zip(&adam.second)) {
                write_entry(&mut out, key.name(), m);
                write_entry(&mut out, key.name(), v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let mut dims = [0usize; 11];
        for d in &mut dims {
            *d = usize::try_from(r.u64()?)
                .map_err(|_| FormatError::DimensionOverflow("config field".into()))?;
        }
        let flag = |v: usize| match v {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(FormatError::Malformed(format!("attention flag {v}"))),
        };
        let config = ModelConfig {
            segments: dims[0],
            feature_dim: dims[1],
            hidden: dims[2],
            attn1_dim: dims[3],
            det_hidden: dims[4],
            det_latent: dims[5],
            attn2_dim: dims[6],
            cls_hidden: dims[7],
            classes: dims[8],
            use_first_attention: flag(dims[9])?,
            use_second_attention: flag(dims[10])?,
        };
        config
            .validate()
            .map_err(|e| FormatError::Malformed(e.to_string()))?;
        section(&mut r, PARAMS_TAG)?;
        let count = r.u32()? as usize;
        if count != ParamKey::ALL.len() {
            return Err(FormatError::Malformed(format!("{count} parameter entries")));
        }
        let mut tensors = Vec::with_capacity(count);
        for key in ParamKey::ALL {
            tensors.push(read_entry(&mut r, key, &config)?);
        }
        let params = ModelParams::from_tensors(config, tensors)
            .map_err(|e| FormatError::Malformed(e.to_string()))?;

        let optimizer = if r.remaining() > 0 {
            section(&mut r, ADAM_TAG)?;
            let step = r.u64()?;
            let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let has_clip = r.array::<1>()?[0];
            let clip = r.f64()?;
            let mut first = Vec::with_capacity(count);
            let mut second = Vec::with_capacity(count);
            for key in ParamKey::ALL {
                first.push(read_entry(&mut r, key, &config)?);
                second.push(read_entry(&mut r, key, &config)?);
            }
            Some(AdamState {
                config: AdamConfig {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    clip_norm: (has_clip != 0).then_some(clip),
                },
                step,
                first,
                second,
            })
        } else {
            None
        };
        r.finish()?;
        Ok(Self { params, optimizer })
    }
}

fn section(r: &mut Reader<'_>, tag: &[u8; 8]) -> Result<(), FormatError> {
    let found = r.array::<8>()?;
    if &found != tag {
        return Err(FormatError::Malformed(format!(
            "expected section {:?}, found {:?}",
            String::from_utf8_lossy(tag),
            String::from_utf8_lossy(&found)
        )));
    }
    Ok(())
}

fn write_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_entry(r: &mut Reader<'_>, key: ParamKey, config: &ModelConfig) -> Result<Tensor, FormatError> {
    let name_len = r.u32()? as usize;
    let name = r.bytes(name_len)?;
    if name != key.name().as_bytes() {
        return Err(FormatError::Malformed(format!(
            "expected parameter {}, found {:?}",
            key.name(),
            String::from_utf8_lossy(name)
        )));
    }
    let rank = r.u32()?;
    if rank == 0 || rank > MAX_RANK {
        return Err(FormatError::Malformed(format!("{}: rank {rank}", key.name())));
    }
    let dims: Vec<u64> = (0..rank).map(|_| r.u64()).collect::<Result<_, _>>()?;
    let nbytes = checked_bytes(&dims, 8)?;
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    if shape != config.param_shape(key) {
        return Err(FormatError::Malformed(format!(
            "{}: shape {shape:?} disagrees with config",
            key.name()
        )));
    }
    let raw = r.bytes(nbytes)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data).map_err(|e| FormatError::Malformed(e.to_string()))
}

/// Writes through a temporary file and renames, so a crash never leaves a
/// half-written checkpoint at `path`.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), FormatError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, FormatError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
