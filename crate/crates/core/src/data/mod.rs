//! Feature ingestion, temporal segmentation, batch sampling and the
//! synthetic planted-anomaly generator.

mod features;
mod manifest;
pub mod synth;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DataError, Result};
use crate::parallel::{map_indexed, Execution};
use crate::tensor::Tensor;

pub use features::{load_features, save_features, ClipFeatures, FEATURE_MAGIC, MAX_FEATURE_VALUES};
pub use manifest::{Annotations, Manifest, Split, VideoRecord};

/// Max-pools M clip rows into `segments` rows.
///
/// Segment t covers clip rows `[⌊tM/T⌋, ⌊(t+1)M/T⌋)`. When that range is
/// empty (M < T) the segment copies row `min(⌊tM/T⌋, M-1)`.
pub fn segment_pool(clips: &Tensor, segments: usize) -> Result<Tensor> {
    if segments == 0 {
        return Err(DataError::Invalid("segment count must be positive".into()).into());
    }
    if clips.rank() != 2 {
        return Err(DataError::Invalid(format!("clip features must be a matrix, got {:?}", clips.shape())).into());
    }
    let (m, n) = clips.dims2();
    let mut out = Vec::with_capacity(segments * n);
    for t in 0..segments {
        let start = t * m / segments;
        let end = (t + 1) * m / segments;
        if start >= end {
            out.extend_from_slice(clips.row(start.min(m - 1)));
            continue;
        }
        let mut row = clips.row(start).to_vec();
        for r in start + 1..end {
            for (acc, &v) in row.iter_mut().zip(clips.row(r)) {
                *acc = acc.max(v);
            }
        }
        out.extend_from_slice(&row);
    }
    Ok(Tensor::new(vec![segments, n], out)?)
}

/// Per-segment mean over crop views.
pub fn multiview_average(views: &[Tensor]) -> Result<Tensor> {
    let first = views
        .first()
        .ok_or_else(|| DataError::Invalid("no views to average".into()))?;
    if views.len() == 1 {
        return Ok(first.clone());
    }
    let mut acc = vec![0.0; first.len()];
    for v in views {
        if v.shape() != first.shape() {
            return Err(DataError::Invalid(format!(
                "view shapes differ: {:?} vs {:?}",
                v.shape(),
                first.shape()
            ))
            .into());
        }
        for (a, x) in acc.iter_mut().zip(v.data()) {
            *a += x;
        }
    }
    let k = views.len() as f64;
    Ok(Tensor::new(first.shape().to_vec(), acc.into_iter().map(|a| a / k).collect())?)
}

/// A video with its pooled T×n segment features, one matrix per view.
#[derive(Debug, Clone)]
pub struct Video {
    pub record: VideoRecord,
    pub views: Vec<Tensor>,
}

impl Video {
    pub fn label(&self) -> usize {
        self.record.class_label
    }
}

/// Loads and pools every view of `records`, checking the feature dimension.
pub fn load_videos(
    records: &[VideoRecord],
    segments: usize,
    feature_dim: usize,
    exec: Execution,
) -> Result<Vec<Video>> {
    map_indexed(exec, records.len(), |i| {
        let record = &records[i];
        let mut views = Vec::with_capacity(record.feature_paths.len());
        for path in &record.feature_paths {
            let clips = load_features(path).map_err(|source| DataError::File {
                path: path.clone(),
                source,
            })?;
            if clips.dim() != feature_dim {
                return Err(DataError::DimMismatch {
                    what: path.display().to_string(),
                    expected: feature_dim,
                    found: clips.dim(),
                }
                .into());
            }
            views.push(segment_pool(clips.matrix(), segments)?);
        }
        Ok(Video {
            record: record.clone(),
            views,
        })
    })
    .into_iter()
    .collect()
}

/// Indices of the videos in one training batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub anomaly: Vec<usize>,
    pub normal: Vec<usize>,
}

impl Batch {
    /// Anomaly videos first, then normal ones; the k-th anomaly video is
    /// paired with the k-th normal video.
    pub fn all(&self) -> impl Iterator<Item = usize> + '_ {
        self.anomaly.iter().chain(&self.normal).copied()
    }
}

/// Uniform without-replacement draws of anomaly and normal videos.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    anomaly: Vec<usize>,
    normal: Vec<usize>,
    per_kind: (usize, usize),
    rng: ChaCha8Rng,
}

impl BatchSampler {
    /// `labels[i]` is the class of video i (0 = Normal).
    pub fn new(labels: &[usize], anomaly_per_batch: usize, normal_per_batch: usize, seed: u64) -> Result<Self> {
        let anomaly: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 0).collect();
        let normal: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
        if anomaly.len() < anomaly_per_batch || anomaly_per_batch == 0 {
            return Err(DataError::Insufficient {
                kind: "anomaly",
                needed: anomaly_per_batch.max(1),
                found: anomaly.len(),
            }
            .into());
        }
        if normal.len() < normal_per_batch || normal_per_batch == 0 {
            return Err(DataError::Insufficient {
                kind: "normal",
                needed: normal_per_batch.max(1),
                found: normal.len(),
            }
            .into());
        }
        Ok(Self {
            anomaly,
            normal,
            per_kind: (anomaly_per_batch, normal_per_batch),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn sample(&mut self) -> Batch {
        let pick = |pool: &[usize], k: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
            index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
        };
        let anomaly = pick(&self.anomaly, self.per_kind.0, &mut self.rng);
        let normal = pick(&self.normal, self.per_kind.1, &mut self.rng);
        Batch { anomaly, normal }
    }
}
