//! Planted-anomaly synthetic datasets.
//!
//! Every clip is drawn from `N(μ₀, σ²I)` around a shared background mean.
//! Each anomaly video of class c gets one contiguous run of clips shifted by
//! `δ·d_c`, where the unit directions `d_c` are mutually orthogonal.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{save_features, Annotations, ClipFeatures, Manifest, Split, VideoRecord};
use crate::error::{DataError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub feature_dim: usize,
    /// Segment count the dataset is meant to be pooled to; recorded only.
    pub segments: usize,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Normal videos per split; `None` matches the anomaly count of the split.
    pub normal_train: Option<usize>,
    pub normal_test: Option<usize>,
    pub clips_per_video: usize,
    pub anomaly_fraction: f64,
    pub delta: f64,
    pub sigma: f64,
    pub frames_per_clip: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            segments: 32,
            classes: 3,
            train_per_class: 60,
            test_per_class: 20,
            normal_train: None,
            normal_test: None,
            clips_per_video: 64,
            anomaly_fraction: 0.25,
            delta: 4.0,
            sigma: 1.0,
            frames_per_clip: 16,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Invalid(m).into());
        if self.classes > self.feature_dim {
            return bad(format!(
                "cannot build {} orthogonal class directions in {} dimensions",
                self.classes, self.feature_dim
            ));
        }
        if self.feature_dim == 0 || self.classes == 0 || self.clips_per_video == 0 || self.frames_per_clip == 0 {
            return bad("dimensions, classes, clips and frames per clip must be positive".into());
        }
        if !(self.anomaly_fraction > 0.0 && self.anomaly_fraction <= 1.0) {
            return bad(format!("anomaly_fraction {} outside (0, 1]", self.anomaly_fraction));
        }
        if !(self.sigma > 0.0) || !self.delta.is_finite() {
            return bad("sigma must be positive and delta finite".into());
        }
        Ok(())
    }

    /// Number of clips in each planted run.
    pub fn run_length(&self) -> usize {
        ((self.anomaly_fraction * self.clips_per_video as f64).round() as usize).clamp(1, self.clips_per_video)
    }

    fn normal_count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.normal_train.unwrap_or(self.classes * self.train_per_class),
            Split::Test => self.normal_test.unwrap_or(self.classes * self.test_per_class),
        }
    }

    /// `key = value` lines, one per field.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<usize>| v.map_or("auto".to_string(), |v| v.to_string());
        let mut s = String::new();
        let _ = writeln!(s, "feature_dim = {}", self.feature_dim);
        let _ = writeln!(s, "segments = {}", self.segments);
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(s, "train_per_class = {}", self.train_per_class);
        let _ = writeln!(s, "test_per_class = {}", self.test_per_class);
        let _ = writeln!(s, "normal_train = {}", opt(self.normal_train));
        let _ = writeln!(s, "normal_test = {}", opt(self.normal_test));
        let _ = writeln!(s, "clips_per_video = {}", self.clips_per_video);
        let _ = writeln!(s, "anomaly_fraction = {}", self.anomaly_fraction);
        let _ = writeln!(s, "delta = {}", self.delta);
        let _ = writeln!(s, "sigma = {}", self.sigma);
        let _ = writeln!(s, "frames_per_clip = {}", self.frames_per_clip);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

/// A generated dataset held in memory.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub background: Vec<f64>,
    /// Row c is the unit direction of anomaly class c+1.
    pub directions: Vec<Vec<f64>>,
    /// Feature paths are relative (`features/<id>.feat`).
    pub manifest: Manifest,
    pub annotations: Annotations,
    /// Planted clip range `[start, end)` per record; `None` for normal videos.
    pub planted: Vec<Option<(usize, usize)>>,
    pub clips: Vec<Tensor>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Gram-Schmidt over Gaussian draws; redraws on (improbable) degeneracy.
fn orthonormal_directions(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(count);
    while dirs.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for d in &dirs {
            let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(d) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            dirs.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    dirs
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.feature_dim;
    let background: Vec<f64> = (0..n).map(|_| gaussian(&mut rng)).collect();
    let directions = orthonormal_directions(spec.classes, n, &mut rng);
    let m = spec.clips_per_video;
    let run = spec.run_length();

    let mut records = Vec::new();
    let mut annotations = Annotations::default();
    let mut planted = Vec::new();
    let mut clips = Vec::new();
    for split in [Split::Train, Split::Test] {
        let per_class = match split {
            Split::Train => spec.train_per_class,
            Split::Test => spec.test_per_class,
        };
        let mut labels: Vec<usize> = vec![0; spec.normal_count(split)];
        for c in 1..=spec.classes {
            labels.extend(std::iter::repeat_n(c, per_class));
        }
        for (k, &label) in labels.iter().enumerate() {
            let video_id = format!("{split}_{k:04}");
            let mut data: Vec<f64> = Vec::with_capacity(m * n);
            for _ in 0..m {
                data.extend(background.iter().map(|mu| mu + spec.sigma * gaussian(&mut rng)));
            }
            let span = if label == 0 {
                annotations.add_empty(&video_id);
                None
            } else {
                let start = rng.random_range(0..=m - run);
                let dir = &directions[label - 1];
                for r in start..start + run {
                    for (x, d) in data[r * n..(r + 1) * n].iter_mut().zip(dir) {
                        *x += spec.delta * d;
                    }
                }
                let fpc = spec.frames_per_clip;
                annotations.add(&video_id, start * fpc + 1, (start + run) * fpc);
                Some((start, start + run))
            };
            records.push(VideoRecord {
                feature_paths: vec![PathBuf::from(format!("features/{video_id}.feat"))],
                video_id,
                split,
                class_label: label,
                n_frames: m * spec.frames_per_clip,
            });
            planted.push(span);
            clips.push(Tensor::new(vec![m, n], data)?);
        }
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        background,
        directions,
        manifest: Manifest { records },
        annotations,
        planted,
        clips,
    })
}

/// Paths written by [`SynthDataset::write`].
#[derive(Debug, Clone)]
pub struct SynthFiles {
    pub manifest: PathBuf,
    pub annotations: PathBuf,
    pub spec: PathBuf,
}

impl SynthDataset {
    /// Writes `features/*.feat`, `manifest.csv`, `annotations.csv` and
    /// `synth_spec.txt` under `out_dir`.
    pub fn write(&self, out_dir: &Path) -> Result<SynthFiles> {
        let io = |e: std::io::Error| DataError::Io(e);
        std::fs::create_dir_all(out_dir.join("features")).map_err(io)?;
        for (record, clips) in self.manifest.records.iter().zip(&self.clips) {
            let path = out_dir.join(&record.feature_paths[0]);
            let feats = ClipFeatures::new(clips.clone()).map_err(|source| DataError::File {
                path: path.clone(),
                source,
            })?;
            save_features(&path, &feats).map_err(|source| DataError::File { path, source })?;
        }
        let files = SynthFiles {
            manifest: out_dir.join("manifest.csv"),
            annotations: out_dir.join("annotations.csv"),
            spec: out_dir.join("synth_spec.txt"),
        };
        self.manifest
            .write(std::fs::File::create(&files.manifest).map_err(io)?, out_dir)?;
        self.annotations
            .write(std::fs::File::create(&files.annotations).map_err(io)?)?;
        std::fs::write(&files.spec, self.spec.to_text()).map_err(io)?;
        Ok(files)
    }

    /// Class predicted by projecting the mean background-subtracted clip onto
    /// each class direction. Uses no interval information.
    pub fn oracle_class(&self, index: usize) -> usize {
        let clips = &self.clips[index];
        let (m, n) = clips.dims2();
        let mut mean = vec![0.0; n];
        for r in 0..m {
            for (acc, (x, mu)) in mean.iter_mut().zip(clips.row(r).iter().zip(&self.background)) {
                *acc += (x - mu) / m as f64;
            }
        }
        let scores: Vec<f64> = self
            .directions
            .iter()
            .map(|d| d.iter().zip(&mean).map(|(a, b)| a * b).sum())
            .collect();
        let (best, top) = scores
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
        let expected_shift = self.spec.delta * self.spec.run_length() as f64 / m as f64;
        if top < expected_shift / 2.0 {
            0
        } else {
            best + 1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            train_per_class: 6,
            test_per_class: 4,
            seed: 5,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn directions_are_orthonormal() {
        let d = generate(&small()).unwrap();
        for (i, a) in d.directions.iter().enumerate() {
            for (j, b) in d.directions.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_many_classes_is_an_error() {
        let spec = SynthSpec {
            feature_dim: 4,
            classes: 5,
            ..small()
        };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn normals_get_empty_annotations_and_runs_match_fraction() {
        let spec = small();
        let d = generate(&spec).unwrap();
        let fpc = spec.frames_per_clip;
        let want = spec.anomaly_fraction * spec.clips_per_video as f64;
        for (r, span) in d.manifest.records.iter().zip(&d.planted) {
            let intervals = d.annotations.get(&r.video_id).unwrap();
            if r.is_anomaly() {
                let (s, e) = span.unwrap();
                assert!(((e - s) as f64 - want).abs() <= 1.0);
                assert_eq!(intervals, &[(s * fpc + 1, e * fpc)]);
            } else {
                assert!(intervals.is_empty());
                assert!(span.is_none());
            }
        }
        let normals = d.manifest.records.iter().filter(|r| !r.is_anomaly()).count();
        assert_eq!(normals, 3 * 6 + 3 * 4);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.clips, b.clips);
        assert_eq!(a.annotations, b.annotations);
        let c = generate(&SynthSpec { seed: 6, ..small() }).unwrap();
        assert_ne!(a.clips, c.clips);
    }

    #[test]
    fn nearest_direction_oracle_separates_classes() {
        let spec = SynthSpec {
            seed: 11,
            ..SynthSpec::default()
        };
        let d = generate(&spec).unwrap();
        let correct = d
            .manifest
            .records
            .iter()
            .enumerate()
            .filter(|(i, r)| d.oracle_class(*i) == r.class_label)
            .count();
        let acc = correct as f64 / d.manifest.records.len() as f64;
        assert!(acc >= 0.95, "oracle accuracy {acc}");
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate(&small()).unwrap();
        let files = d.write(dir.path()).unwrap();
        let m = Manifest::load(&files.manifest, None, 3).unwrap();
        assert_eq!(m.records.len(), d.manifest.records.len());
        assert_eq!(m.records[0].feature_paths[0], dir.path().join("features/train_0000.feat"));
        let a = Annotations::load(&files.annotations).unwrap();
        let first_anomaly = d.manifest.records.iter().find(|r| r.is_anomaly()).unwrap();
        assert_eq!(a.get(&first_anomaly.video_id), d.annotations.get(&first_anomaly.video_id));
        assert!(std::fs::read_to_string(files.spec).unwrap().contains("delta = 4"));
    }
}
