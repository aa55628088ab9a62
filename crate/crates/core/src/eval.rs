//! Frame-level ROC/AUC, per-class accuracy and mAA.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{multiview_average, Annotations, Video};
use crate::error::{DataError, Error, Result};
use crate::model::{model_forward, ModelParams};
use crate::parallel::{map_indexed, Execution};
use crate::tensor::Tensor;

/// Frame j takes the score of segment `⌊jT/n_frames⌋`, clamped to T-1.
pub fn expand_scores(segment_scores: &[f64], n_frames: usize) -> Vec<f64> {
    let t = segment_scores.len();
    (0..n_frames)
        .map(|j| segment_scores[(j * t / n_frames).min(t - 1)])
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    /// (fpr, tpr) from (0,0) to (1,1), one point per distinct score.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Sweeps thresholds from the highest distinct score down and integrates
/// the curve with the trapezoid rule. Tied scores move along a diagonal,
/// which is what makes the area equal the Mann-Whitney statistic.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<Roc> {
    if scores.len() != labels.len() {
        return Err(DataError::Invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        ))
        .into());
    }
    let pos = labels.iter().filter(|&&l| l != 0).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(DataError::Invalid("ROC needs both positive and negative frames".into()).into());
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Tensor(crate::error::TensorError::NonFinite { op: "roc_auc" }));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (p, n) = (pos as f64, neg as f64);
    let mut points = vec![(0.0, 0.0)];
    // twice the area in units of one (positive, negative) pair, kept integral
    let mut area2: u128 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += u128::from(fp - fp0) * u128::from(tp + tp0);
        points.push((fp as f64 / n, tp as f64 / p));
    }
    let auc = area2 as f64 / (2.0 * p * n);
    Ok(Roc { points, auc })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    /// `None` for classes with no test video.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub mean_accuracy: f64,
}

/// Per-class accuracy and their unweighted mean over the classes present.
/// With `include_normal = false`, class 0 is left out of the mean.
pub fn classify_videos(predicted: &[usize], labels: &[usize], outputs: usize, include_normal: bool) -> Result<Classification> {
    if labels.is_empty() {
        return Err(DataError::Invalid("empty test set".into()).into());
    }
    let mut confusion = vec![vec![0u64; outputs]; outputs];
    for (&p, &y) in predicted.iter().zip(labels) {
        if y >= outputs || p >= outputs {
            return Err(DataError::Invalid(format!("class {} outside {outputs} outputs", y.max(p))).into());
        }
        confusion[y][p] += 1;
    }
    let per_class_accuracy: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: u64 = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect();
    let counted: Vec<f64> = per_class_accuracy
        .iter()
        .enumerate()
        .filter(|&(c, _)| include_normal || c != 0)
        .filter_map(|(c, a)| {
            if a.is_none() {
                log::warn!("class {c} has no test videos; left out of mAA");
            }
            *a
        })
        .collect();
    if counted.is_empty() {
        return Err(DataError::Invalid("no counted class has test videos".into()).into());
    }
    let mean_accuracy = counted.iter().sum::<f64>() / counted.len() as f64;
    Ok(Classification {
        confusion,
        per_class_accuracy,
        mean_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub roc: Roc,
    pub classification: Classification,
    pub include_normal: bool,
}

impl EvalReport {
    pub fn auc(&self) -> f64 {
        self.roc.auc
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.classification.mean_accuracy
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "auc = {}", self.roc.auc);
        let _ = writeln!(s, "maa = {}", self.classification.mean_accuracy);
        let _ = writeln!(s, "include_normal = {}", self.include_normal);
        for (c, a) in self.classification.per_class_accuracy.iter().enumerate() {
            match a {
                Some(a) => writeln!(s, "accuracy.{c} = {a}"),
                None => writeln!(s, "accuracy.{c} = absent"),
            }
            .unwrap();
        }
        s
    }

    /// Writes `summary.txt`, `roc.csv` and `confusion.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<ReportFiles> {
        let files = ReportFiles::in_dir(dir);
        std::fs::create_dir_all(dir).map_err(DataError::Io)?;
        std::fs::write(&files.summary, self.summary()).map_err(DataError::Io)?;

        let mut roc = csv::Writer::from_path(&files.roc).map_err(DataError::Csv)?;
        roc.write_record(["fpr", "tpr"]).map_err(DataError::Csv)?;
        for (f, t) in &self.roc.points {
            roc.write_record([f.to_string(), t.to_string()]).map_err(DataError::Csv)?;
        }
        roc.flush().map_err(DataError::Io)?;

        let k = self.classification.confusion.len();
        let mut conf = csv::Writer::from_path(&files.confusion).map_err(DataError::Csv)?;
        let mut header = vec!["label".to_string()];
        header.extend((0..k).map(|c| format!("pred_{c}")));
        conf.write_record(&header).map_err(DataError::Csv)?;
        for (c, row) in self.classification.confusion.iter().enumerate() {
            let mut rec = vec![c.to_string()];
            rec.extend(row.iter().map(u64::to_string));
            conf.write_record(&rec).map_err(DataError::Csv)?;
        }
        conf.flush().map_err(DataError::Io)?;
        Ok(files)
    }

    pub fn read(files: &ReportFiles) -> Result<Self> {
        let bad = |m: String| Error::Data(DataError::Invalid(m));
        let text = std::fs::read_to_string(&files.summary).map_err(DataError::Io)?;
        let mut auc = None;
        let mut maa = None;
        let mut include_normal = None;
        let mut accuracy: Vec<(usize, Option<f64>)> = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad(format!("summary line {line:?}")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|e| bad(format!("{key}: {e}")));
            match key {
                "auc" => auc = Some(num(value)?),
                "maa" => maa = Some(num(value)?),
                "include_normal" => {
                    include_normal = Some(value.parse::<bool>().map_err(|e| bad(format!("{key}: {e}")))?)
                }
                k if k.starts_with("accuracy.") => {
                    let c = k["accuracy.".len()..].parse::<usize>().map_err(|e| bad(format!("{key}: {e}")))?;
                    let a = if value == "absent" { None } else { Some(num(value)?) };
                    accuracy.push((c, a));
                }
                _ => return Err(bad(format!("unknown summary key {key:?}"))),
            }
        }
        accuracy.sort_by_key(|&(c, _)| c);

        let mut points = Vec::new();
        let mut rdr = csv::Reader::from_path(&files.roc).map_err(DataError::Csv)?;
        for rec in rdr.deserialize::<(f64, f64)>() {
            points.push(rec.map_err(DataError::Csv)?);
        }
        let mut confusion = Vec::new();
        let mut rdr = csv::Reader::from_path(&files.confusion).map_err(DataError::Csv)?;
        for rec in rdr.records() {
            let rec = rec.map_err(DataError::Csv)?;
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<u64>().map_err(|e| bad(format!("confusion: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            confusion.push(row);
        }
        Ok(Self {
            roc: Roc {
                points,
                auc: auc.ok_or_else(|| bad("summary lacks auc".into()))?,
            },
            classification: Classification {
                confusion,
                per_class_accuracy: accuracy.into_iter().map(|(_, a)| a).collect(),
                mean_accuracy: maa.ok_or_else(|| bad("summary lacks maa".into()))?,
            },
            include_normal: include_normal.ok_or_else(|| bad("summary lacks include_normal".into()))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub summary: PathBuf,
    pub roc: PathBuf,
    pub confusion: PathBuf,
}

impl ReportFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            summary: dir.join("summary.txt"),
            roc: dir.join("roc.csv"),
            confusion: dir.join("confusion.csv"),
        }
    }
}

/// Fused per-video outputs: scores and class posteriors averaged over views.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoScores {
    pub scores: Tensor,
    pub probs: Tensor,
}

pub fn score_video(video: &Video, params: &ModelParams) -> Result<VideoScores> {
    let mut scores = Vec::with_capacity(video.views.len());
    let mut probs = Vec::with_capacity(video.views.len());
    for view in &video.views {
        let trace = model_forward(view, params)?;
        scores.push(trace.scores);
        probs.push(trace.probs);
    }
    Ok(VideoScores {
        scores: multiview_average(&scores)?,
        probs: multiview_average(&probs)?,
    })
}

/// Scores every video, builds one ROC over the concatenated frames of all
/// videos and computes classification metrics.
pub fn evaluate(
    params: &ModelParams,
    videos: &[Video],
    annotations: &Annotations,
    include_normal: bool,
    exec: Execution,
) -> Result<EvalReport> {
    for v in videos {
        if v.record.is_anomaly() && annotations.get(&v.record.video_id).is_none() {
            return Err(DataError::MissingAnnotation(v.record.video_id.clone()).into());
        }
    }
    let fused: Vec<VideoScores> = map_indexed(exec, videos.len(), |i| score_video(&videos[i], params))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut frame_scores = Vec::new();
    let mut frame_labels = Vec::new();
    let mut predicted = Vec::with_capacity(videos.len());
    let mut labels = Vec::with_capacity(videos.len());
    for (v, f) in videos.iter().zip(&fused) {
        let n_frames = v.record.n_frames;
        frame_scores.extend(expand_scores(f.scores.data(), n_frames));
        if v.record.is_anomaly() {
            frame_labels.extend(annotations.frame_labels(&v.record.video_id, n_frames));
        } else {
            frame_labels.extend(std::iter::repeat_n(0u8, n_frames));
        }
        predicted.push(crate::model::forward::argmax(f.probs.data()));
        labels.push(v.label());
    }
    Ok(EvalReport {
        roc: roc_auc(&frame_scores, &frame_labels)?,
        classification: classify_videos(&predicted, &labels, params.config().outputs(), include_normal)?,
        include_normal,
    })
}
