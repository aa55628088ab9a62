//! Manifest and temporal-annotation CSV files.
//!
//! Manifest header: `video_id,split,class_label,n_frames,feature_paths`, with
//! multiple feature paths (crop views) separated by `;`. Annotation header:
//! `video_id,start_frame,end_frame`, frames 1-based and inclusive.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub split: Split,
    /// 0 = Normal, 1..=C anomaly classes.
    pub class_label: usize,
    pub n_frames: usize,
    /// One path per crop view, resolved against the feature directory.
    pub feature_paths: Vec<PathBuf>,
}

impl VideoRecord {
    pub fn is_anomaly(&self) -> bool {
        self.class_label != 0
    }
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    video_id: String,
    split: String,
    class_label: i64,
    n_frames: i64,
    feature_paths: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<VideoRecord>,
}

impl Manifest {
    /// Parses a manifest. Relative feature paths are joined onto `base_dir`.
    /// Labels above `classes` are rejected.
    pub fn from_reader(reader: impl Read, base_dir: &Path, classes: usize) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut seen = HashSet::new();
        let mut records = Vec::new();
        for (i, row) in rdr.deserialize::<ManifestRow>().enumerate() {
            let line = i + 2;
            let err = |message: String| DataError::Manifest { line, message };
            let row = row.map_err(|e| err(e.to_string()))?;
            let split = match row.split.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(err(format!("unknown split {other:?}"))),
            };
            if row.class_label < 0 || row.class_label as usize > classes {
                return Err(err(format!(
                    "class_label {} outside 0..={classes}",
                    row.class_label
                )));
            }
            if row.n_frames < 1 {
                return Err(err(format!("n_frames must be positive, got {}", row.n_frames)));
            }
            let feature_paths: Vec<PathBuf> = row
                .feature_paths
                .split(';')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(|p| base_dir.join(p))
                .collect();
            if feature_paths.is_empty() {
                return Err(err("no feature paths".into()));
            }
            if !seen.insert(row.video_id.clone()) {
                return Err(DataError::DuplicateVideo(row.video_id));
            }
            records.push(VideoRecord {
                video_id: row.video_id,
                split,
                class_label: row.class_label as usize,
                n_frames: row.n_frames as usize,
                feature_paths,
            });
        }
        Ok(Self { records })
    }

    /// Loads `path`; feature paths resolve against `features_dir`, or the
    /// manifest's own directory when none is given.
    pub fn load(path: &Path, features_dir: Option<&Path>, classes: usize) -> Result<Self, DataError> {
        let base = match features_dir {
            Some(d) => d.to_path_buf(),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        let file = std::fs::File::open(path).map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))?;
        Self::from_reader(file, &base, classes)
    }

    /// Writes the manifest with feature paths relative to `base_dir` where possible.
    pub fn write(&self, writer: impl Write, base_dir: &Path) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["video_id", "split", "class_label", "n_frames", "feature_paths"])?;
        for r in &self.records {
            let paths: Vec<String> = r
                .feature_paths
                .iter()
                .map(|p| p.strip_prefix(base_dir).unwrap_or(p).display().to_string())
                .collect();
            w.write_record([
                r.video_id.clone(),
                r.split.to_string(),
                r.class_label.to_string(),
                r.n_frames.to_string(),
                paths.join(";"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<VideoRecord> {
        self.records.iter().filter(|r| r.split == split).cloned().collect()
    }
}

/// Anomalous frame intervals per video, sorted and merged.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Annotations {
    intervals: HashMap<String, Vec<(usize, usize)>>,
}

#[derive(Debug, Deserialize)]
struct AnnotationRow {
    video_id: String,
    start_frame: i64,
    end_frame: i64,
}

impl Annotations {
    pub fn from_reader(reader: impl Read) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut out = Self::default();
        for (i, row) in rdr.deserialize::<AnnotationRow>().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| DataError::Annotation {
                line,
                message: e.to_string(),
            })?;
            if row.start_frame < 1 || row.end_frame < row.start_frame {
                return Err(DataError::Annotation {
                    line,
                    message: format!("bad interval [{}, {}]", row.start_frame, row.end_frame),
                });
            }
            out.add(&row.video_id, row.start_frame as usize, row.end_frame as usize);
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let file = std::fs::File::open(path).map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))?;
        Self::from_reader(file)
    }

    pub fn add(&mut self, video_id: &str, start: usize, end: usize) {
        let list = self.intervals.entry(video_id.to_string()).or_default();
        list.push((start, end));
        list.sort_unstable();
        let mut merged: Vec<(usize, usize)> = Vec::with_capacity(list.len());
        for &(s, e) in list.iter() {
            match merged.last_mut() {
                Some(last) if s <= last.1 + 1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        *list = merged;
    }

    /// Marks a video as annotated with no anomalous frames.
    pub fn add_empty(&mut self, video_id: &str) {
        self.intervals.entry(video_id.to_string()).or_default();
    }

    pub fn get(&self, video_id: &str) -> Option<&[(usize, usize)]> {
        self.intervals.get(video_id).map(Vec::as_slice)
    }

    /// Per-frame 0/1 labels for a video of `n_frames` frames; intervals are
    /// clipped to the video length.
    pub fn frame_labels(&self, video_id: &str, n_frames: usize) -> Vec<u8> {
        let mut labels = vec![0u8; n_frames];
        for &(s, e) in self.get(video_id).unwrap_or(&[]) {
            for l in labels.iter_mut().take(e.min(n_frames)).skip(s - 1) {
                *l = 1;
            }
        }
        labels
    }

    pub fn write(&self, writer: impl Write) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["video_id", "start_frame", "end_frame"])?;
        let mut ids: Vec<&String> = self.intervals.keys().collect();
        ids.sort();
        for id in ids {
            for &(s, e) in &self.intervals[id] {
                w.write_record([id.clone(), s.to_string(), e.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MANIFEST: &str = "video_id,split,class_label,n_frames,feature_paths\n\
        a,train,0,100,a.feat\n\
        b,test,2,64,b0.feat;b1.feat\n";

    #[test]
    fn parses_manifest_and_resolves_paths() {
        let m = Manifest::from_reader(MANIFEST.as_bytes(), Path::new("/data"), 3).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[1].feature_paths, vec![PathBuf::from("/data/b0.feat"), PathBuf::from("/data/b1.feat")]);
        assert!(m.records[1].is_anomaly());
        assert_eq!(m.split(Split::Test).len(), 1);

        let mut out = Vec::new();
        m.write(&mut out, Path::new("/data")).unwrap();
        let again = Manifest::from_reader(out.as_slice(), Path::new("/data"), 3).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn rejects_duplicates_and_bad_labels() {
        let dup = format!("{MANIFEST}a,test,1,10,x.feat\n");
        assert!(matches!(
            Manifest::from_reader(dup.as_bytes(), Path::new("."), 3),
            Err(DataError::DuplicateVideo(id)) if id == "a"
        ));
        let label = "video_id,split,class_label,n_frames,feature_paths\nz,train,4,10,z.feat\n";
        assert!(matches!(
            Manifest::from_reader(label.as_bytes(), Path::new("."), 3),
            Err(DataError::Manifest { line: 2, .. })
        ));
        let frames = "video_id,split,class_label,n_frames,feature_paths\nz,train,1,0,z.feat\n";
        assert!(Manifest::from_reader(frames.as_bytes(), Path::new("."), 3).is_err());
        let split = "video_id,split,class_label,n_frames,feature_paths\nz,val,1,3,z.feat\n";
        assert!(Manifest::from_reader(split.as_bytes(), Path::new("."), 3).is_err());
    }

    #[test]
    fn annotations_merge_and_label_frames() {
        let csv = "video_id,start_frame,end_frame\nv,5,7\nv,2,3\nv,4,4\nw,9,12\n";
        let a = Annotations::from_reader(csv.as_bytes()).unwrap();
        assert_eq!(a.get("v").unwrap(), &[(2, 7)]);
        assert_eq!(a.frame_labels("w", 10), vec![0, 0, 0, 0, 0, 0, 0, 0, 1, 1]);
        assert_eq!(a.frame_labels("missing", 3), vec![0, 0, 0]);
        assert!(Annotations::from_reader("video_id,start_frame,end_frame\nv,0,3\n".as_bytes()).is_err());
        assert!(Annotations::from_reader("video_id,start_frame,end_frame\nv,5,3\n".as_bytes()).is_err());

        let mut out = Vec::new();
        a.write(&mut out).unwrap();
        assert_eq!(Annotations::from_reader(out.as_slice()).unwrap(), a);
    }
}
