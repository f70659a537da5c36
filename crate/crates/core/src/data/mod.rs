//! Feature sequences, annotations, training windows and dataset storage.

pub mod afmt;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use af_tensor::{Tensor, TensorError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::eval::{GroundTruthFile, GtAnnotation, GtVideo};
use crate::types::ActionInstance;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}: {1}")]
    Json(PathBuf, String),
    #[error("not a feature file (bad magic)")]
    BadMagic,
    #[error("unsupported feature file version {0}")]
    Version(u32),
    #[error("feature file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("feature file has a zero dimension")]
    Empty,
    #[error("non-finite feature value at flat index {index}")]
    NonFinite { index: usize },
    #[error("video {0:?} not found")]
    MissingVideo(String),
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("video {0:?} has no actions to crop around")]
    NoActions(String),
    #[error("invalid data config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// A `[T, D]` grid of clip features; step `t` starts at `t * feature_stride / fps` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub features: Tensor<f32>,
    pub fps: f64,
    /// Frames between consecutive feature steps.
    pub feature_stride: f64,
    /// Frames covered by one feature.
    pub clip_window: f64,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn seconds_per_step(&self) -> f64 {
        self.feature_stride / self.fps
    }

    pub fn to_seconds(&self, grid: f64) -> f64 {
        grid * self.feature_stride / self.fps
    }

    pub fn to_grid(&self, seconds: f64) -> f64 {
        seconds * self.fps / self.feature_stride
    }

    pub fn duration(&self) -> f64 {
        self.to_seconds(self.len() as f64)
    }

    /// Annotation in grid units: starts rounded down, ends rounded up,
    /// clipped to `[0, T]`.
    pub fn actions_to_grid(&self, actions: &[ActionInstance]) -> Vec<ActionInstance> {
        const EPS: f64 = 1e-6;
        let len = self.len() as f64;
        actions
            .iter()
            .filter_map(|a| {
                let s = (self.to_grid(a.start) + EPS).floor().max(0.0);
                let e = (self.to_grid(a.end) - EPS).ceil().min(len);
                let e = if e <= s { (s + 1.0).min(len) } else { e };
                (e > s).then(|| ActionInstance::with_score(s, e, a.label, a.score))
            })
            .collect()
    }
}

/// Ground truth of one video, in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub duration_sec: f64,
    pub actions: Vec<ActionInstance>,
}

impl VideoAnnotation {
    pub fn validate(&self, num_classes: usize) -> Result<(), DataError> {
        for a in &self.actions {
            if !(0.0 <= a.start && a.start < a.end && a.end <= self.duration_sec + 1e-9) {
                return Err(DataError::InvalidAnnotation(format!(
                    "{}: segment [{}, {}] outside [0, {}] or empty",
                    self.video_id, a.start, a.end, self.duration_sec
                )));
            }
            if a.label >= num_classes {
                return Err(DataError::InvalidAnnotation(format!(
                    "{}: label {} with {num_classes} classes",
                    self.video_id, a.label
                )));
            }
        }
        Ok(())
    }
}

/// A fixed-length training input.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    pub video_id: String,
    /// `[T_max, D]`, zero past the valid region.
    pub features: Tensor<f32>,
    pub mask: Vec<bool>,
    /// Window-local grid units.
    pub actions: Vec<ActionInstance>,
    /// First source step covered by the window.
    pub offset: usize,
}

/// Fraction of an action's span that must survive cropping.
pub const MIN_KEPT_FRACTION: f64 = 0.25;
const MAX_CROP_ATTEMPTS: usize = 100;

/// RNG for one video in one epoch, independent of visiting order.
pub fn window_rng(seed: u64, epoch: usize, video: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | video as u64);
    rng
}

fn crop_actions(actions: &[ActionInstance], offset: usize, len: usize) -> Vec<ActionInstance> {
    crop_actions_with(actions, offset, len, MIN_KEPT_FRACTION)
}

fn crop_actions_with(
    actions: &[ActionInstance],
    offset: usize,
    len: usize,
    min_fraction: f64,
) -> Vec<ActionInstance> {
    let (lo, hi) = (offset as f64, (offset + len) as f64);
    actions
        .iter()
        .filter_map(|a| {
            let s = a.start.max(lo);
            let e = a.end.min(hi);
            (e - s >= min_fraction * a.duration() && e > s)
                .then(|| ActionInstance::with_score(s - lo, e - lo, a.label, a.score))
        })
        .collect()
}

/// Pads a short sequence to `t_max`, or takes a random `t_max`-step crop
/// that keeps at least one action. `actions` are in grid units.
pub fn sample_window(
    seq: &FeatureSequence,
    actions: &[ActionInstance],
    t_max: usize,
    rng: &mut impl Rng,
) -> Result<TrainingWindow, DataError> {
    let (len, dim) = (seq.len(), seq.dim());
    if t_max == 0 {
        return Err(DataError::Config("t_max must be positive".into()));
    }
    if len <= t_max {
        let mut features = Tensor::zeros(&[t_max, dim]);
        features.data_mut()[..len * dim].copy_from_slice(seq.features.data());
        return Ok(TrainingWindow {
            video_id: seq.video_id.clone(),
            features,
            mask: (0..t_max).map(|i| i < len).collect(),
            actions: crop_actions(actions, 0, len),
            offset: 0,
        });
    }
    if actions.is_empty() {
        return Err(DataError::NoActions(seq.video_id.clone()));
    }
    let mut chosen = None;
    for _ in 0..MAX_CROP_ATTEMPTS {
        let offset = rng.random_range(0..=len - t_max);
        let kept = crop_actions(actions, offset, t_max);
        if !kept.is_empty() {
            chosen = Some((offset, kept));
            break;
        }
    }
    let (offset, kept) = match chosen {
        Some(c) => c,
        None => {
            // Fall back to a crop starting at a random action.
            let a = &actions[rng.random_range(0..actions.len())];
            let offset = (a.start.floor() as usize).min(len - t_max);
            let kept = crop_actions(actions, offset, t_max);
            if kept.is_empty() {
                // Every action is too long for the window to hold a quarter of it.
                (offset, crop_actions_with(actions, offset, t_max, 0.0))
            } else {
                (offset, kept)
            }
        }
    };
    Ok(TrainingWindow {
        video_id: seq.video_id.clone(),
        features: seq.features.slice_rows(offset, t_max),
        mask: vec![true; t_max],
        actions: kept,
        offset,
    })
}

/// Linear resampling to `target_len` steps with aligned end points.
pub fn resize_fixed(seq: &FeatureSequence, target_len: usize) -> Result<FeatureSequence, DataError> {
    let (len, dim) = (seq.len(), seq.dim());
    if target_len == 0 {
        return Err(DataError::Config("target length must be positive".into()));
    }
    let mut out = Tensor::zeros(&[target_len, dim]);
    let src = seq.features.data();
    for i in 0..target_len {
        let x = if target_len == 1 || len == 1 {
            0.0
        } else {
            i as f64 * (len - 1) as f64 / (target_len - 1) as f64
        };
        let lo = (x.floor() as usize).min(len - 1);
        let hi = (lo + 1).min(len - 1);
        let w = (x - lo as f64) as f32;
        for c in 0..dim {
            let a = src[lo * dim + c];
            let b = src[hi * dim + c];
            out.data_mut()[i * dim + c] = if w == 0.0 { a } else { a + w * (b - a) };
        }
    }
    Ok(FeatureSequence {
        features: out,
        feature_stride: seq.feature_stride * len as f64 / target_len as f64,
        ..seq.clone()
    })
}

/// Keeps every `factor`-th step.
pub fn stride_downsample(seq: &FeatureSequence, factor: usize) -> Result<FeatureSequence, DataError> {
    if factor == 0 {
        return Err(DataError::Config("downsampling factor must be positive".into()));
    }
    let dim = seq.dim();
    let rows: Vec<f32> = (0..seq.len())
        .step_by(factor)
        .flat_map(|t| seq.features.row(t).to_vec())
        .collect();
    let len = rows.len() / dim;
    Ok(FeatureSequence {
        features: Tensor::from_vec(&[len, dim], rows)?,
        feature_stride: seq.feature_stride * factor as f64,
        ..seq.clone()
    })
}

/// A video with its features and annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub features: FeatureSequence,
    pub annotation: VideoAnnotation,
    pub subset: String,
}

impl Video {
    pub fn grid_actions(&self) -> Vec<ActionInstance> {
        self.features.actions_to_grid(&self.annotation.actions)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub num_classes: usize,
    pub videos: Vec<Video>,
}

pub const FEATURE_DIR: &str = "features";
pub const ANNOTATION_FILE: &str = "annotations.json";

impl Dataset {
    pub fn subset(&self, name: &str) -> Dataset {
        Dataset {
            num_classes: self.num_classes,
            videos: self.videos.iter().filter(|v| v.subset == name).cloned().collect(),
        }
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.features.dim())
    }

    pub fn ground_truth(&self) -> GroundTruthFile {
        let database = self
            .videos
            .iter()
            .map(|v| {
                let annotations = v
                    .annotation
                    .actions
                    .iter()
                    .map(|a| GtAnnotation {
                        segment: [a.start, a.end],
                        label_id: a.label,
                        label: None,
                    })
                    .collect();
                let gv = GtVideo {
                    duration: v.annotation.duration_sec,
                    fps: v.features.fps,
                    subset: v.subset.clone(),
                    annotations,
                };
                (v.annotation.video_id.clone(), gv)
            })
            .collect();
        GroundTruthFile { database }
    }

    /// Writes `features/*.afmt`, `features/manifest.json` and `annotations.json`.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        let feat_dir = dir.join(FEATURE_DIR);
        fs::create_dir_all(&feat_dir).map_err(|e| DataError::io(&feat_dir, e))?;
        let mut manifest = afmt::Manifest::default();
        for v in &self.videos {
            afmt::save_features(&feat_dir, &mut manifest, &v.features)?;
        }
        manifest.write(&feat_dir)?;
        let path = dir.join(ANNOTATION_FILE);
        let text = serde_json::to_string_pretty(&self.ground_truth()).expect("annotations serialize");
        fs::write(&path, text).map_err(|e| DataError::io(&path, e))
    }

    /// Loads a directory written by [`Dataset::save`]. `num_classes` of
    /// `None` infers one more than the largest label.
    pub fn load(dir: &Path, num_classes: Option<usize>) -> Result<Dataset, DataError> {
        let path = dir.join(ANNOTATION_FILE);
        let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
        let gt: GroundTruthFile = serde_json::from_str(&text).map_err(|e| DataError::Json(path.clone(), e.to_string()))?;
        let feat_dir = dir.join(FEATURE_DIR);
        let manifest = afmt::Manifest::read(&feat_dir)?;
        let inferred = gt
            .database
            .values()
            .flat_map(|v| v.annotations.iter().map(|a| a.label_id + 1))
            .max()
            .unwrap_or(0);
        let num_classes = num_classes.unwrap_or(inferred);
        let mut videos = Vec::with_capacity(gt.database.len());
        for (id, gv) in &gt.database {
            let features = afmt::load_features(&feat_dir, &manifest, id)?;
            let annotation = VideoAnnotation {
                video_id: id.clone(),
                duration_sec: gv.duration,
                actions: gv
                    .annotations
                    .iter()
                    .map(|a| ActionInstance::new(a.segment[0], a.segment[1], a.label_id))
                    .collect(),
            };
            annotation.validate(num_classes)?;
            videos.push(Video {
                features,
                annotation,
                subset: gv.subset.clone(),
            });
        }
        Ok(Dataset { num_classes, videos })
    }

    /// Feature sequences by id, for inference over a directory without annotations.
    pub fn load_features_dir(dir: &Path) -> Result<BTreeMap<String, FeatureSequence>, DataError> {
        let manifest = afmt::Manifest::read(dir)?;
        manifest
            .videos
            .keys()
            .map(|id| Ok((id.clone(), afmt::load_features(dir, &manifest, id)?)))
            .collect()
    }
}
