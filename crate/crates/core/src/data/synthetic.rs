//! Synthetic localization data: each class owns a random unit signature
//! vector, and every action adds that signature under a smooth envelope on
//! top of Gaussian background noise.

use af_tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, FeatureSequence, Video, VideoAnnotation};
use crate::model::ModelConfig;
use crate::targets::{assign_targets, LossConfig};
use crate::types::ActionInstance;

fn d_num_videos() -> usize {
    250
}
fn d_num_test() -> usize {
    50
}
fn d_min_len() -> usize {
    128
}
fn d_max_len() -> usize {
    256
}
fn d_dim() -> usize {
    32
}
fn d_classes() -> usize {
    3
}
fn d_min_instances() -> usize {
    1
}
fn d_max_instances() -> usize {
    5
}
fn d_min_duration() -> f64 {
    6.0
}
fn d_max_duration() -> f64 {
    96.0
}
fn d_noise() -> f64 {
    0.3
}
fn d_amplitude() -> f64 {
    1.0
}
fn d_fps() -> f64 {
    16.0
}
fn d_stride() -> f64 {
    4.0
}
fn d_coverage_levels() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Total videos; the last `num_test` form the test subset.
    #[serde(default = "d_num_videos")]
    pub num_videos: usize,
    #[serde(default = "d_num_test")]
    pub num_test: usize,
    #[serde(default = "d_min_len")]
    pub min_len: usize,
    #[serde(default = "d_max_len")]
    pub max_len: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_classes")]
    pub num_classes: usize,
    #[serde(default = "d_min_instances")]
    pub min_instances: usize,
    #[serde(default = "d_max_instances")]
    pub max_instances: usize,
    /// Action length range in feature steps, sampled log-uniformly.
    #[serde(default = "d_min_duration")]
    pub min_duration: f64,
    #[serde(default = "d_max_duration")]
    pub max_duration: f64,
    /// Standard deviation of the per-channel background noise.
    #[serde(default = "d_noise")]
    pub noise: f64,
    #[serde(default = "d_amplitude")]
    pub amplitude: f64,
    #[serde(default = "d_fps")]
    pub fps: f64,
    #[serde(default = "d_stride")]
    pub feature_stride: f64,
    /// When non-zero, generation fails unless every level of a pyramid with
    /// this many levels (ranges doubling from 4) gets a positive moment.
    #[serde(default = "d_coverage_levels")]
    pub coverage_levels: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: &str| Err(DataError::Config(m.to_string()));
        if self.num_test > self.num_videos {
            return fail("num_test exceeds num_videos");
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return fail("need 2 <= min_len <= max_len");
        }
        if self.dim == 0 || self.num_classes == 0 {
            return fail("dim and num_classes must be positive");
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return fail("need 1 <= min_instances <= max_instances");
        }
        if !(self.min_duration >= 2.0 && self.min_duration <= self.max_duration) {
            return fail("need 2 <= min_duration <= max_duration");
        }
        if self.max_instances as f64 * (self.min_duration + 1.0) > self.min_len as f64 {
            return fail("max_instances actions of min_duration do not fit in min_len steps");
        }
        if !(self.noise >= 0.0 && self.fps > 0.0 && self.feature_stride > 0.0) {
            return fail("noise must be >= 0 and fps, feature_stride > 0");
        }
        Ok(())
    }
}

/// Envelope weight of step `t` inside `[start, end)`: a plateau with
/// raised-cosine shoulders.
pub fn envelope(t: usize, start: usize, end: usize) -> f64 {
    if t < start || t >= end {
        return 0.0;
    }
    let len = (end - start) as f64;
    let taper = (0.15 * len).max(1.0);
    let x = t as f64 + 0.5 - start as f64;
    let edge = x.min(len - x) / taper;
    if edge >= 1.0 {
        1.0
    } else {
        0.2 + 0.4 * (1.0 - (std::f64::consts::PI * edge).cos())
    }
}

/// Random unit vector per class.
pub fn signatures(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..spec.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Non-overlapping integer segments with gaps of at least one step.
fn layout(spec: &SyntheticSpec, len: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let k = rng.random_range(spec.min_instances..=spec.max_instances);
    let (lo, hi) = (spec.min_duration.ln(), spec.max_duration.ln());
    let mut durs: Vec<usize> = (0..k)
        .map(|_| rng.random_range(lo..=hi).exp().round() as usize)
        .collect();
    // Shrink the longest actions until everything fits with unit gaps.
    let budget = len - (k + 1);
    while durs.iter().sum::<usize>() > budget {
        let i = (0..k).max_by_key(|&i| (durs[i], usize::MAX - i)).unwrap();
        durs[i] -= 1;
    }
    let slack = budget - durs.iter().sum::<usize>();
    let mut cuts: Vec<usize> = (0..k).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut segs = Vec::with_capacity(k);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (d, cut) in durs.into_iter().zip(cuts) {
        cursor += 1 + (cut - prev_cut);
        prev_cut = cut;
        segs.push((cursor, cursor + d));
        cursor += d;
    }
    segs
}

/// Generates a dataset deterministically from `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sigs = signatures(spec, &mut rng);
    let width = spec.num_videos.max(1).to_string().len().max(4);
    let mut videos = Vec::with_capacity(spec.num_videos);
    for v in 0..spec.num_videos {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let segs = layout(spec, len, &mut rng);
        let labels: Vec<usize> = segs.iter().map(|_| rng.random_range(0..spec.num_classes)).collect();
        let mut data = Vec::with_capacity(len * spec.dim);
        for t in 0..len {
            for c in 0..spec.dim {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let mut x = spec.noise * noise;
                for (&(s, e), &label) in segs.iter().zip(&labels) {
                    x += spec.amplitude * envelope(t, s, e) * sigs[label][c];
                }
                data.push(x as f32);
            }
        }
        let video_id = format!("video_{v:0width$}");
        let seconds = spec.feature_stride / spec.fps;
        let actions = segs
            .iter()
            .zip(&labels)
            .map(|(&(s, e), &label)| ActionInstance::new(s as f64 * seconds, e as f64 * seconds, label))
            .collect();
        videos.push(Video {
            features: FeatureSequence {
                video_id: video_id.clone(),
                features: Tensor::from_vec(&[len, spec.dim], data)?,
                fps: spec.fps,
                feature_stride: spec.feature_stride,
                clip_window: 4.0 * spec.feature_stride,
            },
            annotation: VideoAnnotation {
                video_id,
                duration_sec: len as f64 * seconds,
                actions,
            },
            subset: if v + spec.num_test >= spec.num_videos { "test" } else { "train" }.to_string(),
        });
    }
    let dataset = Dataset {
        num_classes: spec.num_classes,
        videos,
    };
    if spec.coverage_levels > 0 {
        let counts = level_positive_counts(&dataset.subset("train"), spec.coverage_levels);
        if let Some(level) = counts.iter().position(|&n| n == 0) {
            return Err(DataError::Config(format!(
                "pyramid level {level} receives no positive moment; widen the duration range or add videos (counts {counts:?})"
            )));
        }
    }
    Ok(dataset)
}

/// Positive moments per pyramid level over a dataset, with default center
/// sampling and ranges doubling from 4.
pub fn level_positive_counts(dataset: &Dataset, levels: usize) -> Vec<usize> {
    let cfg = ModelConfig::new(1, dataset.num_classes.max(1)).with_levels(levels, 4.0);
    let mut counts = vec![0; levels];
    for v in &dataset.videos {
        let geom = cfg.geometry(v.features.len());
        let targets = assign_targets(&v.grid_actions(), &geom, cfg.num_classes, &LossConfig::default())
            .expect("generated actions are valid");
        for (c, l) in counts.iter_mut().zip(&targets.levels) {
            *c += l.num_positives();
        }
    }
    counts
}
