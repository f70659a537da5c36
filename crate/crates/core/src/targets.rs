//! Per-moment training targets: level assignment by regression range,
//! center sampling, and shortest-action tie breaking.

use serde::{Deserialize, Serialize};

use crate::model::PyramidGeometry;
use crate::types::ActionInstance;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TargetError {
    #[error("action {index} has start {start} >= end {end}")]
    EmptyAction { index: usize, start: f64, end: f64 },
    #[error("action {index} has label {label}, but there are {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("invalid loss config: {0}")]
    Config(String),
}

fn default_lambda_reg() -> f64 {
    1.0
}
fn default_focal_gamma() -> f64 {
    2.0
}
fn default_focal_alpha() -> f64 {
    0.25
}
fn default_center_radius() -> f64 {
    1.5
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(default = "default_lambda_reg")]
    pub lambda_reg: f64,
    #[serde(default = "default_focal_gamma")]
    pub focal_gamma: f64,
    #[serde(default = "default_focal_alpha")]
    pub focal_alpha: f64,
    #[serde(default = "default_center_radius")]
    pub center_sampling_radius: f64,
    #[serde(default = "default_true")]
    pub center_sampling: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_reg: default_lambda_reg(),
            focal_gamma: default_focal_gamma(),
            focal_alpha: default_focal_alpha(),
            center_sampling_radius: default_center_radius(),
            center_sampling: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TargetError> {
        if !(self.lambda_reg > 0.0) {
            return Err(TargetError::Config(format!("lambda_reg must be > 0, got {}", self.lambda_reg)));
        }
        if !(self.center_sampling_radius > 0.0) {
            return Err(TargetError::Config(format!(
                "center_sampling_radius must be > 0, got {}",
                self.center_sampling_radius
            )));
        }
        if !(self.focal_gamma >= 0.0) || !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(TargetError::Config("focal_gamma must be >= 0 and focal_alpha in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Targets for one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    pub stride: usize,
    pub positive: Vec<bool>,
    /// Multi-hot `[T_l, C]`, row-major.
    pub cls: Vec<f64>,
    /// `[T_l, 2]` onset / offset distances divided by the stride; zero at negatives.
    pub reg: Vec<f64>,
    /// Index of the action that supplied the regression target.
    pub source: Vec<Option<usize>>,
}

impl LevelTargets {
    pub fn len(&self) -> usize {
        self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }

    pub fn num_positives(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }

    /// Grid position of moment `i`.
    pub fn position(&self, i: usize) -> f64 {
        (i * self.stride) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentTargets {
    pub num_classes: usize,
    pub levels: Vec<LevelTargets>,
}

impl MomentTargets {
    /// Positive count over all levels.
    pub fn num_positives(&self) -> usize {
        self.levels.iter().map(LevelTargets::num_positives).sum()
    }
}

/// Assigns ground-truth actions (grid units) to moments of every level.
///
/// Moment `t` of a level with stride `s` is positive for action `(a, b)` when
/// `a < t < b`, `max(t - a, b - t)` lies in the level's range and, with center
/// sampling, `|t - (a + b) / 2| < radius * s`.
pub fn assign_targets(
    actions: &[ActionInstance],
    geometry: &PyramidGeometry,
    num_classes: usize,
    cfg: &LossConfig,
) -> Result<MomentTargets, TargetError> {
    for (index, a) in actions.iter().enumerate() {
        if !(a.start < a.end) {
            return Err(TargetError::EmptyAction {
                index,
                start: a.start,
                end: a.end,
            });
        }
        if a.label >= num_classes {
            return Err(TargetError::LabelOutOfRange {
                index,
                label: a.label,
                num_classes,
            });
        }
    }
    let levels = geometry
        .levels
        .iter()
        .map(|lvl| {
            let stride = lvl.stride as f64;
            let mut out = LevelTargets {
                stride: lvl.stride,
                positive: vec![false; lvl.len],
                cls: vec![0.0; lvl.len * num_classes],
                reg: vec![0.0; lvl.len * 2],
                source: vec![None; lvl.len],
            };
            for i in 0..lvl.len {
                let t = out.position(i);
                let mut best: Option<(usize, f64)> = None;
                for (k, a) in actions.iter().enumerate() {
                    if !(a.start < t && t < a.end) {
                        continue;
                    }
                    if cfg.center_sampling {
                        let radius = cfg.center_sampling_radius * stride;
                        if (t - a.center()).abs() >= radius {
                            continue;
                        }
                    }
                    if !lvl.range.contains((t - a.start).max(a.end - t)) {
                        continue;
                    }
                    out.cls[i * num_classes + a.label] = 1.0;
                    if best.is_none_or(|(_, d)| a.duration() < d) {
                        best = Some((k, a.duration()));
                    }
                }
                if let Some((k, _)) = best {
                    let a = &actions[k];
                    out.positive[i] = true;
                    out.reg[2 * i] = (t - a.start) / stride;
                    out.reg[2 * i + 1] = (a.end - t) / stride;
                    out.source[i] = Some(k);
                }
            }
            out
        })
        .collect();
    Ok(MomentTargets { num_classes, levels })
}
