//! Detection metrics over temporal segments: per-class average precision
//! with greedy tIoU matching, mAP at several thresholds, and the
//! ground-truth JSON format.

pub mod profile;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::types::ActionInstance;

/// Instances grouped by video id.
pub type VideoMap = BTreeMap<String, Vec<ActionInstance>>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("invalid tIoU thresholds: {0}")]
    Thresholds(String),
    #[error("unknown threshold preset {0:?}")]
    Preset(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub tiou_thresholds: Vec<f64>,
}

fn steps(first: u32, last: u32, denom: f64) -> Vec<f64> {
    (first..=last).map(|k| k as f64 / denom).collect()
}

impl EvalConfig {
    /// 0.3, 0.4, ..., 0.7.
    pub fn thumos() -> Self {
        EvalConfig {
            tiou_thresholds: steps(3, 7, 10.0),
        }
    }

    /// 0.5, 0.55, ..., 0.95.
    pub fn activitynet() -> Self {
        EvalConfig {
            tiou_thresholds: (10..=19).map(|k| k as f64 / 20.0).collect(),
        }
    }

    /// 0.1, 0.2, ..., 0.5.
    pub fn epic() -> Self {
        EvalConfig {
            tiou_thresholds: steps(1, 5, 10.0),
        }
    }

    pub fn preset(name: &str) -> Result<Self, EvalError> {
        match name {
            "thumos" => Ok(Self::thumos()),
            "activitynet" => Ok(Self::activitynet()),
            "epic" => Ok(Self::epic()),
            other => Err(EvalError::Preset(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.tiou_thresholds.is_empty() {
            return Err(EvalError::Thresholds("at least one threshold is required".into()));
        }
        if self.tiou_thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(EvalError::Thresholds("thresholds must lie in (0, 1]".into()));
        }
        if self.tiou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::Thresholds("thresholds must be strictly increasing".into()));
        }
        Ok(())
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::thumos()
    }
}

/// A prediction with its video, in ranking order.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Ranked<'a> {
    pub video: &'a str,
    pub index: usize,
    pub inst: &'a ActionInstance,
}

/// Score descending, then start, label, video id and input position.
pub(crate) fn rank_order(a: &Ranked<'_>, b: &Ranked<'_>) -> Ordering {
    b.inst
        .score
        .total_cmp(&a.inst.score)
        .then(a.inst.start.total_cmp(&b.inst.start))
        .then(a.inst.label.cmp(&b.inst.label))
        .then(a.video.cmp(b.video))
        .then(a.index.cmp(&b.index))
}

pub(crate) fn ranked<'a>(preds: &'a VideoMap, label: Option<usize>) -> Vec<Ranked<'a>> {
    let mut out: Vec<Ranked<'a>> = preds
        .iter()
        .flat_map(|(video, list)| {
            list.iter().enumerate().map(move |(index, inst)| Ranked {
                video: video.as_str(),
                index,
                inst,
            })
        })
        .filter(|r| label.is_none_or(|l| r.inst.label == l))
        .collect();
    out.sort_by(rank_order);
    out
}

/// Labels that have at least one ground-truth instance.
pub fn gt_classes(gts: &VideoMap) -> BTreeSet<usize> {
    gts.values().flatten().map(|a| a.label).collect()
}

/// True-positive flags for the class-`label` predictions in ranking order.
/// Each prediction claims the unmatched same-video ground truth with the
/// highest tIoU (lowest index on ties) if that tIoU reaches `threshold`.
pub fn match_predictions(preds: &VideoMap, gts: &VideoMap, label: usize, threshold: f64) -> Vec<bool> {
    let mut matched: BTreeMap<&str, Vec<bool>> = gts
        .iter()
        .map(|(v, list)| (v.as_str(), vec![false; list.len()]))
        .collect();
    ranked(preds, Some(label))
        .iter()
        .map(|p| {
            let (Some(list), Some(used)) = (gts.get(p.video), matched.get_mut(p.video)) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in list.iter().enumerate() {
                if g.label != label || used[j] {
                    continue;
                }
                let o = p.inst.tiou(g);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, o)) if o >= threshold => {
                    used[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Precision / recall after each ranked prediction.
pub fn precision_recall(tp: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let mut hits = 0usize;
    tp.iter()
        .enumerate()
        .map(|(k, &t)| {
            hits += t as usize;
            (hits as f64 / (k + 1) as f64, hits as f64 / num_gt as f64)
        })
        .collect()
}

/// Area under the monotone precision envelope of a PR curve.
pub fn interpolated_ap(pr: &[(f64, f64)]) -> f64 {
    let mut prec: Vec<f64> = std::iter::once(0.0)
        .chain(pr.iter().map(|p| p.0))
        .chain(std::iter::once(0.0))
        .collect();
    let rec: Vec<f64> = std::iter::once(0.0)
        .chain(pr.iter().map(|p| p.1))
        .chain(std::iter::once(1.0))
        .collect();
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (1..rec.len())
        .filter(|&i| rec[i] != rec[i - 1])
        .map(|i| (rec[i] - rec[i - 1]) * prec[i])
        .sum()
}

/// AP from ranked match flags: the precision envelope at every true
/// positive, averaged over all `num_gt` ground truths. Equal to
/// [`interpolated_ap`] of the same curve, but each recall step is exactly
/// `1 / num_gt` instead of a difference of rounded recalls.
pub fn ap_from_matches(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut envelope: Vec<f64> = precision_recall(tp, num_gt).into_iter().map(|p| p.0).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let total = tp.iter().zip(&envelope).filter(|(&t, _)| t).fold(0.0, |acc, (_, &p)| acc + p);
    total / num_gt as f64
}

/// AP of one class; `None` when the class has no ground truth.
pub fn average_precision(preds: &VideoMap, gts: &VideoMap, label: usize, threshold: f64) -> Option<f64> {
    let num_gt = gts.values().flatten().filter(|g| g.label == label).count();
    if num_gt == 0 {
        return None;
    }
    let tp = match_predictions(preds, gts, label, threshold);
    Some(ap_from_matches(&tp, num_gt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub label: usize,
    pub num_gt: usize,
    /// One AP per threshold.
    pub ap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tiou_thresholds: Vec<f64>,
    /// Mean AP over classes with ground truth, per threshold.
    pub map: Vec<f64>,
    pub average_map: f64,
    pub per_class: Vec<ClassAp>,
    pub num_predictions: usize,
    pub num_ground_truth: usize,
}

impl EvalReport {
    /// mAP at `threshold`, if it was evaluated.
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.tiou_thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-9)
            .map(|i| self.map[i])
    }
}

/// mAP at every configured threshold and their mean. Classes without
/// ground truth do not enter the mean; with no ground truth at all every
/// mAP is 0.
pub fn map_at(preds: &VideoMap, gts: &VideoMap, cfg: &EvalConfig) -> EvalReport {
    let classes = gt_classes(gts);
    let per_class: Vec<ClassAp> = classes
        .iter()
        .map(|&label| ClassAp {
            label,
            num_gt: gts.values().flatten().filter(|g| g.label == label).count(),
            ap: cfg
                .tiou_thresholds
                .iter()
                .map(|&t| average_precision(preds, gts, label, t).unwrap_or(0.0))
                .collect(),
        })
        .collect();
    let map: Vec<f64> = (0..cfg.tiou_thresholds.len())
        .map(|k| {
            if per_class.is_empty() {
                0.0
            } else {
                per_class.iter().map(|c| c.ap[k]).sum::<f64>() / per_class.len() as f64
            }
        })
        .collect();
    let average_map = if map.is_empty() {
        0.0
    } else {
        map.iter().sum::<f64>() / map.len() as f64
    };
    EvalReport {
        tiou_thresholds: cfg.tiou_thresholds.clone(),
        map,
        average_map,
        per_class,
        num_predictions: preds.values().map(Vec::len).sum(),
        num_ground_truth: gts.values().map(Vec::len).sum(),
    }
}

/// Plot-ready PR points: `label,threshold,rank,precision,recall`.
pub fn pr_curve_csv(preds: &VideoMap, gts: &VideoMap, cfg: &EvalConfig) -> String {
    let mut out = String::from("label,threshold,rank,precision,recall\n");
    for label in gt_classes(gts) {
        let num_gt = gts.values().flatten().filter(|g| g.label == label).count();
        for &t in &cfg.tiou_thresholds {
            let tp = match_predictions(preds, gts, label, t);
            for (rank, (p, r)) in precision_recall(&tp, num_gt).into_iter().enumerate() {
                out.push_str(&format!("{label},{t},{},{p},{r}\n", rank + 1));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtAnnotation {
    /// `[start, end]` in seconds.
    pub segment: [f64; 2],
    pub label_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtVideo {
    pub duration: f64,
    #[serde(default)]
    pub fps: f64,
    #[serde(default)]
    pub subset: String,
    pub annotations: Vec<GtAnnotation>,
}

/// `{"database": {video_id: {...}}}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub database: BTreeMap<String, GtVideo>,
}

impl GroundTruthFile {
    /// Instances in seconds, optionally restricted to one subset.
    pub fn instances(&self, subset: Option<&str>) -> VideoMap {
        self.videos(subset)
            .map(|(id, v)| {
                let list = v
                    .annotations
                    .iter()
                    .map(|a| ActionInstance::new(a.segment[0], a.segment[1], a.label_id))
                    .collect();
                (id.clone(), list)
            })
            .collect()
    }

    pub fn durations(&self, subset: Option<&str>) -> BTreeMap<String, f64> {
        self.videos(subset).map(|(id, v)| (id.clone(), v.duration)).collect()
    }

    fn videos<'a>(&'a self, subset: Option<&'a str>) -> impl Iterator<Item = (&'a String, &'a GtVideo)> + 'a {
        self.database
            .iter()
            .filter(move |(_, v)| subset.is_none_or(|s| v.subset == s))
    }
}
