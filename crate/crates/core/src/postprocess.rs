//! Decoding per-moment outputs into detections, Gaussian Soft-NMS, and
//! fusion with external video-level class scores.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use af_tensor::Element;
use serde::{Deserialize, Serialize};

use crate::model::MomentOutput;
use crate::types::{tiou, Detection};

fn default_threshold() -> f64 {
    0.001
}
fn default_topk() -> usize {
    2000
}
fn default_sigma() -> f64 {
    0.5
}
fn default_max_detections() -> usize {
    200
}
fn default_fusion_topk() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    #[serde(default = "default_threshold")]
    pub pre_nms_score_threshold: f64,
    /// Candidates kept per pyramid level before suppression.
    #[serde(default = "default_topk")]
    pub pre_nms_topk: usize,
    #[serde(default = "default_sigma")]
    pub soft_nms_sigma: f64,
    #[serde(default = "default_threshold")]
    pub soft_nms_min_score: f64,
    #[serde(default = "default_max_detections")]
    pub max_detections_per_video: usize,
    #[serde(default = "default_fusion_topk")]
    pub fusion_topk: usize,
    /// Suppress across classes instead of within each class.
    #[serde(default)]
    pub class_agnostic_nms: bool,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            pre_nms_score_threshold: default_threshold(),
            pre_nms_topk: default_topk(),
            soft_nms_sigma: default_sigma(),
            soft_nms_min_score: default_threshold(),
            max_detections_per_video: default_max_detections(),
            fusion_topk: default_fusion_topk(),
            class_agnostic_nms: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PostprocessError {
    #[error("invalid postprocess config: {0}")]
    Config(String),
    #[error("fusion top-k {topk} exceeds the {classes} external classes")]
    FusionTopK { topk: usize, classes: usize },
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<(), PostprocessError> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.pre_nms_score_threshold) || !unit.contains(&self.soft_nms_min_score) {
            return Err(PostprocessError::Config("score thresholds must lie in [0, 1]".into()));
        }
        if self.pre_nms_topk == 0 || self.max_detections_per_video == 0 || self.fusion_topk == 0 {
            return Err(PostprocessError::Config("top-k limits must be at least 1".into()));
        }
        if !(self.soft_nms_sigma > 0.0) {
            return Err(PostprocessError::Config("soft_nms_sigma must be > 0".into()));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Turns per-moment outputs into candidate segments in input grid units,
/// clipped to `[0, seq_len]`.
pub fn decode<T: Element>(out: &MomentOutput<T>, seq_len: f64, cfg: &PostprocessConfig) -> Vec<Detection> {
    let mut dets = Vec::new();
    for level in &out.levels {
        let classes = level.cls_logits.shape()[1];
        let stride = level.stride as f64;
        let logits = level.cls_logits.data();
        let mut cands: Vec<(f64, usize)> = Vec::new();
        for (i, &valid) in level.mask.iter().enumerate() {
            if !valid {
                continue;
            }
            for c in 0..classes {
                let j = i * classes + c;
                let p = sigmoid(logits[j].to_f64_lossy());
                if p > cfg.pre_nms_score_threshold {
                    cands.push((p, j));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        cands.truncate(cfg.pre_nms_topk);
        let reg = level.reg.data();
        for (score, j) in cands {
            let (i, label) = (j / classes, j % classes);
            let t = i as f64 * stride;
            let start = (t - reg[2 * i].to_f64_lossy() * stride).max(0.0);
            let end = (t + reg[2 * i + 1].to_f64_lossy() * stride).min(seq_len);
            if end > start {
                dets.push(Detection::with_score(start, end, label, score));
            }
        }
    }
    dets
}

/// Gaussian Soft-NMS for one group of mutually suppressing detections.
/// Returns `(input index, rescored detection)` in selection order.
fn soft_nms_group(dets: &[Detection], idx: &[usize], cfg: &PostprocessConfig) -> Vec<(usize, Detection)> {
    let mut pool: Vec<(usize, Detection)> = idx
        .iter()
        .map(|&i| (i, dets[i]))
        .filter(|(_, d)| d.score >= cfg.soft_nms_min_score)
        .collect();
    let mut kept = Vec::new();
    while !pool.is_empty() && kept.len() < cfg.max_detections_per_video {
        let best = pool
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.1.score.total_cmp(&b.1.score).then(b.0.cmp(&a.0)))
            .map(|(k, _)| k)
            .unwrap();
        let top = pool.swap_remove(best);
        pool.retain_mut(|(_, d)| {
            let o = tiou((top.1.start, top.1.end), (d.start, d.end));
            d.score *= (-(o * o) / cfg.soft_nms_sigma).exp();
            d.score >= cfg.soft_nms_min_score
        });
        kept.push(top);
    }
    kept
}

#[derive(PartialEq)]
struct Head {
    score: f64,
    index: usize,
    group: usize,
    pos: usize,
}

impl Eq for Head {}

impl Ord for Head {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(other.index.cmp(&self.index))
    }
}

impl PartialOrd for Head {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Gaussian Soft-NMS: repeatedly selects the highest-scoring detection
/// (lowest input index on ties) and multiplies the scores of the remaining
/// same-class detections by `exp(-tIoU^2 / sigma)`. Output is in selection
/// order, so scores are non-increasing.
pub fn soft_nms(dets: &[Detection], cfg: &PostprocessConfig) -> Vec<Detection> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        let key = if cfg.class_agnostic_nms { 0 } else { d.label };
        groups.entry(key).or_default().push(i);
    }
    let runs: Vec<Vec<(usize, Detection)>> = groups.values().map(|idx| soft_nms_group(dets, idx, cfg)).collect();

    // Groups never interact, so merging their selection sequences reproduces
    // the global selection order.
    let mut heap: BinaryHeap<Head> = runs
        .iter()
        .enumerate()
        .filter_map(|(group, run)| {
            run.first().map(|(index, d)| Head {
                score: d.score,
                index: *index,
                group,
                pos: 0,
            })
        })
        .collect();
    let mut out = Vec::new();
    while let Some(head) = heap.pop() {
        if out.len() == cfg.max_detections_per_video {
            break;
        }
        out.push(runs[head.group][head.pos].1);
        if let Some((index, d)) = runs[head.group].get(head.pos + 1) {
            heap.push(Head {
                score: d.score,
                index: *index,
                group: head.group,
                pos: head.pos + 1,
            });
        }
    }
    out
}

/// Decode followed by Soft-NMS.
pub fn postprocess<T: Element>(out: &MomentOutput<T>, seq_len: f64, cfg: &PostprocessConfig) -> Vec<Detection> {
    soft_nms(&decode(out, seq_len, cfg), cfg)
}

/// Replaces each detection by `topk` copies labeled with the highest-scoring
/// external classes, scores multiplied by the class score.
pub fn fuse_scores(dets: &[Detection], video_scores: &[f64], topk: usize) -> Result<Vec<Detection>, PostprocessError> {
    if topk == 0 || topk > video_scores.len() {
        return Err(PostprocessError::FusionTopK {
            topk,
            classes: video_scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..video_scores.len()).collect();
    order.sort_by(|&a, &b| video_scores[b].total_cmp(&video_scores[a]).then(a.cmp(&b)));
    Ok(dets
        .iter()
        .flat_map(|d| {
            order[..topk]
                .iter()
                .map(move |&c| Detection::with_score(d.start, d.end, c, d.score * video_scores[c]))
        })
        .collect())
}

/// One prediction as written to disk, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub start_sec: f64,
    pub end_sec: f64,
    pub label: usize,
    pub score: f64,
}

/// `{"video_id": [entries...]}`, ordered by video id.
pub type PredictionFile = BTreeMap<String, Vec<PredictionEntry>>;

/// Converts grid-unit detections to seconds.
pub fn to_entries(dets: &[Detection], fps: f64, feature_stride: f64) -> Vec<PredictionEntry> {
    let scale = feature_stride / fps;
    dets.iter()
        .map(|d| PredictionEntry {
            start_sec: d.start * scale,
            end_sec: d.end * scale,
            label: d.label,
            score: d.score,
        })
        .collect()
}

/// Converts entries back to detections measured in seconds.
pub fn entries_to_detections(entries: &[PredictionEntry]) -> Vec<Detection> {
    entries
        .iter()
        .map(|e| Detection::with_score(e.start_sec, e.end_sec, e.label, e.score))
        .collect()
}
