//! False-negative, false-positive and sensitivity profiling of detections
//! against ground truth, binned by coverage, length and instance count.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{gt_classes, map_at, ranked, EvalConfig, VideoMap};

/// Named left-open, right-closed bins `(edges[k], edges[k + 1]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSet {
    pub names: Vec<String>,
    pub edges: Vec<f64>,
}

impl BinSet {
    pub fn new(names: &[&str], edges: &[f64]) -> Self {
        assert_eq!(names.len() + 1, edges.len(), "one more edge than bins");
        BinSet {
            names: names.iter().map(|s| s.to_string()).collect(),
            edges: edges.to_vec(),
        }
    }

    pub fn assign(&self, x: f64) -> Option<usize> {
        (0..self.names.len()).find(|&k| x > self.edges[k] && x <= self.edges[k + 1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileBins {
    /// Instance length over video duration.
    pub coverage: BinSet,
    /// Instance length in seconds.
    pub length: BinSet,
    /// Same-class instances in the instance's video.
    pub instances: BinSet,
}

impl Default for ProfileBins {
    fn default() -> Self {
        let names = ["XS", "S", "M", "L", "XL"];
        ProfileBins {
            coverage: BinSet::new(&names, &[0.0, 0.02, 0.04, 0.06, 0.08, 1.0]),
            length: BinSet::new(&names, &[0.0, 3.0, 6.0, 12.0, 18.0, f64::INFINITY]),
            instances: BinSet::new(&names[..4], &[0.0, 1.0, 40.0, 80.0, f64::INFINITY]),
        }
    }
}

pub const CHARACTERISTICS: [&str; 3] = ["coverage", "length", "instances"];

/// Matching threshold for FN and FP analysis.
pub const PROFILE_TIOU: f64 = 0.5;
/// Below this tIoU a prediction counts as background.
pub const BACKGROUND_TIOU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionCategory {
    TruePositive,
    DoubleDetection,
    WrongLabel,
    Localization,
    Confusion,
    Background,
}

impl PredictionCategory {
    pub const ALL: [PredictionCategory; 6] = [
        PredictionCategory::TruePositive,
        PredictionCategory::DoubleDetection,
        PredictionCategory::WrongLabel,
        PredictionCategory::Localization,
        PredictionCategory::Confusion,
        PredictionCategory::Background,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PredictionCategory::TruePositive => "true_positive",
            PredictionCategory::DoubleDetection => "double_detection",
            PredictionCategory::WrongLabel => "wrong_label",
            PredictionCategory::Localization => "localization",
            PredictionCategory::Confusion => "confusion",
            PredictionCategory::Background => "background",
        }
    }
}

/// Bin membership of one ground-truth instance (`None` outside every bin).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtProfile {
    pub video: String,
    pub index: usize,
    pub coverage: Option<String>,
    pub length: Option<String>,
    pub instances: Option<String>,
    pub missed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub characteristic: String,
    pub bin: String,
    pub count: usize,
    pub missed: usize,
    pub fn_rate: f64,
    /// mAP at [`PROFILE_TIOU`] with ground truth restricted to the bin.
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionProfile {
    pub video: String,
    pub index: usize,
    pub category: PredictionCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub num_ground_truth: usize,
    /// Number of top-scoring predictions categorized (at most 10 per ground truth).
    pub num_considered: usize,
    pub ground_truth: Vec<GtProfile>,
    pub bins: Vec<BinStat>,
    pub predictions: Vec<PredictionProfile>,
    /// Count per category, in [`PredictionCategory::ALL`] order.
    pub category_counts: Vec<(PredictionCategory, usize)>,
}

fn gt_missed(preds: &VideoMap, gts: &VideoMap) -> BTreeMap<(String, usize), bool> {
    let mut missed: BTreeMap<(String, usize), bool> = gts
        .iter()
        .flat_map(|(v, list)| (0..list.len()).map(move |j| ((v.clone(), j), true)))
        .collect();
    for label in gt_classes(gts) {
        let mut used: BTreeMap<&str, Vec<bool>> =
            gts.iter().map(|(v, l)| (v.as_str(), vec![false; l.len()])).collect();
        for p in ranked(preds, Some(label)) {
            let (Some(list), Some(u)) = (gts.get(p.video), used.get_mut(p.video)) else {
                continue;
            };
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in list.iter().enumerate() {
                if g.label == label && !u[j] {
                    let o = p.inst.tiou(g);
                    if best.is_none_or(|(_, b)| o > b) {
                        best = Some((j, o));
                    }
                }
            }
            if let Some((j, o)) = best {
                if o >= PROFILE_TIOU {
                    u[j] = true;
                    missed.insert((p.video.to_string(), j), false);
                }
            }
        }
    }
    missed
}

/// Categorizes the top `10 * G` predictions (all classes pooled, ranked by
/// score) in order of precedence: true positive, double detection, wrong
/// label, localization, confusion, background.
pub fn categorize_predictions(preds: &VideoMap, gts: &VideoMap) -> Vec<PredictionProfile> {
    let num_gt: usize = gts.values().map(Vec::len).sum();
    let mut used: BTreeMap<&str, Vec<bool>> = gts.iter().map(|(v, l)| (v.as_str(), vec![false; l.len()])).collect();
    let empty = Vec::new();
    ranked(preds, None)
        .into_iter()
        .take(10 * num_gt)
        .map(|p| {
            let list = gts.get(p.video).unwrap_or(&empty);
            let mut best_same: Option<(usize, f64)> = None;
            let mut best_same_free: Option<(usize, f64)> = None;
            let mut best_other = 0.0f64;
            for (j, g) in list.iter().enumerate() {
                let o = p.inst.tiou(g);
                if g.label == p.inst.label {
                    if best_same.is_none_or(|(_, b)| o > b) {
                        best_same = Some((j, o));
                    }
                    let free = used.get(p.video).is_some_and(|u| !u[j]);
                    if free && best_same_free.is_none_or(|(_, b)| o > b) {
                        best_same_free = Some((j, o));
                    }
                } else {
                    best_other = best_other.max(o);
                }
            }
            let same = best_same.map_or(0.0, |(_, o)| o);
            let category = match best_same_free {
                Some((j, o)) if o >= PROFILE_TIOU => {
                    used.get_mut(p.video).unwrap()[j] = true;
                    PredictionCategory::TruePositive
                }
                _ if same >= PROFILE_TIOU => PredictionCategory::DoubleDetection,
                _ if best_other >= PROFILE_TIOU => PredictionCategory::WrongLabel,
                _ if same >= BACKGROUND_TIOU => PredictionCategory::Localization,
                _ if best_other >= BACKGROUND_TIOU => PredictionCategory::Confusion,
                _ => PredictionCategory::Background,
            };
            PredictionProfile {
                video: p.video.to_string(),
                index: p.index,
                category,
            }
        })
        .collect()
}

/// Full profile. `durations` maps video ids to their length in seconds;
/// segments are expected in seconds.
pub fn profile_errors(
    preds: &VideoMap,
    gts: &VideoMap,
    durations: &BTreeMap<String, f64>,
    bins: &ProfileBins,
) -> ProfileReport {
    let missed = gt_missed(preds, gts);
    let mut ground_truth = Vec::new();
    for (video, list) in gts {
        let duration = durations.get(video).copied().unwrap_or(f64::NAN);
        for (index, g) in list.iter().enumerate() {
            let same = list.iter().filter(|o| o.label == g.label).count();
            let name = |set: &BinSet, x: f64| set.assign(x).map(|k| set.names[k].clone());
            ground_truth.push(GtProfile {
                video: video.clone(),
                index,
                coverage: name(&bins.coverage, g.duration() / duration),
                length: name(&bins.length, g.duration()),
                instances: name(&bins.instances, same as f64),
                missed: missed[&(video.clone(), index)],
            });
        }
    }

    let cfg = EvalConfig {
        tiou_thresholds: vec![PROFILE_TIOU],
    };
    let mut stats = Vec::new();
    for characteristic in CHARACTERISTICS {
        let (set, pick): (&BinSet, fn(&GtProfile) -> &Option<String>) = match characteristic {
            "coverage" => (&bins.coverage, |g| &g.coverage),
            "length" => (&bins.length, |g| &g.length),
            _ => (&bins.instances, |g| &g.instances),
        };
        for bin in &set.names {
            let members: Vec<&GtProfile> = ground_truth.iter().filter(|g| pick(g).as_ref() == Some(bin)).collect();
            let count = members.len();
            let n_missed = members.iter().filter(|g| g.missed).count();
            let map = (count > 0).then(|| {
                let (sub_gt, sub_pred) = restrict_to_bin(preds, gts, &members);
                map_at(&sub_pred, &sub_gt, &cfg).map[0]
            });
            stats.push(BinStat {
                characteristic: characteristic.to_string(),
                bin: bin.clone(),
                count,
                missed: n_missed,
                fn_rate: if count == 0 { 0.0 } else { n_missed as f64 / count as f64 },
                map,
            });
        }
    }

    let predictions = categorize_predictions(preds, gts);
    let category_counts = PredictionCategory::ALL
        .iter()
        .map(|&c| (c, predictions.iter().filter(|p| p.category == c).count()))
        .collect();
    ProfileReport {
        num_ground_truth: ground_truth.len(),
        num_considered: predictions.len(),
        ground_truth,
        bins: stats,
        predictions,
        category_counts,
    }
}

/// Ground truth limited to `members`; predictions that reach the profile
/// tIoU only with same-class ground truth outside the bin are dropped.
fn restrict_to_bin(preds: &VideoMap, gts: &VideoMap, members: &[&GtProfile]) -> (VideoMap, VideoMap) {
    let inside = |v: &str, j: usize| members.iter().any(|m| m.video == v && m.index == j);
    let mut sub_gt = VideoMap::new();
    for (v, list) in gts {
        let kept: Vec<_> = list.iter().enumerate().filter(|(j, _)| inside(v, *j)).map(|(_, g)| *g).collect();
        sub_gt.insert(v.clone(), kept);
    }
    let mut sub_pred = VideoMap::new();
    for (v, list) in preds {
        let gt = gts.get(v);
        let kept = list
            .iter()
            .filter(|p| {
                let Some(gt) = gt else { return true };
                let hits = |want_inside: bool| {
                    gt.iter()
                        .enumerate()
                        .any(|(j, g)| g.label == p.label && inside(v, j) == want_inside && p.tiou(g) >= PROFILE_TIOU)
                };
                hits(true) || !hits(false)
            })
            .cloned()
            .collect();
        sub_pred.insert(v.clone(), kept);
    }
    (sub_gt, sub_pred)
}

impl ProfileReport {
    /// `characteristic,bin,count,missed,fn_rate,map`.
    pub fn bins_csv(&self) -> String {
        let mut out = String::from("characteristic,bin,count,missed,fn_rate,map\n");
        for b in &self.bins {
            let map = b.map.map(|m| m.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{},{}\n", b.characteristic, b.bin, b.count, b.missed, b.fn_rate, map));
        }
        out
    }

    /// `category,count,fraction`, fractions relative to the considered predictions.
    pub fn categories_csv(&self) -> String {
        let mut out = String::from("category,count,fraction\n");
        for &(c, n) in &self.category_counts {
            let frac = if self.num_considered == 0 { 0.0 } else { n as f64 / self.num_considered as f64 };
            out.push_str(&format!("{},{},{}\n", c.name(), n, frac));
        }
        out
    }
}
