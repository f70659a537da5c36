//! Independent brute-force references for evaluation and suppression.

use actionformer::eval::VideoMap;
use actionformer::{ActionInstance, Detection};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Exhaustive reference: literal greedy matching and AP as the mean over
/// recall levels j/G of the best precision reached at recall >= j/G.
pub fn oracle_map(preds: &VideoMap, gts: &VideoMap, thresholds: &[f64]) -> Vec<f64> {
    let mut labels: Vec<usize> = gts.values().flatten().map(|g| g.label).collect();
    labels.sort();
    labels.dedup();
    thresholds
        .iter()
        .map(|&thr| {
            if labels.is_empty() {
                return 0.0;
            }
            let mut total = 0.0;
            for &c in &labels {
                let mut list: Vec<(&String, usize, &ActionInstance)> = Vec::new();
                for (v, ps) in preds {
                    for (i, p) in ps.iter().enumerate() {
                        if p.label == c {
                            list.push((v, i, p));
                        }
                    }
                }
                list.sort_by(|a, b| {
                    b.2.score
                        .partial_cmp(&a.2.score)
                        .unwrap()
                        .then(a.2.start.partial_cmp(&b.2.start).unwrap())
                        .then(a.0.cmp(b.0))
                        .then(a.1.cmp(&b.1))
                });
                let n_gt = gts.values().flatten().filter(|g| g.label == c).count();
                let mut taken: Vec<(String, usize)> = Vec::new();
                let mut hits = 0;
                let mut curve = Vec::new();
                for (k, (v, _, p)) in list.iter().enumerate() {
                    let mut best = None;
                    let mut best_o = -1.0;
                    for (j, g) in gts.get(*v).map(|l| l.as_slice()).unwrap_or(&[]).iter().enumerate() {
                        if g.label != c || taken.contains(&((*v).clone(), j)) {
                            continue;
                        }
                        let inter = (p.end.min(g.end) - p.start.max(g.start)).max(0.0);
                        let o = inter / ((p.end - p.start) + (g.end - g.start) - inter);
                        if o > best_o {
                            best_o = o;
                            best = Some(j);
                        }
                    }
                    if let Some(j) = best {
                        if best_o >= thr {
                            taken.push(((*v).clone(), j));
                            hits += 1;
                        }
                    }
                    curve.push((hits, hits as f64 / (k + 1) as f64));
                }
                let ap: f64 = (1..=n_gt)
                    .map(|j| curve.iter().filter(|(h, _)| *h >= j).map(|(_, p)| *p).fold(0.0, f64::max))
                    .sum::<f64>()
                    / n_gt as f64;
                total += ap;
            }
            total / labels.len() as f64
        })
        .collect()
}

pub fn random_case(rng: &mut ChaCha8Rng) -> (VideoMap, VideoMap) {
    let videos = ["a", "b"];
    let mut gts = VideoMap::new();
    let mut preds = VideoMap::new();
    let seg = |rng: &mut ChaCha8Rng| {
        let s = rng.random_range(0..8) as f64;
        (s, s + rng.random_range(1..5) as f64)
    };
    for _ in 0..rng.random_range(0..=5) {
        let (s, e) = seg(rng);
        let v = videos[rng.random_range(0..2)].to_string();
        gts.entry(v).or_default().push(ActionInstance::new(s, e, rng.random_range(0..2)));
    }
    for _ in 0..rng.random_range(0..=10) {
        let (s, e) = seg(rng);
        let v = videos[rng.random_range(0..2)].to_string();
        let score = rng.random_range(1..5) as f64 / 4.0;
        preds.entry(v).or_default().push(ActionInstance::with_score(s, e, rng.random_range(0..2), score));
    }
    (preds, gts)
}

/// Literal global transcription of Gaussian Soft-NMS.
pub fn soft_nms_oracle(dets: &[Detection], sigma: f64, min_score: f64, max_dets: usize) -> Vec<Detection> {
    fn overlap(a: &Detection, b: &Detection) -> f64 {
        let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
        let union = (a.end - a.start) + (b.end - b.start) - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
    let mut remaining: Vec<(usize, Detection)> = dets.iter().cloned().enumerate().filter(|(_, d)| d.score >= min_score).collect();
    let mut out = Vec::new();
    while !remaining.is_empty() && out.len() < max_dets {
        let mut best = 0;
        for k in 1..remaining.len() {
            let (bi, ref bd) = remaining[best];
            let (ki, ref kd) = remaining[k];
            if kd.score > bd.score || (kd.score == bd.score && ki < bi) {
                best = k;
            }
        }
        let (_, top) = remaining.remove(best);
        let mut next = Vec::new();
        for (i, mut d) in remaining {
            if d.label == top.label {
                let o = overlap(&top, &d);
                d.score *= (-(o * o) / sigma).exp();
            }
            if d.score >= min_score {
                next.push((i, d));
            }
        }
        remaining = next;
        out.push(top);
    }
    out
}

pub fn random_dets(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let s = rng.random_range(0..40) as f64 * 0.5;
            let e = s + rng.random_range(1..20) as f64 * 0.5;
            // Coarse scores so exact ties occur.
            let score = rng.random_range(1..=20) as f64 / 20.0;
            Detection::with_score(s, e, rng.random_range(0..classes), score)
        })
        .collect()
}
