mod common;

use actionformer::model::{LevelOutput, ModelConfig, MomentOutput};
use actionformer::postprocess::{
    decode, entries_to_detections, fuse_scores, postprocess, soft_nms, to_entries, PostprocessConfig, PredictionFile,
};
use actionformer::targets::{assign_targets, LossConfig};
use actionformer::{ActionInstance, Detection};
use af_tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::oracles::{random_dets, soft_nms_oracle};

fn level(logits: Vec<f64>, reg: Vec<f64>, classes: usize, stride: usize) -> LevelOutput<f64> {
    let len = reg.len() / 2;
    LevelOutput {
        cls_logits: Tensor::from_vec(&[len, classes], logits).unwrap(),
        reg: Tensor::from_vec(&[len, 2], reg).unwrap(),
        mask: vec![true; len],
        stride,
    }
}

/// Logit whose sigmoid is `p`.
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[test]
fn decode_examples() {
    let cfg = PostprocessConfig::default();
    let mut logits = vec![-20.0; 12];
    logits[10] = logit(0.8);
    logits[1] = logit(0.6);
    let mut reg = vec![0.0; 24];
    reg[20] = 3.0;
    reg[21] = 5.0;
    reg[2] = 5.0;
    reg[3] = 2.0;
    let out = MomentOutput { levels: vec![level(logits, reg, 1, 1)] };
    let dets = decode(&out, 12.0, &cfg);
    assert_eq!(dets.len(), 2);
    let by_start: Vec<(f64, f64)> = dets.iter().map(|d| (d.start, d.end)).collect();
    assert!(by_start.contains(&(7.0, 12.0)));
    assert!(by_start.contains(&(0.0, 3.0)));
    let d = dets.iter().find(|d| d.start == 7.0).unwrap();
    assert!((d.score - 0.8).abs() < 1e-12);

    let wide = decode(&out, 100.0, &cfg);
    assert!(wide.iter().any(|d| (d.start, d.end) == (7.0, 15.0)));

    let quiet = MomentOutput { levels: vec![level(vec![-20.0; 12], vec![1.0; 24], 1, 1)] };
    assert!(decode(&quiet, 12.0, &cfg).is_empty());
}

#[test]
fn decode_scales_by_stride_and_respects_mask() {
    let cfg = PostprocessConfig::default();
    let mut lvl = level(vec![2.0, 2.0, 2.0], vec![1.0, 0.5, 1.0, 0.5, 1.0, 0.5], 1, 4);
    lvl.mask[2] = false;
    let dets = decode(&MomentOutput { levels: vec![lvl] }, 100.0, &cfg);
    let segs: Vec<(f64, f64)> = dets.iter().map(|d| (d.start, d.end)).collect();
    assert_eq!(segs, vec![(0.0, 2.0), (0.0, 6.0)]);
}

#[test]
fn decode_keeps_topk_per_level_and_drops_empty_segments() {
    let mut cfg = PostprocessConfig::default();
    cfg.pre_nms_topk = 2;
    let logits = vec![0.1, 0.5, 0.3, 0.9];
    let out = MomentOutput { levels: vec![level(logits.clone(), vec![1.0; 8], 1, 1), level(logits, vec![0.0; 8], 1, 2)] };
    let dets = decode(&out, 100.0, &cfg);
    assert_eq!(dets.len(), 2);
    assert!(dets[0].score > dets[1].score);
    assert_eq!((dets[0].start, dets[0].end), (2.0, 4.0));
}

#[test]
fn soft_nms_examples() {
    let cfg = PostprocessConfig::default();
    let one = vec![Detection::with_score(1.0, 5.0, 0, 0.7)];
    assert_eq!(soft_nms(&one, &cfg), one);

    let pair = vec![
        Detection::with_score(0.0, 10.0, 0, 0.8),
        Detection::with_score(0.0, 10.0, 0, 0.9),
    ];
    let out = soft_nms(&pair, &cfg);
    assert_eq!(out[0].score, 0.9);
    assert!((out[1].score - 0.10827).abs() < 1e-5);
    assert!((out[1].score - 0.8 * (-2.0f64).exp()).abs() < 1e-15);

    let disjoint = vec![
        Detection::with_score(0.0, 10.0, 0, 0.8),
        Detection::with_score(10.0, 20.0, 0, 0.9),
    ];
    let out = soft_nms(&disjoint, &cfg);
    assert_eq!(out, vec![disjoint[1], disjoint[0]]);

    let cross = vec![
        Detection::with_score(0.0, 10.0, 0, 0.8),
        Detection::with_score(0.0, 10.0, 1, 0.9),
    ];
    assert_eq!(soft_nms(&cross, &cfg).len(), 2);
    assert_eq!(soft_nms(&cross, &cfg)[1].score, 0.8);
    let mut agnostic = cfg.clone();
    agnostic.class_agnostic_nms = true;
    assert!(soft_nms(&cross, &agnostic)[1].score < 0.2);
}

#[test]
fn soft_nms_caps_and_thresholds() {
    let mut cfg = PostprocessConfig::default();
    cfg.max_detections_per_video = 3;
    let dets: Vec<Detection> = (0..10).map(|i| Detection::with_score(i as f64 * 10.0, i as f64 * 10.0 + 5.0, 0, 0.1 * (i as f64 + 0.5))).collect();
    let out = soft_nms(&dets, &cfg);
    assert_eq!(out.len(), 3);
    assert_eq!(out[0].start, 90.0);
    cfg.max_detections_per_video = 200;
    cfg.soft_nms_min_score = 0.3;
    assert_eq!(soft_nms(&dets, &cfg).len(), 7);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn soft_nms_matches_oracle(seed in any::<u64>(), n in 0usize..200, classes in 1usize..4, max_dets in 1usize..250) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dets = random_dets(&mut rng, n, classes);
        let mut cfg = PostprocessConfig::default();
        cfg.max_detections_per_video = max_dets;
        cfg.soft_nms_sigma = [0.5, 0.1, 2.0][seed as usize % 3];
        let out = soft_nms(&dets, &cfg);
        prop_assert_eq!(&out, &soft_nms_oracle(&dets, cfg.soft_nms_sigma, cfg.soft_nms_min_score, max_dets));
        for w in out.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn second_pass_keeps_disjoint_survivors(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dets = random_dets(&mut rng, 40, 2);
        let cfg = PostprocessConfig::default();
        let first = soft_nms(&dets, &cfg);
        let mut sharp = cfg.clone();
        sharp.soft_nms_sigma = 1e-12;
        let second = soft_nms(&first, &sharp);
        for (k, d) in first.iter().enumerate() {
            let isolated = first[..k].iter().all(|o| o.label != d.label || o.tiou(d) == 0.0);
            if isolated {
                prop_assert!(second.contains(d));
            }
        }
        prop_assert!(second.iter().all(|d| first.contains(d)));
    }
}

#[test]
fn fuse_scores_examples() {
    let dets = vec![
        Detection::with_score(0.0, 5.0, 1, 0.5),
        Detection::with_score(3.0, 8.0, 0, 0.2),
    ];
    let onehot = [0.0, 0.0, 0.0, 1.0];
    let fused = fuse_scores(&dets, &onehot, 1).unwrap();
    assert!(fused.iter().all(|d| d.label == 3));
    assert_eq!(fused.iter().map(|d| d.score).collect::<Vec<_>>(), vec![0.5, 0.2]);

    let ext = [0.1, 0.6, 0.3];
    let fused = fuse_scores(&dets, &ext, 2).unwrap();
    assert_eq!(fused.len(), 4);
    assert_eq!(fused.iter().map(|d| d.label).collect::<Vec<_>>(), vec![1, 2, 1, 2]);
    assert!((fused[1].score - 0.15).abs() < 1e-15);

    let uniform = [0.25; 4];
    for d in fuse_scores(&dets, &uniform, 3).unwrap().chunks(3) {
        assert!(d.iter().all(|x| x.score == d[0].score));
    }
    assert!(fuse_scores(&dets, &ext, 4).is_err());
}

#[test]
fn assigned_targets_decode_to_ground_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = ModelConfig::new(4, 3).with_levels(4, 4.0);
    let len = 200;
    let geom = cfg.geometry(len);
    let mut actions = Vec::new();
    let mut cursor = 2.0;
    while cursor < 180.0 {
        let dur = rng.random_range(4..40) as f64;
        actions.push(ActionInstance::new(cursor, (cursor + dur).min(len as f64), rng.random_range(0..3)));
        cursor += dur + rng.random_range(1..10) as f64;
    }
    let targets = assign_targets(&actions, &geom, 3, &LossConfig::default()).unwrap();
    let levels = targets
        .levels
        .iter()
        .map(|t| LevelOutput {
            cls_logits: Tensor::from_vec(&[t.len(), 3], t.cls.iter().map(|&c| if c > 0.0 { 10.0 } else { -40.0 }).collect()).unwrap(),
            reg: Tensor::from_vec(&[t.len(), 2], t.reg.clone()).unwrap(),
            mask: vec![true; t.len()],
            stride: t.stride,
        })
        .collect();
    let dets = decode(&MomentOutput { levels }, len as f64, &PostprocessConfig::default());
    assert_eq!(dets.len(), targets.num_positives());
    let mut decoded: Vec<(f64, f64, usize)> = dets.iter().map(|d| (d.start, d.end, d.label)).collect();
    decoded.sort_by(|a, b| a.partial_cmp(b).unwrap());
    decoded.dedup();
    let mut expect: Vec<(f64, f64, usize)> = actions.iter().map(|a| (a.start, a.end, a.label)).collect();
    expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(decoded, expect);
}

#[test]
fn prediction_json_round_trip() {
    let dets = vec![Detection::with_score(4.0, 10.0, 2, 0.75)];
    let entries = to_entries(&dets, 16.0, 4.0);
    assert_eq!((entries[0].start_sec, entries[0].end_sec), (1.0, 2.5));
    let mut file = PredictionFile::new();
    file.insert("video_b".into(), entries.clone());
    file.insert("video_a".into(), Vec::new());
    let json = serde_json::to_string(&file).unwrap();
    assert!(json.starts_with(r#"{"video_a":[],"video_b":[{"start_sec":1.0"#));
    let back: PredictionFile = serde_json::from_str(&json).unwrap();
    assert_eq!(back, file);
    assert_eq!(entries_to_detections(&entries)[0], Detection::with_score(1.0, 2.5, 2, 0.75));
}

#[test]
fn postprocess_composes_decode_and_nms() {
    let out = MomentOutput { levels: vec![level(vec![3.0, 3.0, 3.0], vec![1.0; 6], 1, 1)] };
    let dets = postprocess(&out, 10.0, &PostprocessConfig::default());
    assert_eq!(dets.len(), 3);
    // [0, 1] and [1, 3] are disjoint; [0, 2] overlaps both and is decayed twice.
    assert_eq!((dets[0].start, dets[0].end), (0.0, 1.0));
    assert_eq!((dets[1].start, dets[1].end), (1.0, 3.0));
    assert_eq!(dets[0].score, dets[1].score);
    let twice = dets[0].score * (-0.25f64 / 0.5).exp() * (-(1.0f64 / 9.0) / 0.5).exp();
    assert!((dets[2].score - twice).abs() < 1e-12);
}
