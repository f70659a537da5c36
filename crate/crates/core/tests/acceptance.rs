//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process fails if any criterion does.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use actionformer::data::synthetic::{generate_synthetic, SyntheticSpec};
use actionformer::data::Dataset;
use actionformer::eval::profile::{profile_errors, PredictionCategory, ProfileBins};
use actionformer::eval::{map_at, EvalConfig, VideoMap};
use actionformer::gradsuite::{gradient_suite, TOLERANCE};
use actionformer::loss::{diou_term, focal_term};
use actionformer::model::attention::{local_attention, reference_attention};
use actionformer::model::{LevelOutput, ModelConfig, MomentOutput};
use actionformer::postprocess::{decode, soft_nms, PostprocessConfig};
use actionformer::targets::{assign_targets, LossConfig};
use actionformer::trainer::{evaluate, evaluate_checkpoint, train, TrainConfig, Trained};
use actionformer::{tiou, ActionInstance, Detection, RegressionRange};
use af_tensor::{init, Checkpoint, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::oracles::{oracle_map, random_case, random_dets, soft_nms_oracle};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite_passes() -> Check {
    let start = Instant::now();
    let cases = gradient_suite(0).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = cases.iter().max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error)).unwrap();
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    ensure(
        failed.is_empty() && worst.max_relative_error <= TOLERANCE && elapsed < Duration::from_secs(120),
        format!(
            "{} checks, worst {} at {:.2e}, failed {:?}, {:.1}s",
            cases.len(),
            worst.name,
            worst.max_relative_error,
            failed,
            elapsed.as_secs_f64()
        ),
    )
}

fn attention_equivalence() -> Check {
    let run = |len: usize, window: Option<usize>, full_window: usize| -> f32 {
        let mut rng = ChaCha8Rng::seed_from_u64(len as u64);
        let [q, k, v] = [0, 1, 2].map(|_| init::uniform::<f32>(&[len, 16], 1.0, &mut rng));
        let g = Graph::<f32>::inference();
        let (q, k, v) = (g.constant(q), g.constant(k), g.constant(v));
        let mask = vec![true; len];
        let local = local_attention(&g, q, k, v, &mask, 4, full_window).unwrap();
        let reference = reference_attention(&g, q, k, v, &mask, 4, window).unwrap();
        let diff = g.value(local).max_abs_diff(&g.value(reference));
        diff
    };
    let mut parts = Vec::new();
    let mut ok = true;
    for len in [8, 37, 128] {
        let d = run(len, None, 2 * len - 1);
        ok &= d <= 1e-6;
        parts.push(format!("T={len} W={} diff {d:.1e}", 2 * len - 1));
    }
    let narrow = run(128, None, 19);
    ok &= narrow > 1e-3;
    parts.push(format!("T=128 W=19 vs full diff {narrow:.2e}"));
    ensure(ok, parts.join(", "))
}

/// Default architecture with a small input width; shared by criteria 3 and 4.
fn default_model() -> &'static (actionformer::model::Model, af_tensor::ParamStore<f32>) {
    static MODEL: OnceLock<(actionformer::model::Model, af_tensor::ParamStore<f32>)> = OnceLock::new();
    MODEL.get_or_init(|| common::build(ModelConfig::new(32, 20), 3))
}

fn pyramid_shape_law() -> Check {
    let (model, store) = default_model();
    let len = 2304;
    let x = common::features::<f32>(len, 32, 4);
    let out = model.predict(store, &x).map_err(|e| e.to_string())?;
    let lengths: Vec<usize> = out.levels.iter().map(|l| l.cls_logits.rows()).collect();
    let ranges = model.config.ranges();
    let geom = model.config.geometry(len);
    let expect_ranges = [
        (0.0, 4.0),
        (4.0, 8.0),
        (8.0, 16.0),
        (16.0, 32.0),
        (32.0, 64.0),
        (64.0, f64::INFINITY),
    ]
    .map(|(a, b)| RegressionRange::new(a, b));
    let geom_lengths: Vec<usize> = geom.levels.iter().map(|l| l.len).collect();
    ensure(
        lengths == [2304, 1152, 576, 288, 144, 72] && geom_lengths == lengths && ranges == expect_ranges,
        format!("lengths {lengths:?}, ranges {:?}", ranges.iter().map(|r| (r.min, r.max)).collect::<Vec<_>>()),
    )
}

fn padding_invariance() -> Check {
    let (model, store) = default_model();
    let (len, padded_len) = (300, 2304);
    let x = common::features::<f32>(len, 32, 5);
    let base = model.predict(store, &x).map_err(|e| e.to_string())?;
    let mut padded = Tensor::zeros(&[padded_len, 32]);
    padded.data_mut()[..x.numel()].copy_from_slice(x.data());
    let mask: Vec<bool> = (0..padded_len).map(|i| i < len).collect();
    let g = Graph::inference();
    let out = model.forward(&g, store, &padded, &mask).map_err(|e| e.to_string())?.moments(&g);
    let mut worst = 0.0f32;
    for (a, b) in base.levels.iter().zip(&out.levels) {
        let n = a.cls_logits.rows();
        for (x, y) in [(&a.cls_logits, &b.cls_logits), (&a.reg, &b.reg)] {
            let w = x.shape()[1];
            for (p, q) in x.data().iter().zip(&y.data()[..n * w]) {
                worst = worst.max((p - q).abs());
            }
        }
    }
    ensure(worst <= 1e-5, format!("max shift {worst:.2e} over all levels"))
}

fn oracle_equivalence() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = EvalConfig {
        tiou_thresholds: vec![0.1, 0.3, 0.5, 0.7, 0.9],
    };
    let mut map_mismatch = 0;
    let mut nms_mismatch = 0;
    let mut post = PostprocessConfig::default();
    for case in 0..1000 {
        let (preds, gts) = random_case(&mut rng);
        let got = map_at(&preds, &gts, &cfg).map;
        let want = oracle_map(&preds, &gts, &cfg.tiou_thresholds);
        if got.iter().zip(&want).any(|(a, b)| a.to_bits() != b.to_bits()) {
            map_mismatch += 1;
        }
        let dets = random_dets(&mut rng, case % 11, 1 + case % 3);
        post.max_detections_per_video = 1 + case % 10;
        let got = soft_nms(&dets, &post);
        let want = soft_nms_oracle(&dets, post.soft_nms_sigma, post.soft_nms_min_score, post.max_detections_per_video);
        if got != want {
            nms_mismatch += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(
        map_mismatch == 0 && nms_mismatch == 0 && elapsed < Duration::from_secs(60),
        format!(
            "1000 cases, map_at mismatches {map_mismatch}, soft_nms mismatches {nms_mismatch}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn formula_spot_checks() -> Check {
    let focal = focal_term(0.0, 1.0, 2.0, 0.25).0;
    // point t = 7 lies inside both [0, 10] and [5, 15]
    let diou = diou_term((7.0, 3.0), (2.0, 8.0)).0;
    let t = tiou((0.0, 10.0), (5.0, 15.0));
    let dets = [Detection::with_score(0.0, 4.0, 0, 0.9), Detection::with_score(0.0, 4.0, 0, 0.8)];
    let cfg = PostprocessConfig {
        soft_nms_sigma: 0.5,
        ..PostprocessConfig::default()
    };
    let kept = soft_nms(&dets, &cfg);
    let rescored = kept.get(1).map_or(f64::NAN, |d| d.score);
    ensure(
        (focal - 0.043322).abs() <= 1e-5
            && (diou - 0.7778).abs() <= 1e-4
            && (t - 0.3333).abs() <= 1e-4
            && (t - 1.0 / 3.0).abs() <= 1e-6
            && (rescored - 0.10827).abs() <= 1e-5,
        format!("focal {focal:.6}, diou {diou:.4}, tiou {t:.6}, soft-nms rescore {rescored:.5}"),
    )
}

fn target_round_trip() -> Check {
    let data = generate_synthetic(&SyntheticSpec {
        num_videos: 40,
        num_test: 0,
        coverage_levels: 0,
        ..SyntheticSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let cfg = ModelConfig::new(32, 3).with_levels(4, 4.0);
    let mut segments = 0;
    let mut exact = true;
    for v in &data.videos {
        let len = v.features.len();
        let actions = v.grid_actions();
        let targets = assign_targets(&actions, &cfg.geometry(len), 3, &LossConfig::default()).map_err(|e| e.to_string())?;
        let levels = targets
            .levels
            .iter()
            .map(|t| LevelOutput {
                cls_logits: Tensor::from_vec(&[t.len(), 3], t.cls.iter().map(|&c| if c > 0.0 { 10.0 } else { -40.0 }).collect())
                    .unwrap(),
                reg: Tensor::from_vec(&[t.len(), 2], t.reg.clone()).unwrap(),
                mask: vec![true; t.len()],
                stride: t.stride,
            })
            .collect();
        let dets = decode(&MomentOutput::<f64> { levels }, len as f64, &PostprocessConfig::default());
        exact &= dets.len() == targets.num_positives();
        let mut decoded: Vec<(u64, u64, usize)> = dets.iter().map(|d| (d.start.to_bits(), d.end.to_bits(), d.label)).collect();
        decoded.sort();
        decoded.dedup();
        let mut expect: Vec<(u64, u64, usize)> = actions.iter().map(|a| (a.start.to_bits(), a.end.to_bits(), a.label)).collect();
        expect.sort();
        exact &= decoded == expect;
        segments += expect.len();
    }

    let one_level = ModelConfig::new(4, 1).with_levels(1, 4.0);
    let t = assign_targets(&[ActionInstance::new(10.0, 20.0, 0)], &one_level.geometry(40), 1, &LossConfig::default())
        .map_err(|e| e.to_string())?;
    let positives: Vec<usize> = (0..40).filter(|&i| t.levels[0].positive[i]).collect();
    ensure(
        exact && positives == [14, 15, 16],
        format!("{segments} segments over {} videos decoded exactly: {exact}; center positives {positives:?}", data.videos.len()),
    )
}

fn toy_data() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| generate_synthetic(&SyntheticSpec::default()).expect("default synthetic spec"))
}

fn toy_model(levels: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(32, 3).with_levels(levels, 4.0);
    cfg.embed_dim = 128;
    cfg.max_seq_len = 256;
    cfg
}

fn toy_train() -> TrainConfig {
    TrainConfig {
        epochs: 12,
        warmup_epochs: 1,
        base_lr: 1e-3,
        batch_size: 4,
        t_max: 256,
        seed: 0,
        ema_decay: 0.99,
        ..TrainConfig::default()
    }
}

struct ToyRun {
    trained: Trained,
    average_map: f64,
    map: Vec<f64>,
    seconds: f64,
}

fn toy_run(levels: usize) -> ToyRun {
    let start = Instant::now();
    let data = toy_data();
    let trained = train(&data.subset("train"), &toy_model(levels), &toy_train(), |_| {}).expect("toy training");
    let (_, report) = evaluate(
        &trained.model,
        &trained.ema,
        &data.subset("test"),
        &PostprocessConfig::default(),
        &EvalConfig::thumos(),
        1,
    )
    .expect("toy evaluation");
    ToyRun {
        trained,
        average_map: report.average_map,
        map: report.map,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn four_level_run() -> &'static ToyRun {
    static RUN: OnceLock<ToyRun> = OnceLock::new();
    RUN.get_or_init(|| toy_run(4))
}

fn synthetic_end_to_end() -> Check {
    let data = toy_data();
    let (train_n, test_n) = (data.subset("train").videos.len(), data.subset("test").videos.len());
    let run = four_level_run();
    let h = &run.trained.history;
    let (first, last) = (h[0].loss_total, h[h.len() - 1].loss_total);
    let ratio = first / last;
    ensure(
        train_n == 200 && test_n == 50 && run.average_map >= 0.85 && ratio >= 10.0 && run.seconds <= 900.0,
        format!(
            "{train_n}/{test_n} videos, {} epochs, avg mAP@[0.3:0.1:0.7] {:.4} {:?}, loss {first:.4} -> {last:.4} ({ratio:.1}x), {:.0}s",
            toy_train().epochs,
            run.average_map,
            run.map.iter().map(|m| (m * 1e4).round() / 1e4).collect::<Vec<_>>(),
            run.seconds
        ),
    )
}

fn ablation_directions() -> Check {
    let full = four_level_run();
    let single = toy_run(1);

    let train_set = toy_data().subset("train");
    let cfg = toy_model(4);
    let sampled = LossConfig::default();
    let unsampled = LossConfig {
        center_sampling: false,
        ..LossConfig::default()
    };
    let (mut with, mut without, mut superset) = (0usize, 0usize, true);
    for v in &train_set.videos {
        let geom = cfg.geometry(v.features.len());
        let actions = v.grid_actions();
        let a = assign_targets(&actions, &geom, 3, &sampled).map_err(|e| e.to_string())?;
        let b = assign_targets(&actions, &geom, 3, &unsampled).map_err(|e| e.to_string())?;
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            superset &= la.positive.iter().zip(&lb.positive).all(|(&x, &y)| !x || y);
        }
        with += a.num_positives();
        without += b.num_positives();
    }
    ensure(
        single.average_map < full.average_map && superset && without > with,
        format!(
            "avg mAP 1 level {:.4} < 4 levels {:.4}; positives {with} with center sampling, {without} without, superset {superset}",
            single.average_map, full.average_map
        ),
    )
}

/// Generate, save, load, train, checkpoint, restore, predict, evaluate.
fn pipeline_bytes(dir: &std::path::Path) -> (Vec<u8>, Vec<u8>) {
    let spec = SyntheticSpec {
        num_videos: 24,
        num_test: 6,
        min_len: 64,
        max_len: 96,
        dim: 16,
        max_instances: 3,
        max_duration: 40.0,
        coverage_levels: 0,
        seed: 17,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec).unwrap().save(&dir.join("data")).unwrap();
    let data = Dataset::load(&dir.join("data"), Some(3)).unwrap();
    let mut model = ModelConfig::new(16, 3).with_levels(3, 4.0);
    model.embed_dim = 32;
    model.max_seq_len = 128;
    let cfg = TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        base_lr: 1e-3,
        batch_size: 4,
        t_max: 96,
        seed: 23,
        ema_decay: 0.9,
        ..TrainConfig::default()
    };
    let trained = train(&data.subset("train"), &model, &cfg, |_| {}).unwrap();
    let path = dir.join("model.ckpt");
    trained.checkpoint().save(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    let (preds, report) = evaluate_checkpoint(
        &ckpt,
        &model,
        &data.subset("test"),
        &PostprocessConfig::default(),
        &EvalConfig::thumos(),
        true,
        2,
    )
    .unwrap();
    (
        serde_json::to_vec_pretty(&preds).unwrap(),
        serde_json::to_vec_pretty(&report).unwrap(),
    )
}

fn determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (pa, ra) = pipeline_bytes(a.path());
    let (pb, rb) = pipeline_bytes(b.path());
    ensure(
        pa == pb && ra == rb && !pa.is_empty(),
        format!(
            "predictions.json {} bytes identical: {}; report {} bytes identical: {}",
            pa.len(),
            pa == pb,
            ra.len(),
            ra == rb
        ),
    )
}

fn profiler_fixture() -> Check {
    let g = ActionInstance::new;
    let p = ActionInstance::with_score;
    let mut gts = VideoMap::new();
    gts.insert("v1".into(), vec![g(10.0, 12.0, 0), g(40.0, 50.0, 0)]);
    gts.insert("v2".into(), vec![g(5.0, 9.0, 1)]);
    gts.insert("v3".into(), vec![g(20.0, 40.0, 2), g(100.0, 107.0, 2)]);
    gts.insert("v4".into(), vec![g(10.0, 25.0, 0)]);
    gts.insert("v5".into(), vec![g(0.0, 3.0, 1)]);
    let mut preds = VideoMap::new();
    preds.insert("v1".into(), vec![p(40.0, 50.0, 0, 0.9), p(41.0, 50.0, 0, 0.8), p(10.0, 12.0, 1, 0.7)]);
    preds.insert("v2".into(), vec![p(5.0, 10.0, 1, 0.6), p(20.0, 30.0, 1, 0.95)]);
    preds.insert("v3".into(), vec![p(25.0, 40.0, 2, 0.5), p(103.0, 110.0, 2, 0.4)]);
    preds.insert("v4".into(), vec![p(20.0, 30.0, 1, 0.3)]);
    preds.insert("v5".into(), vec![p(0.0, 3.0, 1, 0.2)]);
    preds.insert("v6".into(), vec![p(1.0, 5.0, 0, 0.85)]);
    let durations: BTreeMap<String, f64> = [("v1", 100.0), ("v2", 50.0), ("v3", 200.0), ("v4", 60.0), ("v5", 300.0), ("v6", 120.0)]
        .into_iter()
        .map(|(v, d)| (v.to_string(), d))
        .collect();
    let report = profile_errors(&preds, &gts, &durations, &ProfileBins::default());

    // (video, index) -> (coverage, length, instances, missed), worked out by hand
    let gt_table = [
        ("v1", 0, "XS", "XS", "S", true),
        ("v1", 1, "XL", "M", "S", false),
        ("v2", 0, "L", "S", "XS", false),
        ("v3", 0, "XL", "XL", "S", false),
        ("v3", 1, "S", "M", "S", true),
        ("v4", 0, "XL", "L", "XS", true),
        ("v5", 0, "XS", "XS", "XS", false),
    ];
    let gt_ok = report.ground_truth.len() == gt_table.len()
        && report.ground_truth.iter().zip(&gt_table).all(|(r, &(v, i, c, l, n, m))| {
            r.video == v
                && r.index == i
                && r.coverage.as_deref() == Some(c)
                && r.length.as_deref() == Some(l)
                && r.instances.as_deref() == Some(n)
                && r.missed == m
        });

    // characteristic, bin, count, missed
    let bin_table = [
        ("coverage", "XS", 2, 1),
        ("coverage", "S", 1, 1),
        ("coverage", "M", 0, 0),
        ("coverage", "L", 1, 0),
        ("coverage", "XL", 3, 1),
        ("length", "XS", 2, 1),
        ("length", "S", 1, 0),
        ("length", "M", 2, 1),
        ("length", "L", 1, 1),
        ("length", "XL", 1, 0),
        ("instances", "XS", 3, 1),
        ("instances", "S", 4, 2),
        ("instances", "M", 0, 0),
        ("instances", "L", 0, 0),
    ];
    let bins_ok = report.bins.len() == bin_table.len()
        && report
            .bins
            .iter()
            .zip(&bin_table)
            .all(|(b, &(c, n, count, missed))| b.characteristic == c && b.bin == n && b.count == count && b.missed == missed);
    let bin_map = |c: &str, n: &str| report.bins.iter().find(|b| b.characteristic == c && b.bin == n).and_then(|b| b.map);
    let maps_ok = bin_map("length", "XL") == Some(1.0) && bin_map("coverage", "XS") == Some(0.125) && bin_map("coverage", "M").is_none();

    use PredictionCategory::*;
    // (video, index) -> category
    let fp_table = [
        ("v2", 1, Background),
        ("v1", 0, TruePositive),
        ("v6", 0, Background),
        ("v1", 1, DoubleDetection),
        ("v1", 2, WrongLabel),
        ("v2", 0, TruePositive),
        ("v3", 0, TruePositive),
        ("v3", 1, Localization),
        ("v4", 0, Confusion),
        ("v5", 0, TruePositive),
    ];
    let fp_ok = report.predictions.len() == fp_table.len()
        && report
            .predictions
            .iter()
            .zip(&fp_table)
            .all(|(r, &(v, i, c))| r.video == v && r.index == i && r.category == c);
    let counts: Vec<usize> = report.category_counts.iter().map(|&(_, n)| n).collect();
    let counts_ok = counts == [4, 1, 1, 1, 1, 2];
    ensure(
        gt_ok && bins_ok && maps_ok && fp_ok && counts_ok,
        format!(
            "6 videos, 7 GT, 10 predictions; GT bins {gt_ok}, FN table {bins_ok}, bin mAP {maps_ok}, FP categories {fp_ok}, counts {counts:?}"
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Check); 11] = [
        ("gradient suite", gradient_suite_passes),
        ("attention equivalence", attention_equivalence),
        ("pyramid shape law", pyramid_shape_law),
        ("padding invariance", padding_invariance),
        ("oracle equivalence", oracle_equivalence),
        ("formula spot checks", formula_spot_checks),
        ("target round trip", target_round_trip),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("ablation directions", ablation_directions),
        ("determinism", determinism),
        ("profiler fixture", profiler_fixture),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (status, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failures += result.is_err() as usize;
        println!(
            "criterion {:>2} {status} {name}: {detail} [{:.1}s]",
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
