use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use actionformer::data::synthetic::{generate_synthetic, SyntheticSpec};
use actionformer::data::{Dataset, FeatureSequence};
use actionformer::eval::profile::{profile_errors, ProfileBins};
use actionformer::eval::{map_at, pr_curve_csv, EvalConfig, GroundTruthFile, VideoMap};
use actionformer::gradsuite::{gradient_suite, GradCase};
use actionformer::postprocess::PredictionFile;
use actionformer::trainer::{
    evaluate, load_weights, predict_all, prediction_map, train, Trained,
};
use af_tensor::Checkpoint;
use serde::Serialize;

use crate::config::{read_json, write_json, write_text, RunConfig};
use crate::error::{CliError, ErrorKind};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "run_config.json";

pub fn synth(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut spec: SyntheticSpec = match config {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let data = generate_synthetic(&spec)?;
    data.save(out)?;
    write_json(&out.join("spec.json"), &spec)?;
    log::info!("wrote {} videos to {}", data.videos.len(), out.display());
    Ok(())
}

fn train_run(cfg: &RunConfig, data: &Dataset, log_path: Option<&Path>) -> Result<Trained, CliError> {
    let train_set = data.subset(&cfg.data.train_subset);
    if train_set.videos.is_empty() {
        return Err(CliError::config(format!(
            "no videos in training subset {:?}",
            cfg.data.train_subset
        )));
    }
    let mut log_file = match log_path {
        Some(p) => Some(fs::File::create(p).map_err(|e| CliError::io(p, e))?),
        None => None,
    };
    let mut write_err = None;
    let trained = train(&train_set, &cfg.model, &cfg.train, |s| {
        if s.step % 50 == 0 {
            log::info!("step {} lr {:.3e} loss {:.4}", s.step, s.lr, s.loss_total);
        }
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(s).expect("step log serializes");
            if let Err(e) = writeln!(f, "{line}") {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let (Some(e), Some(p)) = (write_err, log_path) {
        return Err(CliError::io(p, e));
    }
    Ok(trained)
}

pub fn train_cmd(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let data = cfg.load_dataset()?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let trained = train_run(cfg, &data, Some(&out.join(TRAIN_LOG_FILE)))?;
    trained.checkpoint().save(out.join(CHECKPOINT_FILE))?;
    write_json(&out.join(RESOLVED_CONFIG_FILE), cfg)?;
    if let (Some(first), Some(last)) = (trained.history.first(), trained.history.last()) {
        log::info!("trained {} steps, loss {:.4} -> {:.4}", trained.history.len(), first.loss_total, last.loss_total);
    }
    Ok(())
}

pub fn predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    features: Option<&Path>,
    raw_weights: bool,
    threads: usize,
    out: &Path,
) -> Result<(), CliError> {
    let dir = features.map(Path::to_path_buf).unwrap_or_else(|| cfg.data.root.join("features"));
    let mut sequences: Vec<FeatureSequence> = Dataset::load_features_dir(&dir)?.into_values().collect();
    if cfg.data.feature_stride_factor > 1 {
        for s in &mut sequences {
            *s = actionformer::data::stride_downsample(s, cfg.data.feature_stride_factor)?;
        }
    }
    if let Some(s) = sequences.iter().find(|s| s.dim() != cfg.model.input_dim) {
        return Err(CliError::config(format!(
            "video {:?} has feature dimension {}, model.input_dim is {}",
            s.video_id,
            s.dim(),
            cfg.model.input_dim
        )));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let (model, store) = load_weights(&cfg.model, &ckpt, cfg.use_ema && !raw_weights)?;
    let refs: Vec<&FeatureSequence> = sequences.iter().collect();
    let preds = predict_all(&model, &store, &refs, &cfg.postprocess, threads)?;
    write_json(out, &preds)
}

/// Threshold precedence: explicit list, then preset, then the run config.
pub fn resolve_thresholds(
    list: Option<&[f64]>,
    preset: Option<&str>,
    config: Option<&RunConfig>,
) -> Result<EvalConfig, CliError> {
    let cfg = match (list, preset) {
        (Some(t), _) => EvalConfig {
            tiou_thresholds: t.to_vec(),
        },
        (None, Some(name)) => EvalConfig::preset(name)?,
        (None, None) => config.map(|c| c.eval.clone()).unwrap_or_default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_eval_inputs(
    predictions: &Path,
    gt: &Path,
    subset: Option<&str>,
) -> Result<(VideoMap, VideoMap, GroundTruthFile), CliError> {
    let preds: PredictionFile = read_json(predictions)?;
    let gt_file: GroundTruthFile = read_json(gt)?;
    let gts = gt_file.instances(subset);
    // Only videos of the evaluated subset count.
    let preds = prediction_map(&preds)
        .into_iter()
        .filter(|(v, _)| gt_file.database.get(v).is_some_and(|g| subset.is_none_or(|s| g.subset == s)))
        .collect();
    Ok((preds, gts, gt_file))
}

pub fn eval_cmd(
    predictions: &Path,
    gt: &Path,
    subset: Option<&str>,
    thresholds: EvalConfig,
    pr_csv: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let (preds, gts, _) = load_eval_inputs(predictions, gt, subset)?;
    let report = map_at(&preds, &gts, &thresholds);
    if let Some(p) = pr_csv {
        write_text(p, &pr_curve_csv(&preds, &gts, &thresholds))?;
    }
    match out {
        Some(p) => write_json(p, &report),
        None => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
    }
}

pub fn profile_cmd(predictions: &Path, gt: &Path, subset: Option<&str>, out: &Path) -> Result<(), CliError> {
    let (preds, gts, gt_file) = load_eval_inputs(predictions, gt, subset)?;
    let report = profile_errors(&preds, &gts, &gt_file.durations(subset), &ProfileBins::default());
    write_json(&out.join("profile.json"), &report)?;
    write_text(&out.join("profile_bins.csv"), &report.bins_csv())?;
    write_text(&out.join("profile_categories.csv"), &report.categories_csv())
}

pub fn gradcheck(seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let cases: Vec<GradCase> = gradient_suite(seed)?;
    println!("{:<28} {:>14}  status", "op", "rel_error");
    for c in &cases {
        println!(
            "{:<28} {:>14.3e}  {}",
            c.name,
            c.max_relative_error,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    if let Some(p) = out {
        write_json(p, &cases)?;
    }
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(
            ErrorKind::CheckFailed,
            format!("gradient check failed for: {}", failed.join(", ")),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[clap(rename_all = "snake_case")]
pub enum Axis {
    WindowSize,
    Levels,
    InitRange,
    LambdaReg,
    #[value(name = "T_max", alias = "t_max")]
    TMax,
    FeatureStride,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::WindowSize => "window_size",
            Axis::Levels => "levels",
            Axis::InitRange => "init_range",
            Axis::LambdaReg => "lambda_reg",
            Axis::TMax => "T_max",
            Axis::FeatureStride => "feature_stride",
        }
    }
}

fn as_count(axis: Axis, value: f64) -> Result<usize, CliError> {
    if value >= 1.0 && value.fract() == 0.0 {
        Ok(value as usize)
    } else {
        Err(CliError::config(format!("{} needs positive integers, got {value}", axis.name())))
    }
}

/// Copy of `base` with one axis set to `value`.
pub fn apply_axis(base: &RunConfig, axis: Axis, value: f64) -> Result<RunConfig, CliError> {
    let mut cfg = base.clone();
    let init_range = base.model.ranges().first().map(|r| r.max).unwrap_or(4.0);
    match axis {
        Axis::WindowSize => cfg.model.window_size = as_count(axis, value)?,
        Axis::Levels => {
            let levels = as_count(axis, value)?;
            let init = if base.model.num_levels() == 1 { 4.0 } else { init_range };
            cfg.model = cfg.model.with_levels(levels, init);
        }
        Axis::InitRange => {
            if !(value > 0.0) {
                return Err(CliError::config("init_range must be positive"));
            }
            let levels = cfg.model.num_levels();
            cfg.model = cfg.model.with_levels(levels, value);
        }
        Axis::LambdaReg => cfg.train.loss.lambda_reg = value,
        Axis::TMax => {
            let t = as_count(axis, value)?;
            cfg.train.t_max = t;
            cfg.model.max_seq_len = cfg.model.max_seq_len.max(t);
        }
        Axis::FeatureStride => cfg.data.feature_stride_factor = as_count(axis, value)?,
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub value: f64,
    pub average_map: f64,
    pub map: Vec<f64>,
    pub first_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub axis: String,
    pub tiou_thresholds: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn csv(&self) -> String {
        let mut out = format!("{},average_map", self.axis);
        for t in &self.tiou_thresholds {
            out.push_str(&format!(",map@{t}"));
        }
        out.push_str(",first_loss,final_loss,steps\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}", r.value, r.average_map));
            for m in &r.map {
                out.push_str(&format!(",{m}"));
            }
            out.push_str(&format!(",{},{},{}\n", r.first_loss, r.final_loss, r.steps));
        }
        out
    }
}

pub fn ablate(base: &RunConfig, axis: Axis, values: &[f64], threads: usize, out: &Path) -> Result<(), CliError> {
    if values.is_empty() {
        return Err(CliError::config("ablate needs at least one value"));
    }
    let configs = values
        .iter()
        .map(|&v| apply_axis(base, axis, v))
        .collect::<Result<Vec<_>, _>>()?;
    let raw = Dataset::load(&base.data.root, Some(base.model.num_classes))?;
    let mut rows = Vec::with_capacity(values.len());
    for (cfg, &value) in configs.iter().zip(values) {
        log::info!("{} = {value}", axis.name());
        let mut data = raw.clone();
        cfg.check_dataset(&mut data)?;
        let trained = train_run(cfg, &data, None)?;
        let test = data.subset(&cfg.data.eval_subset);
        let (_, report) = evaluate(
            &trained.model,
            trained.weights(cfg.use_ema),
            &test,
            &cfg.postprocess,
            &cfg.eval,
            threads,
        )?;
        rows.push(AblationRow {
            value,
            average_map: report.average_map,
            map: report.map,
            first_loss: trained.history.first().map_or(f64::NAN, |s| s.loss_total),
            final_loss: trained.history.last().map_or(f64::NAN, |s| s.loss_total),
            steps: trained.history.len(),
        });
    }
    let table = AblationTable {
        axis: axis.name().to_string(),
        tiou_thresholds: base.eval.tiou_thresholds.clone(),
        rows,
    };
    write_json(&out.join("ablation.json"), &table)?;
    write_text(&out.join("ablation.csv"), &table.csv())?;
    print!("{}", table.csv());
    Ok(())
}

/// Output path helper: `--out` when given, else `default` in the current directory.
pub fn out_or(out: Option<PathBuf>, default: &str) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from(default))
}
