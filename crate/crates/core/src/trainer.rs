//! Training loop, checkpoints, and dataset-level inference / evaluation.

use std::thread;

use af_tensor::{clip_grad_norm, Adam, AdamConfig, Checkpoint, CheckpointError, Ema, Graph, LrSchedule, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_window, window_rng, DataError, Dataset, FeatureSequence};
use crate::eval::{map_at, EvalConfig, EvalReport, VideoMap};
use crate::loss::loss_for_output;
use crate::model::{Model, ModelConfig, ModelError};
use crate::postprocess::{entries_to_detections, postprocess, to_entries, PostprocessConfig, PredictionFile};
use crate::targets::{assign_targets, LossConfig, TargetError};

/// Checkpoint name prefix of the averaged weights.
pub const EMA_PREFIX: &str = "ema.";

fn d_epochs() -> usize {
    50
}
fn d_warmup() -> usize {
    5
}
fn d_lr() -> f64 {
    1e-4
}
fn d_wd() -> f64 {
    1e-4
}
fn d_batch() -> usize {
    2
}
fn d_tmax() -> usize {
    2304
}
fn d_ema() -> f64 {
    0.999
}
fn d_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "d_lr")]
    pub base_lr: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Training window length; longer videos are cropped, shorter padded.
    #[serde(default = "d_tmax")]
    pub t_max: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_ema")]
    pub ema_decay: f64,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    /// Center sampling flag and `lambda_reg` live here with the focal settings.
    #[serde(default)]
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Targets(#[from] TargetError),
    #[error(transparent)]
    Tensor(#[from] af_tensor::TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at step {step} (epoch {epoch}, batch {batch}, videos {videos:?})")]
    NonFiniteLoss {
        loss: f64,
        step: u64,
        epoch: usize,
        batch: usize,
        videos: Vec<String>,
    },
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return fail("need 0 <= warmup_epochs < epochs");
        }
        if self.batch_size == 0 || self.t_max == 0 {
            return fail("batch_size and t_max must be positive");
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return fail("base_lr and clip_norm must be > 0, weight_decay >= 0");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail("ema_decay must lie in [0, 1)");
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// One optimizer step, as written to the JSON-lines log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_reg: f64,
}

/// Trained network with raw and averaged weights.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub params: ParamStore<f32>,
    pub ema: ParamStore<f32>,
    pub history: Vec<StepLog>,
}

impl Trained {
    pub fn checkpoint(&self) -> Checkpoint {
        build_checkpoint(&self.params, &self.ema)
    }

    pub fn weights(&self, use_ema: bool) -> &ParamStore<f32> {
        if use_ema {
            &self.ema
        } else {
            &self.params
        }
    }
}

pub fn build_checkpoint(params: &ParamStore<f32>, ema: &ParamStore<f32>) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    for p in params.iter() {
        ckpt.push(p.name.clone(), p.value.clone());
    }
    for p in ema.iter() {
        ckpt.push(format!("{EMA_PREFIX}{}", p.name), p.value.clone());
    }
    ckpt
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    window_rng(seed, epoch, u32::MAX as usize)
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Builds a model and its parameters from `seed`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<f32>), ModelError> {
    let mut store = ParamStore::new();
    let model = Model::new(config.clone(), &mut store, &mut init_rng(seed))?;
    Ok((model, store))
}

/// Trains on every video of `dataset`, calling `on_step` after each step.
pub fn train(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Trained, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if dataset.videos.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    if cfg.t_max > model_cfg.max_seq_len {
        return Err(TrainError::Config(format!(
            "t_max {} exceeds the model's max_seq_len {}",
            cfg.t_max, model_cfg.max_seq_len
        )));
    }
    let (model, mut store) = init_model(model_cfg, cfg.seed)?;
    let steps_per_epoch = dataset.videos.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule {
        base_lr: cfg.base_lr,
        warmup_steps: (cfg.warmup_epochs * steps_per_epoch) as u64,
        total_steps: (cfg.epochs * steps_per_epoch) as u64,
    };
    let adam_cfg = AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam = Adam::new(&store, adam_cfg, schedule);
    let mut ema = Ema::new(&store, cfg.ema_decay);
    let geometry = model_cfg.geometry(cfg.t_max);
    let grid_actions: Vec<_> = dataset.videos.iter().map(|v| v.grid_actions()).collect();
    let mut history = Vec::with_capacity(cfg.epochs * steps_per_epoch);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.videos.len()).collect();
        order.shuffle(&mut shuffle_rng(cfg.seed, epoch));
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            store.zero_grad();
            let scale = 1.0 / chunk.len() as f32;
            let (mut total, mut cls, mut reg) = (0.0, 0.0, 0.0);
            for &vi in chunk {
                let video = &dataset.videos[vi];
                let mut rng = window_rng(cfg.seed, epoch, vi);
                let window = sample_window(&video.features, &grid_actions[vi], cfg.t_max, &mut rng)?;
                let targets = assign_targets(&window.actions, &geometry, model_cfg.num_classes, &cfg.loss)?;
                let g = Graph::new();
                let out = model.forward_window(&g, &store, &window.features, &window.mask)?;
                let (loss, parts) = loss_for_output(&g, &out, &targets, &cfg.loss)?;
                if !parts.total.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        loss: parts.total,
                        step: adam.step_count(),
                        epoch,
                        batch,
                        videos: chunk.iter().map(|&i| dataset.videos[i].features.video_id.clone()).collect(),
                    });
                }
                let grads = g.backward(loss)?;
                store.accumulate(&grads, scale);
                total += parts.total / chunk.len() as f64;
                cls += parts.cls / chunk.len() as f64;
                reg += parts.reg / chunk.len() as f64;
            }
            clip_grad_norm(&mut store, cfg.clip_norm);
            let step = adam.step_count();
            let lr = adam.step(&mut store);
            ema.update(&store);
            let log = StepLog {
                step,
                lr,
                loss_total: total,
                loss_cls: cls,
                loss_reg: reg,
            };
            on_step(&log);
            history.push(log);
        }
    }

    let mut ema_store = store.clone();
    ema_store.load_named(ema.named(&store))?;
    Ok(Trained {
        model,
        params: store,
        ema: ema_store,
        history,
    })
}

/// Restores weights from a checkpoint; `use_ema` picks the averaged copy.
pub fn load_weights(
    config: &ModelConfig,
    ckpt: &Checkpoint,
    use_ema: bool,
) -> Result<(Model, ParamStore<f32>), TrainError> {
    let (model, mut store) = init_model(config, 0)?;
    let prefix = if use_ema { EMA_PREFIX } else { "" };
    if use_ema {
        store.load_named(ckpt.with_prefix::<f32>(prefix))?;
    } else {
        store.load_named(
            ckpt.with_prefix::<f32>("")
                .filter(|(n, _)| !n.starts_with(EMA_PREFIX)),
        )?;
    }
    Ok((model, store))
}

/// Detections for one full sequence, in seconds.
pub fn predict_sequence(
    model: &Model,
    store: &ParamStore<f32>,
    seq: &FeatureSequence,
    post: &PostprocessConfig,
) -> Result<Vec<crate::postprocess::PredictionEntry>, TrainError> {
    let out = model.predict(store, &seq.features)?;
    let dets = postprocess(&out, seq.len() as f64, post);
    Ok(to_entries(&dets, seq.fps, seq.feature_stride))
}

/// Runs inference over `sequences` on up to `threads` workers. Output does
/// not depend on the worker count.
pub fn predict_all(
    model: &Model,
    store: &ParamStore<f32>,
    sequences: &[&FeatureSequence],
    post: &PostprocessConfig,
    threads: usize,
) -> Result<PredictionFile, TrainError> {
    let threads = threads.max(1).min(sequences.len().max(1));
    let chunk = sequences.len().div_ceil(threads).max(1);
    let results: Vec<Result<Vec<_>, TrainError>> = thread::scope(|s| {
        let handles: Vec<_> = sequences
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|seq| Ok((seq.video_id.clone(), predict_sequence(model, store, seq, post)?)))
                        .collect::<Result<Vec<_>, TrainError>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("inference worker panicked")).collect()
    });
    let mut file = PredictionFile::new();
    for r in results {
        file.extend(r?);
    }
    Ok(file)
}

/// Converts a prediction file to detections in seconds keyed by video.
pub fn prediction_map(preds: &PredictionFile) -> VideoMap {
    preds
        .iter()
        .map(|(v, entries)| (v.clone(), entries_to_detections(entries)))
        .collect()
}

/// Predicts every video of `dataset` with the given weights and scores the
/// result against its annotations.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    dataset: &Dataset,
    post: &PostprocessConfig,
    eval: &EvalConfig,
    threads: usize,
) -> Result<(PredictionFile, EvalReport), TrainError> {
    let seqs: Vec<&FeatureSequence> = dataset.videos.iter().map(|v| &v.features).collect();
    let preds = predict_all(model, store, &seqs, post, threads)?;
    let gts = dataset.ground_truth().instances(None);
    let report = map_at(&prediction_map(&preds), &gts, eval);
    Ok((preds, report))
}

/// [`evaluate`] with weights restored from a checkpoint.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    config: &ModelConfig,
    dataset: &Dataset,
    post: &PostprocessConfig,
    eval: &EvalConfig,
    use_ema: bool,
    threads: usize,
) -> Result<(PredictionFile, EvalReport), TrainError> {
    let (model, store) = load_weights(config, ckpt, use_ema)?;
    evaluate(&model, &store, dataset, post, eval, threads)
}

/// Total loss of the current weights on one padded window, for diagnostics.
pub fn window_loss(
    model: &Model,
    store: &ParamStore<f32>,
    features: &Tensor<f32>,
    mask: &[bool],
    actions: &[crate::ActionInstance],
    loss: &LossConfig,
) -> Result<f64, TrainError> {
    let g = Graph::inference();
    let out = model.forward(&g, store, features, mask)?;
    let targets = assign_targets(actions, &model.config.geometry(features.shape()[0]), model.config.num_classes, loss)?;
    Ok(loss_for_output(&g, &out, &targets, loss)?.1.total)
}
