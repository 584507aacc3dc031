//! The two pretext training loops and their run management.
//!
//! A run directory holds `metrics.ndjson` (one record per epoch) and
//! `checkpoints/` with rolling `epoch-NNNN` snapshots plus `final`.

pub mod checkpoint;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    list_checkpoints, load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, CheckpointMeta, RngState,
    TensorEntry, CHECKPOINT_FORMAT_VERSION,
};

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::losses::{rasterization_loss_with_grad, vectorization_loss_with_grad, CoordPenalty, PointPrediction};
use crate::models::{CoordinateMode, ModelConfig, RasterizationModel, VectorizationModel};
use crate::nn::{adam_step, AdamConfig, ParameterStore, Tape, Tensor};
use crate::raster::{render, RasterConfig, RasterImage};
use crate::stroke::{PaddedSequence, PenState, StrokeSequence};

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vectorization,
    Rasterization,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Vectorization => "vectorization",
            Task::Rasterization => "rasterization",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vectorization" => Ok(Task::Vectorization),
            "rasterization" => Ok(Task::Rasterization),
            _ => Err(Error::InvalidConfig(format!("unknown task {s:?}"))),
        }
    }
}

fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    10
}
fn default_t_max() -> usize {
    64
}
fn default_true() -> bool {
    true
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}
fn default_keep() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub task: Task,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    #[serde(default)]
    pub raster: RasterConfig,
    /// Disables augmentation and wall-clock logging so reruns are bitwise equal.
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default = "default_true")]
    pub teacher_forcing: bool,
    /// Global gradient-norm clip; `None` disables it.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    /// Horizontal flip + random crop (ignored when `deterministic`).
    #[serde(default)]
    pub augment: bool,
    #[serde(default)]
    pub coord_penalty: CoordPenalty,
    /// Number of rolling per-epoch checkpoints kept (0 keeps only `final`).
    #[serde(default = "default_keep")]
    pub keep_checkpoints: usize,
}

impl PretrainConfig {
    pub fn new(task: Task) -> Self {
        serde_json::from_value(serde_json::json!({ "task": task })).expect("defaults deserialize")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.t_max < 2 {
            return bad("t_max must be at least 2".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        self.raster.validate()?;
        match self.task {
            Task::Vectorization => self.model.validate_vectorization(&self.raster),
            Task::Rasterization => self.model.validate_rasterization(&self.raster),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            clip_norm: self.clip_norm,
            ..AdamConfig::with_lr(self.lr)
        }
    }

    fn augmenting(&self) -> bool {
        self.augment && !self.deterministic
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub task: Task,
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coord_term: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pen_term: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pen_accuracy: Option<f64>,
    /// Mean pre-clip gradient norm over the epoch's steps.
    pub grad_norm: f64,
    /// Seconds since the run (or resume) started; null in deterministic runs.
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainRun {
    /// `checkpoints/final` of the run directory.
    pub checkpoint: PathBuf,
    /// Every epoch from 1, including those restored on resume.
    pub metrics: Vec<EpochMetrics>,
    pub store: ParameterStore,
}

/// One prepared training example.
#[derive(Debug, Clone)]
struct Example {
    rows: Vec<[f64; 5]>,
    mask: Vec<bool>,
    image: RasterImage,
}

fn model_rows(p: &PaddedSequence, mode: CoordinateMode) -> Vec<[f64; 5]> {
    match mode {
        CoordinateMode::Absolute => p.rows(),
        CoordinateMode::Offset => p.offset_rows(),
    }
}

fn prepare(seq: &StrokeSequence, cfg: &PretrainConfig, image: Option<&RasterImage>) -> Result<Example> {
    let padded = seq.pad_or_truncate(cfg.t_max);
    let image = match image {
        Some(img) if (img.height, img.width, img.channels) == (cfg.raster.height, cfg.raster.width, cfg.raster.channels) => {
            img.clone()
        }
        _ => render(seq, &cfg.raster)?,
    };
    Ok(Example {
        rows: model_rows(&padded, cfg.model.coordinate_mode),
        mask: padded.mask,
        image,
    })
}

/// Horizontal flip with probability 1/2, then a random crop keeping
/// 85–100% of each side, resampled back to the full canvas.
fn augment_sequence(seq: &StrokeSequence, rng: &mut ChaCha8Rng) -> StrokeSequence {
    let flip = rng.gen_bool(0.5);
    let keep = rng.gen_range(0.85..=1.0);
    let (ox, oy) = (rng.gen_range(0.0..=1.0 - keep), rng.gen_range(0.0..=1.0 - keep));
    seq.map_coords(|x, y| {
        let x = if flip { 1.0 - x } else { x };
        (((x - ox) / keep).clamp(0.0, 1.0), ((y - oy) / keep).clamp(0.0, 1.0))
    })
}

struct BatchStats {
    loss: f64,
    coord: f64,
    pen: f64,
    pen_hits: usize,
    pen_total: usize,
}

/// Trims a batch to its longest valid prefix; masked tail steps carry no
/// loss and leave encoder outputs unchanged.
fn trimmed(batch: &[&Example]) -> (Vec<Vec<[f64; 5]>>, Vec<Vec<bool>>) {
    let t = batch.iter().map(|e| e.mask.iter().filter(|&&m| m).count()).max().unwrap_or(1).max(1);
    (
        batch.iter().map(|e| e.rows[..t].to_vec()).collect(),
        batch.iter().map(|e| e.mask[..t].to_vec()).collect(),
    )
}

fn vectorization_batch(
    model: &VectorizationModel,
    store: &ParameterStore,
    cfg: &PretrainConfig,
    batch: &[&Example],
    train: bool,
) -> Result<(BatchStats, Option<std::collections::BTreeMap<String, Tensor>>)> {
    let (rows, masks) = trimmed(batch);
    let (b, t) = (batch.len(), rows[0].len());
    let mut tape = Tape::new();
    let images: Vec<&RasterImage> = batch.iter().map(|e| &e.image).collect();
    let x = tape.constant(model.encoder.batch_tensor(&images)?);
    let enc = model.encoder.forward(&mut tape, store, x)?;
    let outs = if cfg.teacher_forcing {
        model.decoder.teacher_forced(&mut tape, store, enc.latent, &rows, t)?
    } else {
        model.decoder.free_running(&mut tape, store, enc.latent, t)?
    };
    // row `i * b + s` is step i of sample s
    let all = tape.concat_rows(&outs);
    let vals = tape.value(all).clone();
    let mut grad = vec![0.0; t * b * 5];
    let mut stats = BatchStats {
        loss: 0.0,
        coord: 0.0,
        pen: 0.0,
        pen_hits: 0,
        pen_total: 0,
    };
    for s in 0..b {
        let preds: Vec<PointPrediction> = (0..t).map(|i| PointPrediction::from_row(vals.row(i * b + s))).collect();
        let (br, g) = vectorization_loss_with_grad(&preds, &rows[s], &masks[s], cfg.coord_penalty)?;
        stats.loss += br.total / b as f64;
        stats.coord += br.coord_term / b as f64;
        stats.pen += br.pen_term / b as f64;
        for i in 0..t {
            for k in 0..5 {
                grad[(i * b + s) * 5 + k] = g[i][k] / b as f64;
            }
            if masks[s][i] {
                let target = PenState::from_one_hot([rows[s][i][2], rows[s][i][3], rows[s][i][4]]);
                stats.pen_total += 1;
                if target == Some(PenState::argmax(&preds[i].pen_logits)) {
                    stats.pen_hits += 1;
                }
            }
        }
    }
    if !train || !stats.loss.is_finite() {
        return Ok((stats, None));
    }
    let root = tape.custom_scalar(all, stats.loss, Tensor::new(vec![t * b, 5], grad));
    tape.backward(root);
    Ok((stats, Some(tape.param_grads())))
}

fn rasterization_batch(
    model: &RasterizationModel,
    store: &ParameterStore,
    batch: &[&Example],
    train: bool,
) -> Result<(BatchStats, Option<std::collections::BTreeMap<String, Tensor>>)> {
    let (rows, masks) = trimmed(batch);
    let mut tape = Tape::new();
    let enc = model.encoder.forward(&mut tape, store, &rows, &masks)?;
    let pred = model.decoder.forward(&mut tape, store, enc.latent)?;
    let p = tape.value(pred).clone();
    let target: Vec<f64> = batch.iter().flat_map(|e| e.image.to_chw()).collect();
    let (loss, grad) = rasterization_loss_with_grad(&p, &Tensor::new(p.shape.clone(), target))?;
    let stats = BatchStats {
        loss,
        coord: 0.0,
        pen: 0.0,
        pen_hits: 0,
        pen_total: 0,
    };
    if !train || !loss.is_finite() {
        return Ok((stats, None));
    }
    let root = tape.custom_scalar(pred, loss, grad);
    tape.backward(root);
    Ok((stats, Some(tape.param_grads())))
}

enum Model {
    Vec(VectorizationModel),
    Ras(RasterizationModel),
}

impl Model {
    fn build(cfg: &PretrainConfig) -> Result<Self> {
        Ok(match cfg.task {
            Task::Vectorization => Model::Vec(VectorizationModel::new(&cfg.model, &cfg.raster)?),
            Task::Rasterization => Model::Ras(RasterizationModel::new(&cfg.model, &cfg.raster, cfg.t_max)?),
        })
    }

    fn init(&self, cfg: &PretrainConfig) -> Result<ParameterStore> {
        match self {
            Model::Vec(m) => m.init_params(cfg.seed, cfg.model.dtype),
            Model::Ras(m) => m.init_params(cfg.seed, cfg.model.dtype),
        }
    }

    fn batch(
        &self,
        store: &ParameterStore,
        cfg: &PretrainConfig,
        batch: &[&Example],
        train: bool,
    ) -> Result<(BatchStats, Option<std::collections::BTreeMap<String, Tensor>>)> {
        match self {
            Model::Vec(m) => vectorization_batch(m, store, cfg, batch, train),
            Model::Ras(m) => rasterization_batch(m, store, batch, train),
        }
    }
}

fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn epoch_dir(root: &Path, epoch: usize) -> PathBuf {
    root.join(CHECKPOINT_DIR).join(format!("epoch-{epoch:04}"))
}

fn config_echo(cfg: &PretrainConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

/// Everything but the epoch budget must agree for a resume to be valid.
fn check_resumable(cfg: &PretrainConfig, manifest: &CheckpointManifest) -> Result<()> {
    let saved: PretrainConfig = serde_json::from_value(manifest.config.clone())
        .map_err(|e| Error::InvalidConfig(format!("checkpoint config unreadable: {e}")))?;
    let mut a = saved;
    a.epochs = cfg.epochs;
    if &a != cfg {
        return Err(Error::InvalidConfig(
            "resume config differs from the checkpoint's (only epochs may change)".into(),
        ));
    }
    if manifest.epoch > cfg.epochs {
        return Err(Error::InvalidConfig(format!(
            "checkpoint is at epoch {} but only {} epochs requested",
            manifest.epoch, cfg.epochs
        )));
    }
    Ok(())
}

fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut out = Vec::new();
    for m in metrics {
        serde_json::to_writer(&mut out, m)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn append_metrics(path: &Path, m: &EpochMetrics) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_vec(m)?;
    line.push(b'\n');
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

const METRICS_TAIL: usize = 5;

/// Trains the configured pretext task on `samples`, writing metrics and
/// checkpoints under `out_dir`. `resume` names a checkpoint directory of an
/// earlier run with the same config; training continues after its epoch.
pub fn pretrain(
    samples: &[&LabeledSample],
    cfg: &PretrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PretrainRun> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let model = Model::build(cfg)?;
    let base: Vec<Example> = samples
        .iter()
        .map(|s| prepare(&s.vector, cfg, Some(&s.raster)))
        .collect::<Result<_>>()?;

    fs::create_dir_all(out_dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);

    let (mut store, mut rng, mut metrics, start) = match resume {
        Some(dir) => {
            let (store, manifest) = load_checkpoint(dir)?;
            check_resumable(cfg, &manifest)?;
            let rng = manifest
                .rng
                .as_ref()
                .ok_or_else(|| Error::CorruptCheckpoint("checkpoint has no rng state".into()))?
                .restore()?;
            let earlier = if metrics_path.exists() {
                read_metrics(&metrics_path)?
            } else {
                let src = dir.parent().and_then(Path::parent).map(|p| p.join(METRICS_FILE));
                match src {
                    Some(p) if p.exists() => read_metrics(&p)?,
                    _ => manifest
                        .metrics_tail
                        .iter()
                        .map(|v| serde_json::from_value(v.clone()).map_err(Error::from))
                        .collect::<Result<_>>()?,
                }
            };
            let kept: Vec<EpochMetrics> = earlier.into_iter().filter(|m| m.epoch <= manifest.epoch).collect();
            (store, rng, kept, manifest.epoch)
        }
        None => (model.init(cfg)?, training_rng(cfg.seed), Vec::new(), 0),
    };
    write_metrics(&metrics_path, &metrics)?;

    let adam = cfg.adam();
    let echo = config_echo(cfg)?;
    let clock = Instant::now();
    let mut last_good: Option<PathBuf> = resume.map(Path::to_path_buf);
    let mut order: Vec<usize> = (0..base.len()).collect();

    for epoch in start + 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng);
        let epoch_data: Vec<Example> = if cfg.augmenting() {
            samples
                .iter()
                .map(|s| prepare(&augment_sequence(&s.vector, &mut rng), cfg, None))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let data = if cfg.augmenting() { &epoch_data } else { &base };

        let (mut loss, mut coord, mut pen, mut norm) = (0.0, 0.0, 0.0, 0.0);
        let (mut hits, mut total, mut steps) = (0usize, 0usize, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let (stats, grads) = model.batch(&store, cfg, &batch, true)?;
            let grads = match grads {
                Some(g) if g.values().all(Tensor::is_finite) => g,
                _ => {
                    return Err(Error::DivergedLoss {
                        epoch,
                        step: bi,
                        last_checkpoint: last_good,
                    })
                }
            };
            norm += adam_step(&mut store, &grads, &adam);
            let w = chunk.len() as f64 / data.len() as f64;
            loss += stats.loss * w;
            coord += stats.coord * w;
            pen += stats.pen * w;
            hits += stats.pen_hits;
            total += stats.pen_total;
            steps += 1;
        }
        let vec_task = cfg.task == Task::Vectorization;
        let m = EpochMetrics {
            task: cfg.task,
            epoch,
            step: store.step(),
            loss,
            coord_term: vec_task.then_some(coord),
            pen_term: vec_task.then_some(pen),
            pen_accuracy: vec_task.then(|| hits as f64 / total.max(1) as f64),
            grad_norm: norm / steps as f64,
            wall_time: (!cfg.deterministic).then(|| clock.elapsed().as_secs_f64()),
        };
        append_metrics(&metrics_path, &m)?;
        metrics.push(m);

        let meta = CheckpointMeta {
            task: cfg.task.name().into(),
            config: echo.clone(),
            epoch,
            step: store.step(),
            metrics_tail: metrics[metrics.len().saturating_sub(METRICS_TAIL)..]
                .iter()
                .map(serde_json::to_value)
                .collect::<std::result::Result<_, _>>()?,
            rng: Some(RngState::capture(&rng)),
        };
        if cfg.keep_checkpoints > 0 {
            let dir = epoch_dir(out_dir, epoch);
            save_checkpoint(&dir, &store, &meta)?;
            last_good = Some(dir);
            if epoch > cfg.keep_checkpoints {
                let stale = epoch_dir(out_dir, epoch - cfg.keep_checkpoints);
                if stale.exists() {
                    fs::remove_dir_all(&stale).map_err(|e| Error::io(&stale, e))?;
                }
            }
        }
        if epoch == cfg.epochs {
            let fin = out_dir.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT);
            save_checkpoint(&fin, &store, &meta)?;
        }
    }
    let checkpoint = out_dir.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT);
    if start == cfg.epochs {
        // nothing left to train: still leave a final checkpoint behind
        let meta = CheckpointMeta {
            task: cfg.task.name().into(),
            config: echo,
            epoch: start,
            step: store.step(),
            metrics_tail: Vec::new(),
            rng: Some(RngState::capture(&rng)),
        };
        save_checkpoint(&checkpoint, &store, &meta)?;
    }
    Ok(PretrainRun {
        checkpoint,
        metrics,
        store,
    })
}

pub fn pretrain_vectorization(
    samples: &[&LabeledSample],
    cfg: &PretrainConfig,
    out_dir: &Path,
) -> Result<PretrainRun> {
    if cfg.task != Task::Vectorization {
        return Err(Error::InvalidConfig("config task is not vectorization".into()));
    }
    pretrain(samples, cfg, out_dir, None)
}

pub fn pretrain_rasterization(
    samples: &[&LabeledSample],
    cfg: &PretrainConfig,
    out_dir: &Path,
) -> Result<PretrainRun> {
    if cfg.task != Task::Rasterization {
        return Err(Error::InvalidConfig("config task is not rasterization".into()));
    }
    pretrain(samples, cfg, out_dir, None)
}

/// Loss of the pretext objective on `samples` without updating anything.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretextEval {
    pub loss: f64,
    pub coord_term: Option<f64>,
    pub pen_term: Option<f64>,
    pub pen_accuracy: Option<f64>,
}

pub fn evaluate_pretext(
    samples: &[&LabeledSample],
    cfg: &PretrainConfig,
    store: &ParameterStore,
) -> Result<PretextEval> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let model = Model::build(cfg)?;
    let data: Vec<Example> = samples
        .iter()
        .map(|s| prepare(&s.vector, cfg, Some(&s.raster)))
        .collect::<Result<_>>()?;
    let (mut loss, mut coord, mut pen) = (0.0, 0.0, 0.0);
    let (mut hits, mut total) = (0, 0);
    for chunk in data.chunks(cfg.batch_size) {
        let batch: Vec<&Example> = chunk.iter().collect();
        let (s, _) = model.batch(store, cfg, &batch, false)?;
        let w = chunk.len() as f64 / data.len() as f64;
        loss += s.loss * w;
        coord += s.coord * w;
        pen += s.pen * w;
        hits += s.pen_hits;
        total += s.pen_total;
    }
    let v = cfg.task == Task::Vectorization;
    Ok(PretextEval {
        loss,
        coord_term: v.then_some(coord),
        pen_term: v.then_some(pen),
        pen_accuracy: v.then(|| hits as f64 / total.max(1) as f64),
    })
}

/// A checkpoint reopened together with the config that produced it.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub config: PretrainConfig,
    pub store: ParameterStore,
    pub manifest: CheckpointManifest,
}

impl Pretrained {
    pub fn load(dir: &Path) -> Result<Self> {
        let (store, manifest) = load_checkpoint(dir)?;
        let config: PretrainConfig = serde_json::from_value(manifest.config.clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("config echo unreadable: {e}")))?;
        Ok(Self {
            config,
            store,
            manifest,
        })
    }

    pub fn vectorization_model(&self) -> Result<VectorizationModel> {
        if self.config.task != Task::Vectorization {
            return Err(Error::ModalityMismatch(format!(
                "checkpoint holds a {} model, not vectorization",
                self.config.task.name()
            )));
        }
        VectorizationModel::new(&self.config.model, &self.config.raster)
    }

    pub fn rasterization_model(&self) -> Result<RasterizationModel> {
        if self.config.task != Task::Rasterization {
            return Err(Error::ModalityMismatch(format!(
                "checkpoint holds a {} model, not rasterization",
                self.config.task.name()
            )));
        }
        RasterizationModel::new(&self.config.model, &self.config.raster, self.config.t_max)
    }
}

/// Padded model-space rows for a sequence under `cfg`'s coordinate mode.
pub fn sequence_rows(seq: &StrokeSequence, t_max: usize, mode: CoordinateMode) -> (Vec<[f64; 5]>, Vec<bool>) {
    let p = seq.pad_or_truncate(t_max);
    (model_rows(&p, mode), p.mask)
}
