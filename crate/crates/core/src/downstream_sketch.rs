//! Sketch classification and retrieval on top of pretext encoders: frozen
//! feature tables, linear probes, retrieval heads and label-fraction
//! fine-tuning.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::losses::{classification_loss_with_grad, euclidean, triplet_loss_with_grad};
use crate::models::layers::Linear;
use crate::models::{CoordinateMode, ImageEncoder, Modality, RasterizationModel, SeqEncoder, VectorizationModel};
use crate::nn::{adam_step, AdamConfig, DType, Init, ParameterStore, Tape, Tensor, Var};
use crate::pretrain::{sequence_rows, PretrainConfig, Pretrained, Task};
use crate::raster::{render, RasterConfig, RasterImage};

/// Which encoder stage features are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depth {
    Final,
    /// 1-based block (image) or layer (sequence) index.
    Block(usize),
}

impl fmt::Display for Depth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Depth::Final => f.write_str("final"),
            Depth::Block(i) => write!(f, "block{i}"),
        }
    }
}

impl FromStr for Depth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("final") {
            return Ok(Depth::Final);
        }
        t.trim_start_matches("block")
            .parse::<usize>()
            .ok()
            .filter(|&i| i >= 1)
            .map(Depth::Block)
            .ok_or_else(|| Error::UnknownDepth(s.to_string()))
    }
}

impl Serialize for Depth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Depth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Rows of pooled encoder features with their ids and class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub ids: Vec<String>,
    /// `[N, d]`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
    pub depth_tag: String,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape[1]
    }

    /// Rows `idx` as a new table.
    pub fn select(&self, idx: &[usize]) -> FeatureTable {
        let d = self.dim();
        FeatureTable {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            features: Tensor::new(
                vec![idx.len(), d],
                idx.iter().flat_map(|&i| self.features.row(i).to_vec()).collect(),
            ),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes.clone(),
            depth_tag: self.depth_tag.clone(),
        }
    }

    /// Every feature column repeated side by side (`[x, x]`).
    pub fn duplicated(&self) -> FeatureTable {
        let (n, d) = (self.len(), self.dim());
        let data = (0..n)
            .flat_map(|i| {
                let r = self.features.row(i);
                r.iter().chain(r.iter()).copied().collect::<Vec<_>>()
            })
            .collect();
        FeatureTable {
            features: Tensor::new(vec![n, 2 * d], data),
            ..self.clone()
        }
    }
}

fn sample_labels(samples: &[&LabeledSample], classes: &[String]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| match s.label {
            Some(l) if l < classes.len() => Ok(l),
            Some(l) => Err(Error::ClassMismatch(format!(
                "sample {} has label {l} outside the {}-class universe",
                s.id,
                classes.len()
            ))),
            None => Err(Error::ClassMismatch(format!("sample {} has no class label", s.id))),
        })
        .collect()
}

/// The encoder half of a pretext model, fed the modality it was trained on.
#[derive(Debug, Clone)]
pub enum SketchEncoder {
    Image {
        encoder: ImageEncoder,
        raster: RasterConfig,
    },
    Vector {
        encoder: SeqEncoder,
        t_max: usize,
        mode: CoordinateMode,
    },
}

const EXTRACT_CHUNK: usize = 32;

impl SketchEncoder {
    pub fn from_config(cfg: &PretrainConfig) -> Result<Self> {
        Ok(match cfg.task {
            Task::Vectorization => SketchEncoder::Image {
                encoder: VectorizationModel::new(&cfg.model, &cfg.raster)?.encoder,
                raster: cfg.raster,
            },
            Task::Rasterization => SketchEncoder::Vector {
                encoder: RasterizationModel::new(&cfg.model, &cfg.raster, cfg.t_max)?.encoder,
                t_max: cfg.t_max,
                mode: cfg.model.coordinate_mode,
            },
        })
    }

    /// Checks that the checkpoint's encoder consumes `modality`.
    pub fn from_pretrained(p: &Pretrained, modality: Modality) -> Result<Self> {
        let enc = Self::from_config(&p.config)?;
        if enc.modality() != modality {
            return Err(Error::ModalityMismatch(format!(
                "{} checkpoint encodes {:?} inputs, {:?} requested",
                p.config.task.name(),
                enc.modality(),
                modality
            )));
        }
        Ok(enc)
    }

    /// Freshly initialized parameters, identical to a pretext run's epoch-0 state.
    pub fn random_params(cfg: &PretrainConfig) -> Result<ParameterStore> {
        match cfg.task {
            Task::Vectorization => VectorizationModel::new(&cfg.model, &cfg.raster)?.init_params(cfg.seed, cfg.model.dtype),
            Task::Rasterization => {
                RasterizationModel::new(&cfg.model, &cfg.raster, cfg.t_max)?.init_params(cfg.seed, cfg.model.dtype)
            }
        }
    }

    pub fn modality(&self) -> Modality {
        match self {
            SketchEncoder::Image { .. } => Modality::Image,
            SketchEncoder::Vector { .. } => Modality::Vector,
        }
    }

    /// Number of blocks / layers.
    pub fn depth(&self) -> usize {
        match self {
            SketchEncoder::Image { encoder, .. } => encoder.depth(),
            SketchEncoder::Vector { encoder, .. } => encoder.depth(),
        }
    }

    pub fn check_depth(&self, depth: Depth) -> Result<()> {
        match depth {
            Depth::Block(i) if i == 0 || i > self.depth() => Err(Error::UnknownDepth(format!(
                "{depth} (encoder has {} stages)",
                self.depth()
            ))),
            _ => Ok(()),
        }
    }

    pub fn feature_dim(&self, depth: Depth) -> Result<usize> {
        self.check_depth(depth)?;
        Ok(match (self, depth) {
            (SketchEncoder::Image { encoder, .. }, Depth::Final) => encoder.latent_dim(),
            (SketchEncoder::Image { encoder, .. }, Depth::Block(i)) => encoder.block_width(i - 1),
            (SketchEncoder::Vector { encoder, .. }, _) => encoder.output_dim(),
        })
    }

    /// Parameter-name prefixes of the first `depth` stages.
    pub fn frozen_prefixes(&self, depth: usize) -> Vec<String> {
        match self {
            SketchEncoder::Image { encoder, .. } => encoder.frozen_prefixes(depth),
            SketchEncoder::Vector { encoder, .. } => encoder.frozen_prefixes(depth),
        }
    }

    /// `[B, d]` features of `samples` at `depth`. Block features are
    /// globally max-pooled block outputs (image) or per-layer summaries
    /// (sequence).
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, samples: &[&LabeledSample], depth: Depth) -> Result<Var> {
        self.check_depth(depth)?;
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        match self {
            SketchEncoder::Image { encoder, raster } => {
                let rendered: Vec<Option<RasterImage>> = samples
                    .iter()
                    .map(|s| {
                        let r = &s.raster;
                        if (r.height, r.width, r.channels) == (raster.height, raster.width, raster.channels) {
                            Ok(None)
                        } else {
                            render(&s.vector, raster).map(Some)
                        }
                    })
                    .collect::<Result<_>>()?;
                let images: Vec<&RasterImage> = samples
                    .iter()
                    .zip(&rendered)
                    .map(|(s, r)| r.as_ref().unwrap_or(&s.raster))
                    .collect();
                let x = tape.constant(encoder.batch_tensor(&images)?);
                let enc = encoder.forward(tape, store, x)?;
                Ok(match depth {
                    Depth::Final => enc.latent,
                    Depth::Block(i) => tape.global_max_pool(enc.blocks[i - 1]),
                })
            }
            SketchEncoder::Vector { encoder, t_max, mode } => {
                let (mut rows, mut masks): (Vec<_>, Vec<_>) =
                    samples.iter().map(|s| sequence_rows(&s.vector, *t_max, *mode)).unzip();
                let t = masks.iter().map(|m: &Vec<bool>| m.iter().filter(|&&v| v).count()).max().unwrap_or(1);
                for (r, m) in rows.iter_mut().zip(masks.iter_mut()) {
                    r.truncate(t);
                    m.truncate(t);
                }
                let enc = encoder.forward(tape, store, &rows, &masks)?;
                Ok(match depth {
                    Depth::Final => enc.latent,
                    Depth::Block(i) => enc.layers[i - 1],
                })
            }
        }
    }
}

/// Inference-only feature table; deterministic for fixed inputs.
pub fn extract_features(
    encoder: &SketchEncoder,
    store: &ParameterStore,
    samples: &[&LabeledSample],
    depth: Depth,
    classes: &[String],
) -> Result<FeatureTable> {
    encoder.check_depth(depth)?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels = sample_labels(samples, classes)?;
    let d = encoder.feature_dim(depth)?;
    let mut data = Vec::with_capacity(samples.len() * d);
    for chunk in samples.chunks(EXTRACT_CHUNK) {
        let mut tape = Tape::new();
        let f = encoder.forward(&mut tape, store, chunk, depth)?;
        let v = tape.value(f);
        if !v.is_finite() {
            return Err(Error::ShapeMismatch("encoder produced non-finite features".into()));
        }
        data.extend_from_slice(&v.data);
    }
    Ok(FeatureTable {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        features: Tensor::new(vec![samples.len(), d], data),
        labels,
        classes: classes.to_vec(),
        depth_tag: depth.to_string(),
    })
}

/// Loads the checkpoint's encoder and extracts features of `samples`.
pub fn extract_pretrained_features(
    pretrained: &Pretrained,
    modality: Modality,
    samples: &[&LabeledSample],
    depth: Depth,
    classes: &[String],
) -> Result<FeatureTable> {
    let enc = SketchEncoder::from_pretrained(pretrained, modality)?;
    extract_features(&enc, &pretrained.store, samples, depth, classes)
}

// ---- linear probe -------------------------------------------------------

fn default_probe_epochs() -> usize {
    100
}
fn default_probe_lr() -> f64 {
    1e-2
}
fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_epochs")]
    pub epochs: usize,
    #[serde(default = "default_probe_lr")]
    pub lr: f64,
    /// The bias is stored divided by this factor, which scales its
    /// effective Adam step size.
    #[serde(default = "one")]
    pub bias_lr_multiplier: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: default_probe_epochs(),
            lr: default_probe_lr(),
            bias_lr_multiplier: 1.0,
        }
    }
}

const PROBE_W: &str = "probe.weight";
const PROBE_B: &str = "probe.bias";

/// Single affine layer + softmax over frozen features. Zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub store: ParameterStore,
    pub classes: Vec<String>,
    pub bias_lr_multiplier: f64,
}

impl LinearProbe {
    pub fn new(dim: usize, classes: &[String], bias_lr_multiplier: f64) -> Result<Self> {
        let mut store = ParameterStore::new();
        store.insert(PROBE_W, Tensor::zeros(&[dim, classes.len()]), DType::F64)?;
        store.insert(PROBE_B, Tensor::zeros(&[classes.len()]), DType::F64)?;
        Ok(Self {
            store,
            classes: classes.to_vec(),
            bias_lr_multiplier,
        })
    }

    pub fn dim(&self) -> usize {
        self.store.get(PROBE_W).expect("probe weight").shape[0]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(&self.store, PROBE_W);
        let mut b = tape.param(&self.store, PROBE_B);
        if self.bias_lr_multiplier != 1.0 {
            b = tape.scale(b, self.bias_lr_multiplier);
        }
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    pub fn logits(&self, features: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let y = self.forward(&mut tape, x);
        tape.value(y).clone()
    }
}

fn check_table(table: &FeatureTable) -> Result<()> {
    if table.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !table.features.is_finite() {
        return Err(Error::ShapeMismatch("feature table holds non-finite values".into()));
    }
    if let Some(&l) = table.labels.iter().find(|&&l| l >= table.classes.len()) {
        return Err(Error::LabelOutOfRange {
            label: l,
            classes: table.classes.len(),
        });
    }
    Ok(())
}

fn probe_adam(lr: f64) -> AdamConfig {
    AdamConfig {
        clip_norm: None,
        ..AdamConfig::with_lr(lr)
    }
}

/// Cross-entropy of the probe over `x`; backpropagates and returns the loss.
fn probe_loss(tape: &mut Tape, probe: &LinearProbe, x: Var, labels: &[usize]) -> Result<f64> {
    let logits = probe.forward(tape, x);
    let (loss, grad) = classification_loss_with_grad(tape.value(logits), labels)?;
    let root = tape.custom_scalar(logits, loss, grad);
    tape.backward(root);
    Ok(loss)
}

/// Full-batch Adam on the classification loss. Returns the probe and the
/// per-epoch training loss.
pub fn train_linear_probe(table: &FeatureTable, cfg: &ProbeConfig) -> Result<(LinearProbe, Vec<f64>)> {
    check_table(table)?;
    let mut probe = LinearProbe::new(table.dim(), &table.classes, cfg.bias_lr_multiplier)?;
    let adam = probe_adam(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let x = tape.constant(table.features.clone());
        let loss = probe_loss(&mut tape, &probe, x, &table.labels)?;
        adam_step(&mut probe.store, &tape.param_grads(), &adam);
        curve.push(loss);
    }
    Ok((probe, curve))
}

/// Class indices by descending score; equal scores keep ascending index.
pub fn rank_classes(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKResult {
    pub ks: Vec<usize>,
    pub accuracy: Vec<f64>,
    /// Top-1 accuracy per class (`None` when the class has no samples).
    pub per_class_top1: Vec<Option<f64>>,
    pub classes: Vec<String>,
    pub n: usize,
}

impl TopKResult {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&v| v == k).map(|i| self.accuracy[i])
    }
}

fn topk_from_logits(logits: &Tensor, labels: &[usize], classes: &[String], ks: &[usize]) -> TopKResult {
    let n = labels.len();
    let mut hits = vec![0usize; ks.len()];
    let mut class_hits = vec![0usize; classes.len()];
    let mut class_n = vec![0usize; classes.len()];
    for (i, &y) in labels.iter().enumerate() {
        let rank = rank_classes(logits.row(i));
        let pos = rank.iter().position(|&c| c == y).expect("label in range");
        for (h, &k) in hits.iter_mut().zip(ks) {
            if pos < k {
                *h += 1;
            }
        }
        class_n[y] += 1;
        if pos == 0 {
            class_hits[y] += 1;
        }
    }
    TopKResult {
        ks: ks.to_vec(),
        accuracy: hits.iter().map(|&h| h as f64 / n as f64).collect(),
        per_class_top1: class_hits
            .iter()
            .zip(&class_n)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect(),
        classes: classes.to_vec(),
        n,
    }
}

/// Top-k accuracy for each `k` in `ks`; a sample counts as a hit when its
/// class ranks within the first `k` (ties ranked by ascending class index).
pub fn eval_topk(probe: &LinearProbe, table: &FeatureTable, ks: &[usize]) -> Result<TopKResult> {
    check_table(table)?;
    if table.classes != probe.classes {
        return Err(Error::ClassMismatch(format!(
            "probe trained on {:?}, table has {:?}",
            probe.classes, table.classes
        )));
    }
    if table.dim() != probe.dim() {
        return Err(Error::ClassMismatch(format!(
            "probe expects {}-d features, table has {}",
            probe.dim(),
            table.dim()
        )));
    }
    Ok(topk_from_logits(&probe.logits(&table.features), &table.labels, &table.classes, ks))
}

// ---- retrieval ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    /// `1 - cos`; zero vectors are at distance 1 from everything.
    Cosine,
}

impl DistanceMetric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            DistanceMetric::Euclidean => euclidean(a, b),
            DistanceMetric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalItem {
    pub id: String,
    pub label: usize,
    pub embedding: Vec<f64>,
}

impl RetrievalItem {
    pub fn from_table(table: &FeatureTable) -> Vec<RetrievalItem> {
        (0..table.len())
            .map(|i| RetrievalItem {
                id: table.ids[i].clone(),
                label: table.labels[i],
                embedding: table.features.row(i).to_vec(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_ids: Vec<String>,
    /// Full gallery ranking per query (query itself excluded).
    pub ranked: Vec<Vec<String>>,
    pub acc_at_top1: f64,
    pub map_at_top10: f64,
}

pub const MAP_CUTOFF: usize = 10;

/// Average precision over the first `k` ranks, normalized by the number of
/// relevant items retrieved within them (0 when there are none).
pub fn average_precision_at(relevant: &[bool], k: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevant.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Ranks `gallery` for each query by distance (ties → ascending gallery id),
/// skipping the gallery entry with the query's own id.
pub fn eval_retrieval(
    queries: &[RetrievalItem],
    gallery: &[RetrievalItem],
    metric: DistanceMetric,
) -> Result<RetrievalResult> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if queries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut ranked = Vec::with_capacity(queries.len());
    let (mut top1, mut ap) = (0.0, 0.0);
    for q in queries {
        let mut cand: Vec<(f64, &RetrievalItem)> = gallery
            .iter()
            .filter(|g| g.id != q.id)
            .map(|g| (metric.distance(&q.embedding, &g.embedding), g))
            .collect();
        if cand.is_empty() {
            return Err(Error::EmptyGallery);
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
        let rel: Vec<bool> = cand.iter().map(|(_, g)| g.label == q.label).collect();
        if rel[0] {
            top1 += 1.0;
        }
        ap += average_precision_at(&rel, MAP_CUTOFF);
        ranked.push(cand.iter().map(|(_, g)| g.id.clone()).collect());
    }
    let n = queries.len() as f64;
    Ok(RetrievalResult {
        query_ids: queries.iter().map(|q| q.id.clone()).collect(),
        ranked,
        acc_at_top1: top1 / n,
        map_at_top10: ap / n,
    })
}

/// `query_id,rank,gallery_id` rows, ranks from 1, truncated at `top`.
pub fn write_ranking_csv(path: &Path, result: &RetrievalResult, top: usize) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "query_id,rank,gallery_id").expect("vec write");
    for (q, list) in result.query_ids.iter().zip(&result.ranked) {
        for (r, g) in list.iter().take(top).enumerate() {
            writeln!(out, "{q},{},{g}", r + 1).expect("vec write");
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn default_embed() -> usize {
    256
}
fn default_margin() -> f64 {
    0.2
}
fn default_head_epochs() -> usize {
    50
}
fn default_head_lr() -> f64 {
    1e-3
}
fn default_head_batch() -> usize {
    32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalHeadConfig {
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_head_epochs")]
    pub epochs: usize,
    #[serde(default = "default_head_lr")]
    pub lr: f64,
    #[serde(default = "default_head_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Weight of the auxiliary classification loss.
    #[serde(default = "one")]
    pub cls_weight: f64,
}

impl Default for RetrievalHeadConfig {
    fn default() -> Self {
        serde_json::from_value(serde_json::json!({})).expect("defaults deserialize")
    }
}

/// Affine projection to the embedding space plus an auxiliary linear
/// classifier on the embedding.
#[derive(Debug, Clone)]
pub struct RetrievalHead {
    pub store: ParameterStore,
    pub embed: Linear,
    pub cls: Linear,
    pub classes: Vec<String>,
}

impl RetrievalHead {
    pub fn new(dim: usize, classes: &[String], cfg: &RetrievalHeadConfig) -> Result<Self> {
        let embed = Linear::new("retrieval.embed", dim, cfg.embed_dim);
        let cls = Linear::new("retrieval.cls", cfg.embed_dim, classes.len());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init = Init::new(&mut rng, DType::F64);
        let mut store = ParameterStore::new();
        embed.init(&mut store, &mut init)?;
        cls.init(&mut store, &mut init)?;
        Ok(Self {
            store,
            embed,
            cls,
            classes: classes.to_vec(),
        })
    }

    pub fn embed(&self, features: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let e = self.embed.forward(&mut tape, &self.store, x);
        tape.value(e).clone()
    }

    pub fn items(&self, table: &FeatureTable) -> Vec<RetrievalItem> {
        let emb = self.embed(&table.features);
        (0..table.len())
            .map(|i| RetrievalItem {
                id: table.ids[i].clone(),
                label: table.labels[i],
                embedding: emb.row(i).to_vec(),
            })
            .collect()
    }

    /// Triplet + weighted classification loss for `x = [anchors; positives;
    /// negatives]` (`3B` rows). Backpropagates and returns the loss.
    fn loss(&self, tape: &mut Tape, x: Var, labels: &[usize], cfg: &RetrievalHeadConfig) -> Result<f64> {
        let b = labels.len() / 3;
        let e = self.embed.forward(tape, &self.store, x);
        let ev = tape.value(e).clone();
        let part = |k: usize| Tensor::new(vec![b, ev.cols()], ev.data[k * b * ev.cols()..(k + 1) * b * ev.cols()].to_vec());
        let (tl, [ga, gp, gn]) = triplet_loss_with_grad(&part(0), &part(1), &part(2), cfg.margin)?;
        let g: Vec<f64> = ga.data.into_iter().chain(gp.data).chain(gn.data).collect();
        let trip = tape.custom_scalar(e, tl, Tensor::new(ev.shape.clone(), g));
        let logits = self.cls.forward(tape, &self.store, e);
        let (cl, cg) = classification_loss_with_grad(tape.value(logits), labels)?;
        let cls = tape.custom_scalar(logits, cl, cg);
        let cls = tape.scale(cls, cfg.cls_weight);
        let root = tape.add(trip, cls);
        tape.backward(root);
        Ok(tl + cfg.cls_weight * cl)
    }
}

/// Anchor / positive / negative indices for every anchor in `order`.
fn triplets(labels: &[usize], anchors: &[usize], rng: &mut ChaCha8Rng) -> Vec<(usize, usize, usize)> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    anchors
        .iter()
        .map(|&a| {
            let same = &by_class[&labels[a]];
            let p = loop {
                let c = same[rng.gen_range(0..same.len())];
                if c != a {
                    break c;
                }
            };
            let n = loop {
                let c = rng.gen_range(0..labels.len());
                if labels[c] != labels[a] {
                    break c;
                }
            };
            (a, p, n)
        })
        .collect()
}

fn check_triplet_labels(labels: &[usize]) -> Result<()> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::InsufficientClassSamples(format!(
            "triplets need at least 2 classes, found {}",
            counts.len()
        )));
    }
    if let Some((c, n)) = counts.iter().find(|(_, &n)| n < 2) {
        return Err(Error::InsufficientClassSamples(format!(
            "class {c} has {n} sample(s); triplets need 2 per class"
        )));
    }
    Ok(())
}

/// Trains a retrieval head on frozen features. Returns the head and the
/// per-epoch mean loss.
pub fn train_retrieval_head(table: &FeatureTable, cfg: &RetrievalHeadConfig) -> Result<(RetrievalHead, Vec<f64>)> {
    check_table(table)?;
    check_triplet_labels(&table.labels)?;
    if cfg.batch_size == 0 || cfg.embed_dim == 0 {
        return Err(Error::InvalidConfig("retrieval head needs positive batch_size and embed_dim".into()));
    }
    let mut head = RetrievalHead::new(table.dim(), &table.classes, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let adam = probe_adam(cfg.lr);
    let mut order: Vec<usize> = (0..table.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let trip = triplets(&table.labels, chunk, &mut rng);
            let rows: Vec<usize> = [0, 1, 2]
                .iter()
                .flat_map(|&k| trip.iter().map(move |t| [t.0, t.1, t.2][k]))
                .collect();
            let sub = table.select(&rows);
            let mut tape = Tape::new();
            let x = tape.constant(sub.features);
            let loss = head.loss(&mut tape, x, &sub.labels, cfg)?;
            adam_step(&mut head.store, &tape.param_grads(), &adam);
            total += loss * chunk.len() as f64;
        }
        curve.push(total / table.len() as f64);
    }
    Ok((head, curve))
}

/// Mean pairwise distance within and across classes.
pub fn class_distance_means(items: &[RetrievalItem], metric: DistanceMetric) -> (f64, f64) {
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for (i, a) in items.iter().enumerate() {
        for b in &items[i + 1..] {
            let d = metric.distance(&a.embedding, &b.embedding);
            if a.label == b.label {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                nx += 1;
            }
        }
    }
    (intra / ni.max(1) as f64, inter / nx.max(1) as f64)
}

// ---- fine-tuning ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Probe,
    Retrieval,
}

/// Per-class random subset of `round(fraction * n_c)` indices (at least one
/// per class), returned in ascending order.
pub fn stratified_subset(labels: &[usize], n_classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("label fraction {fraction} outside (0, 1]")));
    }
    if fraction * (labels.len() as f64) < n_classes as f64 {
        return Err(Error::FractionTooSmall { fraction });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::new();
    for c in 0..n_classes {
        let mut members: Vec<usize> = labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(i, _)| i).collect();
        if members.is_empty() {
            continue;
        }
        let take = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        members.shuffle(&mut rng);
        picked.extend_from_slice(&members[..take]);
    }
    picked.sort_unstable();
    Ok(picked)
}

fn default_ft_epochs() -> usize {
    50
}
fn default_ft_lr() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub fraction: f64,
    #[serde(default)]
    pub head: HeadKind,
    /// Encoder stages (from the input side) kept frozen; 0 trains everything,
    /// the encoder depth freezes it entirely.
    #[serde(default)]
    pub freeze_depth: usize,
    #[serde(default = "default_ft_epochs")]
    pub epochs: usize,
    #[serde(default = "default_ft_lr")]
    pub lr: f64,
    /// `None` trains full-batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub retrieval: RetrievalHeadConfig,
    #[serde(default)]
    pub metric: DistanceMetric,
}

impl FinetuneConfig {
    pub fn new(fraction: f64) -> Self {
        serde_json::from_value(serde_json::json!({ "fraction": fraction })).expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub acc_at_top1: f64,
    pub map_at_top10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub config: FinetuneConfig,
    pub labeled: usize,
    pub labeled_per_class: Vec<usize>,
    pub test: TopKResult,
    pub retrieval: Option<RetrievalSummary>,
    pub loss_curve: Vec<f64>,
}

impl FinetuneReport {
    pub fn top1(&self) -> f64 {
        self.test.accuracy[0]
    }
}

enum Head {
    Probe(LinearProbe),
    Retrieval(RetrievalHead),
}

/// Trains encoder (above `freeze_depth`) and head jointly on a stratified
/// `fraction` of `train`, then evaluates on `test`. `store` provides the
/// initial encoder weights (pretext checkpoint or random init).
pub fn finetune(
    encoder: &SketchEncoder,
    store: &ParameterStore,
    train: &[&LabeledSample],
    test: &[&LabeledSample],
    classes: &[String],
    cfg: &FinetuneConfig,
) -> Result<(FinetuneReport, ParameterStore)> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.freeze_depth > encoder.depth() {
        return Err(Error::UnknownDepth(format!(
            "freeze depth {} exceeds encoder depth {}",
            cfg.freeze_depth,
            encoder.depth()
        )));
    }
    let all_labels = sample_labels(train, classes)?;
    let picked = stratified_subset(&all_labels, classes.len(), cfg.fraction, cfg.seed)?;
    let subset: Vec<&LabeledSample> = picked.iter().map(|&i| train[i]).collect();
    let labels: Vec<usize> = picked.iter().map(|&i| all_labels[i]).collect();
    let mut per_class = vec![0usize; classes.len()];
    for &l in &labels {
        per_class[l] += 1;
    }

    let mut enc_store = store.clone();
    enc_store.reset_optimizer();
    let dim = encoder.feature_dim(Depth::Final)?;
    let mut head = match cfg.head {
        HeadKind::Probe => Head::Probe(LinearProbe::new(dim, classes, 1.0)?),
        HeadKind::Retrieval => {
            check_triplet_labels(&labels)?;
            Head::Retrieval(RetrievalHead::new(dim, classes, &cfg.retrieval)?)
        }
    };
    let frozen = encoder.frozen_prefixes(cfg.freeze_depth);
    let adam = probe_adam(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let bs = cfg.batch_size.unwrap_or(subset.len()).max(1);
    let mut order: Vec<usize> = (0..subset.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        if cfg.batch_size.is_some() {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let mut tape = Tape::with_frozen(&frozen);
            let loss = match &head {
                Head::Probe(p) => {
                    let batch: Vec<&LabeledSample> = chunk.iter().map(|&i| subset[i]).collect();
                    let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                    let x = encoder.forward(&mut tape, &enc_store, &batch, Depth::Final)?;
                    probe_loss(&mut tape, p, x, &y)?
                }
                Head::Retrieval(h) => {
                    let trip = triplets(&labels, chunk, &mut rng);
                    let rows: Vec<usize> = [0, 1, 2]
                        .iter()
                        .flat_map(|&k| trip.iter().map(move |t| [t.0, t.1, t.2][k]))
                        .collect();
                    let batch: Vec<&LabeledSample> = rows.iter().map(|&i| subset[i]).collect();
                    let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
                    let x = encoder.forward(&mut tape, &enc_store, &batch, Depth::Final)?;
                    h.loss(&mut tape, x, &y, &cfg.retrieval)?
                }
            };
            if !loss.is_finite() {
                return Err(Error::DivergedLoss {
                    epoch: curve.len() + 1,
                    step: 0,
                    last_checkpoint: None,
                });
            }
            let grads = tape.param_grads();
            let head_store = match &mut head {
                Head::Probe(p) => &mut p.store,
                Head::Retrieval(h) => &mut h.store,
            };
            let (hg, eg): (BTreeMap<_, _>, BTreeMap<_, _>) =
                grads.into_iter().partition(|(name, _)| head_store.contains(name));
            adam_step(head_store, &hg, &adam);
            if !eg.is_empty() {
                adam_step(&mut enc_store, &eg, &adam);
            }
            total += loss * chunk.len() as f64;
        }
        curve.push(total / subset.len() as f64);
    }

    let table = extract_features(encoder, &enc_store, test, Depth::Final, classes)?;
    let ks = [1, 5.min(classes.len())];
    let (test_result, retrieval) = match &head {
        Head::Probe(p) => (eval_topk(p, &table, &ks)?, None),
        Head::Retrieval(h) => {
            let emb = h.embed(&table.features);
            let mut tape = Tape::new();
            let e = tape.constant(emb);
            let logits = h.cls.forward(&mut tape, &h.store, e);
            let topk = topk_from_logits(tape.value(logits), &table.labels, classes, &ks);
            let items = h.items(&table);
            let r = eval_retrieval(&items, &items, cfg.metric)?;
            (
                topk,
                Some(RetrievalSummary {
                    acc_at_top1: r.acc_at_top1,
                    map_at_top10: r.map_at_top10,
                }),
            )
        }
    };
    Ok((
        FinetuneReport {
            config: cfg.clone(),
            labeled: subset.len(),
            labeled_per_class: per_class,
            test: test_result,
            retrieval,
            loss_curve: curve,
        },
        enc_store,
    ))
}

/// Summary written by the probe / retrieve commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub depth: String,
    pub train_size: usize,
    pub test_size: usize,
    pub config: ProbeConfig,
    pub test: TopKResult,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub depth: String,
    pub config: RetrievalHeadConfig,
    pub metric: DistanceMetric,
    /// mAP definition used, spelled out for readers of the report.
    pub map_definition: String,
    pub acc_at_top1: f64,
    pub map_at_top10: f64,
    pub queries: usize,
    pub gallery: usize,
}

pub const MAP_DEFINITION: &str =
    "AP truncated at rank 10, averaged over relevant items retrieved in the top 10 (0 if none); gallery = test split, query excluded by id";

#[cfg(test)]
mod tests;
