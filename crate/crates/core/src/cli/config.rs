//! The run configuration: one JSON document with sections `data`, `model`,
//! `pretrain`, `downstream` and `output`, plus the run-wide `seed` and
//! `deterministic` switches.
//!
//! Resolution order is built-in defaults < config file < command-line flags.
//! The file is deep-merged over the defaults, so it only needs the keys it
//! changes; any key the schema does not know is rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{Augment, CorpusKind, SyntheticSketchSpec, SyntheticWordSpec, DEFAULT_ALPHABET, SKETCH_CLASSES};
use crate::downstream_handwriting::{HandwritingConfig, HwTrainConfig};
use crate::downstream_sketch::{Depth, DistanceMetric, FinetuneConfig, ProbeConfig, RetrievalHeadConfig};
use crate::error::{Error, Result};
use crate::losses::CoordPenalty;
use crate::models::{CellKind, Modality, ModelConfig, SeqDecoderConfig};
use crate::nn::DType;
use crate::pretrain::{PretrainConfig, Task};
use crate::raster::RasterConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds every training-side RNG of the run (not the data generators).
    pub seed: u64,
    /// Disables augmentation and wall-clock logging.
    pub deterministic: bool,
    pub data: DataConfig,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub downstream: DownstreamConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: false,
            data: DataConfig::default(),
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            downstream: DownstreamConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Generator used when `path` is unset.
    pub kind: CorpusKind,
    /// A corpus directory written by `prepare-data`, or a QuickDraw ndjson
    /// file. Unset generates the synthetic corpus of `kind`.
    pub path: Option<PathBuf>,
    /// Canvas for generated or imported data; unset picks 32×32 for
    /// sketches and 16 × (16·max_len) for words.
    pub raster: Option<RasterConfig>,
    pub sketch: SyntheticSketchSpec,
    pub words: SyntheticWordSpec,
    /// Split seed and simplification tolerance for QuickDraw imports.
    pub split_seed: u64,
    pub rdp_epsilon: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let mut sketch = SyntheticSketchSpec::new(&SKETCH_CLASSES[..5], 100, 0.01, 0);
        sketch.augment = Augment {
            rotation: 0.3,
            scale: 0.2,
            shift: 0.1,
        };
        sketch.densify = 0.05;
        let mut words = SyntheticWordSpec::new(DEFAULT_ALPHABET, 2, 3, 400, 0);
        words.jitter = 0.01;
        Self {
            kind: CorpusKind::Sketch,
            path: None,
            raster: None,
            sketch,
            words,
            split_seed: 0,
            rdp_epsilon: 0.01,
        }
    }
}

impl DataConfig {
    pub fn resolved_raster(&self) -> RasterConfig {
        self.raster.unwrap_or_else(|| match self.kind {
            CorpusKind::Sketch => RasterConfig::square(32),
            CorpusKind::Words => RasterConfig {
                height: 16,
                width: 16 * self.words.max_len,
                ..RasterConfig::default()
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Sketch pretext models (encoders are reused downstream).
    pub sketch: ModelConfig,
    /// Handwriting recognizer and its image encoder.
    pub handwriting: HandwritingConfig,
    /// Stroke decoder of the handwriting pretext.
    pub pretext_decoder: SeqDecoderConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            sketch: ModelConfig::tiny(),
            handwriting: HandwritingConfig {
                conv_widths: vec![8, 16, 16],
                rnn_hidden: 16,
                online_layers: 2,
                online_hidden: 8,
                decoder_hidden: 32,
                attention_dim: 8,
                embed_dim: 8,
                max_len: 4,
                t_max: 64,
                dtype: DType::F64,
            },
            pretext_decoder: SeqDecoderConfig {
                cell: CellKind::Gru,
                hidden: 64,
            },
        }
    }
}

/// Pretext training settings; the model and canvas come from the other
/// sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub task: Task,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub t_max: usize,
    pub teacher_forcing: bool,
    pub clip_norm: Option<f64>,
    pub augment: bool,
    pub coord_penalty: CoordPenalty,
    pub keep_checkpoints: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            task: Task::Vectorization,
            lr: 3e-3,
            batch_size: 8,
            epochs: 20,
            t_max: 48,
            teacher_forcing: true,
            clip_norm: Some(1.0),
            augment: false,
            coord_penalty: CoordPenalty::Squared,
            keep_checkpoints: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    /// Pretext checkpoint directory; unset evaluates a random-init encoder.
    pub checkpoint: Option<PathBuf>,
    /// Input modality the encoder must consume; unset takes the
    /// checkpoint's (image when there is no checkpoint).
    pub modality: Option<Modality>,
    pub depth: Depth,
    pub probe: ProbeConfig,
    /// Train a projection head before retrieval; off ranks raw features.
    pub retrieval_head: bool,
    pub retrieval: RetrievalHeadConfig,
    pub metric: DistanceMetric,
    pub finetune: FinetuneConfig,
    pub recognizer: HwTrainConfig,
    /// Share of the training words whose transcriptions are used.
    pub label_fraction: f64,
    /// Recognize stroke sequences instead of images.
    pub online: bool,
    /// Word list, one per line.
    pub lexicon: Option<PathBuf>,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            modality: None,
            depth: Depth::Final,
            probe: ProbeConfig::default(),
            retrieval_head: true,
            retrieval: RetrievalHeadConfig::default(),
            metric: DistanceMetric::default(),
            finetune: FinetuneConfig::new(0.1),
            recognizer: HwTrainConfig {
                epochs: 200,
                batch_size: 8,
                ..HwTrainConfig::default()
            },
            label_fraction: 0.2,
            online: false,
            lexicon: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    #[default]
    Pgm,
    Png,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Parent of the run directories. `SKETCHSSL_OUT` and `--out` take
    /// precedence.
    pub root: PathBuf,
    /// Samples written by `render`.
    pub render_count: usize,
    pub image_format: ImageFormat,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("runs"),
            render_count: 16,
            image_format: ImageFormat::Pgm,
        }
    }
}

/// Recursively overlays `over` onto `base`. Objects merge key by key; any
/// other value replaces. A tagged model family that changes replaces the
/// whole object so stale fields of the old family do not linger.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let family_changed = matches!((b.get("family"), o.get("family")), (Some(x), Some(y)) if x != y);
            if family_changed {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults overlaid with `file` (when given).
    pub fn load(file: Option<&Path>) -> Result<Self> {
        let mut doc = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let over: Value = serde_json::from_slice(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
            if !over.is_object() {
                return Err(Error::InvalidConfig(format!("{}: top level must be an object", path.display())));
            }
            merge(&mut doc, over);
        }
        Self::from_value(doc)
    }

    pub fn from_value(doc: Value) -> Result<Self> {
        serde_json::from_value(doc).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// The sketch pretext configuration this run describes.
    pub fn pretrain_config(&self, raster: RasterConfig) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            task: p.task,
            model: self.model.sketch.clone(),
            lr: p.lr,
            batch_size: p.batch_size,
            epochs: p.epochs,
            seed: self.seed,
            t_max: p.t_max,
            raster,
            deterministic: self.deterministic,
            teacher_forcing: p.teacher_forcing,
            clip_norm: p.clip_norm,
            augment: p.augment,
            coord_penalty: p.coord_penalty,
            keep_checkpoints: p.keep_checkpoints,
        }
    }

    /// Training loop settings of the handwriting pretext.
    pub fn handwriting_pretext_train(&self) -> HwTrainConfig {
        HwTrainConfig {
            epochs: self.pretrain.epochs,
            lr: self.pretrain.lr,
            batch_size: self.pretrain.batch_size,
            seed: self.seed,
            clip_norm: self.pretrain.clip_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.downstream.label_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidConfig(format!("label_fraction {f} outside (0, 1]")));
        }
        let f = self.downstream.finetune.fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidConfig(format!("finetune fraction {f} outside (0, 1]")));
        }
        if let Some(r) = &self.data.raster {
            r.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_is_deep_and_replaces_scalars_and_arrays() {
        let mut base = json!({"a": {"b": 1, "c": [1, 2]}, "d": null});
        merge(&mut base, json!({"a": {"c": [3]}, "d": {"e": true}}));
        assert_eq!(base, json!({"a": {"b": 1, "c": [3]}, "d": {"e": true}}));
    }

    #[test]
    fn switching_encoder_family_drops_old_fields() {
        let over = json!({"model": {"sketch": {"seq_encoder": {"family": "transformer", "layers": 1, "dim": 8, "heads": 2, "mlp_dim": 16}}}});
        let mut doc = serde_json::to_value(RunConfig::default()).unwrap();
        merge(&mut doc, over);
        let c = RunConfig::from_value(doc).unwrap();
        assert_eq!(c.model.sketch.seq_encoder.output_dim(), 8);
    }

    #[test]
    fn defaults_round_trip_and_reject_unknown_keys() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_value(serde_json::to_value(&d).unwrap()).unwrap(), d);
        assert_eq!(RunConfig::from_value(json!({})).unwrap(), d);
        for bad in [json!({"x": 1}), json!({"data": {"sketch": {"colour": 1}}}), json!({"output": {"root": 3}})] {
            assert!(matches!(RunConfig::from_value(bad), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn default_canvases_follow_the_corpus_kind() {
        let mut d = DataConfig::default();
        assert_eq!(d.resolved_raster(), RasterConfig::square(32));
        d.kind = CorpusKind::Words;
        d.words.max_len = 5;
        assert_eq!((d.resolved_raster().height, d.resolved_raster().width), (16, 80));
    }

    #[test]
    fn fractions_are_validated() {
        let mut c = RunConfig::default();
        c.downstream.label_fraction = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.downstream.finetune.fraction = 1.5;
        assert!(c.validate().is_err());
    }
}
