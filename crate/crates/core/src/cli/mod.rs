//! The `sketchssl` command line: argument parsing, run directories and the
//! subcommand implementations.
//!
//! Every command except `report` creates `<root>/<command>-<utc time>-s<seed>/`
//! holding `config.json` (the resolved run configuration), `metrics.ndjson`
//! and `result.json`, plus command-specific artifacts.

mod config;
mod report;

use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{json, Value};

pub use config::{
    merge, DataConfig, DownstreamConfig, ImageFormat, ModelSection, OutputConfig, PretrainSection, RunConfig,
};
pub use report::{summarize, ReportRow, Summary};

use crate::data::{
    corpus_from_quickdraw, make_synthetic_sketches, make_synthetic_words, parse_quickdraw_lines, read_corpus,
    write_corpus, Corpus, CorpusKind, LabeledSample, Subset,
};
use crate::downstream_handwriting::{
    pretrain_handwriting, recognition_report, train_recognizer, CharVocab, HandwritingPretext, Recognizer,
};
use crate::downstream_sketch::{
    eval_retrieval, eval_topk, extract_features, finetune, train_linear_probe, train_retrieval_head, write_ranking_csv,
    Depth, DistanceMetric, HeadKind, ProbeReport, RetrievalItem, RetrievalReport, SketchEncoder, MAP_DEFINITION,
};
use crate::error::{Error, Result};
use crate::models::{CoordinateMode, Modality};
use crate::nn::ParameterStore;
use crate::pretrain::{
    load_checkpoint, pretrain, save_checkpoint, CheckpointMeta, Pretrained, Task, CHECKPOINT_DIR, FINAL_CHECKPOINT,
    METRICS_FILE,
};
use crate::raster::render;

pub const CONFIG_FILE: &str = "config.json";
pub const RESULT_FILE: &str = "result.json";
pub const OUT_ENV: &str = "SKETCHSSL_OUT";
/// Manifest task name of handwriting pretext checkpoints.
pub const HANDWRITING_TASK: &str = "handwriting";

#[derive(Debug, Parser)]
#[command(name = "sketchssl", version, about = "Self-supervised sketch and handwriting representations via vectorization/rasterization pretext tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate or import a corpus and write it to the run directory.
    PrepareData(RunArgs),
    /// Train a pretext task (vectorization or rasterization; word corpora
    /// train the handwriting vectorization pretext).
    Pretrain(RunArgs),
    /// Linear probe on frozen encoder features.
    Probe(RunArgs),
    /// Retrieval evaluation (Acc@top1, mAP@top10) on the test split.
    Retrieve(RunArgs),
    /// Fine-tune encoder and head on a labeled fraction.
    Finetune(RunArgs),
    /// Train and evaluate the handwriting recognizer.
    Recognize(RunArgs),
    /// Render corpus samples to PGM/PNG.
    Render(RunArgs),
    /// Summarize run directories as markdown and JSON.
    Report(ReportArgs),
}

fn parse_json_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Default, Args)]
struct RunArgs {
    /// JSON run configuration (merged over the defaults).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory of the run directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Bitwise-reproducible run: no augmentation, no wall-clock logging.
    #[arg(long)]
    deterministic: bool,
    /// Corpus directory or QuickDraw ndjson file.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Synthetic corpus kind: sketch or words.
    #[arg(long, value_parser = parse_json_enum::<CorpusKind>)]
    kind: Option<CorpusKind>,
    /// Pretext task: vectorization or rasterization.
    #[arg(long, value_parser = parse_json_enum::<Task>)]
    task: Option<Task>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Pretext checkpoint directory for downstream commands.
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
    /// Encoder input modality: image or vector.
    #[arg(long, value_parser = parse_json_enum::<Modality>)]
    modality: Option<Modality>,
    /// Feature depth: final or blockN.
    #[arg(long)]
    depth: Option<Depth>,
    /// Label fraction for finetune / recognize.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    freeze_depth: Option<usize>,
    /// Fine-tuning head: probe or retrieval.
    #[arg(long, value_parser = parse_json_enum::<HeadKind>)]
    head: Option<HeadKind>,
    /// Retrieval distance: euclidean or cosine.
    #[arg(long, value_parser = parse_json_enum::<DistanceMetric>)]
    metric: Option<DistanceMetric>,
    /// Word list for lexicon-corrected recognition.
    #[arg(long, value_name = "PATH")]
    lexicon: Option<PathBuf>,
    /// Train the sequence decoder on its own predictions.
    #[arg(long)]
    no_teacher_forcing: bool,
    /// Sequence coordinates: absolute or offset.
    #[arg(long, value_parser = parse_json_enum::<CoordinateMode>)]
    coordinate_mode: Option<CoordinateMode>,
    /// Continue pretraining from this checkpoint directory.
    #[arg(long, value_name = "DIR")]
    resume: Option<PathBuf>,
    /// Samples written by `render`.
    #[arg(long)]
    count: Option<usize>,
    /// Image format for `render`: pgm or png.
    #[arg(long, value_parser = parse_json_enum::<ImageFormat>)]
    format: Option<ImageFormat>,
}

#[derive(Debug, Clone, Args)]
struct ReportArgs {
    /// Run directories to summarize, in table order. A directory of runs
    /// expands to its children in name order.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Write summary.md and summary.json here (stdout only when unset).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl RunArgs {
    /// Defaults < `--config` file < flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c.deterministic |= self.deterministic;
        if let Some(p) = &self.data {
            c.data.path = Some(p.clone());
        }
        if let Some(k) = self.kind {
            c.data.kind = k;
        }
        if let Some(t) = self.task {
            c.pretrain.task = t;
        }
        if let Some(e) = self.epochs {
            c.pretrain.epochs = e;
        }
        if let Some(p) = &self.checkpoint {
            c.downstream.checkpoint = Some(p.clone());
        }
        if let Some(m) = self.modality {
            c.downstream.modality = Some(m);
        }
        if let Some(d) = self.depth {
            c.downstream.depth = d;
        }
        if let Some(f) = self.fraction {
            c.downstream.finetune.fraction = f;
            c.downstream.label_fraction = f;
        }
        if let Some(d) = self.freeze_depth {
            c.downstream.finetune.freeze_depth = d;
        }
        if let Some(h) = self.head {
            c.downstream.finetune.head = h;
        }
        if let Some(m) = self.metric {
            c.downstream.metric = m;
        }
        if let Some(l) = &self.lexicon {
            c.downstream.lexicon = Some(l.clone());
        }
        if self.no_teacher_forcing {
            c.pretrain.teacher_forcing = false;
        }
        if let Some(m) = self.coordinate_mode {
            c.model.sketch.coordinate_mode = m;
        }
        if let Some(n) = self.count {
            c.output.render_count = n;
        }
        if let Some(f) = self.format {
            c.output.image_format = f;
        }
        // The run seed drives every downstream RNG too.
        c.downstream.finetune.seed = c.seed;
        c.downstream.retrieval.seed = c.seed;
        c.downstream.recognizer.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    fn output_root(&self, cfg: &RunConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| cfg.output.root.clone())
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 usage or configuration error, 2 data
/// error, 3 numerical divergence.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(dir) => {
            if let Some(dir) = dir {
                println!("{}", dir.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            if matches!(e, Error::Usage(_)) {
                eprintln!("run `sketchssl --help` for usage");
            }
            e.exit_code()
        }
    }
}

fn run(cmd: Command) -> Result<Option<PathBuf>> {
    let (name, args) = match &cmd {
        Command::Report(r) => {
            report::run(&r.runs, r.out.as_deref())?;
            return Ok(None);
        }
        Command::PrepareData(a) => ("prepare-data", a),
        Command::Pretrain(a) => ("pretrain", a),
        Command::Probe(a) => ("probe", a),
        Command::Retrieve(a) => ("retrieve", a),
        Command::Finetune(a) => ("finetune", a),
        Command::Recognize(a) => ("recognize", a),
        Command::Render(a) => ("render", a),
    };
    let cfg = args.resolve()?;
    let dir = create_run_dir(&args.output_root(&cfg), name, cfg.seed)?;
    write_json(&dir.join(CONFIG_FILE), &cfg)?;
    let ctx = Ctx { cfg: &cfg, dir: &dir };
    let outcome = match cmd {
        Command::PrepareData(_) => ctx.prepare_data(),
        Command::Pretrain(a) => ctx.pretrain(a.resume.as_deref()),
        Command::Probe(_) => ctx.probe(),
        Command::Retrieve(_) => ctx.retrieve(),
        Command::Finetune(_) => ctx.finetune(),
        Command::Recognize(_) => ctx.recognize(),
        Command::Render(_) => ctx.render(),
        Command::Report(_) => unreachable!("handled above"),
    };
    let mut result = RunResult {
        command: name.to_string(),
        seed: cfg.seed,
        setting: String::new(),
        metrics: Headline::default(),
        details: Value::Null,
        error: None,
    };
    let failure = match outcome {
        Ok(o) => {
            result.setting = o.setting;
            result.metrics = o.headline;
            result.details = o.details;
            None
        }
        Err(e) => {
            result.error = Some(format!("{}: {e}", e.kind()));
            Some(e)
        }
    };
    write_json(&dir.join(RESULT_FILE), &result)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(Some(dir)),
    }
}

/// Headline numbers of a run, as shown by `report`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub top5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acc_at_top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map_at_top10: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wra: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wra_lexicon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_loss: Option<f64>,
}

/// Contents of `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub command: String,
    pub seed: u64,
    /// Short description of what was evaluated (task, init, depth, fraction).
    pub setting: String,
    pub metrics: Headline,
    pub details: Value,
    /// Set when the command failed; the other fields are then empty.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

struct Outcome {
    setting: String,
    headline: Headline,
    details: Value,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_ndjson(path: &Path, rows: &[Value]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn curve_rows(curve: &[f64]) -> Vec<Value> {
    curve.iter().enumerate().map(|(i, l)| json!({ "epoch": i + 1, "loss": l })).collect()
}

/// `<root>/<command>-<YYYYmmddTHHMMSSZ>-s<seed>`, suffixed `-2`, `-3`, …
/// when that name is taken.
fn create_run_dir(root: &Path, command: &str, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{command}-{stamp}-s{seed}");
    for n in 1.. {
        let name = if n == 1 { base.clone() } else { format!("{base}-{n}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("unbounded suffix search")
}

fn read_lexicon(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut words = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let w = line.trim();
        if !w.is_empty() {
            words.push(w.to_string());
        }
    }
    if words.is_empty() {
        return Err(Error::EmptyLexicon);
    }
    Ok(words)
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
}

/// Encoder plus the parameters it starts from.
struct EncoderInit {
    encoder: SketchEncoder,
    store: ParameterStore,
    label: String,
}

impl Ctx<'_> {
    fn corpus(&self) -> Result<Corpus> {
        let d = &self.cfg.data;
        let raster = d.resolved_raster();
        match &d.path {
            Some(p) if p.is_dir() => read_corpus(p),
            Some(p) => {
                let f = fs::File::open(p).map_err(|e| Error::io(p, e))?;
                let parsed = parse_quickdraw_lines(BufReader::new(f))?;
                for e in &parsed.errors {
                    eprintln!("warning: {e}");
                }
                corpus_from_quickdraw(&parsed.records, &raster, d.rdp_epsilon, d.split_seed)
            }
            None => match d.kind {
                CorpusKind::Sketch => make_synthetic_sketches(&d.sketch, &raster),
                CorpusKind::Words => make_synthetic_words(&d.words, &raster),
            },
        }
    }

    fn prepare_data(&self) -> Result<Outcome> {
        let c = self.corpus()?;
        write_corpus(&self.dir.join("corpus"), &c)?;
        let summary = json!({
            "kind": c.kind,
            "samples": c.samples.len(),
            "classes": c.split.class_universe.len(),
            "train": c.split.train.len(),
            "val": c.split.val.len(),
            "test": c.split.test.len(),
            "raster": c.raster,
        });
        write_ndjson(&self.dir.join(METRICS_FILE), std::slice::from_ref(&summary))?;
        Ok(Outcome {
            setting: format!("{:?} corpus, {} samples", c.kind, c.samples.len()).to_lowercase(),
            headline: Headline::default(),
            details: summary,
        })
    }

    fn pretrain(&self, resume: Option<&Path>) -> Result<Outcome> {
        let c = self.corpus()?;
        let train = c.subset(Subset::Train)?;
        if c.kind == CorpusKind::Words {
            if resume.is_some() {
                return Err(Error::InvalidConfig("--resume applies to sketch pretext runs only".into()));
            }
            return self.pretrain_handwriting(&c, &train);
        }
        let pc = self.cfg.pretrain_config(c.raster);
        let run = pretrain(&train, &pc, self.dir, resume)?;
        let last = run.metrics.last();
        Ok(Outcome {
            setting: format!("{} pretext", pc.task.name()),
            headline: Headline {
                final_loss: last.map(|m| m.loss),
                ..Headline::default()
            },
            details: json!({
                "task": pc.task,
                "epochs": run.metrics.len(),
                "final": last,
                "checkpoint": format!("{CHECKPOINT_DIR}/{FINAL_CHECKPOINT}"),
            }),
        })
    }

    fn pretrain_handwriting(&self, c: &Corpus, train: &[&LabeledSample]) -> Result<Outcome> {
        if self.cfg.pretrain.task != Task::Vectorization {
            return Err(Error::InvalidConfig(
                "word corpora support the vectorization pretext only".into(),
            ));
        }
        let m = &self.cfg.model;
        let model = HandwritingPretext::new(&m.handwriting, &c.raster, &m.pretext_decoder)?;
        let tc = self.cfg.handwriting_pretext_train();
        let (store, curve) = pretrain_handwriting(&model, train, &tc)?;
        let rows: Vec<Value> = curve
            .iter()
            .enumerate()
            .map(|(i, l)| json!({ "task": HANDWRITING_TASK, "epoch": i + 1, "loss": l }))
            .collect();
        write_ndjson(&self.dir.join(METRICS_FILE), &rows)?;
        let meta = CheckpointMeta {
            task: HANDWRITING_TASK.into(),
            config: json!({ "handwriting": m.handwriting, "decoder": m.pretext_decoder, "raster": c.raster, "train": tc }),
            epoch: curve.len(),
            step: store.step(),
            metrics_tail: rows.iter().rev().take(5).rev().cloned().collect(),
            rng: None,
        };
        save_checkpoint(&self.dir.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT), &store, &meta)?;
        Ok(Outcome {
            setting: "handwriting vectorization pretext".into(),
            headline: Headline {
                final_loss: curve.last().copied(),
                ..Headline::default()
            },
            details: json!({
                "task": HANDWRITING_TASK,
                "epochs": curve.len(),
                "loss_curve": curve,
                "checkpoint": format!("{CHECKPOINT_DIR}/{FINAL_CHECKPOINT}"),
            }),
        })
    }

    /// The pretrained encoder named by the config, or a random-init one.
    fn encoder(&self, c: &Corpus) -> Result<EncoderInit> {
        let ds = &self.cfg.downstream;
        match &ds.checkpoint {
            Some(path) => {
                let p = Pretrained::load(path)?;
                let modality = ds.modality.unwrap_or(match p.config.task {
                    Task::Vectorization => Modality::Image,
                    Task::Rasterization => Modality::Vector,
                });
                let encoder = SketchEncoder::from_pretrained(&p, modality)?;
                Ok(EncoderInit {
                    encoder,
                    label: format!("{}-pretrained", p.config.task.name()),
                    store: p.store,
                })
            }
            None => {
                let mut pc = self.cfg.pretrain_config(c.raster);
                pc.task = match ds.modality.unwrap_or(Modality::Image) {
                    Modality::Image => Task::Vectorization,
                    Modality::Vector => Task::Rasterization,
                };
                Ok(EncoderInit {
                    encoder: SketchEncoder::from_config(&pc)?,
                    store: SketchEncoder::random_params(&pc)?,
                    label: "random-init".into(),
                })
            }
        }
    }

    fn probe(&self) -> Result<Outcome> {
        let c = self.corpus()?;
        let e = self.encoder(&c)?;
        let ds = &self.cfg.downstream;
        let classes = &c.split.class_universe;
        let train = c.subset(Subset::Train)?;
        let test = c.subset(Subset::Test)?;
        let tr = extract_features(&e.encoder, &e.store, &train, ds.depth, classes)?;
        let te = extract_features(&e.encoder, &e.store, &test, ds.depth, classes)?;
        let (probe, curve) = train_linear_probe(&tr, &ds.probe)?;
        let ks: Vec<usize> = [1, 5].into_iter().filter(|&k| k <= classes.len()).collect();
        let result = eval_topk(&probe, &te, &ks)?;
        write_ndjson(&self.dir.join(METRICS_FILE), &curve_rows(&curve))?;
        let report = ProbeReport {
            depth: ds.depth.to_string(),
            train_size: tr.len(),
            test_size: te.len(),
            config: ds.probe,
            final_train_loss: curve.last().copied().unwrap_or(f64::NAN),
            test: result,
        };
        Ok(Outcome {
            setting: format!("{} {:?} {}", e.label, e.encoder.modality(), ds.depth).to_lowercase(),
            headline: Headline {
                top1: report.test.at(1),
                top5: report.test.at(5),
                final_loss: curve.last().copied(),
                ..Headline::default()
            },
            details: serde_json::to_value(&report)?,
        })
    }

    fn retrieve(&self) -> Result<Outcome> {
        let c = self.corpus()?;
        let e = self.encoder(&c)?;
        let ds = &self.cfg.downstream;
        let classes = &c.split.class_universe;
        let test = c.subset(Subset::Test)?;
        let te = extract_features(&e.encoder, &e.store, &test, ds.depth, classes)?;
        let (items, curve) = if ds.retrieval_head {
            let train = c.subset(Subset::Train)?;
            let tr = extract_features(&e.encoder, &e.store, &train, ds.depth, classes)?;
            let (head, curve) = train_retrieval_head(&tr, &ds.retrieval)?;
            (head.items(&te), curve)
        } else {
            (RetrievalItem::from_table(&te), Vec::new())
        };
        let r = eval_retrieval(&items, &items, ds.metric)?;
        write_ranking_csv(&self.dir.join("ranking.csv"), &r, 10)?;
        let mut rows = curve_rows(&curve);
        rows.push(json!({ "acc_at_top1": r.acc_at_top1, "map_at_top10": r.map_at_top10 }));
        write_ndjson(&self.dir.join(METRICS_FILE), &rows)?;
        let report = RetrievalReport {
            depth: ds.depth.to_string(),
            config: ds.retrieval,
            metric: ds.metric,
            map_definition: MAP_DEFINITION.into(),
            acc_at_top1: r.acc_at_top1,
            map_at_top10: r.map_at_top10,
            queries: items.len(),
            gallery: items.len(),
        };
        Ok(Outcome {
            setting: format!("{} {:?} {}", e.label, e.encoder.modality(), ds.depth).to_lowercase(),
            headline: Headline {
                acc_at_top1: Some(r.acc_at_top1),
                map_at_top10: Some(r.map_at_top10),
                ..Headline::default()
            },
            details: serde_json::to_value(&report)?,
        })
    }

    fn finetune(&self) -> Result<Outcome> {
        let c = self.corpus()?;
        let e = self.encoder(&c)?;
        let ft = &self.cfg.downstream.finetune;
        let train = c.subset(Subset::Train)?;
        let test = c.subset(Subset::Test)?;
        let (report, _) = finetune(&e.encoder, &e.store, &train, &test, &c.split.class_universe, ft)?;
        write_ndjson(&self.dir.join(METRICS_FILE), &curve_rows(&report.loss_curve))?;
        Ok(Outcome {
            setting: format!("{} fraction {} freeze {}", e.label, ft.fraction, ft.freeze_depth),
            headline: Headline {
                top1: report.test.at(1),
                top5: report.test.at(5),
                acc_at_top1: report.retrieval.map(|r| r.acc_at_top1),
                map_at_top10: report.retrieval.map(|r| r.map_at_top10),
                final_loss: report.loss_curve.last().copied(),
                ..Headline::default()
            },
            details: serde_json::to_value(&report)?,
        })
    }

    fn recognize(&self) -> Result<Outcome> {
        let c = self.corpus()?;
        let ds = &self.cfg.downstream;
        let hw = &self.cfg.model.handwriting;
        let train = c.subset(Subset::Train)?;
        let test = c.subset(Subset::Test)?;
        let mut chars: Vec<char> = c.samples.iter().filter_map(|s| s.text.as_deref()).flat_map(str::chars).collect();
        chars.sort_unstable();
        chars.dedup();
        let vocab = CharVocab::new(&chars.iter().collect::<String>())?;
        let rec = if ds.online {
            Recognizer::online(vocab, hw)?
        } else {
            Recognizer::offline(vocab, hw, &c.raster)?
        };
        let mut store = rec.init_params(self.cfg.seed)?;
        let init = match &ds.checkpoint {
            Some(path) => {
                let (pretext, manifest) = load_checkpoint(path)?;
                if manifest.task != HANDWRITING_TASK {
                    return Err(Error::ModalityMismatch(format!(
                        "{} checkpoint cannot initialize a handwriting recognizer",
                        manifest.task
                    )));
                }
                rec.load_pretrained_encoder(&mut store, &pretext)?;
                "pretrained"
            }
            None => "random-init",
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.cfg.seed));
        let n = ((train.len() as f64 * ds.label_fraction).round() as usize).clamp(1, train.len().max(1));
        order.truncate(n);
        order.sort_unstable();
        let labeled: Vec<&LabeledSample> = order.iter().map(|&i| train[i]).collect();
        let curve = train_recognizer(&rec, &mut store, &labeled, &ds.recognizer)?;
        let lexicon = ds.lexicon.as_deref().map(read_lexicon).transpose()?;
        let report = recognition_report(&rec, &store, &test, lexicon.as_deref())?;
        let mut rows = curve_rows(&curve);
        rows.push(json!({ "wra": report.wra_no_lexicon, "wra_lexicon": report.wra_lexicon }));
        write_ndjson(&self.dir.join(METRICS_FILE), &rows)?;
        let mut out = Vec::new();
        writeln!(out, "id,reference,prediction,corrected").expect("vec write");
        for r in &report.samples {
            writeln!(out, "{},{},{},{}", r.id, r.reference, r.prediction, r.corrected.as_deref().unwrap_or("")).expect("vec write");
        }
        let path = self.dir.join("predictions.csv");
        fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        Ok(Outcome {
            setting: format!("{init} {} fraction {}", if ds.online { "online" } else { "offline" }, ds.label_fraction),
            headline: Headline {
                wra: Some(report.wra_no_lexicon),
                wra_lexicon: report.wra_lexicon,
                final_loss: curve.last().copied(),
                ..Headline::default()
            },
            details: json!({ "labeled": labeled.len(), "report": report }),
        })
    }

    fn render(&self) -> Result<Outcome> {
        let c = self.corpus()?;
        let out = self.dir.join("render");
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let fmt = self.cfg.output.image_format;
        let mut rows = Vec::new();
        for s in c.samples.iter().take(self.cfg.output.render_count) {
            let img = render(&s.vector, &c.raster)?;
            let file = match fmt {
                ImageFormat::Pgm => format!("{}.pgm", s.id),
                ImageFormat::Png => format!("{}.png", s.id),
            };
            match fmt {
                ImageFormat::Pgm => img.write_pnm(&out.join(&file))?,
                ImageFormat::Png => img.write_png(&out.join(&file))?,
            }
            let ink = img.pixels.iter().filter(|&&v| v != c.raster.background).count();
            rows.push(json!({ "id": s.id, "file": format!("render/{file}"), "ink_values": ink }));
        }
        write_ndjson(&self.dir.join(METRICS_FILE), &rows)?;
        Ok(Outcome {
            setting: format!("{} images", rows.len()),
            headline: Headline::default(),
            details: json!({ "images": rows.len(), "format": fmt }),
        })
    }
}
