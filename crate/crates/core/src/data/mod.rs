//! Datasets: QuickDraw ingestion, seeded synthetic corpora, splits and the
//! on-disk corpus layout.

pub mod io;
pub mod quickdraw;
pub mod sketches;
pub mod words;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{RasterConfig, RasterImage};
use crate::stroke::StrokeSequence;

pub use io::{read_corpus, write_corpus};
pub use quickdraw::{corpus_from_quickdraw, parse_quickdraw_lines, QuickDrawParse};
pub use sketches::{make_synthetic_sketches, Augment, SyntheticSketchSpec, SKETCH_CLASSES};
pub use words::{make_synthetic_words, SyntheticWordSpec, DEFAULT_ALPHABET};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub vector: StrokeSequence,
    pub raster: RasterImage,
    pub label: Option<usize>,
    pub text: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub class_universe: Vec<String>,
    pub seed: u64,
}

impl DatasetSplit {
    /// Seeded shuffle of `ids`, then the first 80% train, next 10% val, rest test.
    pub fn shuffled(ids: &[String], class_universe: Vec<String>, seed: u64) -> Self {
        let mut ids = ids.to_vec();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = ids.len();
        let n_train = n * 8 / 10;
        let n_val = n / 10;
        let test = ids.split_off(n_train + n_val);
        let val = ids.split_off(n_train);
        Self {
            train: ids,
            val,
            test,
            class_universe,
            seed,
        }
    }

    pub fn ids(&self, subset: Subset) -> &[String] {
        match subset {
            Subset::Train => &self.train,
            Subset::Val => &self.val,
            Subset::Test => &self.test,
        }
    }

    pub fn subset_of(&self, id: &str) -> Option<Subset> {
        [Subset::Train, Subset::Val, Subset::Test]
            .into_iter()
            .find(|&s| self.ids(s).iter().any(|x| x == id))
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Sketch,
    Words,
}

/// Samples plus the split and rendering settings they were produced with.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub kind: CorpusKind,
    pub raster: RasterConfig,
    pub samples: Vec<LabeledSample>,
    pub split: DatasetSplit,
    /// Generator settings, echoed into the manifest.
    pub spec: serde_json::Value,
}

impl Corpus {
    pub fn index(&self) -> BTreeMap<&str, usize> {
        self.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect()
    }

    /// Samples of one subset of `split`, in split order.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&LabeledSample>> {
        let index = self.index();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|&i| &self.samples[i])
                    .ok_or_else(|| Error::InvalidSpec(format!("split references unknown sample {id:?}")))
            })
            .collect()
    }

    pub fn subset(&self, subset: Subset) -> Result<Vec<&LabeledSample>> {
        self.select(self.split.ids(subset))
    }

    /// Distinct texts of a word corpus, sorted.
    pub fn lexicon(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.samples.iter().filter_map(|s| s.text.as_deref()).collect();
        set.into_iter().map(String::from).collect()
    }
}

/// Partitions the classes of `samples` into a pretraining group of
/// `n_pretrain` classes and an evaluation group with the rest. Each group's
/// split lists its classes in their original order and splits its samples
/// 80/10/10 with the same seed.
pub fn split_disjoint_classes(
    samples: &[LabeledSample],
    class_universe: &[String],
    n_pretrain: usize,
    seed: u64,
) -> Result<(DatasetSplit, DatasetSplit)> {
    let present: BTreeSet<usize> = samples.iter().filter_map(|s| s.label).collect();
    if n_pretrain == 0 || present.len() <= n_pretrain {
        return Err(Error::TooFewClasses {
            available: present.len(),
            requested: n_pretrain,
        });
    }
    let mut order: Vec<usize> = present.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut pre: Vec<usize> = order[..n_pretrain].to_vec();
    let mut eval: Vec<usize> = order[n_pretrain..].to_vec();
    pre.sort_unstable();
    eval.sort_unstable();
    let build = |classes: &[usize]| {
        let ids: Vec<String> = samples
            .iter()
            .filter(|s| s.label.is_some_and(|l| classes.contains(&l)))
            .map(|s| s.id.clone())
            .collect();
        let names = classes
            .iter()
            .map(|&c| class_universe.get(c).cloned().unwrap_or_else(|| c.to_string()))
            .collect();
        DatasetSplit::shuffled(&ids, names, seed)
    };
    Ok((build(&pre), build(&eval)))
}

/// Rounds coordinates to `f32` so that the binary corpus format stores them
/// exactly.
pub(crate) fn f32_exact(seq: &StrokeSequence) -> StrokeSequence {
    seq.map_coords(|x, y| (x as f32 as f64, y as f32 as f64))
}
