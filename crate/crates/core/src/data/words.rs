use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sketches::{perturb, Augment};
use super::{f32_exact, Corpus, CorpusKind, DatasetSplit, LabeledSample};
use crate::error::{Error, Result};
use crate::raster::{render, RasterConfig};
use crate::stroke::StrokeSequence;

pub const DEFAULT_ALPHABET: &str = "celnotuvxz";

/// Glyph strokes in a unit box (y grows downwards).
pub fn glyph(c: char) -> Option<Vec<Vec<(f64, f64)>>> {
    let arc = |from: f64, to: f64, n: usize| -> Vec<(f64, f64)> {
        (0..=n)
            .map(|i| {
                let a = from + (to - from) * i as f64 / n as f64;
                (0.5 + 0.32 * a.cos(), 0.5 + 0.32 * a.sin())
            })
            .collect()
    };
    use std::f64::consts::{FRAC_PI_4, TAU};
    let g = match c {
        'c' => vec![arc(-FRAC_PI_4, -TAU + FRAC_PI_4, 9)],
        'e' => vec![{
            let mut s = vec![(0.18, 0.5), (0.82, 0.5)];
            s.extend(arc(0.0, -TAU + FRAC_PI_4, 9).into_iter().skip(1));
            s
        }],
        'l' => vec![vec![(0.5, 0.08), (0.5, 0.92)]],
        'n' => vec![vec![(0.2, 0.88), (0.2, 0.3), (0.8, 0.3), (0.8, 0.88)]],
        'o' => vec![arc(0.0, TAU, 12)],
        't' => vec![vec![(0.5, 0.08), (0.5, 0.92)], vec![(0.2, 0.35), (0.8, 0.35)]],
        'u' => vec![vec![(0.2, 0.2), (0.2, 0.8), (0.8, 0.8), (0.8, 0.2)]],
        'v' => vec![vec![(0.18, 0.2), (0.5, 0.86), (0.82, 0.2)]],
        'x' => vec![vec![(0.2, 0.2), (0.8, 0.85)], vec![(0.8, 0.2), (0.2, 0.85)]],
        'z' => vec![vec![(0.2, 0.2), (0.8, 0.2), (0.2, 0.85), (0.8, 0.85)]],
        _ => return None,
    };
    Some(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticWordSpec {
    pub alphabet: String,
    pub min_len: usize,
    pub max_len: usize,
    pub count: usize,
    /// Distinct words drawn first; samples reuse them. 0 draws every sample
    /// independently.
    #[serde(default)]
    pub vocab_size: usize,
    pub jitter: f64,
    pub seed: u64,
    #[serde(default = "default_rdp")]
    pub rdp_epsilon: f64,
    /// Applied per glyph.
    #[serde(default)]
    pub augment: Augment,
}

fn default_rdp() -> f64 {
    0.01
}

impl SyntheticWordSpec {
    pub fn new(alphabet: &str, min_len: usize, max_len: usize, count: usize, seed: u64) -> Self {
        Self {
            alphabet: alphabet.to_string(),
            min_len,
            max_len,
            count,
            vocab_size: 0,
            jitter: 0.0,
            seed,
            rdp_epsilon: default_rdp(),
            augment: Augment::default(),
        }
    }

    pub fn chars(&self) -> Vec<char> {
        self.alphabet.chars().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let chars = self.chars();
        if chars.is_empty() {
            return Err(Error::EmptyAlphabet);
        }
        if let Some(c) = chars.iter().find(|&&c| glyph(c).is_none()) {
            return Err(Error::UnknownClassName(c.to_string()));
        }
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if chars.iter().collect::<BTreeSet<_>>().len() != chars.len() {
            return bad("duplicate glyphs in alphabet".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("word length range ({}, {}) is empty", self.min_len, self.max_len));
        }
        if self.count == 0 {
            return bad("count must be positive".into());
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad("jitter must be a finite non-negative number".into());
        }
        let possible: f64 = (self.min_len..=self.max_len).map(|l| (chars.len() as f64).powi(l as i32)).sum();
        if self.vocab_size as f64 > possible {
            return bad(format!("vocab_size {} exceeds the {possible} possible words", self.vocab_size));
        }
        Ok(())
    }
}

/// Places glyphs left to right, one unit-box advance each; the whole word
/// is scaled by `1 / max_len` horizontally so the longest word fills the
/// canvas width.
pub fn word_strokes(
    word: &str,
    max_len: usize,
    jitter: f64,
    augment: &Augment,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<(f64, f64)>>> {
    let mut strokes = Vec::new();
    for (i, c) in word.chars().enumerate() {
        let g = glyph(c).ok_or_else(|| Error::UnknownClassName(c.to_string()))?;
        for s in perturb(&g, jitter, augment, rng) {
            strokes.push(s.into_iter().map(|(x, y)| ((i as f64 + x) / max_len as f64, y)).collect());
        }
    }
    Ok(strokes)
}

fn random_word(chars: &[char], min_len: usize, max_len: usize, rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(min_len..=max_len);
    (0..len).map(|_| chars[rng.gen_range(0..chars.len())]).collect()
}

/// Seeded synthetic handwriting corpus; `sample.text` is the generating word.
pub fn make_synthetic_words(spec: &SyntheticWordSpec, raster: &RasterConfig) -> Result<Corpus> {
    spec.validate()?;
    raster.validate()?;
    let chars = spec.chars();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab: Vec<String> = if spec.vocab_size > 0 {
        let mut seen = BTreeSet::new();
        let mut v = Vec::with_capacity(spec.vocab_size);
        while v.len() < spec.vocab_size {
            let w = random_word(&chars, spec.min_len, spec.max_len, &mut rng);
            if seen.insert(w.clone()) {
                v.push(w);
            }
        }
        v
    } else {
        Vec::new()
    };
    let mut samples = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let text = if vocab.is_empty() {
            random_word(&chars, spec.min_len, spec.max_len, &mut rng)
        } else {
            vocab[rng.gen_range(0..vocab.len())].clone()
        };
        let strokes = word_strokes(&text, spec.max_len, spec.jitter, &spec.augment, &mut rng)?;
        let seq = StrokeSequence::from_polylines(&strokes)?.rdp_simplify(spec.rdp_epsilon)?;
        let vector = f32_exact(&seq);
        samples.push(LabeledSample {
            id: format!("word-{i:05}"),
            raster: render(&vector, raster)?,
            vector,
            label: None,
            text: Some(text),
        });
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = DatasetSplit::shuffled(&ids, chars.iter().map(|c| c.to_string()).collect(), spec.seed);
    Ok(Corpus {
        kind: CorpusKind::Words,
        raster: *raster,
        samples,
        split,
        spec: serde_json::to_value(spec)?,
    })
}
