use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{f32_exact, Corpus, CorpusKind, DatasetSplit, LabeledSample};
use crate::error::{Error, Result};
use crate::raster::{render, RasterConfig};
use crate::stroke::StrokeSequence;

pub const SKETCH_CLASSES: [&str; 10] = [
    "circle", "square", "triangle", "star", "zigzag", "spiral", "arrow", "cross", "heart", "house",
];

/// Per-sample random similarity transform about the canvas centre, applied
/// before point jitter. Each field is the maximum magnitude of a uniform draw.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    /// Radians.
    #[serde(default)]
    pub rotation: f64,
    /// Relative: scale factor drawn from `1 ± scale`.
    #[serde(default)]
    pub scale: f64,
    /// Canvas units, per axis.
    #[serde(default)]
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSketchSpec {
    pub classes: Vec<String>,
    pub per_class: usize,
    pub jitter: f64,
    pub t_max: usize,
    pub seed: u64,
    #[serde(default = "default_rdp")]
    pub rdp_epsilon: f64,
    #[serde(default)]
    pub augment: Augment,
    /// When positive, template edges are subdivided so consecutive points
    /// are at most this far apart before jitter, giving wobbly strokes whose
    /// simplified length varies per sample. 0 jitters template vertices only.
    #[serde(default)]
    pub densify: f64,
}

fn default_rdp() -> f64 {
    0.01
}

impl SyntheticSketchSpec {
    pub fn new(classes: &[&str], per_class: usize, jitter: f64, seed: u64) -> Self {
        Self {
            classes: classes.iter().map(|c| c.to_string()).collect(),
            per_class,
            jitter,
            t_max: 64,
            seed,
            rdp_epsilon: default_rdp(),
            augment: Augment::default(),
            densify: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.classes.iter().find(|c| template(c).is_none()) {
            return Err(Error::UnknownClassName(c.clone()));
        }
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        if self.classes.is_empty() {
            return bad("no classes requested");
        }
        let mut sorted = self.classes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.classes.len() {
            return bad("duplicate class names");
        }
        if self.per_class < 1 {
            return bad("per_class must be at least 1");
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad("jitter must be a finite non-negative number");
        }
        if !(self.rdp_epsilon >= 0.0) {
            return bad("rdp_epsilon must be non-negative");
        }
        let a = self.augment;
        if [a.rotation, a.scale, a.shift].iter().any(|v| !(*v >= 0.0 && v.is_finite())) || a.scale >= 1.0 {
            return bad("augment magnitudes must be finite, non-negative, and scale < 1");
        }
        if !(self.densify >= 0.0 && self.densify.is_finite()) {
            return bad("densify must be a finite non-negative spacing");
        }
        if self.t_max < 2 {
            return bad("t_max must be at least 2");
        }
        Ok(())
    }
}

fn polygon(n: usize, r: f64, phase: f64) -> Vec<(f64, f64)> {
    (0..=n)
        .map(|i| {
            let a = phase + std::f64::consts::TAU * (i % n) as f64 / n as f64;
            (0.5 + r * a.cos(), 0.5 + r * a.sin())
        })
        .collect()
}

/// Class template in unit-canvas coordinates (y grows downwards).
pub fn template(name: &str) -> Option<Vec<Vec<(f64, f64)>>> {
    use std::f64::consts::{FRAC_PI_2, PI};
    let t = match name {
        "circle" => vec![polygon(24, 0.4, 0.0)],
        "square" => vec![vec![(0.15, 0.15), (0.85, 0.15), (0.85, 0.85), (0.15, 0.85), (0.15, 0.15)]],
        "triangle" => vec![vec![(0.5, 0.1), (0.9, 0.85), (0.1, 0.85), (0.5, 0.1)]],
        "star" => vec![(0..=10)
            .map(|i| {
                let r = if i % 2 == 0 { 0.42 } else { 0.17 };
                let a = -FRAC_PI_2 + PI * (i % 10) as f64 / 5.0;
                (0.5 + r * a.cos(), 0.5 + r * a.sin())
            })
            .collect()],
        "zigzag" => vec![(0..7)
            .map(|i| (0.1 + 0.8 * i as f64 / 6.0, if i % 2 == 0 { 0.3 } else { 0.7 }))
            .collect()],
        "spiral" => vec![(0..=32)
            .map(|i| {
                let f = i as f64 / 32.0;
                let a = 4.0 * PI * f;
                let r = 0.05 + 0.37 * f;
                (0.5 + r * a.cos(), 0.5 + r * a.sin())
            })
            .collect()],
        "arrow" => vec![
            vec![(0.1, 0.5), (0.9, 0.5)],
            vec![(0.62, 0.22), (0.9, 0.5), (0.62, 0.78)],
        ],
        "cross" => vec![vec![(0.5, 0.1), (0.5, 0.9)], vec![(0.1, 0.5), (0.9, 0.5)]],
        "heart" => vec![(0..=24)
            .map(|i| {
                let t = std::f64::consts::TAU * (i % 24) as f64 / 24.0;
                let x = 16.0 * t.sin().powi(3);
                let y = 13.0 * t.cos() - 5.0 * (2.0 * t).cos() - 2.0 * (3.0 * t).cos() - (4.0 * t).cos();
                (0.5 + x / 40.0, 0.47 - y / 40.0)
            })
            .collect()],
        "house" => vec![
            vec![(0.2, 0.45), (0.2, 0.9), (0.8, 0.9), (0.8, 0.45), (0.2, 0.45)],
            vec![(0.2, 0.45), (0.5, 0.1), (0.8, 0.45)],
        ],
        _ => return None,
    };
    Some(t)
}

/// Subdivides every segment into equal pieces no longer than `spacing`.
pub(crate) fn densify(strokes: &[Vec<(f64, f64)>], spacing: f64) -> Vec<Vec<(f64, f64)>> {
    if spacing <= 0.0 {
        return strokes.to_vec();
    }
    strokes
        .iter()
        .map(|s| {
            let mut out = vec![s[0]];
            for w in s.windows(2) {
                let ((x0, y0), (x1, y1)) = (w[0], w[1]);
                let n = ((x1 - x0).hypot(y1 - y0) / spacing).ceil().max(1.0) as usize;
                out.extend((1..=n).map(|k| {
                    let t = k as f64 / n as f64;
                    (x0 + t * (x1 - x0), y0 + t * (y1 - y0))
                }));
            }
            out
        })
        .collect()
}

/// Draws one augmented, jittered copy of `strokes` clamped to the unit square.
pub(crate) fn perturb(
    strokes: &[Vec<(f64, f64)>],
    jitter: f64,
    augment: &Augment,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<(f64, f64)>> {
    let mut sym = |m: f64| m * (2.0 * rng.gen::<f64>() - 1.0);
    let (angle, scale) = (sym(augment.rotation), 1.0 + sym(augment.scale));
    let (dx, dy) = (sym(augment.shift), sym(augment.shift));
    let (sin, cos) = angle.sin_cos();
    let noise = Normal::new(0.0, jitter).expect("validated jitter");
    strokes
        .iter()
        .map(|s| {
            s.iter()
                .map(|&(x, y)| {
                    let (u, v) = (x - 0.5, y - 0.5);
                    let x = 0.5 + scale * (cos * u - sin * v) + dx + noise.sample(rng);
                    let y = 0.5 + scale * (sin * u + cos * v) + dy + noise.sample(rng);
                    (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0))
                })
                .collect()
        })
        .collect()
}

/// Seeded synthetic sketch corpus: `per_class` samples of every requested
/// class, ids `<class>-<nnnnn>`, labels indexing `spec.classes`.
pub fn make_synthetic_sketches(spec: &SyntheticSketchSpec, raster: &RasterConfig) -> Result<Corpus> {
    spec.validate()?;
    raster.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.classes.len() * spec.per_class);
    for (label, class) in spec.classes.iter().enumerate() {
        let tpl = densify(&template(class).expect("validated class"), spec.densify);
        for i in 0..spec.per_class {
            let strokes = perturb(&tpl, spec.jitter, &spec.augment, &mut rng);
            let seq = StrokeSequence::from_polylines(&strokes)?.rdp_simplify(spec.rdp_epsilon)?;
            let vector = f32_exact(&seq);
            samples.push(LabeledSample {
                id: format!("{class}-{i:05}"),
                raster: render(&vector, raster)?,
                vector,
                label: Some(label),
                text: None,
            });
        }
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = DatasetSplit::shuffled(&ids, spec.classes.clone(), spec.seed);
    Ok(Corpus {
        kind: CorpusKind::Sketch,
        raster: *raster,
        samples,
        split,
        spec: serde_json::to_value(spec)?,
    })
}
