//! Corpus directory layout:
//!
//! ```text
//! <dir>/manifest.json          ids, labels/texts, split assignment, spec echo
//! <dir>/strokes/<id>.bin       u32 LE row count, then rows of 5 f32 LE
//! ```
//!
//! Rasters are not stored; they are re-rendered from the vectors on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusKind, DatasetSplit, LabeledSample, Subset};
use crate::error::{Error, Result};
use crate::raster::{render, RasterConfig};
use crate::stroke::StrokeSequence;

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleEntry {
    id: String,
    file: String,
    label: Option<usize>,
    text: Option<String>,
    subset: Option<Subset>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    kind: CorpusKind,
    raster: RasterConfig,
    spec: serde_json::Value,
    split: DatasetSplit,
    samples: Vec<SampleEntry>,
}

pub fn encode_strokes(seq: &StrokeSequence) -> Vec<u8> {
    let rows = seq.to_rows();
    let mut out = Vec::with_capacity(4 + rows.len() * 20);
    out.extend((rows.len() as u32).to_le_bytes());
    for r in &rows {
        for v in r {
            out.extend((*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_strokes(bytes: &[u8]) -> Result<StrokeSequence> {
    let bad = |m: String| Error::InvalidSequence(m);
    if bytes.len() < 4 {
        return Err(bad("stroke file shorter than its header".into()));
    }
    let n = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 4 + n * 20 {
        return Err(bad(format!("stroke file holds {} bytes, header promises {n} rows", bytes.len())));
    }
    let rows: Vec<[f64; 5]> = bytes[4..]
        .chunks_exact(20)
        .map(|c| {
            let mut r = [0.0; 5];
            for (k, v) in r.iter_mut().enumerate() {
                *v = f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
            }
            r
        })
        .collect();
    StrokeSequence::from_rows(&rows)
}

pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    let strokes = dir.join("strokes");
    fs::create_dir_all(&strokes).map_err(|e| Error::io(&strokes, e))?;
    let mut entries = Vec::with_capacity(corpus.samples.len());
    for s in &corpus.samples {
        let file = format!("strokes/{}.bin", s.id);
        let path = dir.join(&file);
        fs::write(&path, encode_strokes(&s.vector)).map_err(|e| Error::io(&path, e))?;
        entries.push(SampleEntry {
            id: s.id.clone(),
            file,
            label: s.label,
            text: s.text.clone(),
            subset: corpus.split.subset_of(&s.id),
        });
    }
    let manifest = Manifest {
        format_version: CORPUS_FORMAT_VERSION,
        kind: corpus.kind,
        raster: corpus.raster,
        spec: corpus.spec.clone(),
        split: corpus.split.clone(),
        samples: entries,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join("manifest.json");
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_slice(&text)?;
    if m.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: m.format_version,
            expected: CORPUS_FORMAT_VERSION,
        });
    }
    m.raster.validate()?;
    let mut samples = Vec::with_capacity(m.samples.len());
    for e in m.samples {
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        let vector = decode_strokes(&bytes)?;
        samples.push(LabeledSample {
            raster: render(&vector, &m.raster)?,
            id: e.id,
            vector,
            label: e.label,
            text: e.text,
        });
    }
    Ok(Corpus {
        kind: m.kind,
        raster: m.raster,
        samples,
        split: m.split,
        spec: m.spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_sketches, make_synthetic_words, SyntheticSketchSpec, SyntheticWordSpec};

    #[test]
    fn stroke_file_layout() {
        let seq = StrokeSequence::from_polylines(&[vec![(0.5, 0.25), (1.0, 0.0)]]).unwrap();
        let b = encode_strokes(&seq);
        assert_eq!(b.len(), 4 + 2 * 20);
        assert_eq!(&b[..4], &[2, 0, 0, 0]);
        assert_eq!(&b[4..8], &0.5f32.to_le_bytes());
        assert_eq!(decode_strokes(&b).unwrap(), seq);
        assert!(decode_strokes(&b[..10]).is_err());
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSketchSpec::new(&["star", "house", "arrow"], 5, 0.02, 4);
        let c = make_synthetic_sketches(&spec, &RasterConfig::square(16)).unwrap();
        write_corpus(dir.path(), &c).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), c);

        let dir = tempfile::tempdir().unwrap();
        let mut spec = SyntheticWordSpec::new("lov", 1, 3, 12, 4);
        spec.jitter = 0.01;
        let raster = RasterConfig {
            height: 16,
            width: 48,
            ..RasterConfig::default()
        };
        let c = make_synthetic_words(&spec, &raster).unwrap();
        write_corpus(dir.path(), &c).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), c);
    }
}
