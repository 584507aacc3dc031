//! QuickDraw "simplified drawing" ndjson: one object per line with a
//! `word` string and a `drawing` list of `[xs, ys]` strokes on a 256×256
//! canvas.

use std::collections::BTreeSet;
use std::io::BufRead;

use serde_json::Value;

use super::{f32_exact, Corpus, CorpusKind, DatasetSplit, LabeledSample};
use crate::error::{Error, Result};
use crate::raster::{render, RasterConfig};
use crate::stroke::StrokeSequence;

pub const QUICKDRAW_CANVAS: usize = 256;

#[derive(Debug, Default)]
pub struct QuickDrawParse {
    pub records: Vec<(String, StrokeSequence)>,
    /// Records dropped, malformed or with fewer than two points.
    pub skipped: usize,
    /// One `MalformedRecord` per malformed line.
    pub errors: Vec<Error>,
}

fn parse_record(line: &str) -> std::result::Result<(String, Vec<Vec<(f64, f64)>>), String> {
    let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let word = v
        .get("word")
        .and_then(Value::as_str)
        .ok_or("missing string field \"word\"")?
        .to_string();
    let drawing = v
        .get("drawing")
        .and_then(Value::as_array)
        .ok_or("missing array field \"drawing\"")?;
    let mut strokes = Vec::with_capacity(drawing.len());
    for (si, s) in drawing.iter().enumerate() {
        let pair = s.as_array().filter(|a| a.len() >= 2).ok_or(format!("stroke {si} is not [xs, ys]"))?;
        let coords = |a: &Value| -> std::result::Result<Vec<f64>, String> {
            a.as_array()
                .ok_or(format!("stroke {si} coordinates are not arrays"))?
                .iter()
                .map(|n| n.as_f64().ok_or(format!("stroke {si} has a non-numeric coordinate")))
                .collect()
        };
        let (xs, ys) = (coords(&pair[0])?, coords(&pair[1])?);
        if xs.len() != ys.len() {
            return Err(format!("stroke {si} has {} xs and {} ys", xs.len(), ys.len()));
        }
        strokes.push(xs.into_iter().zip(ys).collect());
    }
    Ok((word, strokes))
}

/// Parses every line; malformed lines are reported and skipped, blank lines
/// ignored. Coordinates are normalized from the 256-pixel canvas.
pub fn parse_quickdraw_lines(reader: impl BufRead) -> Result<QuickDrawParse> {
    let mut out = QuickDrawParse::default();
    let mut seen = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<quickdraw stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        seen += 1;
        let parsed = parse_record(&line).and_then(|(word, strokes)| {
            let total: usize = strokes.iter().map(Vec::len).sum();
            if total < 2 {
                return Ok(None);
            }
            let strokes: Vec<_> = strokes.into_iter().filter(|s| !s.is_empty()).collect();
            let seq = StrokeSequence::from_polylines(&strokes)
                .and_then(|s| s.normalize(QUICKDRAW_CANVAS, QUICKDRAW_CANVAS))
                .map_err(|e| e.to_string())?;
            Ok(Some((word, f32_exact(&seq))))
        });
        match parsed {
            Ok(Some(rec)) => out.records.push(rec),
            Ok(None) => out.skipped += 1,
            Err(reason) => {
                out.skipped += 1;
                out.errors.push(Error::MalformedRecord { line: line_no, reason });
            }
        }
    }
    if seen == 0 {
        return Err(Error::EmptyFile);
    }
    Ok(out)
}

/// Labels records by their sorted distinct words and splits 80/10/10.
pub fn corpus_from_quickdraw(
    records: &[(String, StrokeSequence)],
    raster: &RasterConfig,
    rdp_epsilon: f64,
    seed: u64,
) -> Result<Corpus> {
    raster.validate()?;
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let classes: Vec<String> = records
        .iter()
        .map(|(w, _)| w.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut samples = Vec::with_capacity(records.len());
    for (i, (word, seq)) in records.iter().enumerate() {
        let vector = f32_exact(&seq.rdp_simplify(rdp_epsilon)?);
        let label = classes.binary_search(word).ok();
        samples.push(LabeledSample {
            id: format!("qd-{i:07}"),
            raster: render(&vector, raster)?,
            vector,
            label,
            text: None,
        });
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = DatasetSplit::shuffled(&ids, classes, seed);
    Ok(Corpus {
        kind: CorpusKind::Sketch,
        raster: *raster,
        samples,
        split,
        spec: serde_json::json!({ "source": "quickdraw", "rdp_epsilon": rdp_epsilon, "seed": seed }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stroke::PenState;

    #[test]
    fn single_line_record() {
        let src = r#"{"word":"line","drawing":[[[0,10],[0,0]]]}"#;
        let p = parse_quickdraw_lines(src.as_bytes()).unwrap();
        assert_eq!(p.records.len(), 1);
        let (w, s) = &p.records[0];
        assert_eq!(w, "line");
        let states: Vec<PenState> = s.points().iter().map(|p| p.state).collect();
        assert_eq!(states, vec![PenState::Down, PenState::End]);
        assert_eq!(s.points()[1].x, (10.0 / 255.0) as f32 as f64);
    }

    #[test]
    fn malformed_line_is_counted_and_located() {
        let src = "{\"word\":\"a\",\"drawing\":[[[0,1],[0,1]]]}\nnot json\n{\"word\":\"b\",\"drawing\":[[[5,6,7],[1,2,3]]]}\n";
        let p = parse_quickdraw_lines(src.as_bytes()).unwrap();
        assert_eq!(p.records.len(), 2);
        assert_eq!(p.skipped, 1);
        assert!(matches!(p.errors[0], Error::MalformedRecord { line: 2, .. }));
    }

    #[test]
    fn short_and_inconsistent_records() {
        let src = "{\"word\":\"dot\",\"drawing\":[[[3],[4]]]}\n{\"word\":\"x\",\"drawing\":[[[1,2],[3]]]}\n{\"drawing\":[]}\n";
        let p = parse_quickdraw_lines(src.as_bytes()).unwrap();
        assert!(p.records.is_empty());
        assert_eq!(p.skipped, 3);
        assert_eq!(p.errors.len(), 2);
    }

    #[test]
    fn empty_file_rejected() {
        assert!(matches!(parse_quickdraw_lines("".as_bytes()), Err(Error::EmptyFile)));
        assert!(matches!(parse_quickdraw_lines("\n  \n".as_bytes()), Err(Error::EmptyFile)));
    }

    #[test]
    fn corpus_labels_sorted_words() {
        let src = "{\"word\":\"zed\",\"drawing\":[[[0,255],[0,255]]]}\n{\"word\":\"ant\",\"drawing\":[[[0,100,200],[50,50,60]]]}\n";
        let p = parse_quickdraw_lines(src.as_bytes()).unwrap();
        let c = corpus_from_quickdraw(&p.records, &RasterConfig::square(16), 0.01, 1).unwrap();
        assert_eq!(c.split.class_universe, vec!["ant", "zed"]);
        assert_eq!(c.samples[0].label, Some(1));
        assert_eq!(c.samples[1].label, Some(0));
    }
}
