//! `report`: one row per run directory, rendered as a markdown table and a
//! JSON document. The output depends only on the run directories' files, so
//! regenerating a report is byte-for-byte stable.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Headline, RunResult, RESULT_FILE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Run directory name.
    pub run: String,
    pub command: String,
    pub setting: String,
    pub seed: u64,
    pub metrics: Headline,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<ReportRow>,
}

fn read_row(dir: &Path) -> Result<ReportRow> {
    let path = dir.join(RESULT_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let r: RunResult = serde_json::from_slice(&text)?;
    let run = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(ReportRow {
        run,
        command: r.command,
        setting: r.setting,
        seed: r.seed,
        metrics: r.metrics,
        error: r.error,
    })
}

/// A path without `result.json` is taken as a root holding run
/// directories, which are listed in name order.
pub fn summarize(runs: &[impl AsRef<Path>]) -> Result<Summary> {
    let mut rows = Vec::new();
    for d in runs {
        let d = d.as_ref();
        if d.join(RESULT_FILE).exists() || !d.is_dir() {
            rows.push(read_row(d)?);
            continue;
        }
        let mut children: Vec<_> = fs::read_dir(d)
            .map_err(|e| Error::io(d, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(RESULT_FILE).is_file())
            .collect();
        children.sort();
        if children.is_empty() {
            rows.push(read_row(d)?);
        }
        for c in children {
            rows.push(read_row(&c)?);
        }
    }
    Ok(Summary { rows })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "–".into(), |v| format!("{:.1}", 100.0 * v))
}

impl Summary {
    pub fn markdown(&self) -> String {
        let mut s = String::from(
            "| run | command | setting | seed | Top-1 | Top-5 | Acc@top1 | mAP@top10 | WRA | WRA+lex | final loss |\n\
             |---|---|---|---:|---:|---:|---:|---:|---:|---:|---:|\n",
        );
        for r in &self.rows {
            let m = &r.metrics;
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
                r.run,
                r.command,
                r.error.as_ref().map_or_else(|| r.setting.clone(), |e| format!("failed ({e})")),
                r.seed,
                pct(m.top1),
                pct(m.top5),
                pct(m.acc_at_top1),
                pct(m.map_at_top10),
                pct(m.wra),
                pct(m.wra_lexicon),
                m.final_loss.map_or_else(|| "–".into(), |v| format!("{v:.4}")),
            ));
        }
        s.push_str("\nAccuracies in percent. mAP@top10 averages precision over relevant items within the top 10 ranks.\n");
        s
    }
}

pub(super) fn run(runs: &[std::path::PathBuf], out: Option<&Path>) -> Result<()> {
    let summary = summarize(runs)?;
    let md = summary.markdown();
    print!("{md}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("summary.md");
        fs::write(&p, &md).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("summary.json");
        let mut json = serde_json::to_vec_pretty(&summary)?;
        json.push(b'\n');
        fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
