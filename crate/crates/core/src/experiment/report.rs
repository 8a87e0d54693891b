use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

pub const SMOOTHING_NOTE: &str = "BLEU precisions for n>=2 use +1 smoothing";

/// Run identity written at the top of every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMeta {
    pub config_hash: u64,
    pub seed: u64,
    pub mode: String,
    pub uplink_bytes_per_round: Vec<usize>,
    pub base_model_bytes: usize,
}

#[derive(Serialize)]
struct Row<'a> {
    model: &'a str,
    corpus: &'a str,
    #[serde(rename = "R-1")]
    r1: f64,
    #[serde(rename = "R-2")]
    r2: f64,
    #[serde(rename = "R-L")]
    rl: f64,
    #[serde(rename = "B-4")]
    b4: f64,
    #[serde(rename = "B-N")]
    bn: f64,
    #[serde(rename = "PPL")]
    ppl: f64,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    config_hash: String,
    seed: u64,
    mode: &'a str,
    note: &'a str,
    uplink_bytes_per_round: &'a [usize],
    base_model_bytes: usize,
    rows: Vec<Row<'a>>,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn row(r: &MetricReport) -> Row<'_> {
    Row {
        model: &r.model,
        corpus: &r.corpus,
        r1: round2(100.0 * r.rouge1_f1),
        r2: round2(100.0 * r.rouge2_f1),
        rl: round2(100.0 * r.rouge_l_f1),
        b4: round2(100.0 * r.bleu4),
        bn: round2(100.0 * r.bleu_n),
        ppl: round2(r.perplexity),
    }
}

/// Writes `report.csv` and `report.json` into `dir`. ROUGE/BLEU are scaled
/// by 100; every value has two decimals. Rows keep the given order.
pub fn emit_report(reports: &[MetricReport], meta: &ReportMeta, dir: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::contract("empty report matrix"));
    }
    let hash = hex::encode(meta.config_hash.to_be_bytes());
    let mut csv = format!(
        "# config_hash={hash} seed={} mode={}\n# {SMOOTHING_NOTE}; ROUGE/BLEU x100\nmodel,corpus,R-1,R-2,R-L,B-4,B-N,PPL\n",
        meta.seed, meta.mode
    );
    for r in reports {
        let w = row(r);
        csv.push_str(&format!(
            "{},{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}\n",
            w.model, w.corpus, w.r1, w.r2, w.rl, w.b4, w.bn, w.ppl
        ));
    }
    let json = JsonReport {
        config_hash: hash,
        seed: meta.seed,
        mode: &meta.mode,
        note: SMOOTHING_NOTE,
        uplink_bytes_per_round: &meta.uplink_bytes_per_round,
        base_model_bytes: meta.base_model_bytes,
        rows: reports.iter().map(row).collect(),
    };
    let mut json = serde_json::to_string_pretty(&json).expect("report serializes");
    json.push('\n');
    for (name, body) in [("report.csv", csv), ("report.json", json)] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
