use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::run::RunRecord;
use crate::error::{Error, Result};
use crate::verifier::{FailStage, Verdict};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// The documented `metrics.csv` columns, in order.
pub const METRICS_COLUMNS: [&str; 16] = [
    "schema_version",
    "run_id",
    "trainers",
    "q",
    "gamma",
    "epsilon",
    "bits",
    "epochs",
    "train_secs",
    "embed_ms_total",
    "verify_ms",
    "acc_pre_embed",
    "acc_main",
    "eta_min",
    "verdict",
    "fail_stage",
];

/// One flat metrics row. An empty `epsilon` means no noise; empty `eta_min`
/// and `verdict` mean the run had no watermark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema_version: u32,
    pub run_id: String,
    pub trainers: usize,
    pub q: usize,
    pub gamma: f64,
    pub epsilon: Option<f64>,
    pub bits: usize,
    pub epochs: usize,
    pub train_secs: f64,
    pub embed_ms_total: f64,
    pub verify_ms: f64,
    pub acc_pre_embed: f64,
    pub acc_main: f64,
    pub eta_min: Option<f64>,
    pub verdict: Option<String>,
    pub fail_stage: Option<String>,
}

impl MetricsRow {
    pub fn from_record(r: &RunRecord) -> Self {
        let v = r.verification.as_ref();
        Self {
            schema_version: METRICS_SCHEMA_VERSION,
            run_id: r.run_id.clone(),
            trainers: r.plan.trainers(),
            q: r.plan.label.q,
            gamma: r.gamma,
            epsilon: r.epsilon,
            bits: r.bits,
            epochs: r.epoch_losses.len(),
            train_secs: r.timings.train_secs,
            embed_ms_total: r.timings.embed_ms.iter().sum(),
            verify_ms: r.timings.verify_ms,
            acc_pre_embed: r.acc_pre_embed,
            acc_main: r.acc_main,
            eta_min: v.and_then(|v| v.per_link.iter().map(|l| l.eta).reduce(f64::min)),
            verdict: v.map(|v| match v.overall {
                Verdict::Success => "success".into(),
                Verdict::Fail => "fail".into(),
            }),
            fail_stage: v.map(|v| match v.fail_stage {
                FailStage::None => "none".into(),
                FailStage::CacheDigest => "cache_digest".into(),
                FailStage::Accuracy => "accuracy".into(),
                FailStage::Link(i) => format!("link_{i}"),
            }),
        }
    }
}

/// Header first; an empty slice yields a header-only file.
pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricsRow]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(METRICS_COLUMNS)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a metrics CSV of this or any earlier schema version.
pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rd.deserialize::<MetricsRow>() {
        let row = rec?;
        if row.schema_version > METRICS_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "metrics schema {} is newer than supported {}",
                row.schema_version, METRICS_SCHEMA_VERSION
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>, prec: usize, none: &str) -> String {
    v.map_or_else(|| none.to_string(), |x| format!("{x:.prec$}"))
}

/// Aligned plain-text table with the same columns as the CSV.
pub fn render_table(rows: &[MetricsRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.schema_version.to_string(),
                r.run_id.clone(),
                r.trainers.to_string(),
                r.q.to_string(),
                format!("{:.2}", r.gamma),
                fmt_opt(r.epsilon, 2, "inf"),
                r.bits.to_string(),
                r.epochs.to_string(),
                format!("{:.3}", r.train_secs),
                format!("{:.1}", r.embed_ms_total),
                format!("{:.1}", r.verify_ms),
                format!("{:.4}", r.acc_pre_embed),
                format!("{:.4}", r.acc_main),
                fmt_opt(r.eta_min, 4, "-"),
                r.verdict.clone().unwrap_or_else(|| "-".into()),
                r.fail_stage.clone().unwrap_or_else(|| "-".into()),
            ]
        })
        .collect();
    let widths: Vec<usize> = METRICS_COLUMNS
        .iter()
        .enumerate()
        .map(|(i, h)| body.iter().map(|row| row[i].len()).chain([h.len()]).max().unwrap())
        .collect();
    let mut s = String::new();
    let line = |cells: Vec<&str>, s: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(s, "{}", parts.join("  ").trim_end());
    };
    line(METRICS_COLUMNS.to_vec(), &mut s);
    for row in &body {
        line(row.iter().map(String::as_str).collect(), &mut s);
    }
    s
}

/// CSV text plus the aligned table for a set of records.
pub fn report(records: &[RunRecord]) -> Result<(String, String)> {
    let rows: Vec<MetricsRow> = records.iter().map(MetricsRow::from_record).collect();
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &rows)?;
    Ok((String::from_utf8(buf).expect("csv is utf-8"), render_table(&rows)))
}
