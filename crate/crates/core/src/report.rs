//! Metrics: per-round CSV, last-5 averages, cross-domain spread, run
//! summary, heatmap and similarity CSVs.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datastore::{read_file, write_file, write_json};
use crate::federation::{ExperimentConfig, FederationOutput, RoundRecord};
use crate::geometry::SimilarityMatrix;
use crate::partition::ClientShard;
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SUMMARY_SCHEMA: u32 = 1;
const LAST_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    /// Divide by `D`.
    #[default]
    Population,
    /// Divide by `D − 1`.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Last5 {
    pub value: f64,
    /// Fewer than five rounds were available.
    pub flagged: bool,
}

/// Mean of the last five entries (all of them when shorter, flagged).
pub fn last5_average(series: &[f64]) -> Last5 {
    let tail = &series[series.len().saturating_sub(LAST_K)..];
    let value = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    Last5 {
        value,
        flagged: series.len() < LAST_K,
    }
}

/// Standard deviation of per-domain values. One domain gives 0.
pub fn cross_domain_std(values: &[f64], kind: StdKind) -> f64 {
    let d = values.len();
    if d < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / d as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let denom = match kind {
        StdKind::Population => d,
        StdKind::Sample => d - 1,
    };
    (ss / denom as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub domain: String,
    pub accuracy: f64,
    pub loss: f64,
}

pub fn metrics_rows(records: &[RoundRecord]) -> Vec<MetricsRow> {
    records
        .iter()
        .flat_map(|r| {
            r.domains.iter().map(move |d| MetricsRow {
                round: r.round,
                domain: d.domain.clone(),
                accuracy: d.accuracy,
                loss: d.loss,
            })
        })
        .collect()
}

const METRICS_HEADER: [&str; 4] = ["round", "domain", "accuracy", "loss"];

/// Render rows as CSV text with LF line endings.
fn csv_text<I>(header: &[String], rows: I) -> String
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    // Writing into a Vec cannot fail.
    w.write_record(header).expect("in-memory CSV");
    for row in rows {
        w.write_record(&row).expect("in-memory CSV");
    }
    String::from_utf8(w.into_inner().expect("in-memory CSV")).expect("UTF-8 fields")
}

/// `round,domain,accuracy,loss`, LF line endings, shortest round-trip floats.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let header: Vec<String> = METRICS_HEADER.iter().map(|h| h.to_string()).collect();
    csv_text(
        &header,
        rows.iter().map(|r| {
            vec![
                r.round.to_string(),
                r.domain.clone(),
                r.accuracy.to_string(),
                r.loss.to_string(),
            ]
        }),
    )
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let bytes = read_file(path)?;
    let bad = |detail: String| Error::InvalidData(format!("{}: {detail}", path.display()));
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let header = reader.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().ne(METRICS_HEADER) {
        return Err(bad("unexpected header".into()));
    }
    reader
        .records()
        .map(|record| {
            let record = record.map_err(|e| bad(e.to_string()))?;
            let line = record.position().map_or(0, |p| p.line());
            let field = |i: usize| record.get(i).ok_or_else(|| bad(format!("line {line}: missing field")));
            let num = |i: usize| -> Result<f64> {
                field(i)?.parse().map_err(|_| bad(format!("line {line}: bad number")))
            };
            Ok(MetricsRow {
                round: field(0)?.parse().map_err(|_| bad(format!("line {line}: bad round")))?,
                domain: field(1)?.to_string(),
                accuracy: num(2)?,
                loss: num(3)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub domain: String,
    pub last5_accuracy: f64,
    pub final_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: u32,
    pub seed: u64,
    pub rounds: usize,
    /// Mean over domains of the last-5 accuracy.
    pub avg: f64,
    /// Spread over domains of the last-5 accuracy.
    pub std: f64,
    pub std_kind: StdKind,
    pub last5_flagged: bool,
    pub domains: Vec<DomainSummary>,
    /// `(original, training)` sample counts per client.
    pub client_sizes: Vec<(usize, usize)>,
    pub config: ExperimentConfig,
}

/// Summary numbers from per-round metrics alone.
pub fn summarize_rows(rows: &[MetricsRow], kind: StdKind) -> (Vec<DomainSummary>, f64, f64, bool) {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.domain.as_str()) {
            names.push(&r.domain);
        }
    }
    let mut flagged = false;
    let domains: Vec<DomainSummary> = names
        .iter()
        .map(|name| {
            let mut series: Vec<(usize, f64)> = rows
                .iter()
                .filter(|r| r.domain == *name)
                .map(|r| (r.round, r.accuracy))
                .collect();
            series.sort_by_key(|&(round, _)| round);
            let acc: Vec<f64> = series.iter().map(|&(_, a)| a).collect();
            let l5 = last5_average(&acc);
            flagged |= l5.flagged;
            DomainSummary {
                domain: name.to_string(),
                last5_accuracy: l5.value,
                final_accuracy: acc.last().copied().unwrap_or(f64::NAN),
            }
        })
        .collect();
    let per: Vec<f64> = domains.iter().map(|d| d.last5_accuracy).collect();
    let avg = per.iter().sum::<f64>() / per.len().max(1) as f64;
    let std = cross_domain_std(&per, kind);
    (domains, avg, std, flagged)
}

pub fn summarize(output: &FederationOutput, config: &ExperimentConfig) -> Summary {
    let rows = metrics_rows(&output.records);
    let (domains, avg, std, last5_flagged) = summarize_rows(&rows, config.std_kind);
    if last5_flagged {
        log::warn!("fewer than {LAST_K} rounds; last-5 average uses every round");
    }
    Summary {
        schema: SUMMARY_SCHEMA,
        seed: config.seed,
        rounds: output.records.len(),
        avg,
        std,
        std_kind: config.std_kind,
        last5_flagged,
        domains,
        client_sizes: output.client_sizes.clone(),
        config: config.clone(),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write `metrics.csv` and `summary.json` into `out_dir`.
pub fn emit_reports(output: &FederationOutput, config: &ExperimentConfig, out_dir: &Path) -> Result<Summary> {
    ensure_dir(out_dir)?;
    let rows = metrics_rows(&output.records);
    write_file(&out_dir.join(METRICS_FILE), metrics_csv(&rows).as_bytes())?;
    let summary = summarize(output, config);
    write_json(&out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// `client,domain,class_0,…` with one row per client.
pub fn heatmap_csv(shards: &[ClientShard], counts: &Array2<usize>) -> String {
    let mut header = vec!["client".to_string(), "domain".to_string()];
    header.extend((0..counts.ncols()).map(|c| format!("class_{c}")));
    csv_text(
        &header,
        shards.iter().zip(counts.outer_iter()).map(|(shard, row)| {
            let mut fields = vec![shard.client_id.to_string(), shard.domain.clone()];
            fields.extend(row.iter().map(|v| v.to_string()));
            fields
        }),
    )
}

fn sig6(v: f64) -> String {
    if !v.is_finite() {
        return "NaN".into();
    }
    if v == 0.0 {
        return "0".into();
    }
    let digits = 5 - v.abs().log10().floor() as i32;
    if (0..=17).contains(&digits) {
        let s = format!("{v:.*}", digits as usize);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.5e}")
    }
}

/// Rows are classes of `domain_a`, columns classes of `domain_b`; six
/// significant digits, `NaN` for missing classes.
pub fn similarity_csv(m: &SimilarityMatrix) -> String {
    let mut header = vec!["class".to_string()];
    header.extend((0..m.values.ncols()).map(|j| j.to_string()));
    csv_text(
        &header,
        m.values.outer_iter().enumerate().map(|(i, row)| {
            let mut fields = vec![i.to_string()];
            fields.extend(row.iter().map(|&v| sig6(v)));
            fields
        }),
    )
}

pub fn similarity_file_name(m: &SimilarityMatrix) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect()
    };
    format!("similarity_{}_vs_{}.csv", clean(&m.domain_a), clean(&m.domain_b))
}

pub fn write_similarity(matrices: &[SimilarityMatrix], out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    matrices
        .iter()
        .map(|m| {
            let path = out_dir.join(similarity_file_name(m));
            write_file(&path, similarity_csv(m).as_bytes())?;
            Ok(path)
        })
        .collect()
}
