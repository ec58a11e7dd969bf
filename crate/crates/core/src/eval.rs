//! Counterfactual quality metrics, repetition aggregates, trade-off sweeps and
//! CSV/JSON reports.
//!
//! Proximity and sparsity are averaged over valid results only; with no valid
//! result they are undefined (`None`, an empty CSV cell, JSON `null`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{changed_features, ldist};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfResult {
    pub instance_id: String,
    #[serde(default)]
    pub repetition: usize,
    pub original: Vec<f64>,
    /// Present iff `valid`.
    pub counterfactual: Option<Vec<f64>>,
    /// Last visited point; equals the counterfactual when valid.
    pub final_state: Vec<f64>,
    pub valid: bool,
    /// L1 distance in normalized space (valid results only).
    pub proximity: Option<f64>,
    /// L1 distance in raw feature units, when normalization stats are known.
    #[serde(default)]
    pub proximity_raw: Option<f64>,
    pub sparsity: Option<usize>,
    pub gen_time_s: f64,
}

impl CfResult {
    pub fn new(
        instance_id: impl Into<String>,
        original: Vec<f64>,
        final_state: Vec<f64>,
        valid: bool,
        gen_time_s: f64,
    ) -> Self {
        let (counterfactual, proximity, sparsity) = if valid {
            (
                Some(final_state.clone()),
                Some(ldist(&original, &final_state)),
                Some(changed_features(&original, &final_state)),
            )
        } else {
            (None, None, None)
        };
        CfResult {
            instance_id: instance_id.into(),
            repetition: 0,
            original,
            counterfactual,
            final_state,
            valid,
            proximity,
            proximity_raw: None,
            sparsity,
            gen_time_s,
        }
    }

    /// `x̃ - x`, for valid results.
    pub fn explanation(&self) -> Option<Vec<f64>> {
        self.counterfactual
            .as_ref()
            .map(|cf| cf.iter().zip(&self.original).map(|(a, b)| a - b).collect())
    }

    /// Fills the raw-unit proximity from per-feature ranges (max - min).
    pub fn with_raw_ranges(mut self, ranges: &[f64]) -> Self {
        self.proximity_raw = self.counterfactual.as_ref().map(|cf| {
            cf.iter()
                .zip(&self.original)
                .zip(ranges)
                .map(|((a, b), r)| (a - b).abs() * r)
                .sum()
        });
        self
    }
}

/// Valid count over attempted count; zero for an empty set.
pub fn validity(results: &[CfResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|r| r.valid).count() as f64 / results.len() as f64
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn proximity_mean(results: &[CfResult]) -> Option<f64> {
    mean_of(
        results
            .iter()
            .filter(|r| r.valid)
            .filter_map(|r| r.proximity),
    )
}

pub fn sparsity_mean(results: &[CfResult]) -> Option<f64> {
    mean_of(
        results
            .iter()
            .filter(|r| r.valid)
            .filter_map(|r| r.sparsity.map(|s| s as f64)),
    )
}

pub fn gen_time_mean(results: &[CfResult]) -> Option<f64> {
    mean_of(results.iter().map(|r| r.gen_time_s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub validity: f64,
    pub proximity: Option<f64>,
    pub sparsity: Option<f64>,
    pub gen_time_s: Option<f64>,
}

pub fn summarize(results: &[CfResult]) -> Summary {
    Summary {
        validity: validity(results),
        proximity: proximity_mean(results),
        sparsity: sparsity_mean(results),
        gen_time_s: gen_time_mean(results),
    }
}

/// Mean and sample standard deviation over defined values; the deviation is
/// undefined below two values.
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let mean = mean_of(values.iter().copied());
    let std = match (mean, values.len()) {
        (Some(m), n) if n >= 2 => {
            Some((values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt())
        }
        _ => None,
    };
    (mean, std)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub repetitions: usize,
    pub validity: MetricAggregate,
    pub proximity: MetricAggregate,
    pub sparsity: MetricAggregate,
    pub gen_time_s: MetricAggregate,
}

/// Per-repetition summaries folded into mean ± sample std.
pub fn aggregate(results: &[CfResult]) -> Aggregate {
    let mut reps: Vec<usize> = results.iter().map(|r| r.repetition).collect();
    reps.sort_unstable();
    reps.dedup();
    let summaries: Vec<Summary> = reps
        .iter()
        .map(|&rep| {
            let subset: Vec<CfResult> = results
                .iter()
                .filter(|r| r.repetition == rep)
                .cloned()
                .collect();
            summarize(&subset)
        })
        .collect();
    let fold = |pick: &dyn Fn(&Summary) -> Option<f64>| {
        let values: Vec<f64> = summaries.iter().filter_map(pick).collect();
        let (mean, std) = mean_std(&values);
        MetricAggregate { mean, std }
    };
    Aggregate {
        repetitions: reps.len(),
        validity: fold(&|s| Some(s.validity)),
        proximity: fold(&|s| s.proximity),
        sparsity: fold(&|s| s.sparsity),
        gen_time_s: fold(&|s| s.gen_time_s),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Fully resolved run configuration.
    pub config: serde_json::Value,
    pub results: Vec<CfResult>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    pub fn new(config: serde_json::Value, results: Vec<CfResult>) -> Self {
        let aggregate = aggregate(&results);
        MetricsReport {
            config,
            results,
            aggregate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const CSV_COLUMNS: [&str; 5] = [
    "instance_id",
    "valid",
    "proximity",
    "sparsity",
    "gen_time_s",
];

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_report(
    report: &MetricsReport,
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<()> {
    let path = path.as_ref();
    match format {
        ReportFormat::Json => {
            std::fs::write(path, serde_json::to_string_pretty(report)?)?;
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
            w.write_record(CSV_COLUMNS).map_err(csv_error)?;
            for r in &report.results {
                w.write_record([
                    r.instance_id.clone(),
                    if r.valid { "1".into() } else { "0".into() },
                    cell(r.proximity),
                    r.sparsity.map(|s| s.to_string()).unwrap_or_default(),
                    r.gen_time_s.to_string(),
                ])
                .map_err(csv_error)?;
            }
            let a = &report.aggregate;
            for (label, pick) in [
                (
                    "mean",
                    (|m: &MetricAggregate| m.mean) as fn(&MetricAggregate) -> Option<f64>,
                ),
                ("std", |m: &MetricAggregate| m.std),
            ] {
                w.write_record([
                    label.to_string(),
                    cell(pick(&a.validity)),
                    cell(pick(&a.proximity)),
                    cell(pick(&a.sparsity)),
                    cell(pick(&a.gen_time_s)),
                ])
                .map_err(csv_error)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// One instance row of a CSV report.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub instance_id: String,
    pub valid: bool,
    pub proximity: Option<f64>,
    pub sparsity: Option<usize>,
    pub gen_time_s: f64,
}

impl CsvRow {
    /// Repetition index from an `"{rep}-{idx}"` id, 0 otherwise.
    pub fn repetition(&self) -> usize {
        self.instance_id
            .split_once('-')
            .and_then(|(r, _)| r.parse().ok())
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvReport {
    pub rows: Vec<CsvRow>,
    pub mean: [Option<f64>; 4],
    pub std: [Option<f64>; 4],
}

impl CsvReport {
    /// Rebuilds the metric-bearing part of each result for re-aggregation.
    pub fn to_results(&self) -> Vec<CfResult> {
        self.rows
            .iter()
            .map(|r| CfResult {
                instance_id: r.instance_id.clone(),
                repetition: r.repetition(),
                original: Vec::new(),
                counterfactual: r.valid.then(Vec::new),
                final_state: Vec::new(),
                valid: r.valid,
                proximity: r.proximity,
                proximity_raw: None,
                sparsity: r.sparsity,
                gen_time_s: r.gen_time_s,
            })
            .collect()
    }
}

fn parse_opt<T: std::str::FromStr>(
    s: &str,
    row: usize,
    column: &str,
    path: &Path,
) -> Result<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        row,
        column: column.into(),
        message: format!("cannot parse '{s}'"),
    })
}

pub fn read_report_csv(path: impl AsRef<Path>) -> Result<CsvReport> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let header: Vec<String> = r
        .headers()
        .map_err(csv_error)?
        .iter()
        .map(String::from)
        .collect();
    if header != CSV_COLUMNS {
        for c in CSV_COLUMNS {
            if !header.iter().any(|h| h == c) {
                return Err(Error::MissingColumn(c.into()));
            }
        }
        return Err(Error::Format(format!(
            "unexpected report columns {header:?}"
        )));
    }
    let mut out = CsvReport {
        rows: Vec::new(),
        mean: [None; 4],
        std: [None; 4],
    };
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let row = i + 1;
        let footer = |out: &mut [Option<f64>; 4]| -> Result<()> {
            for (j, slot) in out.iter_mut().enumerate() {
                *slot = parse_opt(&rec[j + 1], row, CSV_COLUMNS[j + 1], path)?;
            }
            Ok(())
        };
        match &rec[0] {
            "mean" => footer(&mut out.mean)?,
            "std" => footer(&mut out.std)?,
            id => {
                let valid = match &rec[1] {
                    "1" => true,
                    "0" => false,
                    other => {
                        return Err(Error::Parse {
                            path: path.to_path_buf(),
                            row,
                            column: "valid".into(),
                            message: format!("expected 0 or 1, got '{other}'"),
                        })
                    }
                };
                out.rows.push(CsvRow {
                    instance_id: id.to_string(),
                    valid,
                    proximity: parse_opt(&rec[2], row, "proximity", path)?,
                    sparsity: parse_opt(&rec[3], row, "sparsity", path)?,
                    gen_time_s: parse_opt(&rec[4], row, "gen_time_s", path)?.unwrap_or(0.0),
                });
            }
        }
    }
    Ok(out)
}

pub fn read_report_json(path: impl AsRef<Path>) -> Result<MetricsReport> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Ranks with ties given their average rank (1-based).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation as the Pearson correlation of average ranks; zero
/// when either side has no variance.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs paired samples");
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub validity: f64,
    pub sparsity: Option<f64>,
    pub proximity: Option<f64>,
}

/// Runs `pipeline` once per grid value, in grid order.
pub fn sweep<F>(grid: &[f64], mut pipeline: F) -> Result<Vec<(SweepRow, MetricsReport)>>
where
    F: FnMut(f64) -> Result<MetricsReport>,
{
    grid.iter()
        .map(|&value| {
            let report = pipeline(value)?;
            let a = &report.aggregate;
            let row = SweepRow {
                value,
                validity: a.validity.mean.unwrap_or(0.0),
                sparsity: a.sparsity.mean,
                proximity: a.proximity.mean,
            };
            Ok((row, report))
        })
        .collect()
}

/// Spearman correlations of validity and sparsity against the grid value.
/// Points without a defined sparsity are left out of the sparsity correlation.
pub fn sweep_trends(rows: &[SweepRow]) -> (f64, f64) {
    let x: Vec<f64> = rows.iter().map(|r| r.value).collect();
    let v: Vec<f64> = rows.iter().map(|r| r.validity).collect();
    let (sx, ss): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter_map(|r| r.sparsity.map(|s| (r.value, s)))
        .unzip();
    let sparsity = if sx.len() >= 2 {
        spearman(&sx, &ss)
    } else {
        0.0
    };
    (spearman(&x, &v), sparsity)
}

pub fn write_sweep_summary(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(["value", "validity", "sparsity", "proximity"])
        .map_err(csv_error)?;
    for r in rows {
        w.write_record([
            r.value.to_string(),
            r.validity.to_string(),
            cell(r.sparsity),
            cell(r.proximity),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
