//! Confusion matrices, accuracy breakdowns, anomaly-fraction stratification
//! and throughput measurement.

use std::io::Write;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::flags::FlagSet;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("reference has {reference} labels but prediction has {predicted}")]
    LengthMismatch { reference: usize, predicted: usize },
    #[error("benchmark needs {needed} observations, corpus has {available}")]
    CorpusTooSmall { needed: usize, available: usize },
    #[error("cutoff {0} outside (0, 1)")]
    BadCutoff(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Counts of agreement with anomaly as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tp: u64,
}

fn pct(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

impl ConfusionMatrix {
    pub fn new(tn: u64, fp: u64, fn_: u64, tp: u64) -> Self {
        ConfusionMatrix { tn, fp, fn_, tp }
    }

    pub fn total(&self) -> u64 {
        self.tn + self.fp + self.fn_ + self.tp
    }

    /// Reference-good samples left unflagged.
    pub fn correct_class_pct(&self) -> Option<f64> {
        pct(self.tn, self.tn + self.fp)
    }

    /// Reference-good samples flagged as anomalous.
    pub fn correct_misflagged_pct(&self) -> Option<f64> {
        pct(self.fp, self.tn + self.fp)
    }

    /// Reference anomalies that were flagged (recall).
    pub fn anomaly_class_pct(&self) -> Option<f64> {
        pct(self.tp, self.tp + self.fn_)
    }

    pub fn anomaly_missed_pct(&self) -> Option<f64> {
        pct(self.fn_, self.tp + self.fn_)
    }

    pub fn overall_pct(&self) -> Option<f64> {
        pct(self.tn + self.tp, self.total())
    }

    pub fn overall_error_pct(&self) -> Option<f64> {
        pct(self.fp + self.fn_, self.total())
    }

    pub fn precision_pct(&self) -> Option<f64> {
        pct(self.tp, self.tp + self.fp)
    }

    /// Recall as a fraction; 0 when the reference holds no anomalies.
    pub fn recall(&self) -> f64 {
        self.anomaly_class_pct().unwrap_or(0.0) / 100.0
    }

    /// Precision as a fraction; 0 when nothing was flagged.
    pub fn precision(&self) -> f64 {
        self.precision_pct().unwrap_or(0.0) / 100.0
    }

    pub fn merge(&self, o: &ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix::new(self.tn + o.tn, self.fp + o.fp, self.fn_ + o.fn_, self.tp + o.tp)
    }

    /// The matrix seen with the two classes swapped.
    pub fn swapped(&self) -> ConfusionMatrix {
        ConfusionMatrix::new(self.tp, self.fn_, self.fp, self.tn)
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ConfusionMatrix::default(), |a, b| a.merge(&b))
    }
}

/// A matrix plus the number of samples left out for lack of a reference or
/// prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Scored {
    pub matrix: ConfusionMatrix,
    pub excluded: u64,
}

pub fn confusion(reference: &[Option<bool>], predicted: &[Option<bool>]) -> Result<Scored, EvalError> {
    if reference.len() != predicted.len() {
        return Err(EvalError::LengthMismatch { reference: reference.len(), predicted: predicted.len() });
    }
    let mut s = Scored::default();
    for (r, p) in reference.iter().zip(predicted) {
        match (r, p) {
            (Some(false), Some(false)) => s.matrix.tn += 1,
            (Some(false), Some(true)) => s.matrix.fp += 1,
            (Some(true), Some(false)) => s.matrix.fn_ += 1,
            (Some(true), Some(true)) => s.matrix.tp += 1,
            _ => s.excluded += 1,
        }
    }
    Ok(s)
}

/// Binary view of rule output: any code other than G is an anomaly and
/// missing readings are unscored.
pub fn rule_predictions(flags: &[FlagSet]) -> Vec<Option<bool>> {
    flags.iter().map(|f| f.as_anomaly()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteReport {
    pub site_id: String,
    /// Share of scored readings that the reference marks anomalous.
    pub anomaly_fraction: f64,
    pub matrix: ConfusionMatrix,
    pub excluded: u64,
}

impl SiteReport {
    pub fn new(site_id: impl Into<String>, reference: &[Option<bool>], predicted: &[Option<bool>]) -> Result<Self, EvalError> {
        let s = confusion(reference, predicted)?;
        Ok(Self::from_matrix(site_id, s.matrix, s.excluded))
    }

    pub fn from_matrix(site_id: impl Into<String>, matrix: ConfusionMatrix, excluded: u64) -> Self {
        let pos = matrix.tp + matrix.fn_;
        let total = matrix.total();
        SiteReport {
            site_id: site_id.into(),
            anomaly_fraction: if total == 0 { 0.0 } else { pos as f64 / total as f64 },
            matrix,
            excluded,
        }
    }

    pub fn correct_flagged_pct(&self) -> Option<f64> {
        self.matrix.correct_class_pct()
    }

    pub fn anomaly_flagged_pct(&self) -> Option<f64> {
        self.matrix.anomaly_class_pct()
    }
}

pub const DEFAULT_CUTOFF: f64 = 0.30;

#[derive(Debug, Clone, PartialEq)]
pub struct Strata {
    pub low: Vec<String>,
    pub high: Vec<String>,
    pub low_total: ConfusionMatrix,
    pub high_total: ConfusionMatrix,
}

/// Sites with `anomaly_fraction > cutoff` form the high group.
pub fn stratify_by_anomaly_fraction(reports: &[SiteReport], cutoff: f64) -> Result<Strata, EvalError> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(EvalError::BadCutoff(cutoff));
    }
    let mut s = Strata { low: vec![], high: vec![], low_total: Default::default(), high_total: Default::default() };
    for r in reports {
        if r.anomaly_fraction > cutoff {
            s.high.push(r.site_id.clone());
            s.high_total = s.high_total.merge(&r.matrix);
        } else {
            s.low.push(r.site_id.clone());
            s.low_total = s.low_total.merge(&r.matrix);
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Benchmark {
    pub observations: usize,
    /// Median wall time of the timed runs.
    pub wall: Duration,
    pub per_second: f64,
}

pub const TIMED_RUNS: usize = 3;

/// Runs `runner` once untimed, then [`TIMED_RUNS`] times, and reports the
/// median.
pub fn benchmark<F: FnMut()>(available: usize, observations: usize, mut runner: F) -> Result<Benchmark, EvalError> {
    if available < observations || observations == 0 {
        return Err(EvalError::CorpusTooSmall { needed: observations.max(1), available });
    }
    runner();
    let mut times: Vec<Duration> = (0..TIMED_RUNS)
        .map(|_| {
            let t = Instant::now();
            runner();
            t.elapsed()
        })
        .collect();
    times.sort();
    let wall = times[TIMED_RUNS / 2];
    let secs = wall.as_secs_f64().max(1e-9);
    Ok(Benchmark { observations, wall, per_second: observations as f64 / secs })
}

fn fmt_pct(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into())
}

/// Accuracy breakdown of several named matrices as an aligned text table.
pub fn write_table<W: Write>(mut w: W, rows: &[(String, ConfusionMatrix)]) -> Result<(), EvalError> {
    writeln!(
        w,
        "{:<24} {:>10} {:>10} {:>10} {:>10} {:>9} {:>9} {:>9} {:>9}",
        "source", "tn", "fp", "fn", "tp", "correct%", "anomaly%", "overall%", "prec%"
    )?;
    for (name, m) in rows {
        writeln!(
            w,
            "{:<24} {:>10} {:>10} {:>10} {:>10} {:>9} {:>9} {:>9} {:>9}",
            name,
            m.tn,
            m.fp,
            m.fn_,
            m.tp,
            fmt_pct(m.correct_class_pct()),
            fmt_pct(m.anomaly_class_pct()),
            fmt_pct(m.overall_pct()),
            fmt_pct(m.precision_pct()),
        )?;
    }
    Ok(())
}

/// The same breakdown as CSV.
pub fn write_table_csv<W: Write>(w: W, rows: &[(String, ConfusionMatrix)]) -> Result<(), EvalError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "source", "tn", "fp", "fn", "tp", "correct_pct", "correct_misflagged_pct", "anomaly_pct", "anomaly_missed_pct",
        "overall_pct", "overall_error_pct", "precision_pct",
    ])?;
    for (name, m) in rows {
        wtr.write_record([
            name.clone(),
            m.tn.to_string(),
            m.fp.to_string(),
            m.fn_.to_string(),
            m.tp.to_string(),
            fmt_pct(m.correct_class_pct()),
            fmt_pct(m.correct_misflagged_pct()),
            fmt_pct(m.anomaly_class_pct()),
            fmt_pct(m.anomaly_missed_pct()),
            fmt_pct(m.overall_pct()),
            fmt_pct(m.overall_error_pct()),
            fmt_pct(m.precision_pct()),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Per-site CSV for charting recall against anomaly fraction.
pub fn write_site_plot_csv<W: Write>(w: W, rule: &[SiteReport], model: &[SiteReport]) -> Result<(), EvalError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["site", "anomaly_fraction", "recall_rule", "recall_model"])?;
    for r in rule {
        let m = model.iter().find(|m| m.site_id == r.site_id);
        let rec = |x: Option<f64>| x.map(|v| format!("{:.4}", v / 100.0)).unwrap_or_default();
        wtr.write_record([
            r.site_id.clone(),
            format!("{:.4}", r.anomaly_fraction),
            rec(r.anomaly_flagged_pct()),
            rec(m.and_then(|m| m.anomaly_flagged_pct())),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// One row per site: counts and derived percentages.
pub fn write_site_csv<W: Write>(w: W, reports: &[SiteReport]) -> Result<(), EvalError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["site", "anomaly_fraction", "tn", "fp", "fn", "tp", "excluded", "correct_flagged_pct", "anomaly_flagged_pct"])?;
    for r in reports {
        let m = r.matrix;
        wtr.write_record([
            r.site_id.clone(),
            format!("{:.4}", r.anomaly_fraction),
            m.tn.to_string(),
            m.fp.to_string(),
            m.fn_.to_string(),
            m.tp.to_string(),
            r.excluded.to_string(),
            fmt_pct(r.correct_flagged_pct()),
            fmt_pct(r.anomaly_flagged_pct()),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
