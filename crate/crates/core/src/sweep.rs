//! Threshold grids and per-stage candidate sweeps.
//!
//! A [`Candidate`] is one stage evaluated at one window over an evaluation
//! scope (the whole dataset, or a subset when conditioned on an upstream
//! stage). Sweeps evaluate windows in parallel but always return them in grid
//! order, so output never depends on the worker count.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::Arc;

use num_rational::Ratio;
use rayon::prelude::*;

use crate::dataset::{AlertLevel, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, REPORT_CSV_HEADER};
use crate::window::{Decision, StageIndex, Window};

/// Exact abstention fraction `n_abstained / scope size`.
pub type Fraction = Ratio<u64>;

/// Thresholds are snapped to this many decimals so that `0.05 * 3` prints as `0.15`.
const THRESHOLD_DECIMALS: i32 = 12;

fn snap(x: f64) -> f64 {
    let scale = 10f64.powi(THRESHOLD_DECIMALS);
    (x * scale).round() / scale
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub step: f64,
    pub min: f64,
    pub max: f64,
    thresholds: Vec<f64>,
    windows: Vec<Window>,
}

impl Grid {
    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// All `lower <= upper` pairs, lexicographic in `(lower, upper)`.
    pub fn windows(&self) -> &[Window] {
        &self.windows
    }
}

/// The sweep used for the published-style heatmaps: step 0.05 over [0, 0.95].
pub fn default_grid() -> Grid {
    make_grid(0.05, 0.0, 0.95).expect("valid default grid")
}

pub fn make_grid(step: f64, min: f64, max: f64) -> Result<Grid> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidGrid(format!("step {step} must be positive")));
    }
    if !(0.0 <= min && min <= max && max < 1.0) {
        return Err(Error::InvalidGrid(format!(
            "need 0 <= min <= max < 1, got [{min}, {max}]"
        )));
    }
    let n = ((max - min) / step + 1e-9).floor() as usize + 1;
    let thresholds: Vec<f64> = (0..n).map(|i| snap(min + i as f64 * step)).collect();
    let mut windows = Vec::with_capacity(n * (n + 1) / 2);
    for (i, &lo) in thresholds.iter().enumerate() {
        for &hi in &thresholds[i..] {
            windows.push(Window::new(lo, hi)?);
        }
    }
    Ok(Grid {
        step,
        min,
        max,
        thresholds,
        windows,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub stage: String,
    pub window: Window,
    /// Record indices (ascending) this candidate was evaluated on.
    pub scope: Arc<[usize]>,
    /// Aligned with `scope`.
    pub decisions: Vec<Decision>,
    pub report: MetricReport,
}

impl Candidate {
    /// Evaluates `stage` at `window` on the records in `scope`.
    pub fn evaluate(
        index: &StageIndex,
        truths: &[AlertLevel],
        stage: &str,
        window: Window,
        scope: Arc<[usize]>,
    ) -> Self {
        let decisions: Vec<Decision> = scope.iter().map(|&i| index.decide(i, &window)).collect();
        let scoped_truths: Vec<AlertLevel> = scope.iter().map(|&i| truths[i]).collect();
        let report = MetricReport::from_decisions(&scoped_truths, &decisions);
        Self {
            stage: stage.to_string(),
            window,
            scope,
            decisions,
            report,
        }
    }

    pub fn abstention(&self) -> Fraction {
        if self.scope.is_empty() {
            return Fraction::from_integer(0);
        }
        Fraction::new(self.report.n_abstained as u64, self.scope.len() as u64)
    }

    /// Record indices the candidate abstained on.
    pub fn abstained(&self) -> Vec<usize> {
        self.scope
            .iter()
            .zip(&self.decisions)
            .filter(|(_, d)| d.is_abstain())
            .map(|(&i, _)| i)
            .collect()
    }

    /// Record indices the candidate predicted on (its inclusion set).
    pub fn included(&self) -> Vec<usize> {
        self.scope
            .iter()
            .zip(&self.decisions)
            .filter(|(_, d)| !d.is_abstain())
            .map(|(&i, _)| i)
            .collect()
    }

    /// Decision for a record index, if it lies in scope.
    pub fn decision_for(&self, record: usize) -> Option<Decision> {
        self.scope
            .binary_search(&record)
            .ok()
            .map(|pos| self.decisions[pos])
    }

    /// Rebuilds the report from the stored decisions.
    pub fn recompute_report(&self, dataset: &Dataset) -> MetricReport {
        let truths: Vec<AlertLevel> = self
            .scope
            .iter()
            .map(|&i| dataset.records()[i].truth_alert())
            .collect();
        MetricReport::from_decisions(&truths, &self.decisions)
    }
}

pub fn full_scope(dataset: &Dataset) -> Arc<[usize]> {
    (0..dataset.len()).collect()
}

/// One candidate per grid window over the whole dataset.
pub fn sweep_stage(dataset: &Dataset, stage: &str, grid: &Grid) -> Result<Vec<Candidate>> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset has no records"));
    }
    let index = StageIndex::build(dataset, stage)?;
    Ok(sweep_scope(
        &index,
        &dataset.truth_alerts(),
        stage,
        grid,
        full_scope(dataset),
    ))
}

/// Sweep over a prebuilt index and an explicit scope.
pub fn sweep_scope(
    index: &StageIndex,
    truths: &[AlertLevel],
    stage: &str,
    grid: &Grid,
    scope: Arc<[usize]>,
) -> Vec<Candidate> {
    grid.windows
        .par_iter()
        .map(|&w| Candidate::evaluate(index, truths, stage, w, Arc::clone(&scope)))
        .collect()
}

/// Highest-MCC candidate per exact abstention fraction; ties go to the
/// lexicographically smallest window.
pub fn group_best_by_abstention(candidates: &[Candidate]) -> BTreeMap<Fraction, &Candidate> {
    let mut best: BTreeMap<Fraction, &Candidate> = BTreeMap::new();
    for c in candidates {
        best.entry(c.abstention())
            .and_modify(|cur| {
                let better = c.report.mcc > cur.report.mcc
                    || (c.report.mcc == cur.report.mcc && c.window.cmp_lex(&cur.window).is_lt());
                if better {
                    *cur = c;
                }
            })
            .or_insert(c);
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Mcc,
    Accuracy,
    AbstentionFraction,
    FalseAlarmFraction,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Mcc,
        Metric::AbstentionFraction,
        Metric::FalseAlarmFraction,
        Metric::Accuracy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mcc => "mcc",
            Metric::Accuracy => "accuracy",
            Metric::AbstentionFraction => "abstention_fraction",
            Metric::FalseAlarmFraction => "false_alarm_fraction",
        }
    }

    pub fn of(self, report: &MetricReport) -> f64 {
        match self {
            Metric::Mcc => report.mcc,
            Metric::Accuracy => report.accuracy,
            Metric::AbstentionFraction => report.abstention_fraction,
            Metric::FalseAlarmFraction => report.false_alarm_fraction,
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMetric(s.to_string()))
    }
}

fn csv_string(write: impl FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>) -> String {
    let mut buf = Vec::new();
    {
        let mut w = csv::WriterBuilder::new()
            .flexible(false)
            .from_writer(&mut buf);
        write(&mut w).expect("in-memory csv write");
        w.flush().expect("in-memory csv flush");
    }
    String::from_utf8(buf).expect("csv output is utf-8")
}

/// Heatmap by metric name.
pub fn export_heatmap(candidates: &[Candidate], metric: &str) -> Result<String> {
    Ok(heatmap_csv(candidates, metric.parse()?))
}

/// Rows are lower thresholds, columns upper thresholds; cells with
/// `lower > upper` (or no candidate) are empty.
pub fn heatmap_csv(candidates: &[Candidate], metric: Metric) -> String {
    let mut axis: Vec<f64> = candidates
        .iter()
        .flat_map(|c| [c.window.lower(), c.window.upper()])
        .collect();
    axis.sort_by(f64::total_cmp);
    axis.dedup();

    let mut cells: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let pos = |x: f64| {
        axis.binary_search_by(|a| a.total_cmp(&x))
            .expect("axis holds every bound")
    };
    for c in candidates {
        cells
            .entry((pos(c.window.lower()), pos(c.window.upper())))
            .or_insert_with(|| metric.of(&c.report));
    }

    csv_string(|w| {
        let mut header = vec![format!("lower\\upper:{}", metric.name())];
        header.extend(axis.iter().map(f64::to_string));
        w.write_record(&header)?;
        for (r, lo) in axis.iter().enumerate() {
            let mut row = vec![lo.to_string()];
            row.extend(
                (0..axis.len()).map(|c| cells.get(&(r, c)).map(f64::to_string).unwrap_or_default()),
            );
            w.write_record(&row)?;
        }
        Ok(())
    })
}

/// One row per candidate. `flag` is `no_accepted` when the stage abstained
/// on its whole scope (MCC then reads 0).
pub fn export_candidates(candidates: &[Candidate]) -> String {
    csv_string(|w| {
        let mut header = vec!["stage"];
        header.extend(REPORT_CSV_HEADER);
        header.extend(["scope_size", "flag"]);
        w.write_record(&header)?;
        for c in candidates {
            let mut row = vec![c.stage.clone()];
            row.extend(c.report.csv_record(&c.window));
            row.push(c.scope.len().to_string());
            row.push(if c.report.n_evaluated == 0 {
                "no_accepted".into()
            } else {
                String::new()
            });
            w.write_record(&row)?;
        }
        Ok(())
    })
}
