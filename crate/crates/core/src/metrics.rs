//! Confusion matrices over alert levels and the scores derived from them.

use std::ops::Index;

use serde::Serialize;

use crate::dataset::AlertLevel;
use crate::error::{Error, Result};
use crate::window::{Decision, Window};

/// 3x3 counts, `cells[truth][predicted]`, indexed NoAction/Cautious/Spray.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    cells: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn from_cells(cells: [[u64; 3]; 3]) -> Self {
        Self { cells }
    }

    pub fn cells(&self) -> &[[u64; 3]; 3] {
        &self.cells
    }

    pub fn add(&mut self, truth: AlertLevel, pred: AlertLevel) {
        self.cells[truth.index()][pred.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..3).map(|k| self.cells[k][k]).sum()
    }

    pub fn row_sums(&self) -> [u64; 3] {
        self.cells.map(|row| row.iter().sum())
    }

    pub fn col_sums(&self) -> [u64; 3] {
        let mut p = [0; 3];
        for row in &self.cells {
            for (k, v) in row.iter().enumerate() {
                p[k] += v;
            }
        }
        p
    }

    /// Predictions of spray whose truth is not spray.
    pub fn false_alarms(&self) -> u64 {
        let s = AlertLevel::Spray.index();
        (0..3).filter(|&t| t != s).map(|t| self.cells[t][s]).sum()
    }
}

impl Index<(AlertLevel, AlertLevel)> for ConfusionMatrix {
    type Output = u64;

    fn index(&self, (truth, pred): (AlertLevel, AlertLevel)) -> &u64 {
        &self.cells[truth.index()][pred.index()]
    }
}

pub fn confusion(pairs: &[(AlertLevel, AlertLevel)]) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::default();
    for &(t, p) in pairs {
        m.add(t, p);
    }
    m
}

/// Multiclass Matthews correlation coefficient (Gorodkin's R_K).
///
/// `(c*s - sum t_k p_k) / sqrt((s^2 - sum p_k^2) (s^2 - sum t_k^2))` with
/// trace `c`, total `s`, row sums `t` and column sums `p`. A zero
/// denominator yields 0.
pub fn mcc(m: &ConfusionMatrix) -> Result<f64> {
    let s = m.total() as i128;
    if s == 0 {
        return Err(Error::Empty("confusion matrix has no entries"));
    }
    let c = m.trace() as i128;
    let t = m.row_sums().map(|x| x as i128);
    let p = m.col_sums().map(|x| x as i128);
    let tp: i128 = t.iter().zip(&p).map(|(a, b)| a * b).sum();
    let pp: i128 = p.iter().map(|x| x * x).sum();
    let tt: i128 = t.iter().map(|x| x * x).sum();

    let num = c * s - tp;
    let den = ((s * s - pp) as f64) * ((s * s - tt) as f64);
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((num as f64 / den.sqrt()).clamp(-1.0, 1.0))
}

/// Fraction of correct predictions; 0 for an empty matrix.
pub fn accuracy(m: &ConfusionMatrix) -> f64 {
    match m.total() {
        0 => 0.0,
        s => m.trace() as f64 / s as f64,
    }
}

pub fn abstention_fraction(decisions: &[Decision]) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::Empty("no decisions"));
    }
    let n = decisions.iter().filter(|d| d.is_abstain()).count();
    Ok(n as f64 / decisions.len() as f64)
}

/// Erroneous spray predictions over all pairs.
pub fn false_alarm_fraction(pairs: &[(AlertLevel, AlertLevel)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("no prediction pairs"));
    }
    let n = pairs
        .iter()
        .filter(|(t, p)| *p == AlertLevel::Spray && *t != AlertLevel::Spray)
        .count();
    Ok(n as f64 / pairs.len() as f64)
}

/// Scores of one stage at one window over an evaluation set.
///
/// MCC, accuracy and false alarms are computed over the accepted images;
/// abstention over the whole set. With nothing accepted they are all 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub mcc: f64,
    pub accuracy: f64,
    pub abstention_fraction: f64,
    pub false_alarm_fraction: f64,
    pub n_evaluated: usize,
    pub n_abstained: usize,
    pub confusion: ConfusionMatrix,
}

pub const REPORT_CSV_HEADER: [&str; 8] = [
    "window_lower",
    "window_upper",
    "mcc",
    "accuracy",
    "abstention_fraction",
    "false_alarm_fraction",
    "n_evaluated",
    "n_abstained",
];

impl MetricReport {
    /// `truths` and `decisions` are aligned image by image.
    pub fn from_decisions(truths: &[AlertLevel], decisions: &[Decision]) -> Self {
        assert_eq!(
            truths.len(),
            decisions.len(),
            "truths and decisions must align"
        );
        let mut confusion = ConfusionMatrix::default();
        let mut n_abstained = 0;
        for (&t, d) in truths.iter().zip(decisions) {
            match d {
                Decision::Accept(p) => confusion.add(t, *p),
                Decision::Abstain => n_abstained += 1,
            }
        }
        let n_evaluated = confusion.total() as usize;
        let total = truths.len();
        Self {
            mcc: if n_evaluated == 0 {
                0.0
            } else {
                mcc(&confusion).expect("non-empty")
            },
            accuracy: accuracy(&confusion),
            abstention_fraction: if total == 0 {
                0.0
            } else {
                n_abstained as f64 / total as f64
            },
            false_alarm_fraction: if n_evaluated == 0 {
                0.0
            } else {
                confusion.false_alarms() as f64 / n_evaluated as f64
            },
            n_evaluated,
            n_abstained,
            confusion,
        }
    }

    pub fn correct(&self) -> u64 {
        self.confusion.trace()
    }

    pub fn csv_record(&self, window: &Window) -> [String; 8] {
        [
            window.lower().to_string(),
            window.upper().to_string(),
            self.mcc.to_string(),
            self.accuracy.to_string(),
            self.abstention_fraction.to_string(),
            self.false_alarm_fraction.to_string(),
            self.n_evaluated.to_string(),
            self.n_abstained.to_string(),
        ]
    }
}
