//! Box-confidence windowing.
//!
//! A window `(lower, upper)` splits an image's boxes into two nested sets:
//! boxes with confidence strictly greater than `lower` (cardinality `l`) and
//! strictly greater than `upper` (cardinality `u`). If `l` and `u` map to the
//! same alert the stage answers with it; otherwise it abstains.

use std::fmt;

use serde::Serialize;

use crate::dataset::{AlertLevel, Dataset};
use crate::error::{Error, Result};

/// Highest count still mapped to [`AlertLevel::Cautious`].
pub const CAUTIOUS_MAX: usize = 7;

/// 0 pests: no action; 1 to 7: cautious; 8 or more: spray.
pub fn alert_of_count(count: usize) -> AlertLevel {
    match count {
        0 => AlertLevel::NoAction,
        1..=CAUTIOUS_MAX => AlertLevel::Cautious,
        _ => AlertLevel::Spray,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Window {
    lower: f64,
    upper: f64,
}

impl Window {
    /// Requires `0 <= lower <= upper < 1`. Inverted windows are an error, never swapped.
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&lower) || !(0.0..1.0).contains(&upper) || lower > upper {
            return Err(Error::InvalidWindow { lower, upper });
        }
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    /// Lexicographic `(lower, upper)` ordering.
    pub fn cmp_lex(&self, other: &Window) -> std::cmp::Ordering {
        self.lower
            .total_cmp(&other.lower)
            .then(self.upper.total_cmp(&other.upper))
    }

    /// True if `self` contains `inner`: `lower <= inner.lower` and `upper >= inner.upper`.
    pub fn contains(&self, inner: &Window) -> bool {
        self.lower <= inner.lower && self.upper >= inner.upper
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lower, self.upper)
    }
}

/// Cardinalities of the two nested box sets. Always `u <= l`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Partition {
    pub l: usize,
    pub u: usize,
}

impl Partition {
    pub fn decision(&self) -> Decision {
        let (a, b) = (alert_of_count(self.l), alert_of_count(self.u));
        if a == b {
            Decision::Accept(a)
        } else {
            Decision::Abstain
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Decision {
    Accept(AlertLevel),
    Abstain,
}

impl Decision {
    pub fn is_abstain(&self) -> bool {
        matches!(self, Decision::Abstain)
    }

    pub fn accepted(&self) -> Option<AlertLevel> {
        match self {
            Decision::Accept(a) => Some(*a),
            Decision::Abstain => None,
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Accept(a) => a.fmt(f),
            Decision::Abstain => f.write_str("abstain"),
        }
    }
}

pub fn partition(confidences: &[f64], window: &Window) -> Partition {
    let l = confidences.iter().filter(|&&c| c > window.lower).count();
    let u = confidences.iter().filter(|&&c| c > window.upper).count();
    Partition { l, u }
}

pub fn decide(confidences: &[f64], window: &Window) -> Decision {
    partition(confidences, window).decision()
}

/// Per-image outcome with the cardinalities kept for diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostic {
    pub image_id: String,
    pub partition: Partition,
    pub decision: Decision,
}

/// One decision per record, in dataset order.
pub fn predict_stage(
    dataset: &Dataset,
    stage: &str,
    window: &Window,
) -> Result<Vec<(String, Decision)>> {
    Ok(diagnose_stage(dataset, stage, window)?
        .into_iter()
        .map(|d| (d.image_id, d.decision))
        .collect())
}

pub fn diagnose_stage(dataset: &Dataset, stage: &str, window: &Window) -> Result<Vec<Diagnostic>> {
    dataset
        .records()
        .iter()
        .map(|r| {
            let boxes = r.stage(stage)?;
            let confs: Vec<f64> = boxes.iter().map(|b| b.confidence).collect();
            let partition = partition(&confs, window);
            Ok(Diagnostic {
                image_id: r.image_id.clone(),
                partition,
                decision: partition.decision(),
            })
        })
        .collect()
}

/// Sorted per-image confidences of one stage, for repeated window queries.
///
/// Each lookup is a binary search instead of a scan, which matters when a
/// sweep evaluates hundreds of windows over the same records.
#[derive(Clone, Debug)]
pub struct StageIndex {
    sorted: Vec<Vec<f64>>,
}

impl StageIndex {
    pub fn build(dataset: &Dataset, stage: &str) -> Result<Self> {
        let sorted = dataset
            .records()
            .iter()
            .map(|r| {
                let mut c = r.confidences(stage)?;
                c.sort_by(f64::total_cmp);
                Ok(c)
            })
            .collect::<Result<_>>()?;
        Ok(Self { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn partition(&self, record: usize, window: &Window) -> Partition {
        let c = &self.sorted[record];
        let above = |t: f64| c.len() - c.partition_point(|&x| x <= t);
        Partition {
            l: above(window.lower),
            u: above(window.upper),
        }
    }

    pub fn decide(&self, record: usize, window: &Window) -> Decision {
        self.partition(record, window).decision()
    }
}
