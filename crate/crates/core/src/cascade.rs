//! Phone -> cloud -> human evaluation.
//!
//! A cloud candidate is *conditioned* on a phone candidate when it is
//! evaluated only on the images the phone abstained on. Whatever the cloud
//! also abstains on goes to a human reviewer, whose answer is taken as the
//! ground truth. The combined prediction therefore covers every image.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{AlertLevel, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionMatrix};
use crate::sweep::{self, Candidate, Fraction, Grid};
use crate::window::{Decision, StageIndex, Window};
use crate::{CLOUD, PHONE};

/// Which stage produced an image's final alert.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Phone,
    Cloud,
    Human,
}

/// Cloud candidates conditioned on one phone candidate.
#[derive(Clone, Debug)]
pub struct ConditionedSweep {
    pub candidates: Vec<Candidate>,
    /// Set when the phone abstained on nothing, so there was nothing to evaluate.
    pub empty_conditioning: bool,
}

fn check_phone_scope(dataset: &Dataset, phone: &Candidate) -> Result<()> {
    if phone.scope.len() != dataset.len() {
        return Err(Error::InvalidConfig(format!(
            "phone candidate covers {} of {} records; it must be evaluated on the whole dataset",
            phone.scope.len(),
            dataset.len()
        )));
    }
    Ok(())
}

pub fn conditioned_cloud_candidates(
    dataset: &Dataset,
    phone: &Candidate,
    grid: &Grid,
) -> Result<ConditionedSweep> {
    check_phone_scope(dataset, phone)?;
    let index = StageIndex::build(dataset, CLOUD)?;
    Ok(conditioned_sweep(
        &index,
        &dataset.truth_alerts(),
        phone,
        grid,
    ))
}

fn conditioned_sweep(
    index: &StageIndex,
    truths: &[AlertLevel],
    phone: &Candidate,
    grid: &Grid,
) -> ConditionedSweep {
    let subset: Arc<[usize]> = phone.abstained().into();
    if subset.is_empty() {
        return ConditionedSweep {
            candidates: Vec::new(),
            empty_conditioning: true,
        };
    }
    ConditionedSweep {
        candidates: sweep::sweep_scope(index, truths, CLOUD, grid, subset),
        empty_conditioning: false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CombinedResult {
    pub phone_window: Window,
    /// `None` when no cloud candidate was supplied: the cloud then abstains on everything.
    pub cloud_window: Option<Window>,
    /// Over the whole dataset.
    pub phone_abstention: Fraction,
    /// Over the phone-abstained subset; 0 when that subset is empty.
    pub cloud_abstention: Fraction,
    pub confusion: ConfusionMatrix,
    pub mcc: f64,
    pub n_phone_accepted: usize,
    pub n_cloud_accepted: usize,
    pub n_human: usize,
    /// Per record, in dataset order.
    pub routes: Vec<Route>,
    pub predictions: Vec<AlertLevel>,
}

impl CombinedResult {
    pub fn correct(&self) -> u64 {
        self.confusion.trace()
    }

    pub fn false_alarms(&self) -> u64 {
        self.confusion.false_alarms()
    }
}

/// Runs every image through phone, then cloud, then human.
///
/// `cloud` must be conditioned on `phone` (scope equal to the phone's
/// abstained set). Passing `None` stands for a cloud stage that abstains on
/// every image it sees.
pub fn combined_evaluate(
    dataset: &Dataset,
    phone: &Candidate,
    cloud: Option<&Candidate>,
) -> Result<CombinedResult> {
    check_phone_scope(dataset, phone)?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset has no records"));
    }
    let abstained = phone.abstained();
    if let Some(c) = cloud {
        if c.scope[..] != abstained[..] {
            return Err(Error::NotConditioned);
        }
    }

    let n = dataset.len();
    let mut confusion = ConfusionMatrix::default();
    let mut routes = Vec::with_capacity(n);
    let mut predictions = Vec::with_capacity(n);
    let mut cloud_pos = 0;
    for (i, record) in dataset.records().iter().enumerate() {
        let truth = record.truth_alert();
        let (route, pred) = match phone.decisions[i] {
            Decision::Accept(a) => (Route::Phone, a),
            Decision::Abstain => {
                let d = cloud.map_or(Decision::Abstain, |c| c.decisions[cloud_pos]);
                cloud_pos += 1;
                match d {
                    Decision::Accept(a) => (Route::Cloud, a),
                    Decision::Abstain => (Route::Human, truth),
                }
            }
        };
        confusion.add(truth, pred);
        routes.push(route);
        predictions.push(pred);
    }

    let count = |r: Route| routes.iter().filter(|&&x| x == r).count();
    let (n_phone_accepted, n_cloud_accepted, n_human) = (
        count(Route::Phone),
        count(Route::Cloud),
        count(Route::Human),
    );
    let cloud_abstention = match (cloud, abstained.len()) {
        (_, 0) => Fraction::from_integer(0),
        (Some(c), _) => c.abstention(),
        (None, _) => Fraction::from_integer(1),
    };

    Ok(CombinedResult {
        phone_window: phone.window,
        cloud_window: cloud.map(|c| c.window),
        phone_abstention: phone.abstention(),
        cloud_abstention,
        mcc: metrics::mcc(&confusion)?,
        confusion,
        n_phone_accepted,
        n_cloud_accepted,
        n_human,
        routes,
        predictions,
    })
}

/// One cell of the combined-performance grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CascadeCell {
    /// Phone abstention, bucketed.
    pub x: f64,
    /// Conditioned cloud abstention, bucketed.
    pub y: f64,
    /// Combined MCC.
    pub value: f64,
    pub phone_abstention: Fraction,
    pub cloud_abstention: Fraction,
    pub phone_window: Window,
    pub cloud_window: Option<Window>,
}

fn bucket_index(f: Fraction, bucket: f64) -> u64 {
    let x = *f.numer() as f64 / *f.denom() as f64;
    (x / bucket + 1e-9).round() as u64
}

fn bucket_value(idx: u64, bucket: f64) -> f64 {
    let v = (idx as f64 * bucket).min(1.0);
    (v * 1e12).round() / 1e12
}

fn check_bucket(bucket: f64) -> Result<()> {
    if !(bucket > 0.0 && bucket <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "bucket {bucket} must be in (0, 1]"
        )));
    }
    Ok(())
}

/// Combined MCC over phone and conditioned-cloud abstention levels.
///
/// Phone candidates are grouped by abstention fraction (best MCC per
/// group); for each group winner the cloud is swept on the phone-abstained
/// images and grouped the same way. Cells are keyed by bucketed fractions,
/// keeping the highest combined MCC on collisions. A phone candidate that
/// abstains on nothing contributes a single cell at cloud abstention 0.
pub fn combined_grid(
    dataset: &Dataset,
    phone_grid: &Grid,
    cloud_grid: &Grid,
    bucket: f64,
) -> Result<Vec<CascadeCell>> {
    check_bucket(bucket)?;
    if phone_grid.windows().is_empty() || cloud_grid.windows().is_empty() {
        return Err(Error::InvalidGrid("empty grid".into()));
    }
    dataset.require_stage(CLOUD)?;
    let phones = sweep::sweep_stage(dataset, PHONE, phone_grid)?;
    let best_phone: Vec<&Candidate> = sweep::group_best_by_abstention(&phones)
        .into_values()
        .collect();
    let cloud_index = StageIndex::build(dataset, CLOUD)?;
    let truths = dataset.truth_alerts();

    let per_phone: Vec<Vec<CascadeCell>> = best_phone
        .par_iter()
        .map(|phone| -> Result<Vec<CascadeCell>> {
            let cond = conditioned_sweep(&cloud_index, &truths, phone, cloud_grid);
            let clouds: Vec<Option<&Candidate>> = if cond.empty_conditioning {
                vec![None]
            } else {
                sweep::group_best_by_abstention(&cond.candidates)
                    .into_values()
                    .map(Some)
                    .collect()
            };
            clouds
                .into_iter()
                .map(|cloud| {
                    let r = combined_evaluate(dataset, phone, cloud)?;
                    Ok(CascadeCell {
                        x: 0.0,
                        y: 0.0,
                        value: r.mcc,
                        phone_abstention: r.phone_abstention,
                        cloud_abstention: r.cloud_abstention,
                        phone_window: r.phone_window,
                        cloud_window: r.cloud_window,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut cells: BTreeMap<(u64, u64), CascadeCell> = BTreeMap::new();
    for mut cell in per_phone.into_iter().flatten() {
        let key = (
            bucket_index(cell.phone_abstention, bucket),
            bucket_index(cell.cloud_abstention, bucket),
        );
        cell.x = bucket_value(key.0, bucket);
        cell.y = bucket_value(key.1, bucket);
        match cells.get(&key) {
            Some(existing) if existing.value >= cell.value => {}
            _ => {
                cells.insert(key, cell);
            }
        }
    }
    Ok(cells.into_values().collect())
}

// ---------------------------------------------------------------------------
// False-alarm comparison

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Family {
    #[serde(rename = "phone-only")]
    PhoneOnly,
    #[serde(rename = "cloud-only")]
    CloudOnly,
    #[serde(rename = "combined")]
    Combined,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::PhoneOnly => "phone-only",
            Family::CloudOnly => "cloud-only",
            Family::Combined => "combined",
        }
    }
}

/// Evaluation set for the combined family's false-alarm fraction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CombinedInclusion {
    /// Every image, abstentions filled downstream (human answers count as correct).
    #[default]
    DownstreamFilled,
    /// Only images a model answered (phone- or cloud-accepted); human-routed images are left out.
    MachineAnswered,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub abstention_fraction: f64,
    pub exact_abstention: Fraction,
    pub fa_raw: f64,
    pub fa_smoothed: f64,
    pub phone_window: Window,
    pub cloud_window: Option<Window>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonCurve {
    pub family: Family,
    /// Sorted by abstention fraction.
    pub points: Vec<CurvePoint>,
    pub smooth_width: f64,
}

impl ComparisonCurve {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Mean smoothed FA over points with abstention strictly below `limit`.
    pub fn mean_smoothed_below(&self, limit: f64) -> Option<f64> {
        let v: Vec<f64> = self
            .points
            .iter()
            .filter(|p| p.abstention_fraction < limit)
            .map(|p| p.fa_smoothed)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Centered sliding median: each point takes the median of all raw values
/// whose abstention lies within `width / 2` of its own.
pub fn median_smooth(xs: &[f64], ys: &[f64], width: f64) -> Vec<f64> {
    assert_eq!(xs.len(), ys.len());
    let half = width / 2.0 + 1e-12;
    xs.iter()
        .map(|&x| {
            let mut window: Vec<f64> = xs
                .iter()
                .zip(ys)
                .filter(|(&xj, _)| (xj - x).abs() <= half)
                .map(|(_, &y)| y)
                .collect();
            median(&mut window)
        })
        .collect()
}

fn frac_f64(f: Fraction) -> f64 {
    *f.numer() as f64 / *f.denom() as f64
}

/// Lowest FA wins; ties go to the smaller cloud window.
fn better(fa: f64, window: Option<Window>, best: &Option<(f64, Option<Window>)>) -> bool {
    match best {
        None => true,
        Some((bfa, bw)) => {
            fa < *bfa
                || (fa == *bfa
                    && match (window, bw) {
                        (Some(w), Some(b)) => w.cmp_lex(b).is_lt(),
                        _ => false,
                    })
        }
    }
}

/// False-alarm curves for phone-only, cloud-only and combined deployments.
///
/// Phone candidates are grouped by abstention fraction (best MCC per group).
/// At each group winner:
/// - phone-only: FA over the phone's inclusion set;
/// - cloud-only: the cloud evaluated on that same inclusion set, restricted
///   to windows that answer every image in it (identical inclusion set);
///   highest MCC wins, then lowest FA;
/// - combined: phone, then conditioned cloud, then human. The pool is the
///   combined-grid model set (best-MCC conditioned cloud per conditioned
///   abstention fraction) and the lowest FA among it is taken.
///
/// Points with an empty evaluation set are omitted.
pub fn comparison_curves(
    dataset: &Dataset,
    phone_grid: &Grid,
    cloud_grid: &Grid,
    smooth_width: f64,
    inclusion: CombinedInclusion,
) -> Result<Vec<ComparisonCurve>> {
    if !(smooth_width > 0.0 && smooth_width.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "smooth width {smooth_width} must be positive"
        )));
    }
    dataset.require_stage(CLOUD)?;
    let phones = sweep::sweep_stage(dataset, PHONE, phone_grid)?;
    let best_phone: Vec<&Candidate> = sweep::group_best_by_abstention(&phones)
        .into_values()
        .collect();
    let cloud_index = StageIndex::build(dataset, CLOUD)?;
    let truths = dataset.truth_alerts();

    type Point = (Family, Fraction, f64, Window, Option<Window>);
    let per_phone: Vec<Vec<Point>> = best_phone
        .par_iter()
        .map(|phone| -> Result<Vec<Point>> {
            let f = phone.abstention();
            let mut out = Vec::new();
            let included: Arc<[usize]> = phone.included().into();

            if !included.is_empty() {
                out.push((
                    Family::PhoneOnly,
                    f,
                    phone.report.false_alarm_fraction,
                    phone.window,
                    None,
                ));

                let mut best: Option<Candidate> = None;
                for &w in cloud_grid.windows() {
                    let c =
                        Candidate::evaluate(&cloud_index, &truths, CLOUD, w, Arc::clone(&included));
                    if c.report.n_abstained != 0 {
                        continue;
                    }
                    let wins = best.as_ref().is_none_or(|b| {
                        let (m, bm) = (c.report.mcc, b.report.mcc);
                        m > bm
                            || (m == bm
                                && better(
                                    c.report.false_alarm_fraction,
                                    Some(w),
                                    &Some((b.report.false_alarm_fraction, Some(b.window))),
                                ))
                    });
                    if wins {
                        best = Some(c);
                    }
                }
                if let Some(c) = best {
                    out.push((
                        Family::CloudOnly,
                        f,
                        c.report.false_alarm_fraction,
                        phone.window,
                        Some(c.window),
                    ));
                }
            }

            let cond = conditioned_sweep(&cloud_index, &truths, phone, cloud_grid);
            let clouds: Vec<Option<&Candidate>> = if cond.empty_conditioning {
                vec![None]
            } else {
                sweep::group_best_by_abstention(&cond.candidates)
                    .into_values()
                    .map(Some)
                    .collect()
            };
            let mut best: Option<(f64, Option<Window>)> = None;
            for cloud in clouds {
                let r = combined_evaluate(dataset, phone, cloud)?;
                let denom = match inclusion {
                    CombinedInclusion::DownstreamFilled => dataset.len(),
                    CombinedInclusion::MachineAnswered => r.n_phone_accepted + r.n_cloud_accepted,
                };
                if denom == 0 {
                    continue;
                }
                let fa = r.false_alarms() as f64 / denom as f64;
                if better(fa, r.cloud_window, &best) {
                    best = Some((fa, r.cloud_window));
                }
            }
            if let Some((fa, w)) = best {
                out.push((Family::Combined, f, fa, phone.window, w));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut by_family: BTreeMap<Family, Vec<Point>> =
        [Family::PhoneOnly, Family::CloudOnly, Family::Combined]
            .into_iter()
            .map(|f| (f, Vec::new()))
            .collect();
    for p in per_phone.into_iter().flatten() {
        by_family
            .get_mut(&p.0)
            .expect("all families present")
            .push(p);
    }

    Ok(by_family
        .into_iter()
        .map(|(family, raw)| {
            let xs: Vec<f64> = raw.iter().map(|p| frac_f64(p.1)).collect();
            let ys: Vec<f64> = raw.iter().map(|p| p.2).collect();
            let smoothed = median_smooth(&xs, &ys, smooth_width);
            let points = raw
                .into_iter()
                .zip(smoothed)
                .map(
                    |((_, exact, fa_raw, phone_window, cloud_window), fa_smoothed)| CurvePoint {
                        abstention_fraction: frac_f64(exact),
                        exact_abstention: exact,
                        fa_raw,
                        fa_smoothed,
                        phone_window,
                        cloud_window,
                    },
                )
                .collect();
            ComparisonCurve {
                family,
                points,
                smooth_width,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Export

fn csv_string(write: impl FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>) -> String {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        write(&mut w).expect("in-memory csv write");
        w.flush().expect("in-memory csv flush");
    }
    String::from_utf8(buf).expect("csv output is utf-8")
}

fn keep_best(cells: &[CascadeCell]) -> BTreeMap<(u64, u64), &CascadeCell> {
    let mut out: BTreeMap<(u64, u64), &CascadeCell> = BTreeMap::new();
    for c in cells {
        let key = (c.x.to_bits(), c.y.to_bits());
        match out.get(&key) {
            Some(e) if e.value >= c.value => {}
            _ => {
                out.insert(key, c);
            }
        }
    }
    out
}

/// Matrix layout: one row per cloud-abstention bucket, one column per
/// phone-abstention bucket, cells hold combined MCC.
pub fn export_grid(cells: &[CascadeCell]) -> String {
    let best = keep_best(cells);
    let mut xs: Vec<f64> = best.values().map(|c| c.x).collect();
    let mut ys: Vec<f64> = best.values().map(|c| c.y).collect();
    for v in [&mut xs, &mut ys] {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    csv_string(|w| {
        let mut header = vec!["cloud\\phone".to_string()];
        header.extend(xs.iter().map(f64::to_string));
        w.write_record(&header)?;
        for &y in &ys {
            let mut row = vec![y.to_string()];
            row.extend(xs.iter().map(|&x| {
                best.get(&(x.to_bits(), y.to_bits()))
                    .map(|c| c.value.to_string())
                    .unwrap_or_default()
            }));
            w.write_record(&row)?;
        }
        Ok(())
    })
}

fn window_cols(w: Option<Window>) -> [String; 2] {
    match w {
        Some(w) => [w.lower().to_string(), w.upper().to_string()],
        None => [String::new(), String::new()],
    }
}

/// Long format, one row per bucket, with the exact fractions and windows behind it.
pub fn export_cells(cells: &[CascadeCell]) -> String {
    let best = keep_best(cells);
    csv_string(|w| {
        w.write_record([
            "phone_bucket",
            "cloud_bucket",
            "mcc",
            "phone_abstention",
            "cloud_abstention",
            "phone_lower",
            "phone_upper",
            "cloud_lower",
            "cloud_upper",
        ])?;
        for c in best.values() {
            let [pl, pu] = window_cols(Some(c.phone_window));
            let [cl, cu] = window_cols(c.cloud_window);
            w.write_record([
                c.x.to_string(),
                c.y.to_string(),
                c.value.to_string(),
                c.phone_abstention.to_string(),
                c.cloud_abstention.to_string(),
                pl,
                pu,
                cl,
                cu,
            ])?;
        }
        Ok(())
    })
}

pub fn export_curves(curves: &[ComparisonCurve]) -> String {
    csv_string(|w| {
        w.write_record(["family", "abstention_fraction", "fa_raw", "fa_smoothed"])?;
        for curve in curves {
            for p in &curve.points {
                w.write_record([
                    curve.family.name().to_string(),
                    p.abstention_fraction.to_string(),
                    p.fa_raw.to_string(),
                    p.fa_smoothed.to_string(),
                ])?;
            }
        }
        Ok(())
    })
}
