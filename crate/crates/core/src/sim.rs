//! Discrete-event simulation of a deployed phone -> cloud -> human cascade.
//!
//! Images arrive as a Poisson stream. The phone answers after a constant
//! delay; abstained images wait for a cloud round trip drawn from a
//! lognormal mixture (connectivity is bimodal in the field); images the
//! cloud also abstains on join a FIFO queue served by human reviewers who
//! only start reviews inside a daily shift window.
//!
//! The latency model is read from a TOML key/value file:
//!
//! ```toml
//! phone_seconds = 0.5
//! arrivals_per_day = 500.0
//!
//! [[cloud]]
//! weight = 0.45
//! log_mean = 8.5
//! log_sigma = 1.0
//!
//! [[cloud]]
//! weight = 0.55
//! log_mean = 10.68
//! log_sigma = 0.08
//!
//! [human]
//! reviewers = 2
//! shift_start_hour = 9.0
//! shift_hours = 8.0
//! review = { kind = "lognormal", log_mean = 5.2, log_sigma = 0.5 }
//! ```

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::cascade::{combined_evaluate, Route};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::sweep::Candidate;

pub const HOUR: f64 = 3600.0;
pub const DAY: f64 = 24.0 * HOUR;
/// Histogram bin used for mode estimates.
pub const MODE_BIN_SECONDS: f64 = 0.5 * HOUR;

/// One lognormal component of the cloud delay mixture (parameters of ln seconds).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LognormalComponent {
    pub weight: f64,
    pub log_mean: f64,
    pub log_sigma: f64,
}

impl LognormalComponent {
    pub fn mean(&self) -> f64 {
        (self.log_mean + self.log_sigma * self.log_sigma / 2.0).exp()
    }

    pub fn mode(&self) -> f64 {
        (self.log_mean - self.log_sigma * self.log_sigma).exp()
    }

    fn pdf(&self, x: f64) -> f64 {
        let z = (x.ln() - self.log_mean) / self.log_sigma;
        (-0.5 * z * z).exp() / (x * self.log_sigma * (2.0 * PI).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReviewTime {
    /// Zero means instantaneous review.
    Constant {
        seconds: f64,
    },
    Lognormal {
        log_mean: f64,
        log_sigma: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanModel {
    pub reviewers: u32,
    pub review: ReviewTime,
    /// Hour of day (0..24) at which reviewers start.
    pub shift_start_hour: f64,
    /// Length of the daily shift; 24 means around the clock.
    pub shift_hours: f64,
}

impl Default for HumanModel {
    fn default() -> Self {
        Self {
            reviewers: 2,
            // median three minutes per image
            review: ReviewTime::Lognormal {
                log_mean: (180f64).ln(),
                log_sigma: 0.5,
            },
            shift_start_hour: 9.0,
            shift_hours: 8.0,
        }
    }
}

impl HumanModel {
    fn is_open(&self, t: f64) -> bool {
        if self.shift_hours >= 24.0 {
            return true;
        }
        let since_start = (t - self.shift_start_hour * HOUR).rem_euclid(DAY);
        since_start < self.shift_hours * HOUR || DAY - since_start < 1e-6
    }

    fn next_open(&self, t: f64) -> f64 {
        let delta = (self.shift_start_hour * HOUR - t).rem_euclid(DAY);
        t + delta
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub phone_seconds: f64,
    pub cloud: Vec<LognormalComponent>,
    #[serde(default)]
    pub human: HumanModel,
    /// Mean image arrival rate.
    pub arrivals_per_day: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            phone_seconds: 0.5,
            cloud: fit_cloud_defaults(DEFAULT_CLOUD_MEAN, DEFAULT_CLOUD_MODE)
                .expect("default targets are feasible"),
            human: HumanModel::default(),
            arrivals_per_day: 500.0,
        }
    }
}

/// Field-reported cloud response: mean about seven hours, mode about twelve.
pub const DEFAULT_CLOUD_MEAN: f64 = 7.0 * HOUR;
pub const DEFAULT_CLOUD_MODE: f64 = 12.0 * HOUR;

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

impl LatencyModel {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let model: Self = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("latency model serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.phone_seconds) {
            return Err(invalid("phone_seconds must be positive"));
        }
        if !positive(self.arrivals_per_day) {
            return Err(invalid("arrivals_per_day must be positive"));
        }
        if self.cloud.is_empty() {
            return Err(invalid("cloud mixture needs at least one component"));
        }
        for c in &self.cloud {
            if !(c.weight >= 0.0 && c.weight <= 1.0)
                || !c.log_mean.is_finite()
                || !positive(c.log_sigma)
            {
                return Err(invalid(format!("bad cloud component {c:?}")));
            }
        }
        let total: f64 = self.cloud.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("cloud weights sum to {total}, expected 1")));
        }
        let h = &self.human;
        match h.review {
            ReviewTime::Constant { seconds } if !(seconds >= 0.0 && seconds.is_finite()) => {
                return Err(invalid("review seconds must be >= 0"));
            }
            ReviewTime::Lognormal {
                log_mean,
                log_sigma,
            } if !log_mean.is_finite() || !positive(log_sigma) => {
                return Err(invalid(
                    "review lognormal needs finite log_mean and positive log_sigma",
                ));
            }
            _ => {}
        }
        if !(0.0..24.0).contains(&h.shift_start_hour) {
            return Err(invalid("shift_start_hour must be in [0, 24)"));
        }
        if !(h.shift_hours > 0.0 && h.shift_hours <= 24.0) {
            return Err(invalid("shift_hours must be in (0, 24]"));
        }
        Ok(())
    }

    /// Analytic mean of the cloud mixture.
    pub fn cloud_mean(&self) -> f64 {
        self.cloud.iter().map(|c| c.weight * c.mean()).sum()
    }
}

/// Samples from a lognormal mixture.
pub struct CloudDelay {
    cumulative: Vec<f64>,
    parts: Vec<LogNormal<f64>>,
}

impl CloudDelay {
    pub fn new(components: &[LognormalComponent]) -> Result<Self> {
        let mut acc = 0.0;
        let mut cumulative = Vec::with_capacity(components.len());
        let mut parts = Vec::with_capacity(components.len());
        for c in components {
            acc += c.weight;
            cumulative.push(acc);
            parts
                .push(LogNormal::new(c.log_mean, c.log_sigma).map_err(|e| invalid(e.to_string()))?);
        }
        if parts.is_empty() {
            return Err(invalid("empty mixture"));
        }
        Ok(Self { cumulative, parts })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random::<f64>() * self.cumulative.last().copied().unwrap_or(1.0);
        let k = self
            .cumulative
            .partition_point(|&c| c <= u)
            .min(self.parts.len() - 1);
        self.parts[k].sample(rng)
    }
}

/// `n` seeded draws from a cloud mixture.
pub fn sample_cloud_delays(
    components: &[LognormalComponent],
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let delay = CloudDelay::new(components)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| delay.sample(&mut rng)).collect())
}

/// Center of the fullest `bin`-wide histogram bin starting at 0 (first bin on ties).
pub fn histogram_mode(samples: &[f64], bin: f64) -> Option<f64> {
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if samples.is_empty() || !max.is_finite() {
        return None;
    }
    let mut counts = vec![0usize; (max / bin) as usize + 1];
    for &s in samples {
        counts[(s / bin) as usize] += 1;
    }
    let (k, _) = counts.iter().enumerate().fold(
        (0, 0),
        |best, (k, &c)| if c > best.1 { (k, c) } else { best },
    );
    Some((k as f64 + 0.5) * bin)
}

const SINGLE_SIGMA: f64 = 0.01;
const SLOW_SIGMAS: [f64; 3] = [0.06, 0.08, 0.12];
const FAST_MEDIAN_FACTORS: [f64; 5] = [0.5, 0.35, 0.25, 0.15, 0.1];
const FAST_SIGMAS: [f64; 4] = [0.75, 1.0, 1.25, 1.5];
/// Slow-lobe peak density must beat everything left of 0.7 * mode by this factor.
const MODE_MARGIN: f64 = 1.25;

/// Fits a cloud delay mixture with the given mean and mode (seconds).
///
/// `mode <= mean` is met by a single lognormal. `mode > mean` is impossible
/// for one right-skewed lognormal and needs two components: a fast one for
/// well-connected users and a tight delayed-sync one centered on the mode,
/// with the weight solved so the mixture mean is exact. Among the fast
/// shapes tried, the one whose density peak most clearly sits at the mode
/// is kept.
pub fn fit_cloud_defaults(target_mean: f64, target_mode: f64) -> Result<Vec<LognormalComponent>> {
    if !(target_mean > 0.0 && target_mean.is_finite()) {
        return Err(Error::Infeasible(format!(
            "target mean {target_mean} must be positive"
        )));
    }
    if !(target_mode > 0.0 && target_mode.is_finite()) {
        return Err(Error::Infeasible(format!(
            "target mode {target_mode} must be positive"
        )));
    }

    if (target_mode - target_mean).abs() <= 1e-9 * target_mean {
        return Ok(vec![LognormalComponent {
            weight: 1.0,
            log_mean: target_mean.ln() - SINGLE_SIGMA * SINGLE_SIGMA / 2.0,
            log_sigma: SINGLE_SIGMA,
        }]);
    }
    if target_mode < target_mean {
        // mean / mode = exp(1.5 sigma^2)
        let var = (target_mean / target_mode).ln() / 1.5;
        return Ok(vec![LognormalComponent {
            weight: 1.0,
            log_mean: target_mode.ln() + var,
            log_sigma: var.sqrt(),
        }]);
    }

    let mut best: Option<(f64, Vec<LognormalComponent>)> = None;
    for &s_sigma in &SLOW_SIGMAS {
        let slow_shape = LognormalComponent {
            weight: 1.0,
            log_mean: target_mode.ln() + s_sigma * s_sigma,
            log_sigma: s_sigma,
        };
        for &factor in &FAST_MEDIAN_FACTORS {
            for &f_sigma in &FAST_SIGMAS {
                let fast_shape = LognormalComponent {
                    weight: 1.0,
                    log_mean: (factor * target_mean).ln(),
                    log_sigma: f_sigma,
                };
                let (mf, ms) = (fast_shape.mean(), slow_shape.mean());
                if !(mf < target_mean && target_mean < ms) {
                    continue;
                }
                let w = (ms - target_mean) / (ms - mf);
                let fast = LognormalComponent {
                    weight: w,
                    ..fast_shape
                };
                let slow = LognormalComponent {
                    weight: 1.0 - w,
                    ..slow_shape
                };
                let density = |x: f64| fast.weight * fast.pdf(x) + slow.weight * slow.pdf(x);
                let peak = density(target_mode);
                let rival = (1..=700)
                    .map(|k| density(target_mode * k as f64 / 1000.0))
                    .fold(0.0, f64::max);
                let margin = peak / rival;
                if margin >= MODE_MARGIN && best.as_ref().is_none_or(|(m, _)| margin > *m) {
                    best = Some((margin, vec![fast, slow]));
                }
            }
        }
    }
    best.map(|(_, c)| c).ok_or_else(|| {
        Error::Infeasible(format!(
            "no two-component mixture puts the mode at {target_mode}s with mean {target_mean}s"
        ))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencySummary {
    pub mean: f64,
    pub median: f64,
    /// Center of the fullest half-hour bin.
    pub mode: f64,
    pub p95: f64,
}

impl LatencySummary {
    pub fn of(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Some(Self {
            mean: sorted.iter().sum::<f64>() / n as f64,
            median,
            mode: histogram_mode(&sorted, MODE_BIN_SECONDS).expect("non-empty"),
            p95: sorted[rank - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Workload {
    pub entered: usize,
    pub left: usize,
    pub final_depth: usize,
    pub max_depth: usize,
    /// Completed reviews per simulated day, from day 0 to the last completion.
    pub reviews_per_day: Vec<u64>,
    /// `(time, depth)` after every queue change.
    pub queue_depth: Vec<(f64, usize)>,
}

/// Per-image latency split into its parts (seconds).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LatencyParts {
    pub arrival: f64,
    pub phone: f64,
    pub cloud: Option<f64>,
    pub queue_wait: Option<f64>,
    pub review: Option<f64>,
}

impl LatencyParts {
    pub fn total(&self) -> f64 {
        self.phone
            + self.cloud.unwrap_or(0.0)
            + self.queue_wait.unwrap_or(0.0)
            + self.review.unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimReport {
    /// End-to-end latency per image, dataset order.
    pub latencies: Vec<f64>,
    pub parts: Vec<LatencyParts>,
    pub routes: Vec<Route>,
    pub summary: LatencySummary,
    pub workload: Workload,
}

#[derive(Clone, Copy, Debug)]
enum Event {
    Arrive(usize),
    PhoneDone(usize),
    CloudDone(usize),
    ReviewDone,
    ShiftOpens,
}

struct Scheduled {
    time: f64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // reversed: BinaryHeap pops the earliest event first
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

struct Sim<'m> {
    model: &'m LatencyModel,
    rng: ChaCha8Rng,
    cloud: CloudDelay,
    heap: BinaryHeap<Scheduled>,
    seq: u64,
    queue: VecDeque<(usize, f64)>,
    idle: u32,
    wake_pending: bool,
    parts: Vec<LatencyParts>,
    workload: Workload,
}

impl Sim<'_> {
    fn push(&mut self, time: f64, event: Event) {
        self.seq += 1;
        self.heap.push(Scheduled {
            time,
            seq: self.seq,
            event,
        });
    }

    fn review_time(&mut self) -> f64 {
        match self.model.human.review {
            ReviewTime::Constant { seconds } => seconds,
            ReviewTime::Lognormal {
                log_mean,
                log_sigma,
            } => LogNormal::new(log_mean, log_sigma)
                .expect("validated")
                .sample(&mut self.rng),
        }
    }

    fn record_depth(&mut self, t: f64) {
        let d = self.queue.len();
        self.workload.max_depth = self.workload.max_depth.max(d);
        self.workload.queue_depth.push((t, d));
    }

    fn try_start(&mut self, t: f64, forced_open: bool) {
        if self.queue.is_empty() || self.idle == 0 {
            return;
        }
        if !(forced_open || self.model.human.is_open(t)) {
            if !self.wake_pending {
                self.wake_pending = true;
                let at = self.model.human.next_open(t);
                self.push(at, Event::ShiftOpens);
            }
            return;
        }
        while self.idle > 0 {
            let Some((i, ready)) = self.queue.pop_front() else {
                break;
            };
            self.idle -= 1;
            self.record_depth(t);
            let r = self.review_time();
            self.parts[i].queue_wait = Some(t - ready);
            self.parts[i].review = Some(r);
            self.push(t + r, Event::ReviewDone);
        }
    }
}

/// Simulates the deployment of a phone/cloud candidate pair over `dataset`.
///
/// `cloud` must be conditioned on `phone`; `None` sends every phone
/// abstention through the cloud (a delay is still drawn) to human review.
/// Reviews start only within the shift window and then run to completion.
pub fn simulate(
    dataset: &Dataset,
    phone: &Candidate,
    cloud: Option<&Candidate>,
    model: &LatencyModel,
    seed: u64,
) -> Result<SimReport> {
    model.validate()?;
    let routes = combined_evaluate(dataset, phone, cloud)?.routes;
    if model.human.reviewers == 0 && routes.contains(&Route::Human) {
        return Err(invalid(
            "no reviewers configured but some images need human review",
        ));
    }

    let n = dataset.len();
    let mut sim = Sim {
        model,
        rng: ChaCha8Rng::seed_from_u64(seed),
        cloud: CloudDelay::new(&model.cloud)?,
        heap: BinaryHeap::new(),
        seq: 0,
        queue: VecDeque::new(),
        idle: model.human.reviewers,
        wake_pending: false,
        parts: vec![
            LatencyParts {
                arrival: 0.0,
                phone: model.phone_seconds,
                cloud: None,
                queue_wait: None,
                review: None,
            };
            n
        ],
        workload: Workload {
            entered: 0,
            left: 0,
            final_depth: 0,
            max_depth: 0,
            reviews_per_day: Vec::new(),
            queue_depth: Vec::new(),
        },
    };

    let gap = Exp::new(model.arrivals_per_day / DAY).map_err(|e| invalid(e.to_string()))?;
    let mut t = 0.0;
    for i in 0..n {
        if i > 0 {
            t += gap.sample(&mut sim.rng);
        }
        sim.parts[i].arrival = t;
        sim.push(t, Event::Arrive(i));
    }

    while let Some(Scheduled { time, event, .. }) = sim.heap.pop() {
        match event {
            Event::Arrive(i) => sim.push(time + model.phone_seconds, Event::PhoneDone(i)),
            Event::PhoneDone(i) => {
                if routes[i] != Route::Phone {
                    let d = sim.cloud.sample(&mut sim.rng);
                    sim.parts[i].cloud = Some(d);
                    sim.push(time + d, Event::CloudDone(i));
                }
            }
            Event::CloudDone(i) => {
                if routes[i] == Route::Human {
                    sim.queue.push_back((i, time));
                    sim.workload.entered += 1;
                    sim.record_depth(time);
                    sim.try_start(time, false);
                }
            }
            Event::ReviewDone => {
                sim.workload.left += 1;
                sim.idle += 1;
                let day = (time / DAY) as usize;
                if sim.workload.reviews_per_day.len() <= day {
                    sim.workload.reviews_per_day.resize(day + 1, 0);
                }
                sim.workload.reviews_per_day[day] += 1;
                sim.try_start(time, false);
            }
            Event::ShiftOpens => {
                sim.wake_pending = false;
                sim.try_start(time, true);
            }
        }
    }
    sim.workload.final_depth = sim.queue.len();

    let latencies: Vec<f64> = sim.parts.iter().map(LatencyParts::total).collect();
    let summary = LatencySummary::of(&latencies).ok_or(Error::Empty("dataset has no records"))?;
    Ok(SimReport {
        latencies,
        parts: sim.parts,
        routes,
        summary,
        workload: sim.workload,
    })
}
