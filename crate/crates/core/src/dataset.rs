//! Per-image detection records: ingest, validation, persistence and a
//! seeded synthetic generator.
//!
//! Records are stored one JSON object per line:
//!
//! ```text
//! {"meta": {"source": "bollworm-val", "version": "20220912-2056"}}
//! {"image_id": "img-0001", "truth_count": 3, "stages": {"phone": [{"c": 0.91, "k": "pink"}], "cloud": []}}
//! ```
//!
//! The optional `meta` line must come first. Ground truth is kept as a pest
//! count; alerts are always derived through [`crate::window::alert_of_count`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Poisson};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::window::alert_of_count;
use crate::PHONE;

/// Three-valued recommendation, ordered by severity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertLevel {
    NoAction = 0,
    Cautious = 1,
    Spray = 2,
}

impl AlertLevel {
    pub const ALL: [AlertLevel; 3] = [
        AlertLevel::NoAction,
        AlertLevel::Cautious,
        AlertLevel::Spray,
    ];

    /// Row/column index in a confusion matrix.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AlertLevel::NoAction => "no_action",
            AlertLevel::Cautious => "cautious",
            AlertLevel::Spray => "spray",
        }
    }
}

impl fmt::Display for AlertLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    #[serde(rename = "c")]
    pub confidence: f64,
    #[serde(rename = "k", default, skip_serializing_if = "Option::is_none")]
    pub class_tag: Option<String>,
}

impl DetectionBox {
    pub fn new(confidence: f64) -> Self {
        Self {
            confidence,
            class_tag: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub truth_count: u32,
    #[serde(rename = "stages")]
    pub stage_detections: BTreeMap<String, Vec<DetectionBox>>,
}

impl ImageRecord {
    pub fn truth_alert(&self) -> AlertLevel {
        truth_alert(self)
    }

    pub fn stage(&self, stage: &str) -> Result<&[DetectionBox]> {
        self.stage_detections
            .get(stage)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingStage {
                image_id: self.image_id.clone(),
                stage: stage.to_string(),
            })
    }

    /// Confidences of one stage, in stored order.
    pub fn confidences(&self, stage: &str) -> Result<Vec<f64>> {
        Ok(self.stage(stage)?.iter().map(|b| b.confidence).collect())
    }
}

/// Ground-truth alert of a record.
pub fn truth_alert(record: &ImageRecord) -> AlertLevel {
    alert_of_count(record.truth_count as usize)
}

/// An ordered, validated collection of records. Immutable once built.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    records: Vec<ImageRecord>,
    pub metadata: BTreeMap<String, Value>,
}

impl Dataset {
    /// Builds a dataset, sorting by `image_id` and rejecting duplicates.
    pub fn new(mut records: Vec<ImageRecord>, metadata: BTreeMap<String, Value>) -> Result<Self> {
        records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        if let Some(pair) = records.windows(2).find(|w| w[0].image_id == w[1].image_id) {
            return Err(Error::DuplicateId(pair[0].image_id.clone()));
        }
        Ok(Self { records, metadata })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn truth_alerts(&self) -> Vec<AlertLevel> {
        self.records.iter().map(truth_alert).collect()
    }

    /// Errors on the first record lacking `stage`.
    pub fn require_stage(&self, stage: &str) -> Result<()> {
        for r in &self.records {
            r.stage(stage)?;
        }
        Ok(())
    }

    pub fn stage_names(&self) -> BTreeSet<&str> {
        self.records
            .iter()
            .flat_map(|r| r.stage_detections.keys().map(String::as_str))
            .collect()
    }

    /// Serializes to the line-delimited record format.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        if !self.metadata.is_empty() {
            let header = serde_json::json!({ "meta": self.metadata });
            serde_json::to_writer(&mut out, &header)?;
            out.write_all(b"\n")?;
        }
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Deserialize)]
struct RawRecord {
    image_id: Option<String>,
    truth_count: Option<i64>,
    stages: Option<BTreeMap<String, Vec<DetectionBox>>>,
}

/// Reads a dataset file. With `strict`, confidences must lie in the open
/// interval (0, 1); otherwise the closed interval is tolerated.
pub fn load_dataset(path: &Path, strict: bool) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(file), strict).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_dataset<R: BufRead>(reader: R, strict: bool) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut metadata = BTreeMap::new();
    let mut seen_content = false;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<input>", e))?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let first = !seen_content;
        seen_content = true;

        if let Some(meta) = value.get("meta") {
            if !first {
                return Err(Error::Malformed {
                    line: line_no,
                    message: "`meta` header allowed only on the first line".into(),
                });
            }
            let Value::Object(map) = meta else {
                return Err(Error::Malformed {
                    line: line_no,
                    message: "`meta` must be an object".into(),
                });
            };
            metadata = map.clone().into_iter().collect();
            continue;
        }

        let raw: RawRecord = serde_json::from_value(value).map_err(|e| Error::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        records.push(validate_record(raw, line_no, strict)?);
    }

    Dataset::new(records, metadata)
}

fn validate_record(raw: RawRecord, line: usize, strict: bool) -> Result<ImageRecord> {
    let image_id = raw.image_id.ok_or(Error::MissingField {
        line,
        field: "image_id",
    })?;
    let count = raw.truth_count.ok_or(Error::MissingField {
        line,
        field: "truth_count",
    })?;
    let truth_count = u32::try_from(count).map_err(|_| Error::Malformed {
        line,
        message: format!("truth_count {count} is not a non-negative 32-bit integer"),
    })?;
    let stage_detections = raw.stages.ok_or(Error::MissingField {
        line,
        field: "stages",
    })?;
    if !stage_detections.contains_key(PHONE) {
        return Err(Error::MissingStage {
            image_id,
            stage: PHONE.into(),
        });
    }
    for b in stage_detections.values().flatten() {
        let c = b.confidence;
        let ok = if strict {
            c > 0.0 && c < 1.0
        } else {
            (0.0..=1.0).contains(&c)
        };
        if !ok {
            return Err(Error::ConfidenceOutOfRange { image_id, value: c });
        }
    }
    Ok(ImageRecord {
        image_id,
        truth_count,
        stage_detections,
    })
}

/// Number of records per truth alert. All three levels are always present.
pub fn class_counts(dataset: &Dataset) -> BTreeMap<AlertLevel, usize> {
    let mut counts: BTreeMap<AlertLevel, usize> = AlertLevel::ALL.iter().map(|&a| (a, 0)).collect();
    for r in dataset.records() {
        *counts.entry(truth_alert(r)).or_default() += 1;
    }
    counts
}

// ---------------------------------------------------------------------------
// Synthetic generation

/// Beta-shaped confidence distribution given by mean and variance.
/// A variance of zero yields the constant `mean`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSpec {
    pub mean: f64,
    pub variance: f64,
}

impl BetaSpec {
    pub fn new(mean: f64, variance: f64) -> Self {
        Self { mean, variance }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let m = self.mean;
        if !(m > 0.0 && m < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "{what}: mean {m} outside (0, 1)"
            )));
        }
        if !(self.variance >= 0.0 && self.variance < m * (1.0 - m)) {
            return Err(Error::InvalidConfig(format!(
                "{what}: variance {} must be in [0, {})",
                self.variance,
                m * (1.0 - m)
            )));
        }
        Ok(())
    }

    fn sampler(&self) -> ConfidenceSampler {
        if self.variance == 0.0 {
            return ConfidenceSampler::Constant(self.mean);
        }
        let k = self.mean * (1.0 - self.mean) / self.variance - 1.0;
        let beta =
            Beta::new(self.mean * k, (1.0 - self.mean) * k).expect("validated beta parameters");
        ConfidenceSampler::Beta(beta)
    }
}

enum ConfidenceSampler {
    Constant(f64),
    Beta(Beta<f64>),
}

impl ConfidenceSampler {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ConfidenceSampler::Constant(c) => *c,
            ConfidenceSampler::Beta(beta) => loop {
                // Extreme shapes can round to exactly 0 or 1.
                let c = beta.sample(rng);
                if c > 0.0 && c < 1.0 {
                    return c;
                }
            },
        }
    }
}

/// Noise model of one detector stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageNoise {
    /// Probability that a true pest produces no box.
    pub miss_rate: f64,
    /// Mean number of spurious boxes per image (Poisson).
    pub false_positive_rate: f64,
    pub tp_confidence: BetaSpec,
    pub fp_confidence: BetaSpec,
}

impl StageNoise {
    pub fn default_phone() -> Self {
        Self {
            miss_rate: 0.2,
            false_positive_rate: 6.0,
            tp_confidence: BetaSpec::new(0.8, 0.04),
            fp_confidence: BetaSpec::new(0.2, 0.04),
        }
    }

    /// Lower miss and spurious rates than the phone, half the confidence variance.
    pub fn default_cloud() -> Self {
        Self {
            miss_rate: 0.08,
            false_positive_rate: 3.0,
            tp_confidence: BetaSpec::new(0.8, 0.02),
            fp_confidence: BetaSpec::new(0.2, 0.02),
        }
    }

    /// Perfect detector: every pest found at confidence `c`, nothing spurious.
    pub fn noiseless(c: f64) -> Self {
        Self {
            miss_rate: 0.0,
            false_positive_rate: 0.0,
            tp_confidence: BetaSpec::new(c, 0.0),
            fp_confidence: BetaSpec::new(0.5, 0.0),
        }
    }

    fn validate(&self, stage: &str) -> Result<()> {
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return Err(Error::InvalidConfig(format!(
                "stage {stage}: miss_rate {} outside [0, 1]",
                self.miss_rate
            )));
        }
        if !(self.false_positive_rate >= 0.0 && self.false_positive_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "stage {stage}: false_positive_rate {} must be finite and >= 0",
                self.false_positive_rate
            )));
        }
        self.tp_confidence
            .validate(&format!("stage {stage} tp_confidence"))?;
        self.fp_confidence
            .validate(&format!("stage {stage} fp_confidence"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_images: usize,
    /// Unnormalized weights over truth counts `0..truth_weights.len()`.
    pub truth_weights: Vec<f64>,
    pub stages: BTreeMap<String, StageNoise>,
    /// Species labels attached uniformly at random to true-positive boxes.
    #[serde(default)]
    pub class_tags: Vec<String>,
    pub seed: u64,
}

/// Highest truth count produced by [`SynthConfig::default`].
pub const DEFAULT_MAX_COUNT: usize = 24;

impl Default for SynthConfig {
    fn default() -> Self {
        let mut stages = BTreeMap::new();
        stages.insert(PHONE.to_string(), StageNoise::default_phone());
        stages.insert(crate::CLOUD.to_string(), StageNoise::default_cloud());
        Self {
            n_images: 2093,
            truth_weights: class_balanced_weights(698.0, 728.0, 667.0, DEFAULT_MAX_COUNT),
            stages,
            class_tags: vec!["pink".into(), "american".into()],
            seed: 20220912,
        }
    }
}

/// Count weights whose induced alert proportions are `no_action : cautious : spray`,
/// spread uniformly over counts 1..=7 and 8..=`max_count`.
pub fn class_balanced_weights(
    no_action: f64,
    cautious: f64,
    spray: f64,
    max_count: usize,
) -> Vec<f64> {
    assert!(max_count >= 8, "max_count must reach the spray band");
    let mut w = vec![0.0; max_count + 1];
    w[0] = no_action;
    for x in &mut w[1..=7] {
        *x = cautious / 7.0;
    }
    let n_spray = (max_count - 7) as f64;
    for x in &mut w[8..] {
        *x = spray / n_spray;
    }
    w
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::InvalidConfig("n_images must be positive".into()));
        }
        if self.truth_weights.is_empty()
            || self
                .truth_weights
                .iter()
                .any(|w| !(w.is_finite() && *w >= 0.0))
            || self.truth_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::InvalidConfig(
                "truth_weights must be non-negative, finite and not all zero".into(),
            ));
        }
        if !self.stages.contains_key(PHONE) {
            return Err(Error::InvalidConfig("a `phone` stage is required".into()));
        }
        for (name, noise) in &self.stages {
            noise.validate(name)?;
        }
        Ok(())
    }
}

/// Draws a dataset. A pure function of `config`, seed included.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let truth = WeightedIndex::new(&config.truth_weights)
        .map_err(|e| Error::InvalidConfig(format!("truth_weights: {e}")))?;

    struct StageSampler<'a> {
        name: &'a str,
        miss_rate: f64,
        fp_count: Option<Poisson<f64>>,
        tp: ConfidenceSampler,
        fp: ConfidenceSampler,
    }
    let samplers: Vec<StageSampler> = config
        .stages
        .iter()
        .map(|(name, n)| StageSampler {
            name,
            miss_rate: n.miss_rate,
            fp_count: (n.false_positive_rate > 0.0)
                .then(|| Poisson::new(n.false_positive_rate).expect("validated rate")),
            tp: n.tp_confidence.sampler(),
            fp: n.fp_confidence.sampler(),
        })
        .collect();

    let width = config.n_images.to_string().len().max(6);
    let mut records = Vec::with_capacity(config.n_images);
    for i in 0..config.n_images {
        let truth_count = truth.sample(&mut rng) as u32;
        let mut stage_detections = BTreeMap::new();
        for s in &samplers {
            let mut boxes = Vec::new();
            for _ in 0..truth_count {
                if rng.random::<f64>() < s.miss_rate {
                    continue;
                }
                let confidence = s.tp.sample(&mut rng);
                let class_tag = if config.class_tags.is_empty() {
                    None
                } else {
                    Some(config.class_tags[rng.random_range(0..config.class_tags.len())].clone())
                };
                boxes.push(DetectionBox {
                    confidence,
                    class_tag,
                });
            }
            let n_fp = s
                .fp_count
                .as_ref()
                .map_or(0, |p| p.sample(&mut rng) as usize);
            for _ in 0..n_fp {
                boxes.push(DetectionBox::new(s.fp.sample(&mut rng)));
            }
            boxes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
            stage_detections.insert(s.name.to_string(), boxes);
        }
        records.push(ImageRecord {
            image_id: format!("synth-{i:0width$}"),
            truth_count,
            stage_detections,
        });
    }

    let mut metadata = BTreeMap::new();
    metadata.insert("source".into(), Value::from("synthetic"));
    metadata.insert("seed".into(), Value::from(config.seed));
    Dataset::new(records, metadata)
}
