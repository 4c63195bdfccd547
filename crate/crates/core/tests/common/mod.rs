#![allow(dead_code)]

use std::collections::BTreeMap;

use abstention_cascade::dataset::{generate_synthetic, StageNoise, SynthConfig};
use abstention_cascade::{Dataset, DetectionBox, ImageRecord, CLOUD, PHONE};

pub fn synthetic(n_images: usize, seed: u64) -> Dataset {
    generate_synthetic(&SynthConfig {
        n_images,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub fn noiseless(n_images: usize, seed: u64, confidence: f64) -> Dataset {
    let mut cfg = SynthConfig {
        n_images,
        seed,
        ..SynthConfig::default()
    };
    for noise in cfg.stages.values_mut() {
        *noise = StageNoise::noiseless(confidence);
    }
    generate_synthetic(&cfg).unwrap()
}

pub fn record(id: &str, truth: u32, phone: &[f64], cloud: &[f64]) -> ImageRecord {
    let boxes = |c: &[f64]| c.iter().map(|&x| DetectionBox::new(x)).collect();
    ImageRecord {
        image_id: id.into(),
        truth_count: truth,
        stage_detections: BTreeMap::from([
            (PHONE.to_string(), boxes(phone)),
            (CLOUD.to_string(), boxes(cloud)),
        ]),
    }
}

/// Every image carries `max(truth, 1)` boxes at 0.5 in both stages, so any
/// window with `lower < 0.5 <= upper` sees `u = 0` and `l >= 1`: both
/// stages abstain on every image.
pub fn always_ambiguous(n_images: usize) -> Dataset {
    let records = (0..n_images)
        .map(|i| {
            let truth = (i % 13) as u32;
            let boxes = vec![0.5; truth.max(1) as usize];
            record(&format!("amb-{i:04}"), truth, &boxes, &boxes)
        })
        .collect();
    Dataset::new(records, BTreeMap::new()).unwrap()
}

/// Binary MCC from the 2x2 counts (rows truth, columns prediction).
pub fn binary_mcc(tp: f64, tn: f64, fp: f64, fn_: f64) -> f64 {
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / den
    }
}
