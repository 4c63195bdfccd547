mod common;

use std::collections::BTreeMap;
use std::io::Cursor;

use abstention_cascade::dataset::{
    class_counts, generate_synthetic, load_dataset, parse_dataset, SynthConfig,
};
use abstention_cascade::{AlertLevel, Dataset, DetectionBox, Error, ImageRecord};
use proptest::prelude::*;

fn parse(text: &str, strict: bool) -> abstention_cascade::Result<Dataset> {
    parse_dataset(Cursor::new(text), strict)
}

fn boxes() -> impl Strategy<Value = Vec<DetectionBox>> {
    prop::collection::vec(
        (
            0.0001f64..0.9999,
            prop::option::of(prop_oneof![
                Just("pink".to_string()),
                Just("american".to_string())
            ]),
        )
            .prop_map(|(c, k)| DetectionBox {
                confidence: c,
                class_tag: k,
            }),
        0..12,
    )
}

fn records() -> impl Strategy<Value = Vec<ImageRecord>> {
    prop::collection::btree_map(
        "[a-z0-9_-]{1,10}",
        (0u32..40, boxes(), prop::option::of(boxes())),
        1..30,
    )
    .prop_map(|m| {
        m.into_iter()
            .map(|(id, (truth, phone, cloud))| {
                let mut stages = BTreeMap::from([("phone".to_string(), phone)]);
                if let Some(c) = cloud {
                    stages.insert("cloud".to_string(), c);
                }
                ImageRecord {
                    image_id: id,
                    truth_count: truth,
                    stage_detections: stages,
                }
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn save_load_round_trip(recs in records(), with_meta in any::<bool>()) {
        let mut meta = BTreeMap::new();
        if with_meta {
            meta.insert("source".to_string(), serde_json::json!("test"));
        }
        let ds = Dataset::new(recs, meta).unwrap();
        let back = parse_dataset(Cursor::new(ds.to_bytes()), true).unwrap();
        prop_assert_eq!(back.to_bytes(), ds.to_bytes());
        prop_assert_eq!(&back, &ds);
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let ds = common::synthetic(50, 6);
    ds.save(&path).unwrap();
    assert_eq!(load_dataset(&path, true).unwrap(), ds);
    assert!(matches!(
        load_dataset(&dir.path().join("missing"), false),
        Err(Error::Io { .. })
    ));
}

#[test]
fn strict_rejects_certain_boxes_by_id() {
    let text = r#"{"image_id":"ok","truth_count":1,"stages":{"phone":[{"c":0.4}]}}
{"image_id":"img-07","truth_count":2,"stages":{"phone":[{"c":1.0}]}}
"#;
    let err = parse(text, true).unwrap_err();
    assert!(matches!(err, Error::ConfidenceOutOfRange { .. }));
    assert!(err.to_string().contains("img-07"));
    assert_eq!(parse(text, false).unwrap().len(), 2);
    let beyond = text.replace("1.0", "1.5");
    assert!(parse(&beyond, false).is_err());
}

#[test]
fn malformed_input_is_reported_with_line() {
    let cases = [
        (
            "{\"image_id\":\"a\",\"truth_count\":1,\"stages\":{\"phone\":[]}}\nnot json\n",
            2,
        ),
        ("\n{\"truth_count\":1,\"stages\":{\"phone\":[]}}\n", 2),
        (
            "{\"image_id\":\"a\",\"truth_count\":-1,\"stages\":{\"phone\":[]}}\n",
            1,
        ),
    ];
    for (text, line) in cases {
        let msg = parse(text, false).unwrap_err().to_string();
        assert!(msg.contains(&format!("line {line}")), "{msg}");
    }
    let no_phone = "{\"image_id\":\"z\",\"truth_count\":0,\"stages\":{\"cloud\":[]}}";
    assert!(matches!(
        parse(no_phone, false),
        Err(Error::MissingStage { .. })
    ));
    let dup = "{\"image_id\":\"d\",\"truth_count\":0,\"stages\":{\"phone\":[]}}\n".repeat(2);
    assert!(matches!(parse(&dup, false), Err(Error::DuplicateId(_))));
    let late_meta =
        "{\"image_id\":\"d\",\"truth_count\":0,\"stages\":{\"phone\":[]}}\n{\"meta\":{}}\n";
    assert!(parse(late_meta, false).is_err());
}

#[test]
fn synthesis_is_a_function_of_the_config() {
    let a = common::synthetic(300, 42).to_bytes();
    assert_eq!(a, common::synthetic(300, 42).to_bytes());
    assert_ne!(a, common::synthetic(300, 43).to_bytes());
}

#[test]
fn noiseless_stages_see_exactly_the_truth() {
    let ds = common::noiseless(500, 8, 0.97);
    for r in ds.records() {
        for boxes in r.stage_detections.values() {
            assert_eq!(boxes.len(), r.truth_count as usize);
            assert!(boxes.iter().all(|b| b.confidence == 0.97));
        }
    }
}

#[test]
fn class_fractions_follow_weights() {
    let ds = generate_synthetic(&SynthConfig {
        n_images: 10_000,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let counts = class_counts(&ds);
    let total = 698.0 + 728.0 + 667.0;
    for (level, expected) in [
        (AlertLevel::NoAction, 698.0),
        (AlertLevel::Cautious, 728.0),
        (AlertLevel::Spray, 667.0),
    ] {
        let got = counts[&level] as f64 / 10_000.0;
        assert!((got - expected / total).abs() < 0.02, "{level}: {got}");
    }
}
