mod common;

use abstention_cascade::cascade::median_smooth;
use abstention_cascade::metrics::{confusion, mcc, ConfusionMatrix};
use abstention_cascade::sweep::{default_grid, make_grid, sweep_stage};
use abstention_cascade::window::{alert_of_count, decide, partition, predict_stage, StageIndex};
use abstention_cascade::{AlertLevel, Decision, Window, PHONE};
use proptest::prelude::*;

fn confidences() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0001f64..0.9999, 0..40)
}

fn window() -> impl Strategy<Value = Window> {
    (0.0f64..0.999, 0.0f64..0.999).prop_map(|(a, b)| Window::new(a.min(b), a.max(b)).unwrap())
}

fn alert() -> impl Strategy<Value = AlertLevel> {
    prop_oneof![
        Just(AlertLevel::NoAction),
        Just(AlertLevel::Cautious),
        Just(AlertLevel::Spray)
    ]
}

fn matrix() -> impl Strategy<Value = ConfusionMatrix> {
    prop::array::uniform3(prop::array::uniform3(0u64..50)).prop_map(ConfusionMatrix::from_cells)
}

proptest! {
    #[test]
    fn nested_counts(c in confidences(), w in window()) {
        let p = partition(&c, &w);
        prop_assert!(p.u <= p.l);
        prop_assert!(alert_of_count(p.l) >= alert_of_count(p.u));
    }

    #[test]
    fn accept_iff_alerts_agree(c in confidences(), w in window()) {
        let p = partition(&c, &w);
        match decide(&c, &w) {
            Decision::Accept(a) => {
                prop_assert_eq!(a, alert_of_count(p.l));
                prop_assert_eq!(a, alert_of_count(p.u));
            }
            Decision::Abstain => prop_assert_ne!(alert_of_count(p.l), alert_of_count(p.u)),
        }
    }

    #[test]
    fn permutation_invariant(c in confidences(), w in window(), seed in any::<u64>()) {
        let mut shuffled = c.clone();
        // deterministic Fisher-Yates driven by `seed`
        let mut s = seed | 1;
        for i in (1..shuffled.len()).rev() {
            s ^= s << 13; s ^= s >> 7; s ^= s << 17;
            shuffled.swap(i, (s % (i as u64 + 1)) as usize);
        }
        prop_assert_eq!(decide(&c, &w), decide(&shuffled, &w));
    }

    #[test]
    fn degenerate_window_never_abstains(c in confidences(), t in 0.0f64..0.999) {
        prop_assert!(!decide(&c, &Window::new(t, t).unwrap()).is_abstain());
    }

    #[test]
    fn widening_keeps_abstentions(c in confidences(), w in window(), dl in 0.0f64..1.0, du in 0.0f64..1.0) {
        let wide = Window::new(w.lower() * dl, w.upper() + (0.999 - w.upper()) * du).unwrap();
        prop_assert!(wide.contains(&w));
        if decide(&c, &w).is_abstain() {
            prop_assert!(decide(&c, &wide).is_abstain());
        }
    }

    #[test]
    fn alert_is_monotone(a in 0usize..2000, b in 0usize..2000) {
        if a <= b {
            prop_assert!(alert_of_count(a) <= alert_of_count(b));
        }
    }

    #[test]
    fn mcc_bounded(m in matrix()) {
        prop_assume!(m.total() > 0);
        let v = mcc(&m).unwrap();
        prop_assert!((-1.0..=1.0).contains(&v));
    }

    #[test]
    fn mcc_relabel_invariant(m in matrix(), perm in Just([0usize, 1, 2]).prop_shuffle()) {
        prop_assume!(m.total() > 0);
        let c = m.cells();
        let mut p = [[0u64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                p[perm[i]][perm[j]] = c[i][j];
            }
        }
        let a = mcc(&m).unwrap();
        let b = mcc(&ConfusionMatrix::from_cells(p)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mcc_scale_invariant(m in matrix(), k in 2u64..20) {
        prop_assume!(m.total() > 0);
        let scaled = ConfusionMatrix::from_cells(m.cells().map(|r| r.map(|x| x * k)));
        prop_assert!((mcc(&m).unwrap() - mcc(&scaled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn two_class_mcc_matches_binary(tp in 0u64..500, tn in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
        prop_assume!(tp + tn + fp + fn_ > 0);
        // positive = Spray, negative = NoAction
        let m = ConfusionMatrix::from_cells([[tn, 0, fp], [0, 0, 0], [fn_, 0, tp]]);
        let oracle = common::binary_mcc(tp as f64, tn as f64, fp as f64, fn_ as f64);
        prop_assert!((mcc(&m).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn confusion_conserves(pairs in prop::collection::vec((alert(), alert()), 0..200)) {
        prop_assert_eq!(confusion(&pairs).total() as usize, pairs.len());
    }

    #[test]
    fn smoothing_bounded_by_window(points in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..40), width in 0.01f64..0.5) {
        let mut points = points;
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
        let smooth = median_smooth(&xs, &ys, width);
        for (i, s) in smooth.iter().enumerate() {
            let near: Vec<f64> = xs.iter().zip(&ys)
                .filter(|(x, _)| (**x - xs[i]).abs() <= width / 2.0 + 1e-12)
                .map(|(_, y)| *y).collect();
            let lo = near.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = near.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*s >= lo && *s <= hi);
        }
    }

    #[test]
    fn smoothing_constant_is_idempotent(xs in prop::collection::vec(0.0f64..1.0, 1..30), v in 0.0f64..1.0, width in 0.01f64..1.0) {
        let ys = vec![v; xs.len()];
        prop_assert_eq!(median_smooth(&xs, &ys, width), ys);
    }
}

#[test]
fn index_agrees_with_scan() {
    let ds = common::synthetic(150, 3);
    let idx = StageIndex::build(&ds, PHONE).unwrap();
    for w in default_grid().windows() {
        for (i, r) in ds.records().iter().enumerate() {
            let c = r.confidences(PHONE).unwrap();
            assert_eq!(idx.partition(i, w), partition(&c, w));
        }
    }
}

/// Exhaustive over every nested pair of grid windows on a 20-image set.
#[test]
fn widening_is_exhaustively_monotone() {
    let ds = common::synthetic(20, 11);
    let grid = make_grid(0.05, 0.0, 0.95).unwrap();
    let abstained: Vec<Vec<bool>> = grid
        .windows()
        .iter()
        .map(|w| {
            predict_stage(&ds, PHONE, w)
                .unwrap()
                .iter()
                .map(|(_, d)| d.is_abstain())
                .collect()
        })
        .collect();
    let mut nested_pairs = 0;
    for (i, inner) in grid.windows().iter().enumerate() {
        for (j, outer) in grid.windows().iter().enumerate() {
            if outer.contains(inner) {
                nested_pairs += 1;
                for (k, (&a, &b)) in abstained[i].iter().zip(&abstained[j]).enumerate() {
                    assert!(!a || b, "{inner} -> {outer}, image {k}");
                }
            }
        }
    }
    assert!(nested_pairs > grid.windows().len());
}

#[test]
fn grid_abstention_monotone_along_rows_and_columns() {
    let ds = common::synthetic(300, 5);
    let cands = sweep_stage(&ds, PHONE, &default_grid()).unwrap();
    let at = |lo: f64, hi: f64| {
        cands
            .iter()
            .find(|c| c.window.lower() == lo && c.window.upper() == hi)
            .map(|c| c.report.n_abstained)
    };
    let t = default_grid().thresholds().to_vec();
    for (i, &lo) in t.iter().enumerate() {
        for (j, &hi) in t.iter().enumerate().skip(i) {
            let here = at(lo, hi).unwrap();
            if j + 1 < t.len() {
                assert!(at(lo, t[j + 1]).unwrap() >= here);
            }
            if i > 0 {
                assert!(at(t[i - 1], hi).unwrap() >= here);
            }
        }
    }
}

#[test]
fn noiseless_predicts_truth() {
    let ds = common::noiseless(200, 9, 0.99);
    for r in ds.records() {
        for boxes in r.stage_detections.values() {
            assert_eq!(boxes.len(), r.truth_count as usize);
        }
    }
    let t = 0.3;
    let out = predict_stage(&ds, PHONE, &Window::new(t, t).unwrap()).unwrap();
    for ((_, d), r) in out.iter().zip(ds.records()) {
        assert_eq!(*d, Decision::Accept(r.truth_alert()));
    }
    let cands = sweep_stage(&ds, PHONE, &default_grid()).unwrap();
    for c in cands.iter().filter(|c| c.window.lower() >= 0.05) {
        assert_eq!(c.report.mcc, 1.0, "{}", c.window);
    }
}
