mod common;

use abstention_cascade::cascade::{conditioned_cloud_candidates, Route};
use abstention_cascade::sim::{
    fit_cloud_defaults, histogram_mode, simulate, HumanModel, LatencyModel, LognormalComponent,
    ReviewTime, DEFAULT_CLOUD_MEAN, DEFAULT_CLOUD_MODE, HOUR, MODE_BIN_SECONDS,
};
use abstention_cascade::sweep::{make_grid, sweep_stage, Candidate};
use abstention_cascade::Dataset;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

fn phones(ds: &Dataset) -> Vec<Candidate> {
    sweep_stage(
        ds,
        abstention_cascade::PHONE,
        &make_grid(0.1, 0.0, 0.9).unwrap(),
    )
    .unwrap()
}

fn pick(cands: &[Candidate], lo: f64, hi: f64) -> &Candidate {
    cands
        .iter()
        .find(|c| c.window.lower() == lo && c.window.upper() == hi)
        .unwrap()
}

fn around_the_clock(reviewers: u32) -> LatencyModel {
    LatencyModel {
        human: HumanModel {
            reviewers,
            review: ReviewTime::Constant { seconds: 0.0 },
            shift_start_hour: 0.0,
            shift_hours: 24.0,
        },
        ..LatencyModel::default()
    }
}

#[test]
fn no_phone_abstention_means_phone_latency_only() {
    let ds = common::synthetic(200, 1);
    let p = phones(&ds);
    let phone = pick(&p, 0.4, 0.4);
    let model = LatencyModel::default();
    let r = simulate(&ds, phone, None, &model, 3).unwrap();
    assert!(r.latencies.iter().all(|&l| l == model.phone_seconds));
    assert_eq!(r.workload.entered, 0);
}

#[test]
fn zero_reviewers_with_human_routing_fails() {
    let ds = common::synthetic(200, 1);
    let p = phones(&ds);
    let phone = pick(&p, 0.1, 0.8);
    assert!(phone.report.n_abstained > 0);
    let mut model = LatencyModel::default();
    model.human.reviewers = 0;
    assert!(simulate(&ds, phone, None, &model, 3).is_err());
    // fine when nobody needs review
    assert!(simulate(&ds, pick(&p, 0.4, 0.4), None, &model, 3).is_ok());
}

#[test]
fn instantaneous_review_adds_nothing_to_cloud_path() {
    let ds = common::synthetic(300, 2);
    let p = phones(&ds);
    let phone = pick(&p, 0.1, 0.8);
    let r = simulate(&ds, phone, None, &around_the_clock(ds.len() as u32), 9).unwrap();
    for (parts, &lat) in r.parts.iter().zip(&r.latencies) {
        assert_eq!(lat, parts.phone + parts.cloud.unwrap_or(0.0));
    }
}

#[test]
fn model_round_trips_through_toml() {
    let model = LatencyModel::default();
    let text = model.to_toml_string();
    assert_eq!(LatencyModel::from_toml_str(&text).unwrap(), model);
    let bad = text.replace("arrivals_per_day = 500.0", "arrivals_per_day = -1.0");
    assert!(LatencyModel::from_toml_str(&bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulation_invariants(seed in any::<u64>(), lo in 0usize..5, width in 0usize..5, with_cloud in any::<bool>()) {
        let ds = common::synthetic(120, 40);
        let p = phones(&ds);
        let (lo, hi) = (lo as f64 / 10.0, (lo + width) as f64 / 10.0);
        let phone = pick(&p, lo, hi);
        let conditioned = conditioned_cloud_candidates(&ds, phone, &make_grid(0.1, 0.0, 0.9).unwrap()).unwrap();
        let cloud = if with_cloud { conditioned.candidates.get(10) } else { None };
        let model = LatencyModel::default();

        let a = simulate(&ds, phone, cloud, &model, seed).unwrap();
        let b = simulate(&ds, phone, cloud, &model, seed).unwrap();
        prop_assert_eq!(&a, &b);

        let humans = a.routes.iter().filter(|r| **r == Route::Human).count();
        let w = &a.workload;
        prop_assert_eq!(w.entered, humans);
        prop_assert_eq!(w.entered, w.left + w.final_depth);
        prop_assert_eq!(w.final_depth, 0);
        prop_assert_eq!(w.reviews_per_day.iter().sum::<u64>() as usize, w.left);
        prop_assert!(w.queue_depth.iter().all(|&(_, d)| d <= w.max_depth));

        for ((parts, &lat), route) in a.parts.iter().zip(&a.latencies).zip(&a.routes) {
            prop_assert!(lat >= model.phone_seconds);
            prop_assert_eq!(parts.cloud.is_some(), *route != Route::Phone);
            if *route == Route::Human {
                prop_assert!(lat >= parts.phone + parts.cloud.unwrap());
                // reviews start inside the shift window
                let start = parts.arrival + parts.phone + parts.cloud.unwrap() + parts.queue_wait.unwrap();
                let hour = (start / HOUR).rem_euclid(24.0);
                prop_assert!((model.human.shift_start_hour - 1e-6..model.human.shift_start_hour + model.human.shift_hours).contains(&hour), "start hour {}", hour);
            }
        }
    }
}

fn mixture_mean(components: &[LognormalComponent]) -> f64 {
    let total: f64 = components.iter().map(|c| c.weight).sum();
    components
        .iter()
        .map(|c| c.weight / total * (c.log_mean + c.log_sigma * c.log_sigma / 2.0).exp())
        .sum()
}

/// Weight grid search with the fitted shapes, then Monte Carlo with an
/// independent sampler.
#[test]
fn default_fit_agrees_with_independent_oracle() {
    let fit = fit_cloud_defaults(DEFAULT_CLOUD_MEAN, DEFAULT_CLOUD_MODE).unwrap();
    assert_eq!(fit.len(), 2);
    assert!((mixture_mean(&fit) - DEFAULT_CLOUD_MEAN).abs() < 1e-6);

    let total: f64 = fit.iter().map(|c| c.weight).sum();
    let fitted_w = fit[0].weight / total;
    let best_w = (0..=10_000)
        .map(|k| k as f64 / 10_000.0)
        .min_by(|a, b| {
            let err = |w: f64| {
                let comps = [
                    LognormalComponent {
                        weight: w,
                        ..fit[0]
                    },
                    LognormalComponent {
                        weight: 1.0 - w,
                        ..fit[1]
                    },
                ];
                (mixture_mean(&comps) - DEFAULT_CLOUD_MEAN).abs()
            };
            err(*a).total_cmp(&err(*b))
        })
        .unwrap();
    assert!(
        (best_w - fitted_w).abs() <= 1e-4,
        "grid {best_w} vs fitted {fitted_w}"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let dists: Vec<LogNormal<f64>> = fit
        .iter()
        .map(|c| LogNormal::new(c.log_mean, c.log_sigma).unwrap())
        .collect();
    let draws: Vec<f64> = (0..200_000)
        .map(|_| {
            let k = usize::from(rand::Rng::random::<f64>(&mut rng) >= fitted_w);
            dists[k].sample(&mut rng)
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!(
        (mean / DEFAULT_CLOUD_MEAN - 1.0).abs() < 0.03,
        "mean {} h",
        mean / HOUR
    );
    let mode = histogram_mode(&draws, MODE_BIN_SECONDS).unwrap();
    assert!(
        (mode - DEFAULT_CLOUD_MODE).abs() <= MODE_BIN_SECONDS,
        "mode {} h",
        mode / HOUR
    );
}

#[test]
fn histogram_mode_picks_fullest_bin() {
    assert_eq!(histogram_mode(&[], 1.0), None);
    assert_eq!(histogram_mode(&[0.2, 1.5, 1.7, 3.1], 1.0), Some(1.5));
    // first bin wins ties
    assert_eq!(histogram_mode(&[0.2, 2.5], 1.0), Some(0.5));
}
