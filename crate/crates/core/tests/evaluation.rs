use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tgnet_core::evaluation::{
    baseline_persistence, fit_atypical_thresholds, mape, nearest_rank, rmse, HistoricalAverage, Metrics,
    MetricsReport, DEFAULT_K,
};
use tgnet_core::grid::{DayTypeScheme, DemandTensor, LogKind, TemporalKey};
use tgnet_core::synth::{generate, Event, SynthConfig};
use tgnet_core::Error;

fn oracle(preds: &[f64], truths: &[f64], k: f64) -> (f64, f64) {
    let mut se = 0.0;
    let mut ape = 0.0;
    let mut n = 0.0;
    for i in 0..preds.len() {
        if truths[i] >= k {
            se += (preds[i] - truths[i]).powi(2);
            ape += ((preds[i] - truths[i]) / truths[i]).abs();
            n += 1.0;
        }
    }
    ((se / n).sqrt(), 100.0 * ape / n)
}

fn keys(periods: usize, slots: usize) -> Vec<TemporalKey> {
    (0..periods)
        .map(|t| TemporalKey::new(t % slots, slots, (t / slots) % 7, false, false).unwrap())
        .collect()
}

#[test]
fn worked_examples() {
    assert_eq!(mape(&[3.0], &[1.0], 0.0).unwrap(), 200.0);
    assert_eq!(rmse(&[3.0], &[1.0], 0.0).unwrap(), 2.0);
    assert_eq!(mape(&[500.0], &[1000.0], 0.0).unwrap(), 50.0);
    assert_eq!(rmse(&[500.0], &[1000.0], 0.0).unwrap(), 500.0);
}

#[test]
fn metrics_match_loop_oracle_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        let truths: Vec<f64> = (0..n).map(|_| rng.random_range(0..80) as f64).collect();
        let preds: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..90.0)).collect();
        let k = rng.random_range(1..20) as f64;
        match (rmse(&preds, &truths, k), mape(&preds, &truths, k)) {
            (Ok(r), Ok(m)) => {
                let (or, om) = oracle(&preds, &truths, k);
                assert!((r - or).abs() <= 1e-12 * or.max(1.0));
                assert!((m - om).abs() <= 1e-12 * om.max(1.0));
            }
            (Err(Error::EmptyEvaluation { .. }), Err(Error::EmptyEvaluation { .. })) => {
                assert!(truths.iter().all(|&t| t < k));
            }
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn filter_excludes_small_truths_and_counts_them() {
    let m = Metrics::compute(&[5.0, 20.0, 9.0], &[10.0, 11.0, 30.0], DEFAULT_K).unwrap();
    assert_eq!(m.n_evaluated, 2);
    assert_eq!(m.n_filtered_out, 1);
    let (r, p) = oracle(&[20.0, 9.0], &[11.0, 30.0], 0.0);
    assert_eq!(m.rmse, r);
    assert_eq!(m.mape, p);
    assert!(matches!(
        rmse(&[1.0], &[3.0], DEFAULT_K),
        Err(Error::EmptyEvaluation { .. })
    ));
    assert!(matches!(rmse(&[1.0, 2.0], &[3.0], 0.0), Err(Error::Data(_))));
}

#[test]
fn report_slices_use_their_masks() {
    let preds = [10.0, 20.0, 30.0, 40.0];
    let truths = [12.0, 20.0, 35.0, 50.0];
    let r = MetricsReport::build(
        &preds,
        &truths,
        0.0,
        &[(0.9, vec![false, false, true, true]), (0.99, vec![false; 4])],
    )
    .unwrap();
    assert_eq!(r.atypical[0].n_selected, 2);
    assert_eq!(r.atypical[0].metrics.as_ref().unwrap().rmse, rmse(&[30.0, 40.0], &[35.0, 50.0], 0.0).unwrap());
    assert!(r.atypical[1].metrics.is_none());
    let json = serde_json::to_value(&r).unwrap();
    assert!(json.get("rmse").is_some());
}

#[test]
fn nearest_rank_has_no_interpolation() {
    let mut v: Vec<f64> = (1..=100).rev().map(f64::from).collect();
    assert_eq!(nearest_rank(&mut v, 0.95), Some(95.0));
    assert_eq!(nearest_rank(&mut v, 0.951), Some(96.0));
    assert_eq!(nearest_rank(&mut v, 0.0), Some(1.0));
    assert_eq!(nearest_rank(&mut v, 1.0), Some(100.0));
    assert_eq!(nearest_rank(&mut [4.0, 1.0], 0.5), Some(1.0));
    assert_eq!(nearest_rank(&mut [], 0.5), None);
}

#[test]
fn constant_series_has_constant_thresholds_and_no_atypical_samples() {
    let slots = 4;
    let t = DemandTensor::from_vec(LogKind::Pickup, 56, 3, vec![7; 168]).unwrap();
    let k = keys(56, slots);
    let th = fit_atypical_thresholds(&t, &k, 0..40, 0.95, 1, DayTypeScheme::TwoWay).unwrap();
    assert!(th.thresholds.iter().all(|&x| x == 7.0));
    let targets: Vec<usize> = (40..56).collect();
    assert!(th.select(&t, &targets, &k).iter().all(|&m| !m));
}

#[test]
fn sparse_buckets_fall_back_to_the_region_quantile() {
    let slots = 2;
    // two days, weekdays only: weekend buckets are empty
    let values: Vec<u32> = (0..4).collect();
    let t = DemandTensor::from_vec(LogKind::Pickup, 4, 1, values).unwrap();
    let k = keys(4, slots);
    let th = fit_atypical_thresholds(&t, &k, 0..4, 0.5, 2, DayTypeScheme::TwoWay).unwrap();
    let weekday = TemporalKey::new(1, slots, 0, false, false).unwrap();
    let weekend = TemporalKey::new(1, slots, 6, false, false).unwrap();
    // slot 1 on workdays saw 1 and 3
    assert_eq!(th.threshold(0, &weekday), 1.0);
    assert_eq!(th.threshold(0, &weekend), 1.0);
    assert!(th.fallback[(1) * 3 + 1]);
    assert!(!th.fallback[(1) * 3]);
    let err = fit_atypical_thresholds(&t, &k, 3..3, 0.5, 1, DayTypeScheme::TwoWay).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

#[test]
fn injected_spikes_are_selected() {
    let cfg = SynthConfig {
        rows: 2,
        cols: 2,
        n_days: 14,
        base_rate: 20.0,
        events: vec![Event {
            node: 2,
            start: 48 * 12 + 20,
            duration: 3,
            magnitude: 200.0,
        }],
        seed: 3,
        ..SynthConfig::default()
    };
    let out = generate(&cfg).unwrap();
    let train = 0..48 * 10;
    let th = fit_atypical_thresholds(&out.pickup, &out.keys, train, 0.99, 3, DayTypeScheme::TwoWay).unwrap();
    let targets: Vec<usize> = (48 * 10..48 * 14).collect();
    let mask = th.select(&out.pickup, &targets, &out.keys);
    for s in 20..23 {
        let t = 48 * 12 + s;
        assert!(mask[(t - 48 * 10) * 4 + 2], "spike at {t} not selected");
    }
    let selected = mask.iter().filter(|&&m| m).count();
    assert!(selected < mask.len() / 10, "{selected} of {}", mask.len());
}

#[test]
fn baselines_are_exact_on_periodic_series() {
    let slots = 6;
    let periods = slots * 14;
    let values: Vec<u32> = (0..periods * 2).map(|i| ((i / 2) % slots) as u32 * 3 + (i % 2) as u32).collect();
    let t = DemandTensor::from_vec(LogKind::Pickup, periods, 2, values).unwrap();
    let k = keys(periods, slots);
    let ha = HistoricalAverage::fit(&t, &k, 0..slots * 10, DayTypeScheme::ThreeWay).unwrap();
    let targets: Vec<usize> = (slots * 10..periods).collect();
    let truth: Vec<f64> = targets.iter().flat_map(|&u| t.row(u).iter().map(|&x| x as f64)).collect();
    assert_eq!(ha.predict(&targets, &k), truth);
    let p = baseline_persistence(&t, &targets).unwrap();
    let prev: Vec<f64> = targets.iter().flat_map(|&u| t.row(u - 1).iter().map(|&x| x as f64)).collect();
    assert_eq!(p, prev);
    assert!(baseline_persistence(&t, &[0]).is_err());

    let flat = DemandTensor::from_vec(LogKind::Pickup, periods, 2, vec![9; periods * 2]).unwrap();
    assert!(baseline_persistence(&flat, &targets).unwrap().iter().all(|&v| v == 9.0));
}

#[test]
fn empty_history_bucket_uses_region_mean() {
    let slots = 2;
    let t = DemandTensor::from_vec(LogKind::Pickup, 4, 1, vec![2, 4, 6, 8]).unwrap();
    let k = keys(4, slots);
    let ha = HistoricalAverage::fit(&t, &k, 0..4, DayTypeScheme::ThreeWay).unwrap();
    let holiday = TemporalKey::new(0, slots, 2, true, false).unwrap();
    assert_eq!(ha.predict_one(0, &holiday), 5.0);
    let monday0 = TemporalKey::new(0, slots, 0, false, false).unwrap();
    assert_eq!(ha.predict_one(0, &monday0), 4.0);
}

proptest! {
    #[test]
    fn metrics_are_symmetric_and_non_negative(
        pairs in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..40),
    ) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let ab = rmse(&a, &b, 0.0).unwrap();
        let ba = rmse(&b, &a, 0.0).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        prop_assert_eq!(rmse(&a, &a, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn raising_k_never_adds_samples(
        truths in prop::collection::vec(0u32..50, 1..60),
        k1 in 0u32..30,
        dk in 0u32..20,
    ) {
        let t: Vec<f64> = truths.iter().map(|&x| f64::from(x)).collect();
        let p = vec![1.0; t.len()];
        let n = |k: f64| Metrics::compute(&p, &t, k).map(|m| m.n_evaluated).unwrap_or(0);
        prop_assert!(n(f64::from(k1 + dk)) <= n(f64::from(k1)));
    }

    #[test]
    fn higher_quantile_selects_a_subset(
        seed in 0u64..1000,
        q1 in 0.5f64..0.95,
        dq in 0.0f64..0.05,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots = 4;
        let periods = slots * 21;
        let values: Vec<u32> = (0..periods * 3).map(|_| rng.random_range(0..40)).collect();
        let t = DemandTensor::from_vec(LogKind::Pickup, periods, 3, values).unwrap();
        let k = keys(periods, slots);
        let targets: Vec<usize> = (slots * 14..periods).collect();
        let lo = fit_atypical_thresholds(&t, &k, 0..slots * 14, q1, 2, DayTypeScheme::TwoWay).unwrap();
        let hi = fit_atypical_thresholds(&t, &k, 0..slots * 14, q1 + dq, 2, DayTypeScheme::TwoWay).unwrap();
        let a = lo.select(&t, &targets, &k);
        let b = hi.select(&t, &targets, &k);
        prop_assert!(a.iter().zip(&b).all(|(&x, &y)| !y || x));
    }
}
