use mlr::eval::{hns, iqm, optimality_gap, optimality_gap_at, performance_profile, ScoreMatrix};
use mlr::rng::Rng;
use mlr::MlrError;
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

/// Trimmed mean by replication: each value is copied four times, so the
/// quartiles of `4n` copies fall on whole elements and plain trimming of `n`
/// copies from each end is exact.
fn replicated_iqm(values: &[f64]) -> f64 {
    let mut copies: Vec<f64> = values.iter().flat_map(|&v| [v; 4]).collect();
    copies.sort_by(f64::total_cmp);
    let n = values.len();
    let middle = &copies[n..3 * n];
    middle.iter().sum::<f64>() / middle.len() as f64
}

/// Shortfall below `gamma` as the integral of the empirical CDF up to
/// `gamma`, evaluated piecewise between sorted scores.
fn integrated_gap(values: &[f64], gamma: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut area = 0.0;
    for (i, &x) in v.iter().enumerate() {
        if x >= gamma {
            break;
        }
        let next = v.get(i + 1).copied().unwrap_or(gamma).min(gamma);
        area += (i + 1) as f64 / n * (next - x);
    }
    area
}

#[test]
fn iqm_matches_replicated_trimming_on_500_vectors() {
    let mut rng = Rng::seed_from_u64(21);
    for _ in 0..500 {
        let n = rng.random_range(1..60);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        assert!((iqm(&v) - replicated_iqm(&v)).abs() < 1e-9, "{v:?}");
    }
}

#[test]
fn iqm_hand_examples() {
    assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0]), 2.5);
    assert_eq!(iqm(&[4.0, 1.0, 100.0, 2.0, 3.0, -50.0, 2.5, 3.5]), (2.0 + 2.5 + 3.0 + 3.5) / 4.0);
    assert_eq!(iqm(&[7.0]), 7.0);
}

#[test]
fn optimality_gap_matches_cdf_integration() {
    let mut rng = Rng::seed_from_u64(22);
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..2.5)).collect();
        assert!((optimality_gap(&v) - integrated_gap(&v, 1.0)).abs() < 1e-12);
        assert!((optimality_gap_at(&v, 0.3) - integrated_gap(&v, 0.3)).abs() < 1e-12);
    }
    assert_eq!(optimality_gap(&[1.5, 2.0]), 0.0);
    assert_eq!(optimality_gap(&[0.0, 0.5]), 0.75);
}

#[test]
fn profile_matches_indicator_enumeration() {
    let mut rng = Rng::seed_from_u64(23);
    for _ in 0..100 {
        let (m, n) = (rng.random_range(1..8), rng.random_range(1..6));
        let scores: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| (rng.random_range(0..8) as f64) / 4.0).collect()).collect();
        let taus: Vec<f64> = (0..9).map(|i| i as f64 / 4.0).collect();
        let got = performance_profile(&scores, &taus);
        for (t, g) in taus.iter().zip(got) {
            let mut above = 0usize;
            for row in &scores {
                for &x in row {
                    if x > *t {
                        above += 1;
                    }
                }
            }
            assert_eq!(g, above as f64 / (m * n) as f64);
        }
    }
}

#[test]
fn alien_normalised_score() {
    let h = hns(990.1, 227.8, 7127.7).unwrap();
    assert!((h - 0.1105).abs() < 1e-4, "{h}");
    assert!(matches!(hns(1.0, 3.0, 3.0), Err(MlrError::DegenerateReference(_))));
}

#[test]
fn report_aggregates_normalised_scores() {
    let m = ScoreMatrix::new(
        vec!["a".into(), "b".into()],
        vec![vec![10.0, 0.0], vec![20.0, 5.0]],
        vec![(0.0, 20.0), (0.0, 10.0)],
    )
    .unwrap();
    let r = m.report(&[0.0, 0.5]).unwrap();
    assert_eq!(r.hns, vec![vec![0.5, 0.0], vec![1.0, 0.5]]);
    assert_eq!(r.task_means, vec![15.0, 2.5]);
    assert_eq!(r.iqm, 0.5);
    assert_eq!(r.optimality_gap, 0.5);
    assert_eq!(r.profile, vec![(0.0, 0.75), (0.5, 0.25)]);
    let bad = ScoreMatrix::new(vec!["a".into()], vec![vec![1.0, 2.0]], vec![(0.0, 1.0)]);
    assert!(matches!(bad, Err(MlrError::LengthMismatch { .. })));
}

proptest! {
    #[test]
    fn iqm_lies_between_the_quartile_values(v in proptest::collection::vec(-100.0f64..100.0, 1..50)) {
        let q = iqm(&v);
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(q >= lo - 1e-9 && q <= hi + 1e-9);
        prop_assert!((q - replicated_iqm(&v)).abs() < 1e-9);
    }

    #[test]
    fn iqm_ignores_order_and_shifts(v in proptest::collection::vec(-10.0f64..10.0, 1..30), c in -5.0f64..5.0) {
        let mut r = v.clone();
        r.reverse();
        prop_assert!((iqm(&v) - iqm(&r)).abs() < 1e-12);
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert!((iqm(&shifted) - iqm(&v) - c).abs() < 1e-9);
    }

    #[test]
    fn profiles_never_increase(rows in proptest::collection::vec(proptest::collection::vec(-2.0f64..3.0, 3), 1..6)) {
        let taus: Vec<f64> = (0..20).map(|i| -2.0 + i as f64 * 0.25).collect();
        let p = performance_profile(&rows, &taus);
        prop_assert!(p.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn gap_is_bounded_by_the_threshold(v in proptest::collection::vec(0.0f64..2.0, 1..20)) {
        let g = optimality_gap(&v);
        prop_assert!((0.0..=1.0).contains(&g));
    }
}
