mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use survpath::metrics::{c_index, chi2_sf, km_estimate, logrank_test, median_split, RiskedCohort};

/// Brute force over unordered pairs.
fn c_index_oracle(risks: &[f64], times: &[f64], censored: &[bool]) -> Option<f64> {
    let (mut score, mut pairs) = (0.0, 0.0);
    for i in 0..risks.len() {
        for j in i + 1..risks.len() {
            let (first, second) = if times[i] < times[j] {
                (i, j)
            } else if times[j] < times[i] {
                (j, i)
            } else {
                continue;
            };
            if censored[first] {
                continue;
            }
            pairs += 1.0;
            if risks[first] > risks[second] {
                score += 1.0;
            } else if risks[first] == risks[second] {
                score += 0.5;
            }
        }
    }
    (pairs > 0.0).then(|| score / pairs)
}

fn random_cohort(r: &mut impl Rng, n: usize) -> RiskedCohort {
    RiskedCohort::new(
        (0..n)
            .map(|_| (r.random_range(0.0..5.0) * 2.0f64).round() / 2.0)
            .collect(),
        (0..n).map(|_| r.random_range(1..12) as f64).collect(),
        (0..n).map(|_| r.random_bool(0.3)).collect(),
    )
    .unwrap()
}

#[test]
fn c_index_matches_pair_enumeration_exactly() {
    let mut r = rng(404);
    let mut compared = 0;
    for _ in 0..200 {
        let n = r.random_range(2..=30);
        let c = random_cohort(&mut r, n);
        match (c_index(&c), c_index_oracle(&c.risks, &c.times, &c.censored)) {
            (Ok(a), Some(b)) => {
                assert_eq!(a, b);
                compared += 1;
            }
            (Err(_), None) => {}
            (a, b) => panic!("disagreement: {a:?} vs {b:?}"),
        }
    }
    assert!(compared > 150);
}

#[test]
fn km_six_patient_fixture() {
    // deaths at 2, 6, 6, 10; censored at 3 and 7
    let times = [2.0, 3.0, 6.0, 6.0, 7.0, 10.0];
    let censored = [false, true, false, false, true, false];
    let km = km_estimate(&times, &censored).unwrap();
    // S(2) = 5/6; S(6) = 5/6 · 2/4; S(10) = 0
    let expected = [
        (0.0, 1.0, 6),
        (2.0, 5.0 / 6.0, 6),
        (3.0, 5.0 / 6.0, 5),
        (6.0, 5.0 / 12.0, 4),
        (7.0, 5.0 / 12.0, 2),
        (10.0, 0.0, 1),
    ];
    assert_eq!(km.times.len(), expected.len());
    for (k, (t, s, n)) in expected.iter().enumerate() {
        assert_eq!(km.times[k], *t);
        assert!((km.survival[k] - s).abs() < 1e-12);
        assert_eq!(km.at_risk[k], *n);
        assert!((km.survival_at(*t) - s).abs() < 1e-12);
    }
    assert!((km.survival_at(1.999) - 1.0).abs() < 1e-12);
    assert!((km.survival_at(8.5) - 5.0 / 12.0).abs() < 1e-12);
}

#[test]
fn logrank_identical_groups_is_null() {
    let mut r = rng(3);
    for _ in 0..20 {
        let a = random_cohort(&mut r, 12);
        if a.censored.iter().all(|c| *c) {
            continue;
        }
        let res = logrank_test(&a, &a.clone()).unwrap();
        assert_eq!(res.statistic, 0.0);
        assert!((res.p_value - 1.0).abs() < 1e-9);
    }
}

#[test]
fn logrank_early_versus_late_deaths() {
    let early = RiskedCohort::new(
        vec![0.0; 5],
        (1..=5).map(f64::from).collect(),
        vec![false; 5],
    )
    .unwrap();
    let late = RiskedCohort::new(
        vec![0.0; 5],
        (6..=10).map(f64::from).collect(),
        vec![false; 5],
    )
    .unwrap();
    let res = logrank_test(&early, &late).unwrap();

    // hypergeometric expectation and variance at each death time
    let (mut o, mut e, mut v) = (0.0, 0.0, 0.0);
    for t in 1..=10 {
        let n_a = (5 - (t - 1).min(5)) as f64;
        let n = (11 - t) as f64;
        let d_a = if t <= 5 { 1.0 } else { 0.0 };
        o += d_a;
        e += n_a / n;
        if n > 1.0 {
            v += (n_a / n) * (1.0 - n_a / n);
        }
    }
    let stat = (o - e) * (o - e) / v;
    assert!((res.statistic - stat).abs() < 1e-12);
    let p = 1.0 - ChiSquared::new(1.0).unwrap().cdf(stat);
    assert!((res.p_value - p).abs() < 1e-9);
    assert!(res.p_value < 0.05);
}

#[test]
fn chi_square_tail_matches_reference_cdf() {
    assert!((chi2_sf(3.841, 1.0) - 0.05).abs() < 1e-4);
    for df in [1.0, 2.0, 3.0, 7.5] {
        let dist = ChiSquared::new(df).unwrap();
        for x in [0.01, 0.5, 1.0, 3.841, 10.0, 40.0] {
            assert!(
                (chi2_sf(x, df) - (1.0 - dist.cdf(x))).abs() < 1e-10,
                "df {df} x {x}"
            );
        }
    }
}

#[test]
fn median_split_examples() {
    let c = |r: Vec<f64>| {
        RiskedCohort::new(r.clone(), vec![1.0; r.len()], vec![false; r.len()]).unwrap()
    };
    assert_eq!(
        median_split(&c(vec![1.0, 2.0, 3.0, 4.0])).unwrap(),
        (vec![2, 3], vec![0, 1])
    );
    assert_eq!(
        median_split(&c(vec![2.0; 4])).unwrap(),
        (vec![], vec![0, 1, 2, 3])
    );
    assert_eq!(
        median_split(&c(vec![1.0, 2.0, 3.0])).unwrap(),
        (vec![2], vec![0, 1])
    );
}

proptest! {
    #[test]
    fn c_index_flips_under_negation(seed in any::<u64>(), n in 2usize..25) {
        let mut r = rng(seed);
        // distinct times and risks, no censoring
        let times: Vec<f64> = (0..n).map(|i| i as f64 + r.random_range(0.0..0.5)).collect();
        let risks: Vec<f64> = (0..n).map(|i| (i * 7919 % 1009) as f64 + r.random_range(0.0..0.5)).collect();
        let a = RiskedCohort::new(risks.clone(), times.clone(), vec![false; n]).unwrap();
        let b = RiskedCohort::new(risks.iter().map(|x| -x).collect(), times, vec![false; n]).unwrap();
        prop_assert!((c_index(&a).unwrap() + c_index(&b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn c_index_ignores_monotone_transforms(seed in any::<u64>(), n in 2usize..25) {
        let mut r = rng(seed);
        let c = random_cohort(&mut r, n);
        let t = RiskedCohort::new(
            c.risks.iter().map(|x| x * x * x + 3.0 * x - 1.0).collect(),
            c.times.clone(),
            c.censored.clone(),
        ).unwrap();
        prop_assert_eq!(c_index(&c).ok(), c_index(&t).ok());
    }

    #[test]
    fn km_unchanged_by_duplicating_every_patient(seed in any::<u64>(), n in 1usize..20) {
        let mut r = rng(seed);
        let c = random_cohort(&mut r, n);
        let single = km_estimate(&c.times, &c.censored).unwrap();
        let times: Vec<f64> = c.times.iter().chain(&c.times).copied().collect();
        let cens: Vec<bool> = c.censored.iter().chain(&c.censored).copied().collect();
        let double = km_estimate(&times, &cens).unwrap();
        prop_assert_eq!(&single.times, &double.times);
        for (a, b) in single.survival.iter().zip(&double.survival) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
