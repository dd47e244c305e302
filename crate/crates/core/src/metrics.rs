//! Survival evaluation: concordance, Kaplan–Meier, logrank, median split.
//!
//! The logrank p-value uses the chi-square survival function
//! `Q(df/2, x/2)`, the regularized upper incomplete gamma function, computed
//! by its power series when `x < a + 1` and by a modified-Lentz continued
//! fraction otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Risk, time and censorship per patient.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RiskedCohort {
    pub risks: Vec<f64>,
    pub times: Vec<f64>,
    pub censored: Vec<bool>,
}

impl RiskedCohort {
    pub fn new(risks: Vec<f64>, times: Vec<f64>, censored: Vec<bool>) -> Result<Self> {
        if risks.len() != times.len() || times.len() != censored.len() {
            return Err(Error::Contract(format!(
                "cohort columns have lengths {}, {}, {}",
                risks.len(),
                times.len(),
                censored.len()
            )));
        }
        if let Some(t) = times.iter().find(|t| !(**t >= 0.0)) {
            return Err(Error::Contract(format!(
                "survival time {t} is negative or NaN"
            )));
        }
        Ok(Self {
            risks,
            times,
            censored,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            risks: idx.iter().map(|&i| self.risks[i]).collect(),
            times: idx.iter().map(|&i| self.times[i]).collect(),
            censored: idx.iter().map(|&i| self.censored[i]).collect(),
        }
    }
}

/// Concordance index.
///
/// A pair `(i, j)` is comparable when `t_i < t_j` and `i` had an observed
/// event; it is concordant when `risk_i > risk_j`. Risk ties count one half.
pub fn c_index(cohort: &RiskedCohort) -> Result<f64> {
    let n = cohort.len();
    // doubled counts keep the tie halves integral
    let mut numer: u64 = 0;
    let mut comparable: u64 = 0;
    for i in 0..n {
        if cohort.censored[i] {
            continue;
        }
        for j in 0..n {
            if cohort.times[i] < cohort.times[j] {
                comparable += 1;
                let (ri, rj) = (cohort.risks[i], cohort.risks[j]);
                if ri > rj {
                    numer += 2;
                } else if ri == rj {
                    numer += 1;
                }
            }
        }
    }
    if comparable == 0 {
        return Err(Error::Undefined("c-index has no comparable pairs".into()));
    }
    Ok(numer as f64 / (2 * comparable) as f64)
}

/// Product-limit survival estimate on the grid `{0} ∪ observed times`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    event_times: Vec<f64>,
    event_survival: Vec<f64>,
    all_times: Vec<f64>,
}

impl KMCurve {
    /// `S(t)`: right-continuous step function.
    pub fn survival_at(&self, t: f64) -> f64 {
        let k = self.event_times.partition_point(|&e| e <= t);
        if k == 0 {
            1.0
        } else {
            self.event_survival[k - 1]
        }
    }

    /// Number of patients with observed time `>= t`.
    pub fn at_risk_at(&self, t: f64) -> usize {
        self.all_times.len() - self.all_times.partition_point(|&x| x < t)
    }
}

pub fn km_estimate(times: &[f64], censored: &[bool]) -> Result<KMCurve> {
    if times.is_empty() || times.len() != censored.len() {
        return Err(Error::Contract(format!(
            "Kaplan-Meier needs aligned, nonempty inputs ({} times, {} flags)",
            times.len(),
            censored.len()
        )));
    }
    let mut all_times = times.to_vec();
    all_times.sort_by(f64::total_cmp);
    let mut distinct = all_times.clone();
    distinct.dedup();

    let mut event_times = Vec::new();
    let mut event_survival = Vec::new();
    let mut s = 1.0;
    for &t in &distinct {
        let deaths = times
            .iter()
            .zip(censored)
            .filter(|(&x, &c)| x == t && !c)
            .count();
        if deaths == 0 {
            continue;
        }
        let at_risk = all_times.len() - all_times.partition_point(|&x| x < t);
        s *= 1.0 - deaths as f64 / at_risk as f64;
        event_times.push(t);
        event_survival.push(s);
    }

    let mut grid = vec![0.0];
    grid.extend(distinct.into_iter().filter(|&t| t > 0.0));
    let mut curve = KMCurve {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        event_times,
        event_survival,
        all_times,
    };
    for &t in &grid {
        curve
            .survival
            .push(if t == 0.0 { 1.0 } else { curve.survival_at(t) });
        curve.at_risk.push(curve.at_risk_at(t));
    }
    curve.times = grid;
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogrankResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-group logrank chi-square test with one degree of freedom.
pub fn logrank_test(group_a: &RiskedCohort, group_b: &RiskedCohort) -> Result<LogrankResult> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::Contract("logrank groups must be nonempty".into()));
    }
    let mut event_times: Vec<f64> = group_a
        .times
        .iter()
        .zip(&group_a.censored)
        .chain(group_b.times.iter().zip(&group_b.censored))
        .filter(|(_, &c)| !c)
        .map(|(&t, _)| t)
        .collect();
    if event_times.is_empty() {
        return Err(Error::Undefined(
            "logrank test with no events in either group".into(),
        ));
    }
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();

    let at_risk = |g: &RiskedCohort, t: f64| g.times.iter().filter(|&&x| x >= t).count() as f64;
    let deaths = |g: &RiskedCohort, t: f64| {
        g.times
            .iter()
            .zip(&g.censored)
            .filter(|(&x, &c)| x == t && !c)
            .count() as f64
    };

    let (mut observed, mut expected, mut variance) = (0.0, 0.0, 0.0);
    for &t in &event_times {
        let (n_a, n_b) = (at_risk(group_a, t), at_risk(group_b, t));
        let (d_a, d_b) = (deaths(group_a, t), deaths(group_b, t));
        let (n, d) = (n_a + n_b, d_a + d_b);
        observed += d_a;
        expected += d * n_a / n;
        if n > 1.0 {
            variance += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1.0);
        }
    }
    if variance <= 0.0 {
        return Err(Error::Undefined("logrank variance is zero".into()));
    }
    let statistic = (observed - expected).powi(2) / variance;
    Ok(LogrankResult {
        statistic,
        p_value: chi2_sf(statistic, 1.0),
    })
}

/// Indices strictly above the median risk, and the rest.
pub fn median_split(cohort: &RiskedCohort) -> Result<(Vec<usize>, Vec<usize>)> {
    if cohort.len() < 2 {
        return Err(Error::Contract(
            "median split needs at least 2 patients".into(),
        ));
    }
    let mut sorted = cohort.risks.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    let (high, low): (Vec<usize>, Vec<usize>) = (0..m).partition(|&i| cohort.risks[i] > median);
    Ok((high, low))
}

/// Chi-square survival function `P(X > x)` for `df` degrees of freedom.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(0.5 * df, 0.5 * x)
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_continued_fraction(a, x)
    }
}

const GAMMA_EPS: f64 = 1e-15;
const GAMMA_MAX_ITER: usize = 1000;

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..GAMMA_MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_q_continued_fraction(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Lanczos approximation (g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut s = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        s += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cohort(risks: &[f64], times: &[f64], censored: &[bool]) -> RiskedCohort {
        RiskedCohort::new(risks.to_vec(), times.to_vec(), censored.to_vec()).unwrap()
    }

    #[test]
    fn perfect_and_tied_rankings() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let neg: Vec<f64> = t.iter().map(|x| -x).collect();
        assert_eq!(c_index(&cohort(&neg, &t, &[false; 4])).unwrap(), 1.0);
        assert_eq!(c_index(&cohort(&[7.0; 4], &t, &[false; 4])).unwrap(), 0.5);
    }

    #[test]
    fn no_comparable_pairs_is_undefined() {
        let c = cohort(&[1.0, 2.0], &[1.0, 2.0], &[true, true]);
        assert!(matches!(c_index(&c), Err(Error::Undefined(_))));
    }

    #[test]
    fn four_patient_hand_case() {
        // comparable: (1,2) (1,3) (1,4) (2,3) (2,4) (4,-) ...
        // i=1 (r3,t1): vs 2 (r2) yes, vs 3 (r2.5) yes, vs 4 (r1) yes -> 3 of 3
        // i=2 (r2,t2): vs 3 (r2.5) no, vs 4 (r1) yes -> 1 of 2
        // i=4 (r1,t4): nothing later; i=3 censored
        let c = cohort(
            &[3.0, 2.0, 2.5, 1.0],
            &[1.0, 2.0, 3.0, 4.0],
            &[false, false, true, false],
        );
        assert_eq!(c_index(&c).unwrap(), 4.0 / 5.0);
    }

    #[test]
    fn km_single_death() {
        let km = km_estimate(&[5.0], &[false]).unwrap();
        assert_eq!(km.survival_at(4.999), 1.0);
        assert_eq!(km.survival_at(5.0), 0.0);
        assert_eq!(km.survival_at(50.0), 0.0);
        assert_eq!(km.times, vec![0.0, 5.0]);
        assert_eq!(km.survival, vec![1.0, 0.0]);
    }

    #[test]
    fn km_all_censored_is_flat() {
        let km = km_estimate(&[1.0, 2.0, 3.0], &[true; 3]).unwrap();
        assert!(km.survival.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn median_split_conventions() {
        let c = |r: &[f64]| cohort(r, &vec![1.0; r.len()], &vec![false; r.len()]);
        assert_eq!(
            median_split(&c(&[1.0, 2.0, 3.0, 4.0])).unwrap(),
            (vec![2, 3], vec![0, 1])
        );
        assert_eq!(
            median_split(&c(&[5.0; 4])).unwrap(),
            (vec![], vec![0, 1, 2, 3])
        );
        assert_eq!(
            median_split(&c(&[1.0, 2.0, 3.0])).unwrap(),
            (vec![2], vec![0, 1])
        );
        assert!(median_split(&c(&[1.0])).is_err());
    }

    #[test]
    fn chi2_reference_points() {
        assert!((chi2_sf(3.841_458_820_694_124, 1.0) - 0.05).abs() < 1e-9);
        assert_eq!(chi2_sf(0.0, 1.0), 1.0);
        // df = 2 has the closed form exp(-x/2)
        for x in [0.1, 1.0, 4.0, 30.0] {
            assert!((chi2_sf(x, 2.0) - (-x / 2.0f64).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn ln_gamma_integers() {
        let mut fact = 1.0f64;
        for n in 1..15 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-10, "{n}");
            fact *= n as f64;
        }
    }

    #[test]
    fn logrank_identical_groups() {
        let g = cohort(
            &[0.0; 5],
            &[1.0, 3.0, 4.0, 6.0, 9.0],
            &[false, true, false, false, true],
        );
        let r = logrank_test(&g, &g).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn logrank_without_events_is_undefined() {
        let g = cohort(&[0.0; 2], &[1.0, 2.0], &[true, true]);
        assert!(matches!(logrank_test(&g, &g), Err(Error::Undefined(_))));
    }
}
