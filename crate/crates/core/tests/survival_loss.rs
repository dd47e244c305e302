mod common;

use common::rng;
use rand::Rng;
use survpath::autodiff::Tape;
use survpath::matrix::Matrix;
use survpath::survival::{
    hazards_on_tape, nll_loss_on_tape, nll_survival_loss, HazardOutput, RiskMode, SurvivalRecord,
    HAZARD_EPS,
};

/// Direct evaluation from logits with products instead of log-sums.
fn oracle(logits: &[Vec<f64>], records: &[SurvivalRecord]) -> f64 {
    let mut total = 0.0;
    for (z, r) in logits.iter().zip(records) {
        let h: Vec<f64> = z
            .iter()
            .map(|v| (1.0 / (1.0 + (-v).exp())).clamp(HAZARD_EPS, 1.0 - HAZARD_EPS))
            .collect();
        let surv = |j: isize| -> f64 {
            if j < 0 {
                1.0
            } else {
                h[..=j as usize].iter().map(|x| 1.0 - x).product()
            }
        };
        let y = r.bin as isize;
        let c = if r.censored { 1.0 } else { 0.0 };
        total -= c * surv(y).ln() + (1.0 - c) * surv(y - 1).ln() + (1.0 - c) * h[r.bin].ln();
    }
    total
}

#[test]
fn loss_matches_direct_evaluation_on_random_batches() {
    let mut r = rng(99);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n_bins = r.random_range(2..=8);
        let batch = r.random_range(1..=8);
        let logits: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..n_bins).map(|_| r.random_range(-6.0..6.0)).collect())
            .collect();
        let records: Vec<SurvivalRecord> = (0..batch)
            .map(|_| SurvivalRecord {
                time: r.random_range(0.0..100.0),
                censored: r.random_bool(0.4),
                bin: r.random_range(0..n_bins),
            })
            .collect();
        let expected = oracle(&logits, &records);

        let outputs: Vec<HazardOutput> = logits
            .iter()
            .map(|z| HazardOutput::from_logits(z, RiskMode::Survival))
            .collect();
        let plain = nll_survival_loss(&outputs, &records).unwrap();

        let mut tape = Tape::new();
        let heads: Vec<_> = logits
            .iter()
            .map(|z| {
                let v = tape.leaf(Matrix::row_vector(z));
                hazards_on_tape(&mut tape, v, RiskMode::Survival).unwrap()
            })
            .collect();
        let l = nll_loss_on_tape(&mut tape, &heads, &records).unwrap();
        let taped = tape.value(l).item();

        worst = worst
            .max((plain - expected).abs())
            .max((taped - expected).abs());
    }
    assert!(worst < 1e-10, "max abs error {worst}");
}

#[test]
fn risk_rises_with_every_hazard() {
    let mut r = rng(5);
    for _ in 0..50 {
        let n = r.random_range(2..=6);
        let base: Vec<f64> = (0..n).map(|_| r.random_range(0.01..0.9)).collect();
        let risk0 = HazardOutput::from_hazards(base.clone()).risk;
        for j in 0..n {
            let mut h = base.clone();
            h[j] += 0.05;
            assert!(HazardOutput::from_hazards(h).risk > risk0);
        }
    }
}
