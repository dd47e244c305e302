mod common;

use common::{max_rel_err, random_matrix, rng, small_model};
use survpath::autodiff::{Mode, Tape};
use survpath::matrix::Matrix;
use survpath::model::{ModelConfig, SurvPathModel};
use survpath::param::ParamStore;
use survpath::survival::{nll_loss_on_tape, SurvivalRecord};

const N_P: usize = 3;
const N_H: usize = 6;
const D: usize = 8;
const BINS: usize = 4;
const GENES: usize = 7;
const EMBED: usize = 5;
const H: f64 = 1e-5;

struct Batch {
    genes: Vec<Matrix>,
    patches: Vec<Matrix>,
    records: Vec<SurvivalRecord>,
}

fn batch(seed: u64) -> Batch {
    let mut r = rng(seed);
    let records = vec![
        SurvivalRecord {
            time: 3.0,
            censored: false,
            bin: 2,
        },
        SurvivalRecord {
            time: 9.0,
            censored: true,
            bin: 1,
        },
        SurvivalRecord {
            time: 1.0,
            censored: false,
            bin: 0,
        },
    ];
    Batch {
        genes: (0..records.len())
            .map(|_| random_matrix(1, GENES, &mut r))
            .collect(),
        patches: (0..records.len())
            .map(|_| random_matrix(N_H, EMBED, &mut r))
            .collect(),
        records,
    }
}

/// Summed loss over the batch; dropout masks are fixed by seed so the map is smooth.
fn loss(
    model: &SurvPathModel,
    store: &ParamStore,
    b: &Batch,
    grads: bool,
) -> (f64, Option<ParamStore>) {
    let mut tape = Tape::with_mode(Mode::Train);
    let mut heads = Vec::new();
    let m = SurvPathModel {
        store: store.clone(),
        ..model.clone()
    };
    for (i, (g, e)) in b.genes.iter().zip(&b.patches).enumerate() {
        let gv = tape.leaf(g.clone());
        let ev = tape.leaf(e.clone());
        heads.push(
            m.forward_on_tape(&mut tape, gv, ev, 100 + i as u64)
                .unwrap()
                .head,
        );
    }
    let l = nll_loss_on_tape(&mut tape, &heads, &b.records).unwrap();
    let value = tape.value(l).item();
    if !grads {
        return (value, None);
    }
    let mut s = store.clone();
    s.zero_grad();
    tape.backward(l, &mut s).unwrap();
    (value, Some(s))
}

fn check_all_parameters(config: ModelConfig, seed: u64) {
    assert_eq!(config.n_bins, BINS);
    let model = small_model(config, N_P, GENES, EMBED, seed);
    let b = batch(seed + 1);
    let (_, Some(with_grads)) = loss(&model, &model.store, &b, true) else {
        unreachable!()
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in model.store.ids().collect::<Vec<_>>() {
        let analytic = with_grads.grad(id).clone();
        let mut numeric = Matrix::zeros(analytic.rows(), analytic.cols());
        for k in 0..analytic.len() {
            let mut plus = model.store.clone();
            plus.value_mut(id).data_mut()[k] += H;
            let mut minus = model.store.clone();
            minus.value_mut(id).data_mut()[k] -= H;
            numeric.data_mut()[k] =
                (loss(&model, &plus, &b, false).0 - loss(&model, &minus, &b, false).0) / (2.0 * H);
            checked += 1;
        }
        let e = max_rel_err(&analytic, &numeric, 1e-6);
        assert!(
            e < 1e-4,
            "parameter `{}`: relative error {e}",
            model.store.get(id).name()
        );
        worst = worst.max(e);
    }
    assert_eq!(checked, model.store.total_elements());
    assert!(worst < 1e-4);
}

fn config() -> ModelConfig {
    ModelConfig {
        dim: D,
        n_bins: BINS,
        dropout: 0.25,
        ..ModelConfig::default()
    }
}

#[test]
fn full_model_matches_finite_differences() {
    check_all_parameters(config(), 11);
}

#[test]
fn pathway_to_patch_only_matches_finite_differences() {
    check_all_parameters(
        ModelConfig {
            patch_to_pathway: false,
            ..config()
        },
        12,
    );
}

#[test]
fn patch_to_pathway_only_matches_finite_differences() {
    check_all_parameters(
        ModelConfig {
            pathway_to_patch: false,
            ..config()
        },
        13,
    );
}

#[test]
fn dense_fallback_matches_finite_differences() {
    check_all_parameters(
        ModelConfig {
            dense_fallback: true,
            ..config()
        },
        14,
    );
}

#[test]
fn logit_risk_mode_matches_finite_differences() {
    check_all_parameters(
        ModelConfig {
            risk_mode: survpath::survival::RiskMode::Logits,
            ..config()
        },
        15,
    );
}

#[test]
fn input_gradients_match_finite_differences() {
    let model = small_model(config(), N_P, GENES, EMBED, 21);
    let mut r = rng(22);
    let g0 = random_matrix(1, GENES, &mut r);
    let e0 = random_matrix(N_H, EMBED, &mut r);
    let risk = |g: &Matrix, e: &Matrix| -> (f64, Matrix, Matrix) {
        let mut tape = Tape::with_mode(Mode::Eval);
        let gv = tape.leaf(g.clone());
        let ev = tape.leaf(e.clone());
        let vars = model.forward_on_tape(&mut tape, gv, ev, 0).unwrap();
        let grads = tape.gradients(vars.head.risk).unwrap();
        (
            tape.value(vars.head.risk).item(),
            grads.wrt(gv),
            grads.wrt(ev),
        )
    };
    let (_, dg, de) = risk(&g0, &e0);
    let numeric = |x: &Matrix, f: &dyn Fn(&Matrix) -> f64| {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for k in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[k] += H;
            let mut m = x.clone();
            m.data_mut()[k] -= H;
            out.data_mut()[k] = (f(&p) - f(&m)) / (2.0 * H);
        }
        out
    };
    let ng = numeric(&g0, &|g| risk(g, &e0).0);
    let ne = numeric(&e0, &|e| risk(&g0, e).0);
    assert!(max_rel_err(&dg, &ng, 1e-6) < 1e-4);
    assert!(max_rel_err(&de, &ne, 1e-6) < 1e-4);
}
