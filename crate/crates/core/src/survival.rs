//! Discrete-time survival head: bins, hazards, cumulative survival, the
//! censored negative log-likelihood, and the scalar patient risk.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::param::{ParamId, ParamStore};

pub const DEFAULT_BINS: usize = 4;
/// Hazards are clamped into `[HAZARD_EPS, 1 - HAZARD_EPS]` before any log.
pub const HAZARD_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    /// Months from diagnosis to death or last follow-up.
    pub time: f64,
    /// `true` when the event was not observed (c = 1).
    pub censored: bool,
    pub bin: usize,
}

impl SurvivalRecord {
    pub fn c(&self) -> f64 {
        if self.censored {
            1.0
        } else {
            0.0
        }
    }
}

/// `n - 1` strictly increasing cut points splitting time into `n` bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinEdges {
    pub edges: Vec<f64>,
}

impl BinEdges {
    pub fn n_bins(&self) -> usize {
        self.edges.len() + 1
    }

    /// Number of edges strictly below `t`.
    pub fn bin(&self, t: f64) -> usize {
        self.edges.iter().filter(|&&e| e < t).count()
    }

    pub fn record(&self, time: f64, censored: bool) -> SurvivalRecord {
        SurvivalRecord {
            time,
            censored,
            bin: self.bin(time),
        }
    }
}

/// Linear-interpolation quantile of sorted data (position `q·(m-1)`).
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Cut points at the `k/n` quantiles of uncensored event times.
pub fn fit_bins(times: &[f64], censored: &[bool], n: usize) -> Result<BinEdges> {
    if times.len() != censored.len() {
        return Err(Error::Contract(format!(
            "{} times but {} censorship flags",
            times.len(),
            censored.len()
        )));
    }
    if n < 2 {
        return Err(Error::Fit(format!("need at least 2 bins, got {n}")));
    }
    let mut events: Vec<f64> = times
        .iter()
        .zip(censored)
        .filter(|(_, &c)| !c)
        .map(|(&t, _)| t)
        .collect();
    events.sort_by(f64::total_cmp);
    let mut distinct = events.clone();
    distinct.dedup();
    if distinct.len() < n {
        return Err(Error::Fit(format!(
            "{} distinct uncensored event times, need at least {n}",
            distinct.len()
        )));
    }
    let edges: Vec<f64> = (1..n)
        .map(|k| quantile_sorted(&events, k as f64 / n as f64))
        .collect();
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Fit(format!(
            "quantile cut points {edges:?} are not strictly increasing"
        )));
    }
    Ok(BinEdges { edges })
}

/// How the scalar risk is read off the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskMode {
    /// `-Σ_j S_j`, the negative sum of cumulative survival.
    #[default]
    Survival,
    /// `-Σ_j ŷ_j`, the negative sum of raw logits.
    Logits,
}

impl FromStr for RiskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "survival" => Ok(Self::Survival),
            "logits" => Ok(Self::Logits),
            other => Err(Error::Config(format!("unknown risk mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardOutput {
    pub logits: Vec<f64>,
    pub hazards: Vec<f64>,
    pub survival: Vec<f64>,
    pub risk: f64,
}

impl HazardOutput {
    pub fn from_logits(logits: &[f64], mode: RiskMode) -> Self {
        let hazards: Vec<f64> = logits
            .iter()
            .map(|&l| sigmoid(l).clamp(HAZARD_EPS, 1.0 - HAZARD_EPS))
            .collect();
        let mut out = Self::from_hazards(hazards);
        out.logits = logits.to_vec();
        if mode == RiskMode::Logits {
            out.risk = -logits.iter().sum::<f64>();
        }
        out
    }

    /// Build from hazards directly; logits are their log-odds.
    pub fn from_hazards(hazards: Vec<f64>) -> Self {
        let mut acc = 1.0;
        let survival: Vec<f64> = hazards
            .iter()
            .map(|h| {
                acc *= 1.0 - h;
                acc
            })
            .collect();
        let logits = hazards.iter().map(|h| (h / (1.0 - h)).ln()).collect();
        let mut out = Self {
            logits,
            hazards,
            survival,
            risk: 0.0,
        };
        out.risk = risk_score(&out);
        out
    }
}

/// `-Σ_j S_j`: higher risk means lower predicted survival.
pub fn risk_score(h: &HazardOutput) -> f64 {
    -h.survival.iter().sum::<f64>()
}

/// Tape handles for one patient's head outputs.
#[derive(Debug, Clone, Copy)]
pub struct HazardVars {
    pub logits: Var,
    pub hazards: Var,
    pub log_survival: Var,
    pub survival: Var,
    pub risk: Var,
}

impl HazardVars {
    pub fn materialize(&self, tape: &Tape) -> HazardOutput {
        HazardOutput {
            logits: tape.value(self.logits).data().to_vec(),
            hazards: tape.value(self.hazards).data().to_vec(),
            survival: tape.value(self.survival).data().to_vec(),
            risk: tape.value(self.risk).item(),
        }
    }
}

/// Hazards, survival and risk from a `1 x n` logit row.
pub fn hazards_on_tape(tape: &mut Tape, logits: Var, mode: RiskMode) -> Result<HazardVars> {
    if tape.value(logits).rows() != 1 {
        return Err(Error::Contract("logits must be a single row".into()));
    }
    let h = tape.sigmoid(logits);
    let hazards = tape.clamp(h, HAZARD_EPS, 1.0 - HAZARD_EPS);
    let one_minus = tape.affine(hazards, -1.0, 1.0);
    let log_one_minus = tape.log(one_minus);
    let log_survival = tape.cumsum_cols(log_one_minus);
    let survival = tape.exp(log_survival);
    let total = match mode {
        RiskMode::Survival => tape.sum(survival),
        RiskMode::Logits => tape.sum(logits),
    };
    let risk = tape.scale(total, -1.0);
    Ok(HazardVars {
        logits,
        hazards,
        log_survival,
        survival,
        risk,
    })
}

/// One patient's censored NLL term:
/// `-[c·log S(y) + (1-c)·log S(y-1) + (1-c)·log h(y)]`, `S(-1) = 1`.
pub fn nll_term_on_tape(tape: &mut Tape, head: &HazardVars, rec: &SurvivalRecord) -> Result<Var> {
    let n = tape.value(head.hazards).cols();
    if rec.bin >= n {
        return Err(Error::Index {
            what: "time bins",
            index: rec.bin,
            len: n,
        });
    }
    if rec.censored {
        let s = tape.select_cols(head.log_survival, &[rec.bin])?;
        return Ok(tape.scale(s, -1.0));
    }
    let h = tape.select_cols(head.hazards, &[rec.bin])?;
    let log_h = tape.log(h);
    let ll = if rec.bin > 0 {
        let s_prev = tape.select_cols(head.log_survival, &[rec.bin - 1])?;
        tape.add(s_prev, log_h)?
    } else {
        log_h
    };
    Ok(tape.scale(ll, -1.0))
}

/// Summed NLL over a batch of head outputs on the tape.
pub fn nll_loss_on_tape(
    tape: &mut Tape,
    heads: &[HazardVars],
    records: &[SurvivalRecord],
) -> Result<Var> {
    if heads.len() != records.len() || heads.is_empty() {
        return Err(Error::Contract(format!(
            "{} outputs for {} records",
            heads.len(),
            records.len()
        )));
    }
    let mut total = nll_term_on_tape(tape, &heads[0], &records[0])?;
    for (h, r) in heads.iter().zip(records).skip(1) {
        let t = nll_term_on_tape(tape, h, r)?;
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Summed NLL evaluated from materialized outputs.
pub fn nll_survival_loss(outputs: &[HazardOutput], records: &[SurvivalRecord]) -> Result<f64> {
    if outputs.len() != records.len() {
        return Err(Error::Contract(format!(
            "{} outputs for {} records",
            outputs.len(),
            records.len()
        )));
    }
    let mut total = 0.0;
    for (o, r) in outputs.iter().zip(records) {
        let mut tape = Tape::new();
        let hz = tape.leaf(Matrix::row_vector(&o.hazards));
        let clamped = tape.clamp(hz, HAZARD_EPS, 1.0 - HAZARD_EPS);
        let one_minus = tape.affine(clamped, -1.0, 1.0);
        let l = tape.log(one_minus);
        let log_survival = tape.cumsum_cols(l);
        let vars = HazardVars {
            logits: hz,
            hazards: clamped,
            log_survival,
            survival: log_survival,
            risk: hz,
        };
        let term = nll_term_on_tape(&mut tape, &vars, r)?;
        total += tape.value(term).item();
    }
    Ok(total)
}

/// Two-layer classification head `2d → d → n` with SiLU in between.
#[derive(Debug, Clone)]
pub struct SurvivalHead {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl SurvivalHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        n_bins: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w1: store.add_glorot("head.w1", 2 * dim, dim, rng)?,
            b1: store.add("head.b1", Matrix::zeros(1, dim))?,
            w2: store.add_glorot("head.w2", dim, n_bins, rng)?,
            b2: store.add("head.b2", Matrix::zeros(1, n_bins))?,
        })
    }

    pub fn bind(store: &ParamStore) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(n)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter `{n}`")))
        };
        Ok(Self {
            w1: get("head.w1")?,
            b1: get("head.b1")?,
            w2: get("head.w2")?,
            b2: get("head.b2")?,
        })
    }

    pub fn logits_on_tape(&self, tape: &mut Tape, store: &ParamStore, pooled: Var) -> Result<Var> {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul(pooled, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.silu(h);
        let o = tape.matmul(h, w2)?;
        tape.add_row(o, b2)
    }
}
