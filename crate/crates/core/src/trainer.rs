//! Stratified k-fold cross-validation with batch-size-1 optimization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{c_index, RiskedCohort};
use crate::model::{ModelConfig, SurvPathModel};
use crate::optim::{Optimizer, OptimizerKind};
use crate::patch::{subsample_indices, DEFAULT_PATCH_SAMPLE};
use crate::pathway::{GeneExpressionVector, Granularity, NormStats, PathwayDefinition};
use crate::rng::{derive_seed, seeded};
use crate::survival::{fit_bins, nll_term_on_tape, BinEdges};

const SPLIT_STREAM: u64 = 0x5911;
const INIT_STREAM: u64 = 0x1417;
const ORDER_STREAM: u64 = 0x0bde;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patch_sample: usize,
    pub folds: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 1e-3,
            epochs: 20,
            patch_sample: DEFAULT_PATCH_SAMPLE,
            folds: 5,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "train.lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "train.weight_decay must be non-negative".into(),
            ));
        }
        if self.patch_sample == 0 {
            return Err(Error::Config(
                "train.patch_sample must be at least 1".into(),
            ));
        }
        if self.folds < 2 {
            return Err(Error::Config("train.folds must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    /// Site label per case id.
    pub strata: BTreeMap<String, String>,
}

/// Assign cases to folds: each stratum is shuffled with the seed and dealt
/// round-robin, continuing the deal where the previous stratum stopped.
pub fn make_folds(cases: &[(String, String)], folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if folds < 2 {
        return Err(Error::Config("at least 2 folds are required".into()));
    }
    if folds > cases.len() {
        return Err(Error::Data(format!(
            "{folds} folds for {} cases",
            cases.len()
        )));
    }
    let mut by_stratum: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (id, s) in cases {
        if !seen.insert(id.as_str()) {
            return Err(Error::Conflict(format!("case `{id}` listed twice")));
        }
        by_stratum.entry(s.as_str()).or_default().push(id.as_str());
    }
    let mut rng = seeded(derive_seed(seed, &[SPLIT_STREAM]));
    let mut assignment: BTreeMap<&str, usize> = BTreeMap::new();
    let mut next = 0;
    for ids in by_stratum.values_mut() {
        ids.shuffle(&mut rng);
        for id in ids.iter() {
            assignment.insert(id, next % folds);
            next += 1;
        }
    }
    let strata: BTreeMap<String, String> = cases.iter().cloned().collect();
    Ok((0..folds)
        .map(|f| {
            let (val, train): (Vec<_>, Vec<_>) = cases
                .iter()
                .map(|(id, _)| id.clone())
                .partition(|id| assignment[id.as_str()] == f);
            FoldSplit {
                fold: f,
                train,
                val,
                strata: strata.clone(),
            }
        })
        .collect())
}

/// Write `case_id,fold,role` with one row per case per fold.
pub fn write_splits(path: &Path, splits: &[FoldSplit]) -> Result<()> {
    let mut out = String::from("case_id,fold,role\n");
    for s in splits {
        for id in &s.train {
            let _ = writeln!(out, "{id},{},train", s.fold);
        }
        for id in &s.val {
            let _ = writeln!(out, "{id},{},val", s.fold);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_splits(path: &Path, strata: &BTreeMap<String, String>) -> Result<Vec<FoldSplit>> {
    #[derive(Deserialize)]
    struct Row {
        case_id: String,
        fold: usize,
        role: String,
    }
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut folds: BTreeMap<usize, FoldSplit> = BTreeMap::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 2,
            msg: e.to_string(),
        })?;
        let f = folds.entry(row.fold).or_insert_with(|| FoldSplit {
            fold: row.fold,
            train: Vec::new(),
            val: Vec::new(),
            strata: strata.clone(),
        });
        match row.role.as_str() {
            "train" => f.train.push(row.case_id),
            "val" => f.val.push(row.case_id),
            other => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 2,
                    msg: format!("role must be `train` or `val`, got `{other}`"),
                })
            }
        }
    }
    let out: Vec<FoldSplit> = folds.into_values().collect();
    for s in &out {
        let train: BTreeSet<_> = s.train.iter().collect();
        if let Some(id) = s.val.iter().find(|id| train.contains(id)) {
            return Err(Error::Data(format!(
                "case `{id}` is both train and val in fold {}",
                s.fold
            )));
        }
    }
    Ok(out)
}

/// Per-epoch row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when the validation split has no comparable pair.
    pub val_cindex: f64,
}

pub fn metrics_log_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_cindex\n");
    for r in log {
        let _ = writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.val_cindex);
    }
    out
}

/// Model-side inputs shared by every fold.
#[derive(Debug, Clone)]
pub struct ModelSetup {
    pub config: ModelConfig,
    pub granularity: Granularity,
    pub pathways: Vec<PathwayDefinition>,
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub model: SurvPathModel,
    pub meta: CheckpointMeta,
    pub log: Vec<EpochRecord>,
    /// Validation `(case_id, risk)` from the kept weights.
    pub val_risks: Vec<(String, f64)>,
    /// Every case that contributed a gradient.
    pub gradient_cases: BTreeSet<String>,
}

impl FoldResult {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.meta.clone())
    }

    pub fn best_cindex(&self) -> Option<f64> {
        let e = self.meta.best_epoch?;
        self.log.iter().find(|r| r.epoch == e).map(|r| r.val_cindex)
    }
}

fn indices_of(data: &Dataset, ids: &[String]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| {
            data.position(id).ok_or_else(|| {
                Error::Data(format!("case `{id}` from the split is not in the dataset"))
            })
        })
        .collect()
}

/// Validation risks with evaluation-mode forward passes over all patches.
pub fn predict_risks(
    model: &SurvPathModel,
    norm: &NormStats,
    data: &Dataset,
    idx: &[usize],
) -> Result<Vec<f64>> {
    idx.iter()
        .map(|&i| {
            let c = &data.cases[i];
            model.risk(&norm.apply(&c.expression)?, &c.patches.embeddings)
        })
        .collect()
}

fn cindex_or_nan(risks: Vec<f64>, data: &Dataset, idx: &[usize]) -> Result<f64> {
    let cohort = RiskedCohort::new(
        risks,
        idx.iter()
            .map(|&i| data.cases[i].label.time_months)
            .collect(),
        idx.iter()
            .map(|&i| data.cases[i].label.censored())
            .collect(),
    )?;
    match c_index(&cohort) {
        Ok(c) => Ok(c),
        Err(Error::Undefined(_)) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

pub fn train_fold(
    cfg: &TrainConfig,
    setup: &ModelSetup,
    split: &FoldSplit,
    data: &Dataset,
) -> Result<FoldResult> {
    cfg.validate()?;
    let fold = split.fold;
    let train_idx = indices_of(data, &split.train)?;
    let val_idx = indices_of(data, &split.val)?;
    if train_idx.is_empty() {
        return Err(Error::Data(format!("fold {fold} has no training cases")));
    }

    let norm = NormStats::fit(
        train_idx
            .iter()
            .map(|&i| data.cases[i].expression.as_slice()),
    )?;
    let bins: BinEdges = fit_bins(
        &train_idx
            .iter()
            .map(|&i| data.cases[i].label.time_months)
            .collect::<Vec<_>>(),
        &train_idx
            .iter()
            .map(|&i| data.cases[i].label.censored())
            .collect::<Vec<_>>(),
        setup.config.n_bins,
    )?;
    let genes: Vec<GeneExpressionVector> = data
        .cases
        .iter()
        .map(|c| norm.apply(&c.expression))
        .collect::<Result<_>>()?;

    let mut model = SurvPathModel::new(
        setup.config.clone(),
        setup.pathways.clone(),
        data.genes.len(),
        data.embed_dim(),
        derive_seed(cfg.seed, &[fold as u64, INIT_STREAM]),
    )?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay, &model.store);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut gradient_cases = BTreeSet::new();
    let mut best: Option<(f64, usize, crate::param::ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut seeded(derive_seed(
            cfg.seed,
            &[fold as u64, epoch as u64, ORDER_STREAM],
        )));
        let mut total = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let case = &data.cases[i];
            let step_seed = derive_seed(cfg.seed, &[fold as u64, epoch as u64, step as u64]);
            let keep = subsample_indices(case.patches.len(), cfg.patch_sample, step_seed)?;
            let mut tape = Tape::with_mode(Mode::Train);
            let g = tape.leaf(genes[i].as_row());
            let e = tape.leaf(case.patches.embeddings.select_rows(&keep));
            let vars = model.forward_on_tape(&mut tape, g, e, derive_seed(step_seed, &[1]))?;
            let record = bins.record(case.label.time_months, case.label.censored());
            let loss = nll_term_on_tape(&mut tape, &vars.head, &record)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is {value} at fold {fold}, epoch {epoch}, step {step} (case `{}`)",
                    case.label.case_id
                )));
            }
            total += value;
            model.store.zero_grad();
            tape.backward(loss, &mut model.store)?;
            gradient_cases.insert(case.label.case_id.clone());
            opt.step(&mut model.store);
        }
        let val_cindex = if val_idx.is_empty() {
            f64::NAN
        } else {
            cindex_or_nan(
                predict_risks(&model, &norm, data, &val_idx)?,
                data,
                &val_idx,
            )?
        };
        log.push(EpochRecord {
            epoch,
            train_loss: total / order.len() as f64,
            val_cindex,
        });
        if best.as_ref().is_none_or(|(c, _, _)| val_cindex > *c) && !val_cindex.is_nan() {
            best = Some((val_cindex, epoch, model.store.clone()));
        }
    }

    let best_epoch = match best {
        Some((_, epoch, store)) => {
            model.store = store;
            Some(epoch)
        }
        None => cfg.epochs.checked_sub(1),
    };
    let risks = predict_risks(&model, &norm, data, &val_idx)?;
    let val_risks = split.val.iter().cloned().zip(risks).collect();
    let meta = CheckpointMeta {
        model: setup.config.clone(),
        granularity: setup.granularity,
        genes: data.genes.names().to_vec(),
        pathways: setup.pathways.clone(),
        norm,
        bins,
        embed_dim: data.embed_dim(),
        fold,
        best_epoch,
        seed: cfg.seed,
    };
    Ok(FoldResult {
        fold,
        model,
        meta,
        log,
        val_risks,
        gradient_cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cases(rows: &[(&str, &str)]) -> Vec<(String, String)> {
        rows.iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    #[test]
    fn one_stratum_ten_cases_five_folds() {
        let c: Vec<_> = (0..10)
            .map(|i| (format!("c{i}"), "S".to_string()))
            .collect();
        let f = make_folds(&c, 5, 1).unwrap();
        assert_eq!(f.len(), 5);
        let mut all = BTreeSet::new();
        for s in &f {
            assert_eq!(s.val.len(), 2);
            assert_eq!(s.train.len(), 8);
            for id in &s.val {
                assert!(all.insert(id.clone()));
            }
        }
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn two_strata_one_each_per_fold() {
        let mut c = Vec::new();
        for i in 0..5 {
            c.push((format!("a{i}"), "A".to_string()));
            c.push((format!("b{i}"), "B".to_string()));
        }
        for s in make_folds(&c, 5, 4).unwrap() {
            let sites: Vec<_> = s.val.iter().map(|id| s.strata[id].as_str()).collect();
            assert_eq!(sites.iter().filter(|s| **s == "A").count(), 1);
            assert_eq!(sites.iter().filter(|s| **s == "B").count(), 1);
        }
    }

    #[test]
    fn same_seed_same_split_and_errors() {
        let c: Vec<_> = (0..13)
            .map(|i| (format!("c{i}"), (i % 3).to_string()))
            .collect();
        assert_eq!(make_folds(&c, 4, 8).unwrap(), make_folds(&c, 4, 8).unwrap());
        assert_ne!(make_folds(&c, 4, 8).unwrap(), make_folds(&c, 4, 9).unwrap());
        assert!(make_folds(&cases(&[("a", "x"), ("b", "x")]), 3, 0).is_err());
        assert!(make_folds(&cases(&[("a", "x"), ("b", "x")]), 1, 0).is_err());
    }

    #[test]
    fn splits_round_trip() {
        let c: Vec<_> = (0..9)
            .map(|i| (format!("c{i}"), (i % 2).to_string()))
            .collect();
        let f = make_folds(&c, 3, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("splits.csv");
        write_splits(&p, &f).unwrap();
        let strata: BTreeMap<_, _> = c.into_iter().collect();
        assert_eq!(read_splits(&p, &strata).unwrap(), f);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
