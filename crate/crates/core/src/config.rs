//! Run configuration: a TOML file of `[section]` tables of `key = value`
//! pairs, optionally overridden by `section.key=value` strings.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! dir = "cohort"
//!
//! [model]
//! dim = 32
//! granularity = "hallmarks"
//!
//! [train]
//! epochs = 20
//! optimizer = "radam"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.
//! Unknown sections or keys are rejected with an error naming them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataPaths;
use crate::error::{Error, Result};
use crate::interpret::{IgScheme, ReportOptions, DEFAULT_STEPS};
use crate::model::ModelConfig;
use crate::optim::OptimizerKind;
use crate::patch::DEFAULT_PATCH_SAMPLE;
use crate::pathway::{Granularity, DEFAULT_COVERAGE, DEFAULT_DROPOUT};
use crate::survival::{RiskMode, DEFAULT_BINS};
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub interpret: InterpretSection,
    pub synth: SynthConfig,
    pub output: OutputSection,
}

/// Input locations. Unset entries fall back to the standard layout under `dir`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub expression: Option<PathBuf>,
    pub patches: Option<PathBuf>,
    pub gene_sets: Vec<PathBuf>,
    pub splits: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub bins: usize,
    pub dropout: f64,
    pub granularity: Granularity,
    pub coverage: f64,
    pub pathway_to_patch: bool,
    pub patch_to_pathway: bool,
    pub dense_fallback: bool,
    pub risk: RiskMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            dim: 32,
            bins: DEFAULT_BINS,
            dropout: DEFAULT_DROPOUT,
            granularity: Granularity::Hallmarks,
            coverage: DEFAULT_COVERAGE,
            pathway_to_patch: true,
            patch_to_pathway: true,
            dense_fallback: false,
            risk: RiskMode::Survival,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            n_bins: self.bins,
            dropout: self.dropout,
            pathway_to_patch: self.pathway_to_patch,
            patch_to_pathway: self.patch_to_pathway,
            dense_fallback: self.dense_fallback,
            risk_mode: self.risk,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patch_sample: usize,
    pub folds: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 1e-3,
            epochs: 20,
            patch_sample: DEFAULT_PATCH_SAMPLE,
            folds: 5,
            optimizer: OptimizerKind::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretSection {
    pub steps: usize,
    pub scheme: IgScheme,
    pub top_k: usize,
}

impl Default for InterpretSection {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            scheme: IgScheme::RightRiemann,
            top_k: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
        }
    }
}

impl Config {
    /// Parse `text`, apply `overrides`, and resolve relative paths against `base`.
    pub fn parse(text: &str, overrides: &[String], base: &Path) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: Config = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, overrides, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        for p in [
            &mut d.dir,
            &mut d.labels,
            &mut d.expression,
            &mut d.patches,
            &mut d.splits,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        d.gene_sets.iter_mut().for_each(fix);
        fix(&mut self.output.dir);
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.dim == 0 {
            return Err(Error::Config("model.dim must be at least 1".into()));
        }
        if m.bins < 2 {
            return Err(Error::Config("model.bins must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config("model.dropout must be in [0, 1)".into()));
        }
        if !(m.coverage > 0.0 && m.coverage <= 1.0) {
            return Err(Error::Config("model.coverage must be in (0, 1]".into()));
        }
        m.model_config()
            .fusion()
            .validate()
            .map_err(|e| Error::Config(format!("model: {e}")))?;
        self.train_config().validate()?;
        if self.interpret.steps < crate::interpret::MIN_STEPS {
            return Err(Error::Config(format!(
                "interpret.steps must be at least {}",
                crate::interpret::MIN_STEPS
            )));
        }
        self.synth.validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            patch_sample: t.patch_sample,
            folds: t.folds,
            seed: self.seed,
            optimizer: t.optimizer,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn report_options(&self) -> ReportOptions {
        ReportOptions {
            steps: self.interpret.steps,
            scheme: self.interpret.scheme,
            top_k: self.interpret.top_k,
        }
    }

    /// Input files, from explicit entries or the layout under `data.dir`.
    pub fn data_paths(&self) -> Result<DataPaths> {
        let d = &self.data;
        let fallback = d.dir.as_deref().map(DataPaths::in_dir);
        let pick = |explicit: &Option<PathBuf>, name: &str, get: fn(&DataPaths) -> PathBuf| {
            explicit
                .clone()
                .or_else(|| fallback.as_ref().map(get))
                .ok_or_else(|| {
                    Error::Config(format!("data.{name} is not set and data.dir is missing"))
                })
        };
        let gene_sets = if d.gene_sets.is_empty() {
            fallback
                .as_ref()
                .map(|f| f.gene_sets.clone())
                .ok_or_else(|| {
                    Error::Config("data.gene_sets is not set and data.dir is missing".into())
                })?
        } else {
            d.gene_sets.clone()
        };
        Ok(DataPaths {
            labels: pick(&d.labels, "labels", |f| f.labels.clone())?,
            expression: pick(&d.expression, "expression", |f| f.expression.clone())?,
            patches: pick(&d.patches, "patches", |f| f.patches.clone())?,
            gene_sets,
        })
    }

    /// Split file: explicit, or `splits.csv` under `data.dir` when present.
    pub fn splits_path(&self) -> Option<PathBuf> {
        self.data.splits.clone().or_else(|| {
            let p = self.data.dir.as_ref()?.join("splits.csv");
            p.exists().then_some(p)
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item.split_once('=').ok_or_else(|| {
        Error::Config(format!(
            "override `{item}` is not of the form section.key=value"
        ))
    })?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    match parts.as_slice() {
        [k] => {
            table.insert((*k).to_string(), value);
        }
        [section, k] => {
            let entry = table
                .entry((*section).to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(t) = entry else {
                return Err(Error::Config(format!("`{section}` is not a section")));
            };
            t.insert((*k).to_string(), value);
        }
        _ => {
            return Err(Error::Config(format!(
                "override key `{key}` has too many parts"
            )))
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_from_empty_text() {
        let c = Config::parse("", &[], Path::new("/base")).unwrap();
        assert_eq!(c.train.lr, 5e-4);
        assert_eq!(c.train.weight_decay, 1e-3);
        assert_eq!(c.train.patch_sample, 4096);
        assert_eq!(c.output.dir, PathBuf::from("/base/runs"));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::parse("[train]\nlearning_rate = 1.0\n", &[], Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = Config::parse("", &["model.width=3".into()], Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
        let err = Config::parse("[bogus]\na = 1\n", &[], Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn overrides_beat_file_values() {
        let text = "seed = 1\n[model]\ndim = 8\ngranularity = \"single\"\n[interpret]\nscheme = \"gauss-legendre\"\n";
        let c = Config::parse(
            text,
            &[
                "model.dim=12".into(),
                "seed=5".into(),
                "train.optimizer=radam".into(),
            ],
            Path::new("."),
        )
        .unwrap();
        assert_eq!(c.model.dim, 12);
        assert_eq!(c.seed, 5);
        assert_eq!(c.train_config().seed, 5);
        assert_eq!(c.train.optimizer, OptimizerKind::Radam);
        assert_eq!(c.model.granularity, Granularity::Single);
        assert_eq!(c.interpret.scheme, IgScheme::GaussLegendre);
    }

    #[test]
    fn paths_resolve_against_base() {
        let c = Config::parse("[data]\ndir = \"cohort\"\n", &[], Path::new("/cfg")).unwrap();
        let p = c.data_paths().unwrap();
        assert_eq!(p.labels, PathBuf::from("/cfg/cohort/labels.csv"));
        assert_eq!(p.gene_sets, vec![PathBuf::from("/cfg/cohort/pathways.gmt")]);
        assert!(Config::default().data_paths().is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for o in ["train.lr=0", "model.bins=1", "model.pathway_to_patch=false"] {
            let mut ov = vec![o.to_string()];
            if o.contains("pathway_to_patch") {
                ov.push("model.patch_to_pathway=false".into());
            }
            assert!(
                matches!(
                    Config::parse("", &ov, Path::new(".")),
                    Err(Error::Config(_))
                ),
                "{o}"
            );
        }
    }

    #[test]
    fn snapshot_round_trips() {
        let c = Config::parse("seed = 3\n[model]\ndim = 4\n", &[], Path::new("/x")).unwrap();
        let again = Config::parse(&c.to_toml().unwrap(), &[], Path::new("/x")).unwrap();
        assert_eq!(c, again);
    }
}
