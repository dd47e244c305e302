//! Gene-set parsing, coverage filtering and the pathway token encoder.
//!
//! Each retained pathway owns a small two-layer MLP that reads only the
//! expression values of its member genes and emits one `d`-dimensional
//! token. Stacking the per-pathway outputs is the same as one sparse MLP
//! whose connectivity follows gene membership.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::param::{ParamId, ParamStore};
use crate::rng::derive_seed;

pub const DEFAULT_COVERAGE: f64 = 0.9;
pub const DEFAULT_DROPOUT: f64 = 0.25;

/// Ordered, duplicate-free gene names with reverse lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneIndex {
    names: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl GeneIndex {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if lookup.insert(n.clone(), i).is_some() {
                return Err(Error::Conflict(format!("gene `{n}` listed twice")));
            }
        }
        Ok(Self { names, lookup })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn position(&self, gene: &str) -> Option<usize> {
        self.lookup.get(gene).copied()
    }
}

/// One patient's expression values, aligned with a [`GeneIndex`].
#[derive(Debug, Clone, PartialEq)]
pub struct GeneExpressionVector {
    pub values: Vec<f64>,
}

impl GeneExpressionVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_row(&self) -> Matrix {
        Matrix::row_vector(&self.values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwayDefinition {
    pub name: String,
    pub members: BTreeSet<String>,
    /// Positions of present members in the gene index, strictly increasing.
    pub indices: Vec<usize>,
}

impl PathwayDefinition {
    pub fn new(name: impl Into<String>, members: impl IntoIterator<Item = String>) -> Self {
        Self {
            name: name.into(),
            members: members.into_iter().collect(),
            indices: Vec::new(),
        }
    }
}

/// Parse GMT text: `name<TAB>description<TAB>gene...` per line.
pub fn parse_gmt(text: &str, source: &str) -> Result<Vec<PathwayDefinition>> {
    let mut defs = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                path: source.to_string(),
                line: lineno + 1,
                msg: format!(
                    "expected at least 3 tab-separated fields, found {}",
                    fields.len()
                ),
            });
        }
        let name = fields[0].trim();
        if name.is_empty() {
            return Err(Error::Parse {
                path: source.to_string(),
                line: lineno + 1,
                msg: "empty gene-set name".into(),
            });
        }
        if !seen.insert(name.to_string()) {
            return Err(Error::Conflict(format!(
                "{source}:{}: gene set `{name}` defined twice",
                lineno + 1
            )));
        }
        let members = fields[2..]
            .iter()
            .map(|g| g.trim())
            .filter(|g| !g.is_empty())
            .map(str::to_string);
        defs.push(PathwayDefinition::new(name, members));
    }
    Ok(defs)
}

pub fn parse_gene_sets(path: &Path) -> Result<Vec<PathwayDefinition>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_gmt(&text, &path.display().to_string())
}

/// Keep pathways whose fraction of members present in `genes` is at least
/// `threshold`, resolving indices to the present members.
pub fn filter_by_coverage(
    defs: &[PathwayDefinition],
    genes: &GeneIndex,
    threshold: f64,
) -> Result<Vec<PathwayDefinition>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Contract(format!(
            "coverage threshold {threshold} outside (0, 1]"
        )));
    }
    let mut kept = Vec::new();
    for def in defs {
        let mut idx: Vec<usize> = def
            .members
            .iter()
            .filter_map(|g| genes.position(g))
            .collect();
        if idx.is_empty() || (idx.len() as f64) < threshold * def.members.len() as f64 {
            continue;
        }
        idx.sort_unstable();
        kept.push(PathwayDefinition {
            indices: idx,
            ..def.clone()
        });
    }
    Ok(kept)
}

/// Tokenization granularity; `Single` puts every gene into one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Single,
    Families,
    Hallmarks,
    Reactome,
    Combined,
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "single" => Self::Single,
            "families" => Self::Families,
            "hallmarks" => Self::Hallmarks,
            "reactome" => Self::Reactome,
            "combined" => Self::Combined,
            other => {
                return Err(Error::Config(format!(
                    "unknown tokenizer granularity `{other}`"
                )))
            }
        })
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Single => "single",
            Self::Families => "families",
            Self::Hallmarks => "hallmarks",
            Self::Reactome => "reactome",
            Self::Combined => "combined",
        })
    }
}

pub const FAMILY_COUNT: usize = 6;

/// Resolve the token definitions for a granularity from already-parsed gene
/// sets (one list per GMT file).
pub fn tokens_for_granularity(
    granularity: Granularity,
    gene_sets: &[Vec<PathwayDefinition>],
    genes: &GeneIndex,
    coverage: f64,
) -> Result<Vec<PathwayDefinition>> {
    let defs = match granularity {
        Granularity::Single => {
            return Ok(vec![PathwayDefinition {
                name: "ALL_GENES".into(),
                members: genes.names().iter().cloned().collect(),
                indices: (0..genes.len()).collect(),
            }]);
        }
        Granularity::Families => {
            let [sets] = gene_sets else {
                return Err(Error::Config(
                    "`families` takes exactly one gene-set file".into(),
                ));
            };
            if sets.len() != FAMILY_COUNT {
                return Err(Error::Config(format!(
                    "`families` expects {FAMILY_COUNT} gene sets, found {}",
                    sets.len()
                )));
            }
            sets.clone()
        }
        Granularity::Hallmarks | Granularity::Reactome => {
            let [sets] = gene_sets else {
                return Err(Error::Config(format!(
                    "`{granularity}` takes exactly one gene-set file"
                )));
            };
            sets.clone()
        }
        Granularity::Combined => {
            if gene_sets.is_empty() {
                return Err(Error::Config(
                    "`combined` needs at least one gene-set file".into(),
                ));
            }
            let mut names = HashSet::new();
            let mut all = Vec::new();
            for d in gene_sets.iter().flatten() {
                if !names.insert(d.name.clone()) {
                    return Err(Error::Conflict(format!(
                        "gene set `{}` appears in more than one file",
                        d.name
                    )));
                }
                all.push(d.clone());
            }
            all
        }
    };
    let kept = filter_by_coverage(&defs, genes, coverage)?;
    if kept.is_empty() {
        return Err(Error::Data(format!(
            "no gene set reaches {:.0}% coverage of the expression table",
            coverage * 100.0
        )));
    }
    Ok(kept)
}

/// Per-gene z-scoring statistics fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean/std per gene. Near-constant genes get unit scale.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let samples: Vec<&[f64]> = samples.into_iter().collect();
        let Some(first) = samples.first() else {
            return Err(Error::Fit("normalization needs at least one sample".into()));
        };
        let g = first.len();
        let n = samples.len() as f64;
        let mut mean = vec![0.0; g];
        for s in &samples {
            if s.len() != g {
                return Err(Error::Shape(format!("sample length {} vs {g}", s.len())));
            }
            for (m, v) in mean.iter_mut().zip(*s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; g];
        for s in &samples {
            for ((acc, v), m) in var.iter_mut().zip(*s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd < 1e-8 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, values: &[f64]) -> Result<GeneExpressionVector> {
        if values.len() != self.mean.len() {
            return Err(Error::Contract(format!(
                "expression vector of length {} for {} normalized genes",
                values.len(),
                self.mean.len()
            )));
        }
        Ok(GeneExpressionVector {
            values: values
                .iter()
                .zip(&self.mean)
                .zip(&self.std)
                .map(|((v, m), s)| (v - m) / s)
                .collect(),
        })
    }
}

#[derive(Debug, Clone)]
struct PathwayMlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Per-pathway hidden width.
pub fn hidden_width(members: usize) -> usize {
    members.div_ceil(2).max(4)
}

/// Pathway-specific MLPs `|P_i| → hidden → d`, SiLU after the hidden layer.
#[derive(Debug, Clone)]
pub struct PathwayEncoder {
    defs: Vec<PathwayDefinition>,
    n_genes: usize,
    dim: usize,
    dropout: f64,
    mlps: Vec<PathwayMlp>,
}

impl PathwayEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        defs: Vec<PathwayDefinition>,
        n_genes: usize,
        dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut mlps = Vec::with_capacity(defs.len());
        for (i, def) in defs.iter().enumerate() {
            if def.indices.is_empty() {
                return Err(Error::Contract(format!(
                    "pathway `{}` has no resolved genes",
                    def.name
                )));
            }
            if def.indices.windows(2).any(|w| w[0] >= w[1]) || def.indices.last() >= Some(&n_genes)
            {
                return Err(Error::Contract(format!(
                    "pathway `{}` indices must be strictly increasing and below {n_genes}",
                    def.name
                )));
            }
            let m = def.indices.len();
            let h = hidden_width(m);
            mlps.push(PathwayMlp {
                w1: store.add_glorot(format!("pathway.{i}.w1"), m, h, rng)?,
                b1: store.add(format!("pathway.{i}.b1"), Matrix::zeros(1, h))?,
                w2: store.add_glorot(format!("pathway.{i}.w2"), h, dim, rng)?,
                b2: store.add(format!("pathway.{i}.b2"), Matrix::zeros(1, dim))?,
            });
        }
        Ok(Self {
            defs,
            n_genes,
            dim,
            dropout,
            mlps,
        })
    }

    /// Rebind to parameters already present in `store` (checkpoint restore).
    pub fn bind(
        store: &ParamStore,
        defs: Vec<PathwayDefinition>,
        n_genes: usize,
        dim: usize,
        dropout: f64,
    ) -> Result<Self> {
        let lookup = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter `{name}`")))
        };
        let mlps = (0..defs.len())
            .map(|i| {
                Ok(PathwayMlp {
                    w1: lookup(format!("pathway.{i}.w1"))?,
                    b1: lookup(format!("pathway.{i}.b1"))?,
                    w2: lookup(format!("pathway.{i}.w2"))?,
                    b2: lookup(format!("pathway.{i}.b2"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            defs,
            n_genes,
            dim,
            dropout,
            mlps,
        })
    }

    pub fn definitions(&self) -> &[PathwayDefinition] {
        &self.defs
    }

    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_genes(&self) -> usize {
        self.n_genes
    }

    /// Gather each pathway's member values out of a `1 x N_G` gene row.
    pub fn gather(&self, tape: &mut Tape, genes: Var) -> Result<Vec<Var>> {
        let (r, c) = tape.value(genes).shape();
        if r != 1 || c != self.n_genes {
            return Err(Error::Contract(format!(
                "gene row is {r}x{c}, encoder expects 1x{}",
                self.n_genes
            )));
        }
        self.defs
            .iter()
            .map(|d| tape.select_cols(genes, &d.indices))
            .collect()
    }

    /// Encode per-pathway input slices into an `N_P x d` token matrix.
    pub fn encode_slices(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        slices: &[Var],
        dropout_seed: u64,
    ) -> Result<Var> {
        if slices.len() != self.mlps.len() {
            return Err(Error::Contract(format!(
                "{} slices for {} pathways",
                slices.len(),
                self.mlps.len()
            )));
        }
        let mut rows = Vec::with_capacity(self.mlps.len());
        for (i, (mlp, &x)) in self.mlps.iter().zip(slices).enumerate() {
            let w1 = tape.param(store, mlp.w1);
            let b1 = tape.param(store, mlp.b1);
            let w2 = tape.param(store, mlp.w2);
            let b2 = tape.param(store, mlp.b2);
            let h = tape.matmul(x, w1)?;
            let h = tape.add_row(h, b1)?;
            let h = tape.silu(h);
            let h = tape.dropout(h, self.dropout, derive_seed(dropout_seed, &[i as u64]))?;
            let o = tape.matmul(h, w2)?;
            rows.push(tape.add_row(o, b2)?);
        }
        tape.concat_rows(&rows)
    }

    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        genes: Var,
        dropout_seed: u64,
    ) -> Result<Var> {
        let slices = self.gather(tape, genes)?;
        self.encode_slices(tape, store, &slices, dropout_seed)
    }

    /// Evaluation-mode encoding of one expression vector.
    pub fn encode(&self, store: &ParamStore, g: &GeneExpressionVector) -> Result<Matrix> {
        if g.len() != self.n_genes {
            return Err(Error::Contract(format!(
                "expression vector of length {} for an encoder over {} genes",
                g.len(),
                self.n_genes
            )));
        }
        let mut tape = Tape::with_mode(Mode::Eval);
        let genes = tape.leaf(g.as_row());
        let out = self.encode_on_tape(&mut tape, store, genes, 0)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn index(names: &[&str]) -> GeneIndex {
        GeneIndex::new(names.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn gmt_dedups_members() {
        let defs = parse_gmt("HALLMARK_X\tdesc\tA\tB\tA\n", "t").unwrap();
        assert_eq!(defs.len(), 1);
        assert_eq!(
            defs[0].members,
            ["A", "B"].iter().map(|s| s.to_string()).collect()
        );
    }

    #[test]
    fn empty_gmt_is_empty() {
        assert!(parse_gmt("", "t").unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_gmt("A\tx\tG1\nB\tonly_two\n", "f.gmt").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_set_name_conflicts() {
        let err = parse_gmt("A\tx\tG1\nA\ty\tG2\n", "f.gmt").unwrap_err();
        assert!(matches!(err, Error::Conflict(_)));
    }

    #[test]
    fn coverage_boundary_is_inclusive() {
        let members: Vec<String> = "ABCDEFGHIJ".chars().map(|c| c.to_string()).collect();
        let def = PathwayDefinition::new("P", members);
        // index lacks J
        let nine = index(&["A", "B", "C", "D", "E", "F", "G", "H", "I", "Z"]);
        let kept = filter_by_coverage(std::slice::from_ref(&def), &nine, 0.9).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].indices, (0..9).collect::<Vec<_>>());
        // index lacks I and J
        let eight = index(&["A", "B", "C", "D", "E", "F", "G", "H"]);
        assert!(filter_by_coverage(&[def], &eight, 0.9).unwrap().is_empty());
    }

    #[test]
    fn coverage_threshold_must_be_a_fraction() {
        assert!(filter_by_coverage(&[], &index(&["A"]), 0.0).is_err());
        assert!(filter_by_coverage(&[], &index(&["A"]), 1.5).is_err());
        assert!(filter_by_coverage(&[], &index(&["A"]), 1.0).is_ok());
    }

    #[test]
    fn resolved_indices_are_sorted() {
        let def = PathwayDefinition::new("P", ["C", "A"].map(String::from));
        let kept = filter_by_coverage(&[def], &index(&["C", "B", "A"]), 1.0).unwrap();
        assert_eq!(kept[0].indices, vec![0, 2]);
    }

    #[test]
    fn single_granularity_covers_all_genes() {
        let idx = index(&["A", "B", "C"]);
        let defs = tokens_for_granularity(Granularity::Single, &[], &idx, 0.9).unwrap();
        assert_eq!(defs.len(), 1);
        assert_eq!(defs[0].indices, vec![0, 1, 2]);
    }

    #[test]
    fn families_requires_six_sets() {
        let idx = index(&["A"]);
        let sets = vec![vec![PathwayDefinition::new("F", ["A".to_string()])]];
        assert!(matches!(
            tokens_for_granularity(Granularity::Families, &sets, &idx, 0.9),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hidden_width_rule() {
        assert_eq!(hidden_width(1), 4);
        assert_eq!(hidden_width(8), 4);
        assert_eq!(hidden_width(9), 5);
        assert_eq!(hidden_width(20), 10);
    }

    #[test]
    fn norm_stats_zscore() {
        let a = [1.0, 10.0, 5.0];
        let b = [3.0, 10.0, 7.0];
        let stats = NormStats::fit([&a[..], &b[..]]).unwrap();
        assert_eq!(stats.mean, vec![2.0, 10.0, 6.0]);
        assert_eq!(stats.std, vec![1.0, 1.0, 1.0]);
        assert_eq!(stats.apply(&a).unwrap().values, vec![-1.0, 0.0, -1.0]);
    }

    #[test]
    fn encode_rejects_wrong_length() {
        let mut store = ParamStore::new();
        let def = PathwayDefinition {
            name: "P".into(),
            members: BTreeSet::new(),
            indices: vec![0, 1],
        };
        let enc = PathwayEncoder::new(&mut store, vec![def], 3, 4, 0.0, &mut seeded(1)).unwrap();
        let g = GeneExpressionVector {
            values: vec![0.0; 2],
        };
        assert!(matches!(enc.encode(&store, &g), Err(Error::Contract(_))));
    }
}
