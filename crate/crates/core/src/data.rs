//! On-disk cohort tables: labels, expression matrix and per-slide patch files.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::{load_embeddings, PatchEmbeddingSet};
use crate::pathway::GeneIndex;

/// One row of `labels.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub case_id: String,
    pub slide_id: String,
    pub time_months: f64,
    /// 1 when the patient was censored, 0 when the event was observed.
    pub censorship: u8,
    pub site: String,
}

impl Label {
    pub fn censored(&self) -> bool {
        self.censorship == 1
    }
}

pub fn read_labels(path: &Path) -> Result<Vec<Label>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in rdr.deserialize::<Label>().enumerate() {
        let line = i + 2;
        let label = row.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line,
            msg: e.to_string(),
        })?;
        if label.censorship > 1 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line,
                msg: format!("censorship must be 0 or 1, got {}", label.censorship),
            });
        }
        if !(label.time_months >= 0.0) || !label.time_months.is_finite() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line,
                msg: format!("invalid survival time {}", label.time_months),
            });
        }
        if !seen.insert(label.case_id.clone()) {
            return Err(Error::Conflict(format!(
                "case `{}` listed twice in labels",
                label.case_id
            )));
        }
        out.push(label);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{} has no cases", path.display())));
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[Label]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for l in labels {
        w.serialize(l).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if let csv::ErrorKind::Io(_) = e.kind() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Data(format!("{}: {e}", path.display()))
    }
}

/// Genes × samples expression table. Stored per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionTable {
    pub genes: GeneIndex,
    pub samples: BTreeMap<String, Vec<f64>>,
}

/// Read a tab-separated table whose header is `gene_id` followed by sample
/// ids and whose rows are one gene each.
pub fn read_expression(path: &Path) -> Result<ExpressionTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let src = path.display().to_string();
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(Error::Data(format!("{src} is empty")));
    };
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.first().map(|c| c.trim()) != Some("gene_id") || cols.len() < 2 {
        return Err(Error::Parse {
            path: src,
            line: 1,
            msg: "header must be `gene_id` followed by sample ids".into(),
        });
    }
    let sample_ids: Vec<String> = cols[1..].iter().map(|s| s.trim().to_string()).collect();
    let mut uniq = HashSet::new();
    for s in &sample_ids {
        if !uniq.insert(s) {
            return Err(Error::Conflict(format!(
                "sample `{s}` appears twice in {src}"
            )));
        }
    }
    let mut genes = Vec::new();
    let mut columns = vec![Vec::new(); sample_ids.len()];
    for (i, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != sample_ids.len() + 1 {
            return Err(Error::Parse {
                path: src,
                line: i + 1,
                msg: format!(
                    "expected {} fields, found {}",
                    sample_ids.len() + 1,
                    fields.len()
                ),
            });
        }
        genes.push(fields[0].trim().to_string());
        for (col, f) in columns.iter_mut().zip(&fields[1..]) {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                path: src.clone(),
                line: i + 1,
                msg: format!("`{f}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: src.clone(),
                    line: i + 1,
                    msg: "non-finite expression value".into(),
                });
            }
            col.push(v);
        }
    }
    Ok(ExpressionTable {
        genes: GeneIndex::new(genes)?,
        samples: sample_ids.into_iter().zip(columns).collect(),
    })
}

/// Write the table with samples in the given order. Values use the shortest
/// round-trip representation.
pub fn write_expression(
    path: &Path,
    genes: &[String],
    sample_ids: &[String],
    values: &[Vec<f64>],
) -> Result<()> {
    let mut out = String::from("gene_id");
    for s in sample_ids {
        out.push('\t');
        out.push_str(s);
    }
    out.push('\n');
    for (g, name) in genes.iter().enumerate() {
        out.push_str(name);
        for v in values {
            out.push('\t');
            out.push_str(&v[g].to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Everything known about one patient.
#[derive(Debug, Clone)]
pub struct Case {
    pub label: Label,
    /// Raw (unnormalized) expression in gene-index order.
    pub expression: Vec<f64>,
    pub patches: PatchEmbeddingSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    pub labels: PathBuf,
    pub expression: PathBuf,
    pub patches: PathBuf,
    pub gene_sets: Vec<PathBuf>,
}

impl DataPaths {
    /// Standard layout of a dataset directory.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            labels: dir.join("labels.csv"),
            expression: dir.join("expression.tsv"),
            patches: dir.join("patches"),
            gene_sets: vec![dir.join("pathways.gmt")],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub genes: GeneIndex,
    pub cases: Vec<Case>,
}

impl Dataset {
    pub fn load(paths: &DataPaths) -> Result<Self> {
        let labels = read_labels(&paths.labels)?;
        let mut table = read_expression(&paths.expression)?;
        let mut cases = Vec::with_capacity(labels.len());
        let mut embed_dim = None;
        for label in labels {
            let expression = table.samples.remove(&label.case_id).ok_or_else(|| {
                Error::Data(format!("case `{}` has no expression column", label.case_id))
            })?;
            let file = paths.patches.join(format!("{}.pfe", label.slide_id));
            let patches = load_embeddings(&file).map_err(|e| match e {
                Error::Io { path, source } => Error::CaseIo {
                    case: label.case_id.clone(),
                    path,
                    source,
                },
                other => Error::Data(format!("case `{}`: {other}", label.case_id)),
            })?;
            match embed_dim {
                None => embed_dim = Some(patches.embed_dim()),
                Some(e) if e != patches.embed_dim() => {
                    return Err(Error::Data(format!(
                        "case `{}` has embedding width {} but earlier slides have {e}",
                        label.case_id,
                        patches.embed_dim()
                    )))
                }
                _ => {}
            }
            if patches.is_empty() {
                return Err(Error::Data(format!(
                    "case `{}` has no patches",
                    label.case_id
                )));
            }
            cases.push(Case {
                label,
                expression,
                patches,
            });
        }
        Ok(Self {
            genes: table.genes,
            cases,
        })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.cases.first().map_or(0, |c| c.patches.embed_dim())
    }

    pub fn position(&self, case_id: &str) -> Option<usize> {
        self.cases.iter().position(|c| c.label.case_id == case_id)
    }
}

/// `case_id,risk` rows, e.g. an oracle risk file.
pub fn read_risks(path: &Path) -> Result<BTreeMap<String, f64>> {
    #[derive(Deserialize)]
    struct Row {
        case_id: String,
        risk: f64,
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = BTreeMap::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 2,
            msg: e.to_string(),
        })?;
        out.insert(row.case_id, row.risk);
    }
    Ok(out)
}

pub fn write_risks(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut out = String::from("case_id,risk\n");
    for (id, r) in rows {
        out.push_str(&format!("{id},{r}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::patch::write_embeddings;

    fn label(id: &str, t: f64, c: u8) -> Label {
        Label {
            case_id: id.into(),
            slide_id: format!("{id}-slide"),
            time_months: t,
            censorship: c,
            site: "A".into(),
        }
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        let rows = vec![label("a", 1.5, 0), label("b", 20.0, 1)];
        write_labels(&p, &rows).unwrap();
        assert_eq!(read_labels(&p).unwrap(), rows);
    }

    #[test]
    fn bad_censorship_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        fs::write(
            &p,
            "case_id,slide_id,time_months,censorship,site\na,s,1.0,0,X\nb,s2,2.0,3,X\n",
        )
        .unwrap();
        match read_labels(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn expression_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.tsv");
        let genes = vec!["G1".to_string(), "G2".to_string()];
        let ids = vec!["a".to_string(), "b".to_string()];
        let vals = vec![vec![0.1, -2.0], vec![3.25, 1e-9]];
        write_expression(&p, &genes, &ids, &vals).unwrap();
        let t = read_expression(&p).unwrap();
        assert_eq!(t.genes.names(), &genes[..]);
        assert_eq!(t.samples["a"], vals[0]);
        assert_eq!(t.samples["b"], vals[1]);
    }

    #[test]
    fn missing_patch_file_names_case() {
        let dir = tempfile::tempdir().unwrap();
        let paths = DataPaths::in_dir(dir.path());
        fs::create_dir(&paths.patches).unwrap();
        write_labels(&paths.labels, &[label("c1", 1.0, 0), label("c2", 2.0, 0)]).unwrap();
        write_expression(
            &paths.expression,
            &["G".to_string()],
            &["c1".to_string(), "c2".to_string()],
            &[vec![1.0], vec![2.0]],
        )
        .unwrap();
        let set = PatchEmbeddingSet::new("c1-slide", Matrix::zeros(2, 3), None).unwrap();
        write_embeddings(&paths.patches.join("c1-slide.pfe"), &set).unwrap();
        let err = Dataset::load(&paths).unwrap_err();
        assert!(
            matches!(err, Error::CaseIo { ref case, .. } if case == "c2"),
            "{err}"
        );
    }
}
