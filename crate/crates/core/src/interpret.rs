//! Integrated gradients at gene, pathway and patch level, cross-modal
//! attention importances and modality attribution.
//!
//! By default attributions use the right-endpoint Riemann sum
//! `IG_i = (x_i - x'_i) / m · Σ_{s=1..m} ∂f/∂x_i (x' + (s/m)(x - x'))`.
//! Gauss–Legendre quadrature on the same path is available as an option.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape};
use crate::error::{Error, Result};
use crate::fusion::FusionOutput;
use crate::matrix::Matrix;
use crate::model::SurvPathModel;
use crate::pathway::GeneExpressionVector;

pub const DEFAULT_STEPS: usize = 128;
pub const MIN_STEPS: usize = 8;

/// Quadrature rule for the path integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IgScheme {
    #[default]
    RightRiemann,
    GaussLegendre,
}

impl FromStr for IgScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "right-riemann" => Ok(Self::RightRiemann),
            "gauss-legendre" => Ok(Self::GaussLegendre),
            other => Err(Error::Config(format!(
                "unknown integration scheme `{other}`"
            ))),
        }
    }
}

impl fmt::Display for IgScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RightRiemann => "right-riemann",
            Self::GaussLegendre => "gauss-legendre",
        })
    }
}

impl IgScheme {
    /// Interpolation coefficients in `(0, 1]` and weights summing to one.
    pub fn nodes(self, steps: usize) -> Vec<(f64, f64)> {
        match self {
            Self::RightRiemann => (1..=steps)
                .map(|s| (s as f64 / steps as f64, 1.0 / steps as f64))
                .collect(),
            Self::GaussLegendre => gauss_legendre(steps)
                .into_iter()
                .map(|(x, w)| ((x + 1.0) / 2.0, w / 2.0))
                .collect(),
        }
    }
}

/// Nodes and weights on `[-1, 1]`, by Newton iteration on `P_n`.
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = nf * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out[i] = (-x, w);
        out[n - 1 - i] = (x, w);
    }
    out
}

fn check_steps(steps: usize) -> Result<()> {
    if steps < MIN_STEPS {
        return Err(Error::Contract(format!(
            "integrated gradients need at least {MIN_STEPS} steps, got {steps}"
        )));
    }
    Ok(())
}

fn check_same_shape(x: &Matrix, baseline: &Matrix) -> Result<()> {
    if x.shape() != baseline.shape() {
        return Err(Error::Contract(format!(
            "baseline is {}x{} but input is {}x{}",
            baseline.rows(),
            baseline.cols(),
            x.rows(),
            x.cols()
        )));
    }
    Ok(())
}

fn interpolate(x: &Matrix, baseline: &Matrix, alpha: f64) -> Matrix {
    baseline.zip_map(x, |b, v| b + alpha * (v - b))
}

/// Integrated gradients of a scalar function of several inputs along the
/// straight path from `baselines` to `inputs`. `grad` returns the gradient
/// with respect to every input at the given point.
pub fn integrated_gradients_multi<F>(
    inputs: &[Matrix],
    baselines: &[Matrix],
    steps: usize,
    scheme: IgScheme,
    mut grad: F,
) -> Result<Vec<Matrix>>
where
    F: FnMut(&[Matrix]) -> Result<Vec<Matrix>>,
{
    check_steps(steps)?;
    if inputs.len() != baselines.len() {
        return Err(Error::Contract(format!(
            "{} inputs for {} baselines",
            inputs.len(),
            baselines.len()
        )));
    }
    for (x, b) in inputs.iter().zip(baselines) {
        check_same_shape(x, b)?;
    }
    let mut acc: Vec<Matrix> = inputs
        .iter()
        .map(|x| Matrix::zeros(x.rows(), x.cols()))
        .collect();
    for (alpha, weight) in scheme.nodes(steps) {
        let point: Vec<Matrix> = inputs
            .iter()
            .zip(baselines)
            .map(|(x, b)| interpolate(x, b, alpha))
            .collect();
        let grads = grad(&point)?;
        if grads.len() != inputs.len() {
            return Err(Error::Contract(format!(
                "gradient function returned {} gradients for {} inputs",
                grads.len(),
                inputs.len()
            )));
        }
        for (a, g) in acc.iter_mut().zip(&grads) {
            if g.shape() != a.shape() {
                return Err(Error::Contract(
                    "gradient shape differs from input shape".into(),
                ));
            }
            a.add_assign(&g.scale(weight));
        }
    }
    Ok(acc
        .into_iter()
        .zip(inputs.iter().zip(baselines))
        .map(|(a, (x, b))| {
            let delta = x.zip_map(b, |v, w| v - w);
            delta.zip_map(&a, |d, g| d * g)
        })
        .collect())
}

/// Single-input form of [`integrated_gradients_multi`].
pub fn integrated_gradients<F>(
    x: &Matrix,
    baseline: &Matrix,
    steps: usize,
    scheme: IgScheme,
    mut grad: F,
) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<Matrix>,
{
    let mut out = integrated_gradients_multi(
        std::slice::from_ref(x),
        std::slice::from_ref(baseline),
        steps,
        scheme,
        |p| Ok(vec![grad(&p[0])?]),
    )?;
    Ok(out.remove(0))
}

/// Input-level attributions of one patient's risk.
#[derive(Debug, Clone)]
pub struct InputAttribution {
    /// Per-gene score (sum over every pathway the gene feeds).
    pub genes: Vec<f64>,
    /// Per-pathway score (sum over its member inputs).
    pub pathways: Vec<f64>,
    /// Per-patch score (sum over the embedding row).
    pub patches: Vec<f64>,
    pub risk: f64,
    pub baseline_risk: f64,
}

impl InputAttribution {
    pub fn total(&self) -> f64 {
        self.pathways.iter().sum::<f64>() + self.patches.iter().sum::<f64>()
    }

    /// `|Σ IG − (f(x) − f(x'))| / |f(x) − f(x')|`.
    pub fn completeness_error(&self) -> f64 {
        let diff = self.risk - self.baseline_risk;
        (self.total() - diff).abs() / diff.abs()
    }
}

/// Risk and its gradients with respect to per-pathway slices and embeddings.
fn risk_gradients(
    model: &SurvPathModel,
    slices: &[Matrix],
    embeddings: &Matrix,
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::with_mode(Mode::Eval);
    let slice_vars: Vec<_> = slices.iter().map(|s| tape.leaf(s.clone())).collect();
    let e = tape.leaf(embeddings.clone());
    let vars = model.forward_from_slices(&mut tape, &slice_vars, e, 0)?;
    let risk = tape.value(vars.head.risk).item();
    let grads = tape.gradients(vars.head.risk)?;
    let mut out: Vec<Matrix> = slice_vars.iter().map(|&v| grads.wrt(v)).collect();
    out.push(grads.wrt(e));
    Ok((risk, out))
}

/// Integrated gradients of the model's risk with an all-zero baseline over
/// both the (normalized) expression vector and the patch embeddings.
pub fn attribute_inputs(
    model: &SurvPathModel,
    genes: &GeneExpressionVector,
    embeddings: &Matrix,
    steps: usize,
    scheme: IgScheme,
) -> Result<InputAttribution> {
    if genes.len() != model.encoder.n_genes() {
        return Err(Error::Contract(format!(
            "expression vector of length {} for a model over {} genes",
            genes.len(),
            model.encoder.n_genes()
        )));
    }
    if embeddings.cols() != model.embed_dim() {
        return Err(Error::Contract(format!(
            "embeddings of width {} for a model expecting {}",
            embeddings.cols(),
            model.embed_dim()
        )));
    }
    let defs = model.encoder.definitions();
    let row = genes.as_row();
    let mut inputs: Vec<Matrix> = defs.iter().map(|d| row.select_cols(&d.indices)).collect();
    inputs.push(embeddings.clone());
    let baselines: Vec<Matrix> = inputs
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    let n_p = defs.len();
    let ig = integrated_gradients_multi(&inputs, &baselines, steps, scheme, |p| {
        Ok(risk_gradients(model, &p[..n_p], &p[n_p])?.1)
    })?;
    let risk = risk_gradients(model, &inputs[..n_p], &inputs[n_p])?.0;
    let baseline_risk = risk_gradients(model, &baselines[..n_p], &baselines[n_p])?.0;

    let mut gene_scores = vec![0.0; genes.len()];
    let mut pathways = Vec::with_capacity(n_p);
    for (d, m) in defs.iter().zip(&ig) {
        for (&g, v) in d.indices.iter().zip(m.data()) {
            gene_scores[g] += v;
        }
        pathways.push(m.sum());
    }
    let e = &ig[n_p];
    let patches = (0..e.rows()).map(|r| e.row(r).iter().sum()).collect();
    Ok(InputAttribution {
        genes: gene_scores,
        pathways,
        patches,
        risk,
        baseline_risk,
    })
}

/// Which attention block to read importances from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Pathway queries over patch keys, `N_P x N_H`.
    PathwayToPatch,
    /// Patch queries over pathway keys, `N_H x N_P`.
    PatchToPathway,
}

fn ranked(values: Vec<f64>) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = values.into_iter().enumerate().collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

fn row_or_col(m: &Matrix, row: bool, i: usize, what: &'static str) -> Result<Vec<f64>> {
    let len = if row { m.rows() } else { m.cols() };
    if i >= len {
        return Err(Error::Index {
            what,
            index: i,
            len,
        });
    }
    Ok(if row {
        m.row(i).to_vec()
    } else {
        (0..m.rows()).map(|r| m.get(r, i)).collect()
    })
}

/// Patches ranked by importance for pathway `i`: row `i` of the
/// pathway→patch block, or column `i` of the patch→pathway block.
pub fn patches_for_pathway(
    out: &FusionOutput,
    i: usize,
    dir: Direction,
) -> Result<Vec<(usize, f64)>> {
    let v = match dir {
        Direction::PathwayToPatch => row_or_col(&out.a_ph, true, i, "pathways")?,
        Direction::PatchToPathway => row_or_col(&out.a_hp, false, i, "pathways")?,
    };
    Ok(ranked(v))
}

/// Pathways ranked by importance for patch `j`: row `j` of the
/// patch→pathway block, or column `j` of the pathway→patch block.
pub fn pathways_for_patch(
    out: &FusionOutput,
    j: usize,
    dir: Direction,
) -> Result<Vec<(usize, f64)>> {
    let v = match dir {
        Direction::PatchToPathway => row_or_col(&out.a_hp, true, j, "patches")?,
        Direction::PathwayToPatch => row_or_col(&out.a_ph, false, j, "patches")?,
    };
    Ok(ranked(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityFractions {
    pub wsi: f64,
    pub omics: f64,
}

/// Share of `Σ|IG|` carried by each modality's pre-attention tokens, for a
/// scalar function of `(pathway tokens, patch tokens)`.
pub fn modality_fractions<F>(
    pathway_tokens: &Matrix,
    patch_tokens: &Matrix,
    steps: usize,
    scheme: IgScheme,
    grad: F,
) -> Result<ModalityFractions>
where
    F: FnMut(&[Matrix]) -> Result<Vec<Matrix>>,
{
    let inputs = [pathway_tokens.clone(), patch_tokens.clone()];
    let baselines = [
        Matrix::zeros(pathway_tokens.rows(), pathway_tokens.cols()),
        Matrix::zeros(patch_tokens.rows(), patch_tokens.cols()),
    ];
    let ig = integrated_gradients_multi(&inputs, &baselines, steps, scheme, grad)?;
    let omics: f64 = ig[0].data().iter().map(|v| v.abs()).sum();
    let wsi: f64 = ig[1].data().iter().map(|v| v.abs()).sum();
    let total = omics + wsi;
    if !(total > 0.0) {
        return Err(Error::Undefined("total attribution is zero".into()));
    }
    Ok(ModalityFractions {
        wsi: wsi / total,
        omics: omics / total,
    })
}

/// [`modality_fractions`] for the model's risk, with tokens computed in
/// evaluation mode.
pub fn modality_attribution(
    model: &SurvPathModel,
    genes: &GeneExpressionVector,
    embeddings: &Matrix,
    steps: usize,
    scheme: IgScheme,
) -> Result<ModalityFractions> {
    let mut tape = Tape::with_mode(Mode::Eval);
    let g = tape.leaf(genes.as_row());
    let e = tape.leaf(embeddings.clone());
    let p = model
        .encoder
        .encode_on_tape(&mut tape, &model.store, g, 0)?;
    let h = model
        .projector
        .project_on_tape(&mut tape, &model.store, e)?;
    let (p, h) = (tape.value(p).clone(), tape.value(h).clone());
    modality_fractions(&p, &h, steps, scheme, |pt| {
        let mut tape = Tape::with_mode(Mode::Eval);
        let pv = tape.leaf(pt[0].clone());
        let hv = tape.leaf(pt[1].clone());
        let (_, head) = model.forward_from_tokens(&mut tape, pv, hv)?;
        let grads = tape.gradients(head.risk)?;
        Ok(vec![grads.wrt(pv), grads.wrt(hv)])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedScore {
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchScore {
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<i32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y: Option<i32>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwayPatchPair {
    pub pathway: String,
    pub patch: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSlices {
    pub pathway_to_pathway: Vec<Vec<f64>>,
    pub pathway_to_patch: Vec<Vec<f64>>,
    pub patch_to_pathway: Vec<Vec<f64>>,
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Plot-ready attribution summary for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub case_id: String,
    pub risk: f64,
    pub baseline_risk: f64,
    pub steps: usize,
    pub scheme: IgScheme,
    pub completeness_error: f64,
    /// Sorted by descending `|score|`.
    pub pathways: Vec<NamedScore>,
    /// Genes that feed at least one pathway, sorted by descending `|score|`.
    pub genes: Vec<NamedScore>,
    /// In patch order.
    pub patches: Vec<PatchScore>,
    /// Largest pathway→patch attention weights.
    pub top_pathway_patch: Vec<PathwayPatchPair>,
    pub attention: AttentionSlices,
    pub modality: ModalityFractions,
}

fn by_abs_desc(mut v: Vec<NamedScore>) -> Vec<NamedScore> {
    v.sort_by(|a, b| {
        b.score
            .abs()
            .total_cmp(&a.score.abs())
            .then_with(|| a.name.cmp(&b.name))
    });
    v
}

/// Settings for [`AttributionReport::build`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub steps: usize,
    pub scheme: IgScheme,
    pub top_k: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            scheme: IgScheme::RightRiemann,
            top_k: 20,
        }
    }
}

/// One patient's inputs as seen by the model.
#[derive(Debug, Clone, Copy)]
pub struct CaseInputs<'a> {
    pub case_id: &'a str,
    pub gene_names: &'a [String],
    pub genes: &'a GeneExpressionVector,
    pub embeddings: &'a Matrix,
    pub coords: Option<&'a [(i32, i32)]>,
}

impl AttributionReport {
    pub fn build(model: &SurvPathModel, case: CaseInputs<'_>, opts: ReportOptions) -> Result<Self> {
        let CaseInputs {
            case_id,
            gene_names,
            genes,
            embeddings,
            coords,
        } = case;
        let ReportOptions {
            steps,
            scheme,
            top_k,
        } = opts;
        let ig = attribute_inputs(model, genes, embeddings, steps, scheme)?;
        let modality = modality_attribution(model, genes, embeddings, steps, scheme)?;
        let (_, fusion) = model.predict(genes, embeddings)?;
        let defs = model.encoder.definitions();

        let pathways = by_abs_desc(
            defs.iter()
                .zip(&ig.pathways)
                .map(|(d, &score)| NamedScore {
                    name: d.name.clone(),
                    score,
                })
                .collect(),
        );
        let mut used = vec![false; gene_names.len()];
        for d in defs {
            for &g in &d.indices {
                used[g] = true;
            }
        }
        let gene_scores = by_abs_desc(
            gene_names
                .iter()
                .zip(&ig.genes)
                .zip(&used)
                .filter(|(_, &u)| u)
                .map(|((n, &score), _)| NamedScore {
                    name: n.clone(),
                    score,
                })
                .collect(),
        );
        let patches = ig
            .patches
            .iter()
            .enumerate()
            .map(|(index, &score)| PatchScore {
                index,
                x: coords.map(|c| c[index].0),
                y: coords.map(|c| c[index].1),
                score,
            })
            .collect();

        let mut pairs: Vec<PathwayPatchPair> = Vec::new();
        for (i, d) in defs.iter().enumerate() {
            for (j, &w) in fusion.a_ph.row(i).iter().enumerate() {
                pairs.push(PathwayPatchPair {
                    pathway: d.name.clone(),
                    patch: j,
                    weight: w,
                });
            }
        }
        pairs.sort_by(|a, b| {
            b.weight
                .total_cmp(&a.weight)
                .then_with(|| a.pathway.cmp(&b.pathway))
                .then(a.patch.cmp(&b.patch))
        });
        pairs.truncate(top_k);

        let report = Self {
            case_id: case_id.to_string(),
            risk: ig.risk,
            baseline_risk: ig.baseline_risk,
            steps,
            scheme,
            completeness_error: ig.completeness_error(),
            pathways,
            genes: gene_scores,
            patches,
            top_pathway_patch: pairs,
            attention: AttentionSlices {
                pathway_to_pathway: rows_of(&fusion.a_pp),
                pathway_to_patch: rows_of(&fusion.a_ph),
                patch_to_pathway: rows_of(&fusion.a_hp),
            },
            modality,
        };
        report.check()?;
        Ok(report)
    }

    fn check(&self) -> Result<()> {
        let finite = self.risk.is_finite()
            && self.pathways.iter().all(|s| s.score.is_finite())
            && self.genes.iter().all(|s| s.score.is_finite())
            && self.patches.iter().all(|s| s.score.is_finite());
        if !finite {
            return Err(Error::Numeric(format!(
                "non-finite attribution for case `{}`",
                self.case_id
            )));
        }
        if ((self.modality.wsi + self.modality.omics) - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(
                "modality fractions do not sum to one".into(),
            ));
        }
        Ok(())
    }
}
