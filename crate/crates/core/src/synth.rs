//! Synthetic cohorts with a planted pathway and a planted embedding direction.
//!
//! Per case a latent `z ~ N(0, 1)` drives the genes of one designated pathway
//! (`offset + z + noise`). The planted score is that pathway's mean expression
//! minus the mean offset. Event times are exponential with rate
//! `base_rate · exp(strength · score)`; censoring times are an independent
//! exponential. Every patch embedding is Gaussian noise plus
//! `patch_signal · score · u` for a fixed unit vector `u`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_expression, write_labels, write_risks, Label};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::patch::{write_embeddings, PatchEmbeddingSet};
use crate::rng::seeded;
use crate::trainer::{make_folds, write_splits, FoldSplit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub cases: usize,
    pub pathways: usize,
    pub genes_per_pathway: usize,
    /// Gene sets whose members are mostly absent from the table.
    pub decoy_pathways: usize,
    /// Genes measured but not in any gene set.
    pub orphan_genes: usize,
    pub patches: usize,
    pub embed_dim: usize,
    pub strength: f64,
    pub gene_noise: f64,
    pub patch_signal: f64,
    pub base_rate: f64,
    pub censor_rate: f64,
    pub sites: usize,
    pub folds: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            cases: 60,
            pathways: 50,
            genes_per_pathway: 8,
            decoy_pathways: 3,
            orphan_genes: 10,
            patches: 200,
            embed_dim: 32,
            strength: 6.0,
            gene_noise: 0.3,
            patch_signal: 0.1,
            base_rate: 0.05,
            censor_rate: 0.01,
            sites: 3,
            folds: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.cases >= 2, "synth.cases must be at least 2"),
            (self.pathways >= 1, "synth.pathways must be at least 1"),
            (
                self.genes_per_pathway >= 1,
                "synth.genes_per_pathway must be at least 1",
            ),
            (self.patches >= 1, "synth.patches must be at least 1"),
            (self.embed_dim >= 1, "synth.embed_dim must be at least 1"),
            (self.sites >= 1, "synth.sites must be at least 1"),
            (self.strength >= 0.0, "synth.strength must be non-negative"),
            (
                self.gene_noise >= 0.0,
                "synth.gene_noise must be non-negative",
            ),
            (self.base_rate > 0.0, "synth.base_rate must be positive"),
            (self.censor_rate > 0.0, "synth.censor_rate must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }
}

/// What was planted, written as `ground_truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub planted_pathway: String,
    pub planted_genes: Vec<String>,
    /// Unit vector in embedding space along which patches carry the score.
    pub direction: Vec<f64>,
    pub strength: f64,
    pub patch_signal: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub config: SynthConfig,
    pub gmt: String,
    pub genes: Vec<String>,
    pub labels: Vec<Label>,
    /// Raw expression per case, in `genes` order.
    pub expression: Vec<Vec<f64>>,
    pub patches: Vec<PatchEmbeddingSet>,
    /// Planted score per case; hazards are monotone in it.
    pub scores: Vec<f64>,
    pub splits: Vec<FoldSplit>,
    pub truth: GroundTruth,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let noise = Normal::new(0.0, cfg.gene_noise).map_err(|e| Error::Config(e.to_string()))?;
    let width = (cfg.pathways as f64).log10().floor() as usize + 1;

    let mut gmt = String::new();
    let mut genes = Vec::new();
    let mut members = Vec::with_capacity(cfg.pathways);
    for p in 0..cfg.pathways {
        let names: Vec<String> = (0..cfg.genes_per_pathway)
            .map(|k| format!("G{p:0width$}_{k}"))
            .collect();
        let _ = writeln!(gmt, "PATHWAY_{p:0width$}\tsynthetic\t{}", names.join("\t"));
        genes.extend(names.iter().cloned());
        members.push(names);
    }
    for d in 0..cfg.decoy_pathways {
        let absent = (0..cfg.genes_per_pathway).map(|k| format!("ABSENT{d}_{k}"));
        let present = genes.get(d).cloned();
        let row: Vec<String> = present.into_iter().chain(absent).collect();
        let _ = writeln!(gmt, "DECOY_{d}\tsynthetic\t{}", row.join("\t"));
    }
    genes.extend((0..cfg.orphan_genes).map(|k| format!("ORPHAN_{k}")));

    let planted = rng.random_range(0..cfg.pathways);
    let offsets: Vec<f64> = (0..genes.len())
        .map(|_| rng.random_range(2.0..8.0))
        .collect();
    let mut direction: Vec<f64> = (0..cfg.embed_dim)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    direction.iter_mut().for_each(|v| *v /= norm);
    let planted_range = planted * cfg.genes_per_pathway..(planted + 1) * cfg.genes_per_pathway;

    let event = |rate: f64| Exp::new(rate).map_err(|e| Error::Config(e.to_string()));
    let censor_dist = event(cfg.censor_rate)?;
    let grid = (cfg.patches as f64).sqrt().ceil() as usize;
    let cw = (cfg.cases as f64).log10().floor() as usize + 1;

    let mut labels = Vec::with_capacity(cfg.cases);
    let mut expression = Vec::with_capacity(cfg.cases);
    let mut patches = Vec::with_capacity(cfg.cases);
    let mut scores = Vec::with_capacity(cfg.cases);
    let mut sites: Vec<usize> = (0..cfg.cases).map(|i| i % cfg.sites).collect();
    sites.shuffle(&mut rng);
    for (i, &site) in sites.iter().enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        let mut values = Vec::with_capacity(genes.len());
        for (g, off) in offsets.iter().enumerate() {
            let v = if planted_range.contains(&g) {
                off + z + noise.sample(&mut rng)
            } else {
                off + rng.sample::<f64, _>(StandardNormal)
            };
            values.push(v);
        }
        let score = planted_range
            .clone()
            .map(|g| values[g] - offsets[g])
            .sum::<f64>()
            / cfg.genes_per_pathway as f64;

        let t_event = event(cfg.base_rate * (cfg.strength * score).exp())?.sample(&mut rng);
        let t_censor = censor_dist.sample(&mut rng);
        let (time, censorship) = if t_event <= t_censor {
            (t_event, 0)
        } else {
            (t_censor, 1)
        };

        let mut emb = Vec::with_capacity(cfg.patches * cfg.embed_dim);
        for _ in 0..cfg.patches {
            for u in &direction {
                let n: f64 = rng.sample(StandardNormal);
                emb.push((n + cfg.patch_signal * score * u) as f32 as f64);
            }
        }
        let coords = (0..cfg.patches)
            .map(|j| (((j % grid) * 256) as i32, ((j / grid) * 256) as i32))
            .collect();
        let case_id = format!("case-{i:0cw$}");
        let slide_id = format!("slide-{i:0cw$}");
        patches.push(PatchEmbeddingSet::new(
            slide_id.clone(),
            Matrix::from_vec(cfg.patches, cfg.embed_dim, emb)?,
            Some(coords),
        )?);
        labels.push(Label {
            case_id,
            slide_id,
            time_months: time,
            censorship,
            site: format!("site-{site}"),
        });
        expression.push(values);
        scores.push(score);
    }

    let strata: Vec<(String, String)> = labels
        .iter()
        .map(|l| (l.case_id.clone(), l.site.clone()))
        .collect();
    let splits = make_folds(&strata, cfg.folds.min(cfg.cases).max(2), cfg.seed)?;
    let truth = GroundTruth {
        planted_pathway: format!("PATHWAY_{planted:0width$}"),
        planted_genes: members[planted].clone(),
        direction,
        strength: cfg.strength,
        patch_signal: cfg.patch_signal,
        seed: cfg.seed,
    };
    Ok(SynthCohort {
        config: cfg.clone(),
        gmt,
        genes,
        labels,
        expression,
        patches,
        scores,
        splits,
        truth,
    })
}

impl SynthCohort {
    /// Write the standard dataset layout into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let patch_dir = dir.join("patches");
        fs::create_dir_all(&patch_dir).map_err(|e| Error::io(&patch_dir, e))?;
        let gmt = dir.join("pathways.gmt");
        fs::write(&gmt, &self.gmt).map_err(|e| Error::io(&gmt, e))?;
        write_labels(&dir.join("labels.csv"), &self.labels)?;
        let ids: Vec<String> = self.labels.iter().map(|l| l.case_id.clone()).collect();
        write_expression(
            &dir.join("expression.tsv"),
            &self.genes,
            &ids,
            &self.expression,
        )?;
        for set in &self.patches {
            write_embeddings(&patch_dir.join(format!("{}.pfe", set.slide_id)), set)?;
        }
        write_splits(&dir.join("splits.csv"), &self.splits)?;
        let risks: Vec<(String, f64)> = ids.into_iter().zip(self.scores.iter().copied()).collect();
        write_risks(&dir.join("true_risk.csv"), &risks)?;
        let truth = dir.join("ground_truth.json");
        let json =
            serde_json::to_string_pretty(&self.truth).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&truth, json + "\n").map_err(|e| Error::io(&truth, e))
    }

    pub fn strata(&self) -> BTreeMap<String, String> {
        self.labels
            .iter()
            .map(|l| (l.case_id.clone(), l.site.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_truth() {
        let cfg = SynthConfig {
            cases: 12,
            pathways: 5,
            patches: 9,
            embed_dim: 4,
            ..SynthConfig::default()
        };
        let c = generate(&cfg).unwrap();
        assert_eq!(c.labels.len(), 12);
        assert_eq!(c.genes.len(), 5 * 8 + 10);
        assert!(c.expression.iter().all(|e| e.len() == c.genes.len()));
        assert!(c.patches.iter().all(|p| p.embeddings.shape() == (9, 4)));
        let n: f64 = c.truth.direction.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(c.truth.planted_genes.len(), 8);
        assert_eq!(c.gmt.lines().count(), 5 + 3);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = SynthConfig {
            base_rate: 0.0,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }
}
