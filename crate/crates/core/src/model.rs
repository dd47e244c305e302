//! The assembled network: pathway encoder + patch projector → block-masked
//! fusion → survival head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{fuse_on_tape, FusionConfig, FusionOutput, FusionVars, FusionWeights};
use crate::matrix::Matrix;
use crate::param::ParamStore;
use crate::patch::PatchProjector;
use crate::pathway::{GeneExpressionVector, PathwayDefinition, PathwayEncoder};
use crate::rng::seeded;
use crate::survival::{hazards_on_tape, HazardOutput, HazardVars, RiskMode, SurvivalHead};

/// Architecture hyperparameters, stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_bins: usize,
    pub dropout: f64,
    pub pathway_to_patch: bool,
    pub patch_to_pathway: bool,
    pub dense_fallback: bool,
    pub risk_mode: RiskMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            n_bins: crate::survival::DEFAULT_BINS,
            dropout: crate::pathway::DEFAULT_DROPOUT,
            pathway_to_patch: true,
            patch_to_pathway: true,
            dense_fallback: false,
            risk_mode: RiskMode::Survival,
        }
    }
}

impl ModelConfig {
    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            dim: self.dim,
            pathway_to_patch: self.pathway_to_patch,
            patch_to_pathway: self.patch_to_pathway,
            dense_fallback: self.dense_fallback,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SurvPathModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: PathwayEncoder,
    pub projector: PatchProjector,
    pub fusion: FusionWeights,
    pub head: SurvivalHead,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone)]
pub struct ModelVars {
    /// Pre-attention pathway tokens, `N_P x d`.
    pub pathway_tokens: Var,
    /// Pre-attention patch tokens, `N_H x d`.
    pub patch_tokens: Var,
    pub fusion: FusionVars,
    pub head: HazardVars,
}

impl SurvPathModel {
    pub fn new(
        config: ModelConfig,
        pathways: Vec<PathwayDefinition>,
        n_genes: usize,
        embed_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        config.fusion().validate()?;
        if config.n_bins < 2 {
            return Err(Error::Config("model.bins must be at least 2".into()));
        }
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let encoder = PathwayEncoder::new(
            &mut store,
            pathways,
            n_genes,
            config.dim,
            config.dropout,
            &mut rng,
        )?;
        let projector = PatchProjector::new(&mut store, embed_dim, config.dim, &mut rng)?;
        let fusion = FusionWeights::new(&mut store, config.dim, &mut rng)?;
        let head = SurvivalHead::new(&mut store, config.dim, config.n_bins, &mut rng)?;
        Ok(Self {
            config,
            store,
            encoder,
            projector,
            fusion,
            head,
        })
    }

    /// Rebuild around an existing parameter store (from a checkpoint).
    pub fn from_store(
        config: ModelConfig,
        store: ParamStore,
        pathways: Vec<PathwayDefinition>,
        n_genes: usize,
    ) -> Result<Self> {
        config.fusion().validate()?;
        let encoder = PathwayEncoder::bind(&store, pathways, n_genes, config.dim, config.dropout)?;
        let projector = PatchProjector::bind(&store)?;
        let fusion = FusionWeights::bind(&store)?;
        let head = SurvivalHead::bind(&store)?;
        Ok(Self {
            config,
            store,
            encoder,
            projector,
            fusion,
            head,
        })
    }

    pub fn n_pathways(&self) -> usize {
        self.encoder.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.projector.in_dim()
    }

    /// Everything downstream of the pre-attention tokens.
    pub fn forward_from_tokens(
        &self,
        tape: &mut Tape,
        pathway_tokens: Var,
        patch_tokens: Var,
    ) -> Result<(FusionVars, HazardVars)> {
        let fusion = fuse_on_tape(
            &self.config.fusion(),
            &self.fusion,
            tape,
            &self.store,
            pathway_tokens,
            patch_tokens,
        )?;
        let logits = self.head.logits_on_tape(tape, &self.store, fusion.pooled)?;
        let head = hazards_on_tape(tape, logits, self.config.risk_mode)?;
        Ok((fusion, head))
    }

    /// Forward pass from per-pathway gene slices and raw patch embeddings.
    pub fn forward_from_slices(
        &self,
        tape: &mut Tape,
        slices: &[Var],
        embeddings: Var,
        dropout_seed: u64,
    ) -> Result<ModelVars> {
        let pathway_tokens = self
            .encoder
            .encode_slices(tape, &self.store, slices, dropout_seed)?;
        let patch_tokens = self
            .projector
            .project_on_tape(tape, &self.store, embeddings)?;
        let (fusion, head) = self.forward_from_tokens(tape, pathway_tokens, patch_tokens)?;
        Ok(ModelVars {
            pathway_tokens,
            patch_tokens,
            fusion,
            head,
        })
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        genes: Var,
        embeddings: Var,
        dropout_seed: u64,
    ) -> Result<ModelVars> {
        let slices = self.encoder.gather(tape, genes)?;
        self.forward_from_slices(tape, &slices, embeddings, dropout_seed)
    }

    /// Evaluation-mode prediction for one patient.
    pub fn predict(
        &self,
        genes: &GeneExpressionVector,
        embeddings: &Matrix,
    ) -> Result<(HazardOutput, FusionOutput)> {
        let mut tape = Tape::with_mode(Mode::Eval);
        let g = tape.leaf(genes.as_row());
        let e = tape.leaf(embeddings.clone());
        let vars = self.forward_on_tape(&mut tape, g, e, 0)?;
        Ok((vars.head.materialize(&tape), vars.fusion.materialize(&tape)))
    }

    pub fn risk(&self, genes: &GeneExpressionVector, embeddings: &Matrix) -> Result<f64> {
        Ok(self.predict(genes, embeddings)?.0.risk)
    }
}
