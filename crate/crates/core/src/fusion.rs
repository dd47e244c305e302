//! Single-layer, single-head attention over the concatenated pathway/patch
//! sequence with the patch-to-patch block removed.
//!
//! Pathway rows attend to every token; patch rows attend to pathway tokens
//! only. That is exactly dense attention with the `H→H` scores set to −∞,
//! but the block form never materializes the `N_H x N_H` score matrix:
//! score storage is `N_P·(N_P+N_H) + N_H·N_P` entries instead of
//! `(N_P+N_H)²`.
//!
//! Post-attention: layer norm, then a `d → 2d → d` SiLU feed-forward with a
//! residual around it, then the per-modality means concatenated into a
//! `1 x 2d` embedding.

use rand::Rng;

use crate::autodiff::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::param::{ParamId, ParamStore};

/// Largest sequence the dense reference will materialize.
pub const DENSE_GUARD: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    pub dim: usize,
    /// Pathway queries see patch keys (`P→H` block).
    pub pathway_to_patch: bool,
    /// Patch queries see pathway keys (`H→P` block).
    pub patch_to_pathway: bool,
    /// Compute through the dense masked score matrix instead of blocks.
    pub dense_fallback: bool,
}

impl FusionConfig {
    pub fn full(dim: usize) -> Self {
        Self {
            dim,
            pathway_to_patch: true,
            patch_to_pathway: true,
            dense_fallback: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("token dimension must be positive".into()));
        }
        if !self.dense_fallback && !self.pathway_to_patch && !self.patch_to_pathway {
            return Err(Error::Config(
                "at least one cross-modal attention block must be enabled".into(),
            ));
        }
        Ok(())
    }
}

/// Number of score entries the block form allocates.
pub fn masked_score_entries(n_p: u64, n_h: u64, cfg: &FusionConfig) -> u64 {
    let mut n = n_p * n_p;
    if cfg.pathway_to_patch {
        n += n_p * n_h;
    }
    if cfg.patch_to_pathway {
        n += n_h * n_p;
    }
    n
}

/// Number of score entries dense attention allocates.
pub fn dense_score_entries(n_p: u64, n_h: u64) -> u64 {
    (n_p + n_h) * (n_p + n_h)
}

/// Shared attention and post-attention parameters.
#[derive(Debug, Clone)]
pub struct FusionWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
    dim: usize,
}

const WEIGHT_NAMES: [&str; 9] = [
    "fusion.wq",
    "fusion.wk",
    "fusion.wv",
    "fusion.ln.gain",
    "fusion.ln.bias",
    "fusion.ff.w1",
    "fusion.ff.b1",
    "fusion.ff.w2",
    "fusion.ff.b2",
];

impl FusionWeights {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Result<Self> {
        let wq = store.add_glorot("fusion.wq", dim, dim, rng)?;
        let wk = store.add_glorot("fusion.wk", dim, dim, rng)?;
        let wv = store.add_glorot("fusion.wv", dim, dim, rng)?;
        let ln_gain = store.add("fusion.ln.gain", Matrix::filled(1, dim, 1.0))?;
        let ln_bias = store.add("fusion.ln.bias", Matrix::zeros(1, dim))?;
        let ff_w1 = store.add_glorot("fusion.ff.w1", dim, 2 * dim, rng)?;
        let ff_b1 = store.add("fusion.ff.b1", Matrix::zeros(1, 2 * dim))?;
        let ff_w2 = store.add_glorot("fusion.ff.w2", 2 * dim, dim, rng)?;
        let ff_b2 = store.add("fusion.ff.b2", Matrix::zeros(1, dim))?;
        Ok(Self {
            wq,
            wk,
            wv,
            ln_gain,
            ln_bias,
            ff_w1,
            ff_b1,
            ff_w2,
            ff_b2,
            dim,
        })
    }

    pub fn bind(store: &ParamStore) -> Result<Self> {
        let ids: Vec<ParamId> = WEIGHT_NAMES
            .iter()
            .map(|n| {
                store
                    .id(n)
                    .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter `{n}`")))
            })
            .collect::<Result<_>>()?;
        let dim = store.value(ids[0]).rows();
        Ok(Self {
            wq: ids[0],
            wk: ids[1],
            wv: ids[2],
            ln_gain: ids[3],
            ln_bias: ids[4],
            ff_w1: ids[5],
            ff_b1: ids[6],
            ff_w2: ids[7],
            ff_b2: ids[8],
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Tape handles for one fusion pass.
#[derive(Debug, Clone)]
pub struct FusionVars {
    /// `1 x 2d` pooled embedding: mean pathway token ‖ mean patch token.
    pub pooled: Var,
    /// Attention output before the feed-forward block, `(N_P+N_H) x d`.
    pub attended: Var,
    pub pathway_tokens: Var,
    pub patch_tokens: Var,
    pub a_pp: Var,
    pub a_ph: Var,
    pub a_hp: Var,
    pub score_entries: u64,
}

/// Materialized result of [`fuse`] / [`dense_reference`].
#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub pooled: Matrix,
    pub attended: Matrix,
    pub pathway_tokens: Matrix,
    pub patch_tokens: Matrix,
    /// `N_P x N_P`
    pub a_pp: Matrix,
    /// `N_P x N_H`; zeros when the block is disabled.
    pub a_ph: Matrix,
    /// `N_H x N_P`; zeros when the block is disabled.
    pub a_hp: Matrix,
    pub score_entries: u64,
}

impl FusionVars {
    pub fn materialize(&self, tape: &Tape) -> FusionOutput {
        FusionOutput {
            pooled: tape.value(self.pooled).clone(),
            attended: tape.value(self.attended).clone(),
            pathway_tokens: tape.value(self.pathway_tokens).clone(),
            patch_tokens: tape.value(self.patch_tokens).clone(),
            a_pp: tape.value(self.a_pp).clone(),
            a_ph: tape.value(self.a_ph).clone(),
            a_hp: tape.value(self.a_hp).clone(),
            score_entries: self.score_entries,
        }
    }
}

/// Masking policy for [`dense_on_tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenseMask {
    /// `H→H` masked, plus whichever cross blocks the config disables.
    Blocks,
    /// Plain self-attention over every token.
    Unmasked,
}

struct Projected {
    q_p: Var,
    q_h: Var,
    k_p: Var,
    k_h: Var,
    v_p: Var,
    v_h: Var,
}

fn check_widths(tape: &Tape, dim: usize, pathways: Var, patches: Var) -> Result<(usize, usize)> {
    let (n_p, dp) = tape.value(pathways).shape();
    let (n_h, dh) = tape.value(patches).shape();
    if dp != dim || dh != dim {
        return Err(Error::Contract(format!(
            "token widths {dp} (pathways) and {dh} (patches) must both equal d = {dim}"
        )));
    }
    Ok((n_p, n_h))
}

fn project(
    tape: &mut Tape,
    store: &ParamStore,
    w: &FusionWeights,
    pathways: Var,
    patches: Var,
) -> Result<Projected> {
    let wq = tape.param(store, w.wq);
    let wk = tape.param(store, w.wk);
    let wv = tape.param(store, w.wv);
    Ok(Projected {
        q_p: tape.matmul(pathways, wq)?,
        q_h: tape.matmul(patches, wq)?,
        k_p: tape.matmul(pathways, wk)?,
        k_h: tape.matmul(patches, wk)?,
        v_p: tape.matmul(pathways, wv)?,
        v_h: tape.matmul(patches, wv)?,
    })
}

/// Block-masked attention followed by the shared post-processing.
pub fn fuse_on_tape(
    cfg: &FusionConfig,
    w: &FusionWeights,
    tape: &mut Tape,
    store: &ParamStore,
    pathways: Var,
    patches: Var,
) -> Result<FusionVars> {
    cfg.validate()?;
    if cfg.dense_fallback {
        return dense_on_tape(cfg, w, tape, store, pathways, patches, DenseMask::Blocks);
    }
    let (n_p, n_h) = check_widths(tape, cfg.dim, pathways, patches)?;
    if n_p == 0 {
        return Err(Error::Contract(
            "block attention needs at least one pathway token".into(),
        ));
    }
    let inv_sqrt_d = 1.0 / (cfg.dim as f64).sqrt();
    let pr = project(tape, store, w, pathways, patches)?;
    let k_p_t = tape.transpose(pr.k_p);

    let s_pp = tape.matmul(pr.q_p, k_p_t)?;
    let (scores, values) = if cfg.pathway_to_patch {
        let k_h_t = tape.transpose(pr.k_h);
        let s_ph = tape.matmul(pr.q_p, k_h_t)?;
        (
            tape.concat_cols(&[s_pp, s_ph])?,
            tape.concat_rows(&[pr.v_p, pr.v_h])?,
        )
    } else {
        (s_pp, pr.v_p)
    };
    let scores = tape.scale(scores, inv_sqrt_d);
    let a_p = tape.row_softmax(scores, None)?;
    let x_p = tape.matmul(a_p, values)?;
    let a_pp = tape.slice_cols(a_p, 0, n_p);
    let a_ph = if cfg.pathway_to_patch {
        tape.slice_cols(a_p, n_p, n_p + n_h)
    } else {
        tape.leaf(Matrix::zeros(n_p, n_h))
    };

    let (x_h, a_hp) = if cfg.patch_to_pathway {
        let s_hp = tape.matmul(pr.q_h, k_p_t)?;
        let s_hp = tape.scale(s_hp, inv_sqrt_d);
        let a_hp = tape.row_softmax(s_hp, None)?;
        (tape.matmul(a_hp, pr.v_p)?, a_hp)
    } else {
        // no keys left for patch queries: patch tokens pass through unchanged
        (patches, tape.leaf(Matrix::zeros(n_h, n_p)))
    };

    let attended = tape.concat_rows(&[x_p, x_h])?;
    let score_entries = masked_score_entries(n_p as u64, n_h as u64, cfg);
    post_attention(
        w,
        tape,
        store,
        attended,
        n_p,
        a_pp,
        a_ph,
        a_hp,
        score_entries,
    )
}

/// Dense reference: materializes the full `(N_P+N_H)²` score matrix and
/// masks with an additive −∞ surrogate.
pub fn dense_on_tape(
    cfg: &FusionConfig,
    w: &FusionWeights,
    tape: &mut Tape,
    store: &ParamStore,
    pathways: Var,
    patches: Var,
    mask: DenseMask,
) -> Result<FusionVars> {
    let (n_p, n_h) = check_widths(tape, cfg.dim, pathways, patches)?;
    let n = n_p + n_h;
    if n > DENSE_GUARD {
        return Err(Error::Size(format!(
            "dense attention over {n} tokens exceeds the {DENSE_GUARD}-token guard"
        )));
    }
    let inv_sqrt_d = 1.0 / (cfg.dim as f64).sqrt();
    let pr = project(tape, store, w, pathways, patches)?;
    let q = tape.concat_rows(&[pr.q_p, pr.q_h])?;
    let k = tape.concat_rows(&[pr.k_p, pr.k_h])?;
    let v = tape.concat_rows(&[pr.v_p, pr.v_h])?;
    let k_t = tape.transpose(k);
    let scores = tape.matmul(q, k_t)?;
    let scores = tape.scale(scores, inv_sqrt_d);

    let masked_rows = mask == DenseMask::Blocks && !cfg.patch_to_pathway;
    let (attended, a) = if mask == DenseMask::Unmasked {
        let a = tape.row_softmax(scores, None)?;
        (tape.matmul(a, v)?, a)
    } else {
        let mut m = vec![false; n * n];
        for r in 0..n {
            for c in 0..n {
                let (row_h, col_h) = (r >= n_p, c >= n_p);
                m[r * n + c] = match (row_h, col_h) {
                    (true, true) => true,
                    (false, true) => !cfg.pathway_to_patch,
                    (true, false) => !cfg.patch_to_pathway,
                    (false, false) => false,
                };
            }
        }
        if masked_rows {
            // patch rows are fully masked; only pathway rows are attended
            let top = tape.slice_rows(scores, 0, n_p);
            let a_top = tape.row_softmax(top, Some(&m[..n_p * n]))?;
            let x_p = tape.matmul(a_top, v)?;
            let zeros = tape.leaf(Matrix::zeros(n_h, n));
            let a = tape.concat_rows(&[a_top, zeros])?;
            (tape.concat_rows(&[x_p, patches])?, a)
        } else {
            let a = tape.row_softmax(scores, Some(&m))?;
            (tape.matmul(a, v)?, a)
        }
    };

    let top = tape.slice_rows(a, 0, n_p);
    let bottom = tape.slice_rows(a, n_p, n);
    let a_pp = tape.slice_cols(top, 0, n_p);
    let a_ph = tape.slice_cols(top, n_p, n);
    let a_hp = tape.slice_cols(bottom, 0, n_p);
    let score_entries = dense_score_entries(n_p as u64, n_h as u64);
    post_attention(
        w,
        tape,
        store,
        attended,
        n_p,
        a_pp,
        a_ph,
        a_hp,
        score_entries,
    )
}

#[allow(clippy::too_many_arguments)]
fn post_attention(
    w: &FusionWeights,
    tape: &mut Tape,
    store: &ParamStore,
    attended: Var,
    n_p: usize,
    a_pp: Var,
    a_ph: Var,
    a_hp: Var,
    score_entries: u64,
) -> Result<FusionVars> {
    let n = tape.value(attended).rows();
    let gain = tape.param(store, w.ln_gain);
    let bias = tape.param(store, w.ln_bias);
    let w1 = tape.param(store, w.ff_w1);
    let b1 = tape.param(store, w.ff_b1);
    let w2 = tape.param(store, w.ff_w2);
    let b2 = tape.param(store, w.ff_b2);

    let z = tape.layer_norm(attended, gain, bias)?;
    let h = tape.matmul(z, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.silu(h);
    let f = tape.matmul(h, w2)?;
    let f = tape.add_row(f, b2)?;
    let y = tape.add(z, f)?;

    let pathway_tokens = tape.slice_rows(y, 0, n_p);
    let patch_tokens = tape.slice_rows(y, n_p, n);
    let mean_p = pool(tape, pathway_tokens, w.dim)?;
    let mean_h = pool(tape, patch_tokens, w.dim)?;
    let pooled = tape.concat_cols(&[mean_p, mean_h])?;
    Ok(FusionVars {
        pooled,
        attended,
        pathway_tokens,
        patch_tokens,
        a_pp,
        a_ph,
        a_hp,
        score_entries,
    })
}

/// Row mean; an empty modality pools to zeros.
fn pool(tape: &mut Tape, tokens: Var, dim: usize) -> Result<Var> {
    if tape.value(tokens).rows() == 0 {
        return Ok(tape.leaf(Matrix::zeros(1, dim)));
    }
    tape.mean_rows(tokens)
}

/// Evaluate the block form on concrete token matrices.
pub fn fuse(
    cfg: &FusionConfig,
    w: &FusionWeights,
    store: &ParamStore,
    pathway_tokens: &Matrix,
    patch_tokens: &Matrix,
) -> Result<FusionOutput> {
    let mut tape = Tape::with_mode(Mode::Eval);
    let p = tape.leaf(pathway_tokens.clone());
    let h = tape.leaf(patch_tokens.clone());
    let vars = fuse_on_tape(cfg, w, &mut tape, store, p, h)?;
    Ok(vars.materialize(&tape))
}

/// Evaluate the dense masked reference on concrete token matrices.
pub fn dense_reference(
    cfg: &FusionConfig,
    w: &FusionWeights,
    store: &ParamStore,
    pathway_tokens: &Matrix,
    patch_tokens: &Matrix,
    mask: DenseMask,
) -> Result<FusionOutput> {
    let mut tape = Tape::with_mode(Mode::Eval);
    let p = tape.leaf(pathway_tokens.clone());
    let h = tape.leaf(patch_tokens.clone());
    let vars = dense_on_tape(cfg, w, &mut tape, store, p, h, mask)?;
    Ok(vars.materialize(&tape))
}
