//! Similarity components and cross-modal attention.
//!
//! Retrieval scores three parts: cosine over the common-manifold pair,
//! cosine over the global pair, and a fine-grained part built from
//! attention-pooled locals:
//!
//! ```text
//! α_i = softmax_i(cos(x_l_i, y_g))     x_f = Σ_{α_i > γ} α_i x_l_i
//! sim_f = (cos(v_g, t_f) + cos(v_f, t_g)) / 2
//! sim   = sim_c + λ₁ sim_g + λ₂ sim_f
//! ```
//!
//! The threshold comparison is strict and surviving weights are not
//! renormalized. When no weight clears the threshold (uniform weights sit
//! exactly at γ = 1/m, and a single local always does) the pool falls
//! back to the full weighted sum, which keeps the feature nonzero.

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, TensorId};
use crate::{C3mError, Result};

/// Threshold rule: uniform-attention level for m local columns.
pub fn gamma_rule(m: usize) -> f64 {
    1.0 / m.max(1) as f64
}

/// Softmax attention over local columns with the selection the pooling
/// actually used. Weights are plain values snapshot from the graph.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub weights: Vec<f64>,
    pub gamma: f64,
    pub selected: Vec<usize>,
}

impl AttentionWeights {
    pub fn selected_mass(&self) -> f64 {
        self.selected.iter().map(|&i| self.weights[i]).sum()
    }
}

/// Pools `locals` against the guide vector `y_g`: cosine scores, softmax,
/// strict threshold at `gamma`, unnormalized weighted sum of survivors.
pub fn cross_modal_attention(
    g: &mut Graph,
    y_g: TensorId,
    locals: &[TensorId],
    gamma: f64,
) -> Result<(TensorId, AttentionWeights)> {
    if locals.is_empty() {
        return Err(C3mError::contract("attention needs at least one local column"));
    }
    let mut scores = Vec::with_capacity(locals.len());
    for &l in locals {
        scores.push(g.cosine(l, y_g)?);
    }
    let score_vec = g.from_scalars(&scores)?;
    let weights = g.softmax_weights(score_vec)?;
    let wv = g.values(weights).to_vec();
    for &w in &wv {
        g.note_kink_margin((w - gamma).abs());
    }
    let selected: Vec<usize> =
        wv.iter().enumerate().filter(|&(_, &w)| w > gamma).map(|(i, _)| i).collect();
    let pooled = if selected.is_empty() {
        g.weighted_sum(weights, locals, None)?
    } else {
        g.weighted_sum(weights, locals, Some(&selected))?
    };
    Ok((pooled, AttentionWeights { weights: wv, gamma, selected }))
}

/// Cosine over the common-manifold pair.
pub fn sim_common(g: &mut Graph, v_c: TensorId, t_c: TensorId) -> Result<TensorId> {
    g.cosine(v_c, t_c)
}

/// Cosine over the global pair.
pub fn sim_global(g: &mut Graph, v_g: TensorId, t_g: TensorId) -> Result<TensorId> {
    g.cosine(v_g, t_g)
}

/// Fine-grained similarity with its pooled features and attention records.
#[derive(Clone, Debug)]
pub struct FineGrained {
    pub sim: TensorId,
    pub v_f: TensorId,
    pub t_f: TensorId,
    pub v_attention: AttentionWeights,
    pub t_attention: AttentionWeights,
}

/// Builds both cross-directional pooled features and averages the two
/// cosines. Thresholds follow the uniform-level rule per side.
pub fn sim_fine(
    g: &mut Graph,
    v_g: TensorId,
    t_g: TensorId,
    v_locals: &[TensorId],
    t_locals: &[TensorId],
) -> Result<FineGrained> {
    let (v_f, v_attention) = cross_modal_attention(g, t_g, v_locals, gamma_rule(v_locals.len()))?;
    let (t_f, t_attention) = cross_modal_attention(g, v_g, t_locals, gamma_rule(t_locals.len()))?;
    let c1 = g.cosine(v_g, t_f)?;
    let c2 = g.cosine(v_f, t_g)?;
    let total = g.add(c1, c2)?;
    let sim = g.mul_const(total, 0.5);
    Ok(FineGrained { sim, v_f, t_f, v_attention, t_attention })
}

/// The three components and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBundle {
    pub sim_c: f64,
    pub sim_g: f64,
    pub sim_f: f64,
    pub sim: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

pub fn overall_similarity(sim_c: f64, sim_g: f64, sim_f: f64, lambda1: f64, lambda2: f64) -> SimilarityBundle {
    SimilarityBundle {
        sim_c,
        sim_g,
        sim_f,
        sim: sim_c + lambda1 * sim_g + lambda2 * sim_f,
        lambda1,
        lambda2,
    }
}

// ====== tests ======
