//! The looking and leaping steps: cross-modal projection over a
//! distribution-shifted input, then gated merging onto the common manifold.
//!
//! Distribution shifting re-expresses a source vector in the target
//! vector's per-vector statistics:
//!
//! ```text
//! ds(s, r) = σ(r) · (s − μ(s)) / σ(s) + μ(r)
//! ```
//!
//! The projection (XProj) runs a two-layer perceptron with an ELU between
//! the layers and a tanh at the output over the shifted vector. The merge
//! (LASM) estimates an element-wise fusion gate from the pair and takes
//! the convex combination:
//!
//! ```text
//! g = sigmoid(W₂ elu(W₁ (x_u ⊕ x_p)))      x_c = g ⊙ x_u + (1 − g) ⊙ x_p
//! ```
//!
//! with ⊕ either concatenation (default) or addition, both bias-free.
//! Substitution variants used by the ablations swap the merge for plain
//! addition, concatenation, single-layer perceptrons, or a scalar gate.

use serde::{Deserialize, Serialize};

use crate::param::{uniform_init, Binding, ParamSet};
use crate::prng::Stream;
use crate::tensor::{Graph, TensorId};
use crate::{C3mError, Result};

/// Re-expresses `s` in the per-vector mean and deviation of `r`.
pub fn distribution_shift(g: &mut Graph, s: TensorId, r: TensorId) -> Result<TensorId> {
    let (mu_s, sd_s) = g.moments(s)?;
    let (mu_r, sd_r) = g.moments(r)?;
    let neg_mu = g.mul_const(mu_s, -1.0);
    let centered = g.offset(s, neg_mu)?;
    let unit = g.div_scalar(centered, sd_s)?;
    let scaled = g.scale(unit, sd_r)?;
    g.offset(scaled, mu_r)
}

/// Graph-bound leaf ids for one projection direction.
#[derive(Clone, Copy, Debug)]
pub struct XprojIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

/// Block names for one projection direction, in initialization order.
/// `direction` is the source modality key ("v" projects visual→textual).
pub fn xproj_block_names(direction: &str) -> [String; 4] {
    [
        format!("xproj.{direction}.fc1.w"),
        format!("xproj.{direction}.fc1.b"),
        format!("xproj.{direction}.fc2.w"),
        format!("xproj.{direction}.fc2.b"),
    ]
}

pub fn init_xproj(set: &mut ParamSet, direction: &str, p: usize, rng: &mut Stream) -> Result<()> {
    let [w1, b1, w2, b2] = xproj_block_names(direction);
    set.add(&w1, vec![p, p], uniform_init(rng, p, p * p))?;
    set.add(&b1, vec![p], vec![0.0; p])?;
    set.add(&w2, vec![p, p], uniform_init(rng, p, p * p))?;
    set.add(&b2, vec![p], vec![0.0; p])?;
    Ok(())
}

pub fn bind_xproj(binding: &Binding, direction: &str) -> Result<XprojIds> {
    let [w1, b1, w2, b2] = xproj_block_names(direction);
    Ok(XprojIds {
        w1: binding.id(&w1)?,
        b1: binding.id(&b1)?,
        w2: binding.id(&w2)?,
        b2: binding.id(&b2)?,
    })
}

/// Projects `s` toward the other modality's manifold: the perceptron runs
/// over `distribution_shift(s, r)` and ends in tanh, so outputs lie in
/// (−1, 1).
pub fn xproj(g: &mut Graph, s: TensorId, r: TensorId, ids: &XprojIds) -> Result<TensorId> {
    let shifted = distribution_shift(g, s, r)?;
    let hidden = g.affine(ids.w1, shifted, Some(ids.b1))?;
    let act = g.elu(hidden);
    let out = g.affine(ids.w2, act, Some(ids.b2))?;
    Ok(g.tanh(out))
}

/// How the merge combines its two inputs before gate estimation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    Concat,
    Add,
}

/// Gated merge of a unified feature with its projected counterpart.
/// Returns the merged vector and the gate. With ⊕ = concat the weights
/// are W₁ ∈ 2p×2p and W₂ ∈ p×2p; with ⊕ = add both are p×p.
pub fn lasm(
    g: &mut Graph,
    x_u: TensorId,
    x_p: TensorId,
    w1: TensorId,
    w2: TensorId,
    combine: Combine,
) -> Result<(TensorId, TensorId)> {
    let joined = match combine {
        Combine::Concat => g.concat(x_u, x_p)?,
        Combine::Add => g.add(x_u, x_p)?,
    };
    let hidden = g.affine(w1, joined, None)?;
    let act = g.elu(hidden);
    let pre = g.affine(w2, act, None)?;
    let gate = g.sigmoid(pre);
    let diff = g.sub(x_u, x_p)?;
    let gated = g.mul(gate, diff)?;
    let merged = g.add(x_p, gated)?;
    Ok((merged, gate))
}

/// Merge substitutions compared in the ablations. The gated variants carry
/// the fusion-gate construction; the rest are fixed combinations. Concat
/// variants produce 2p-vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LasmKind {
    Add,
    AddMlp,
    Concat,
    ConcatMlp,
    ScalarGate,
    VectorGateAdd,
    VectorGateConcat,
}

impl LasmKind {
    pub const ALL: [LasmKind; 7] = [
        LasmKind::Add,
        LasmKind::AddMlp,
        LasmKind::Concat,
        LasmKind::ConcatMlp,
        LasmKind::ScalarGate,
        LasmKind::VectorGateAdd,
        LasmKind::VectorGateConcat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LasmKind::Add => "add",
            LasmKind::AddMlp => "add_mlp",
            LasmKind::Concat => "concat",
            LasmKind::ConcatMlp => "concat_mlp",
            LasmKind::ScalarGate => "scalar_gate",
            LasmKind::VectorGateAdd => "vector_gate_add",
            LasmKind::VectorGateConcat => "vector_gate_concat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            C3mError::config(format!(
                "lasm kind must be one of add|add_mlp|concat|concat_mlp|scalar_gate|vector_gate_add|vector_gate_concat (got {s})"
            ))
        })
    }

    /// Output length of the merged feature for input length p.
    pub fn output_dim(self, p: usize) -> usize {
        match self {
            LasmKind::Concat | LasmKind::ConcatMlp => 2 * p,
            _ => p,
        }
    }

    pub fn has_params(self) -> bool {
        !matches!(self, LasmKind::Add | LasmKind::Concat)
    }
}

/// Graph-bound leaf ids for one merge instance; which fields are present
/// depends on the kind.
#[derive(Clone, Copy, Debug)]
pub enum LasmIds {
    Add,
    AddMlp { w: TensorId, b: TensorId },
    Concat,
    ConcatMlp { w: TensorId, b: TensorId },
    ScalarGate { w: TensorId, b: TensorId },
    VectorGateAdd { w1: TensorId, w2: TensorId },
    VectorGateConcat { w1: TensorId, w2: TensorId },
}

/// Block names for one merge instance; empty for parameter-free kinds.
/// `owner` distinguishes shared from per-modality instances.
pub fn lasm_block_names(owner: &str, kind: LasmKind) -> Vec<String> {
    let prefix = format!("lasm.{owner}");
    match kind {
        LasmKind::Add | LasmKind::Concat => vec![],
        LasmKind::AddMlp | LasmKind::ConcatMlp | LasmKind::ScalarGate => {
            vec![format!("{prefix}.fc.w"), format!("{prefix}.fc.b")]
        }
        LasmKind::VectorGateAdd | LasmKind::VectorGateConcat => {
            vec![format!("{prefix}.gate1.w"), format!("{prefix}.gate2.w")]
        }
    }
}

pub fn init_lasm(set: &mut ParamSet, owner: &str, kind: LasmKind, p: usize, rng: &mut Stream) -> Result<()> {
    let names = lasm_block_names(owner, kind);
    match kind {
        LasmKind::Add | LasmKind::Concat => Ok(()),
        LasmKind::AddMlp => {
            set.add(&names[0], vec![p, p], uniform_init(rng, p, p * p))?;
            set.add(&names[1], vec![p], vec![0.0; p])
        }
        LasmKind::ConcatMlp => {
            set.add(&names[0], vec![2 * p, 2 * p], uniform_init(rng, 2 * p, 4 * p * p))?;
            set.add(&names[1], vec![2 * p], vec![0.0; 2 * p])
        }
        LasmKind::ScalarGate => {
            set.add(&names[0], vec![1, 2 * p], uniform_init(rng, 2 * p, 2 * p))?;
            set.add(&names[1], vec![1], vec![0.0])
        }
        LasmKind::VectorGateAdd => {
            set.add(&names[0], vec![p, p], uniform_init(rng, p, p * p))?;
            set.add(&names[1], vec![p, p], uniform_init(rng, p, p * p))
        }
        LasmKind::VectorGateConcat => {
            set.add(&names[0], vec![2 * p, 2 * p], uniform_init(rng, 2 * p, 4 * p * p))?;
            set.add(&names[1], vec![p, 2 * p], uniform_init(rng, 2 * p, 2 * p * p))
        }
    }
}

pub fn bind_lasm(binding: &Binding, owner: &str, kind: LasmKind) -> Result<LasmIds> {
    let names = lasm_block_names(owner, kind);
    Ok(match kind {
        LasmKind::Add => LasmIds::Add,
        LasmKind::Concat => LasmIds::Concat,
        LasmKind::AddMlp => LasmIds::AddMlp { w: binding.id(&names[0])?, b: binding.id(&names[1])? },
        LasmKind::ConcatMlp => LasmIds::ConcatMlp { w: binding.id(&names[0])?, b: binding.id(&names[1])? },
        LasmKind::ScalarGate => LasmIds::ScalarGate { w: binding.id(&names[0])?, b: binding.id(&names[1])? },
        LasmKind::VectorGateAdd => {
            LasmIds::VectorGateAdd { w1: binding.id(&names[0])?, w2: binding.id(&names[1])? }
        }
        LasmKind::VectorGateConcat => {
            LasmIds::VectorGateConcat { w1: binding.id(&names[0])?, w2: binding.id(&names[1])? }
        }
    })
}

/// Applies the configured merge. Returns the merged feature and, for the
/// gated kinds, the gate.
pub fn lasm_variant(
    g: &mut Graph,
    x_u: TensorId,
    x_p: TensorId,
    ids: &LasmIds,
) -> Result<(TensorId, Option<TensorId>)> {
    match *ids {
        LasmIds::Add => Ok((g.add(x_u, x_p)?, None)),
        LasmIds::AddMlp { w, b } => {
            let summed = g.add(x_u, x_p)?;
            let pre = g.affine(w, summed, Some(b))?;
            Ok((g.tanh(pre), None))
        }
        LasmIds::Concat => Ok((g.concat(x_u, x_p)?, None)),
        LasmIds::ConcatMlp { w, b } => {
            let joined = g.concat(x_u, x_p)?;
            let pre = g.affine(w, joined, Some(b))?;
            Ok((g.tanh(pre), None))
        }
        LasmIds::ScalarGate { w, b } => {
            let joined = g.concat(x_u, x_p)?;
            let pre = g.affine(w, joined, Some(b))?;
            let gate = g.sigmoid(pre);
            let diff = g.sub(x_u, x_p)?;
            let gated = g.scale(diff, gate)?;
            Ok((g.add(x_p, gated)?, Some(gate)))
        }
        LasmIds::VectorGateAdd { w1, w2 } => {
            let (merged, gate) = lasm(g, x_u, x_p, w1, w2, Combine::Add)?;
            Ok((merged, Some(gate)))
        }
        LasmIds::VectorGateConcat { w1, w2 } => {
            let (merged, gate) = lasm(g, x_u, x_p, w1, w2, Combine::Concat)?;
            Ok((merged, Some(gate)))
        }
    }
}

/// Parameter handles for both projection directions and both merge
/// instances. A shared merge binds the same blocks into both fields.
#[derive(Clone, Copy, Debug)]
pub struct PairIds {
    pub xproj_v: XprojIds,
    pub xproj_t: XprojIds,
    pub lasm_v: LasmIds,
    pub lasm_t: LasmIds,
}

/// The merged pair plus the intermediates the objectives need.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddedPair {
    pub v_p: TensorId,
    pub t_p: TensorId,
    pub v_c: TensorId,
    pub t_c: TensorId,
    pub gate_v: Option<TensorId>,
    pub gate_t: Option<TensorId>,
}

/// Projects each unified feature toward the other modality and merges it
/// with its own, yielding both common-manifold features.
pub fn embed_pair(g: &mut Graph, v_u: TensorId, t_u: TensorId, ids: &PairIds) -> Result<EmbeddedPair> {
    let v_p = xproj(g, v_u, t_u, &ids.xproj_v)?;
    let t_p = xproj(g, t_u, v_u, &ids.xproj_t)?;
    let (v_c, gate_v) = lasm_variant(g, v_u, v_p, &ids.lasm_v)?;
    let (t_c, gate_t) = lasm_variant(g, t_u, t_p, &ids.lasm_t)?;
    Ok(EmbeddedPair { v_p, t_p, v_c, t_c, gate_v, gate_t })
}

// ====== tests ======
