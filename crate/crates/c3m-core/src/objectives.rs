//! Ranking and identification losses and the staged composites.
//!
//! The ranking loss hinges every matched cosine against every mismatched
//! counterpart in the batch, in both directions:
//!
//! ```text
//! Σ_pairs ( Σ_{x̂₂} max{β − cos(x₁,x₂) + cos(x₁,x̂₂), 0}
//!         + Σ_{x̂₁} max{β − cos(x₁,x₂) + cos(x̂₁,x₂), 0} )
//! ```
//!
//! The identification loss is the negative log softmax probability of the
//! true identity under a shared bias-free classifier. Stage one trains
//! global and fine-grained sub-manifolds; stage two adds the projected
//! and common terms:
//!
//! ```text
//! stage1 = L_g + λ₃ L_f          stage2 = stage1 + λ₄ L_p + λ₅ L_c
//! ```

use serde::Serialize;

use crate::param::{uniform_init, ParamSet};
use crate::prng::Stream;
use crate::tensor::{Graph, TensorId};
use crate::{C3mError, Result};

pub const CLASSIFIER_BLOCK: &str = "classifier.w";
pub const CLASSIFIER_WIDE_BLOCK: &str = "classifier_wide.w";

/// Registers the shared identity classifier (Q×dim, bias-free).
pub fn init_classifier(set: &mut ParamSet, name: &str, q: usize, dim: usize, rng: &mut Stream) -> Result<()> {
    set.add(name, vec![q, dim], uniform_init(rng, dim, q * dim))
}

/// Hinge terms for one matched pair against explicit negative lists.
pub fn ranking_terms_for_pair(
    g: &mut Graph,
    x1: TensorId,
    x2: TensorId,
    neg_x2: &[TensorId],
    neg_x1: &[TensorId],
    beta: f64,
) -> Result<TensorId> {
    let matched = g.cosine(x1, x2)?;
    let mut terms = Vec::with_capacity(neg_x2.len() + neg_x1.len());
    for &n in neg_x2 {
        let c = g.cosine(x1, n)?;
        let d = g.sub(c, matched)?;
        let h = g.add_const(d, beta);
        terms.push(g.relu(h));
    }
    for &n in neg_x1 {
        let c = g.cosine(n, x2)?;
        let d = g.sub(c, matched)?;
        let h = g.add_const(d, beta);
        terms.push(g.relu(h));
    }
    if terms.is_empty() {
        return Ok(g.scalar(0.0));
    }
    g.add_n(&terms)
}

/// Batch ranking loss over matched rows of `x1`/`x2`; negatives are every
/// row whose label differs, both directions.
pub fn ranking_loss(
    g: &mut Graph,
    x1: &[TensorId],
    x2: &[TensorId],
    labels: &[u32],
    beta: f64,
) -> Result<TensorId> {
    let n = labels.len();
    if x1.len() != n || x2.len() != n {
        return Err(C3mError::dim(format!(
            "ranking loss over {} x1, {} x2, {} labels",
            x1.len(),
            x2.len(),
            n
        )));
    }
    if n == 0 {
        return Err(C3mError::contract("ranking loss over an empty batch"));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        log::warn!("ranking loss batch holds a single identity; no negatives, loss is 0");
        return Ok(g.scalar(0.0));
    }
    let mut cmat = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            row.push(g.cosine(x1[i], x2[j])?);
        }
        cmat.push(row);
    }
    let mut terms = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if labels[j] == labels[i] {
                continue;
            }
            let d1 = g.sub(cmat[i][j], cmat[i][i])?;
            let h1 = g.add_const(d1, beta);
            terms.push(g.relu(h1));
            let d2 = g.sub(cmat[j][i], cmat[i][i])?;
            let h2 = g.add_const(d2, beta);
            terms.push(g.relu(h2));
        }
    }
    g.add_n(&terms)
}

/// Negative log softmax probability of the true identity under a
/// bias-free classifier.
pub fn id_loss(g: &mut Graph, x: TensorId, label: u32, w_id: TensorId) -> Result<TensorId> {
    let q = g.shape(w_id)[0];
    if label as usize >= q {
        return Err(C3mError::contract(format!(
            "identity label {label} outside classifier range {q}"
        )));
    }
    let logits = g.affine(w_id, x, None)?;
    let lsm = g.log_softmax(logits)?;
    let picked = g.select(lsm, label as usize)?;
    Ok(g.mul_const(picked, -1.0))
}

fn id_term(g: &mut Graph, xs: &[TensorId], labels: &[u32], w: TensorId) -> Result<TensorId> {
    if xs.len() != labels.len() {
        return Err(C3mError::dim(format!(
            "id loss over {} features and {} labels",
            xs.len(),
            labels.len()
        )));
    }
    let mut per = Vec::with_capacity(xs.len());
    for (&x, &y) in xs.iter().zip(labels) {
        per.push(id_loss(g, x, y, w)?);
    }
    g.add_n(&per)
}

/// One composite loss with its named term values.
#[derive(Clone, Debug)]
pub struct Composite {
    pub total: TensorId,
    pub terms: Vec<(String, f64)>,
}

fn compose(g: &mut Graph, parts: Vec<(String, TensorId)>) -> Result<Composite> {
    let ids: Vec<TensorId> = parts.iter().map(|(_, id)| *id).collect();
    let total = g.add_n(&ids)?;
    let terms = parts.into_iter().map(|(name, id)| (name, g.value(id))).collect();
    Ok(Composite { total, terms })
}

/// Global sub-manifold term: two identity losses and one ranking loss.
pub fn loss_global(
    g: &mut Graph,
    labels: &[u32],
    v_g: &[TensorId],
    t_g: &[TensorId],
    w_id: TensorId,
    beta: f64,
) -> Result<Composite> {
    let id_v = id_term(g, v_g, labels, w_id)?;
    let id_t = id_term(g, t_g, labels, w_id)?;
    let rk = ranking_loss(g, v_g, t_g, labels, beta)?;
    compose(
        g,
        vec![
            ("id.v_g".into(), id_v),
            ("id.t_g".into(), id_t),
            ("rk.v_g:t_g".into(), rk),
        ],
    )
}

/// Fine-grained term: identity losses on pooled locals and both
/// cross-directional ranking losses against the globals.
pub fn loss_fine(
    g: &mut Graph,
    labels: &[u32],
    v_g: &[TensorId],
    t_g: &[TensorId],
    v_f: &[TensorId],
    t_f: &[TensorId],
    w_id: TensorId,
    beta: f64,
) -> Result<Composite> {
    let id_v = id_term(g, v_f, labels, w_id)?;
    let id_t = id_term(g, t_f, labels, w_id)?;
    let rk_gf = ranking_loss(g, v_g, t_f, labels, beta)?;
    let rk_fg = ranking_loss(g, v_f, t_g, labels, beta)?;
    compose(
        g,
        vec![
            ("id.v_f".into(), id_v),
            ("id.t_f".into(), id_t),
            ("rk.v_g:t_f".into(), rk_gf),
            ("rk.v_f:t_g".into(), rk_fg),
        ],
    )
}

/// Projection term: identity losses on unified and projected features and
/// ranking losses pairing each projection with the opposite unified
/// feature.
pub fn loss_proj(
    g: &mut Graph,
    labels: &[u32],
    v_u: &[TensorId],
    t_u: &[TensorId],
    v_p: &[TensorId],
    t_p: &[TensorId],
    w_id: TensorId,
    beta: f64,
) -> Result<Composite> {
    let id_vu = id_term(g, v_u, labels, w_id)?;
    let id_tu = id_term(g, t_u, labels, w_id)?;
    let id_vp = id_term(g, v_p, labels, w_id)?;
    let id_tp = id_term(g, t_p, labels, w_id)?;
    let rk_pu = ranking_loss(g, v_p, t_u, labels, beta)?;
    let rk_up = ranking_loss(g, v_u, t_p, labels, beta)?;
    compose(
        g,
        vec![
            ("id.v_u".into(), id_vu),
            ("id.t_u".into(), id_tu),
            ("id.v_p".into(), id_vp),
            ("id.t_p".into(), id_tp),
            ("rk.v_p:t_u".into(), rk_pu),
            ("rk.v_u:t_p".into(), rk_up),
        ],
    )
}

/// Common-manifold term: identity losses and the ranking loss over the
/// merged pair. Takes its own classifier so wide merges can use a
/// matching one.
pub fn loss_common(
    g: &mut Graph,
    labels: &[u32],
    v_c: &[TensorId],
    t_c: &[TensorId],
    w_common: TensorId,
    beta: f64,
) -> Result<Composite> {
    let id_v = id_term(g, v_c, labels, w_common)?;
    let id_t = id_term(g, t_c, labels, w_common)?;
    let rk = ranking_loss(g, v_c, t_c, labels, beta)?;
    compose(
        g,
        vec![
            ("id.v_c".into(), id_v),
            ("id.t_c".into(), id_t),
            ("rk.v_c:t_c".into(), rk),
        ],
    )
}

/// Loss values for one optimization step.
#[derive(Clone, Debug, Default, Serialize)]
pub struct LossReport {
    pub terms: Vec<(String, f64)>,
    pub l_g: f64,
    pub l_f: f64,
    pub l_p: f64,
    pub l_c: f64,
    pub stage1: f64,
    pub stage2: f64,
}

/// First-stage composite over global and fine-grained features.
pub fn stage1_loss(
    g: &mut Graph,
    labels: &[u32],
    v_g: &[TensorId],
    t_g: &[TensorId],
    v_f: &[TensorId],
    t_f: &[TensorId],
    w_id: TensorId,
    beta: f64,
    lambda3: f64,
) -> Result<(TensorId, LossReport)> {
    let lg = loss_global(g, labels, v_g, t_g, w_id, beta)?;
    let lf = loss_fine(g, labels, v_g, t_g, v_f, t_f, w_id, beta)?;
    let weighted = g.mul_const(lf.total, lambda3);
    let total = g.add(lg.total, weighted)?;
    let mut report = LossReport {
        l_g: g.value(lg.total),
        l_f: g.value(lf.total),
        stage1: g.value(total),
        ..LossReport::default()
    };
    report.terms.extend(lg.terms);
    report.terms.extend(lf.terms);
    Ok((total, report))
}

/// Features the second stage adds on top of the first.
#[derive(Clone, Copy, Debug)]
pub struct ManifoldBatch<'a> {
    pub v_u: &'a [TensorId],
    pub t_u: &'a [TensorId],
    pub v_p: &'a [TensorId],
    pub t_p: &'a [TensorId],
    pub v_c: &'a [TensorId],
    pub t_c: &'a [TensorId],
}

/// Second-stage composite: the first stage plus projection and
/// common-manifold terms.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss(
    g: &mut Graph,
    labels: &[u32],
    v_g: &[TensorId],
    t_g: &[TensorId],
    v_f: &[TensorId],
    t_f: &[TensorId],
    manifold: &ManifoldBatch,
    w_id: TensorId,
    w_common: TensorId,
    beta: f64,
    lambda3: f64,
    lambda4: f64,
    lambda5: f64,
) -> Result<(TensorId, LossReport)> {
    let (s1, mut report) = stage1_loss(g, labels, v_g, t_g, v_f, t_f, w_id, beta, lambda3)?;
    let lp = loss_proj(g, labels, manifold.v_u, manifold.t_u, manifold.v_p, manifold.t_p, w_id, beta)?;
    let lc = loss_common(g, labels, manifold.v_c, manifold.t_c, w_common, beta)?;
    let wp = g.mul_const(lp.total, lambda4);
    let wc = g.mul_const(lc.total, lambda5);
    let with_p = g.add(s1, wp)?;
    let total = g.add(with_p, wc)?;
    report.l_p = g.value(lp.total);
    report.l_c = g.value(lc.total);
    report.stage2 = g.value(total);
    report.terms.extend(lp.terms);
    report.terms.extend(lc.terms);
    Ok((total, report))
}

// ====== tests ======
