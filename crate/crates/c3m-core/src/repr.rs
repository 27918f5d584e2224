//! Trainable encoding heads and uni-modal feature distillation.
//!
//! Each modality owns two heads over raw backbone columns: the global head
//! normalizes the global column and applies one linear map; the local head
//! normalizes each local column and applies two linear maps with an ELU
//! between them. The distillation step (USEM) pools the local columns with
//! attention scored against the global column and adds the global back in:
//!
//! ```text
//! w_i = softmax_i(x_g · x_l_i)        u = Σ_i w_i x_l_i + x_g
//! ```
//!
//! Ablation variants replace the attention pool with the global column
//! alone, the mean of all columns, or a uniform local mean plus global.

use serde::{Deserialize, Serialize};

use crate::param::{uniform_init, Binding, ParamSet};
use crate::prng::Stream;
use crate::synthgen::{Modality, SampleRecord};
use crate::tensor::{Graph, TensorId};
use crate::{C3mError, Result};

/// Encoded columns of one sample inside a graph: column 0 is the global
/// feature, the rest are locals. All columns are p-vectors.
#[derive(Clone, Debug)]
pub struct FeatureMatrix {
    pub modality: Modality,
    pub global: TensorId,
    pub locals: Vec<TensorId>,
}

/// Graph-bound leaf ids for one modality's pair of heads.
#[derive(Clone, Copy, Debug)]
pub struct HeadIds {
    pub gn_gain_g: TensorId,
    pub gn_bias_g: TensorId,
    pub fc_g_w: TensorId,
    pub fc_g_b: TensorId,
    pub gn_gain_l: TensorId,
    pub gn_bias_l: TensorId,
    pub fc_l1_w: TensorId,
    pub fc_l1_b: TensorId,
    pub fc_l2_w: TensorId,
    pub fc_l2_b: TensorId,
}

fn modality_key(modality: Modality) -> &'static str {
    match modality {
        Modality::Visual => "v",
        Modality::Textual => "t",
    }
}

/// Block names for one modality's heads, in initialization order.
pub fn head_block_names(modality: Modality) -> [String; 10] {
    let m = modality_key(modality);
    [
        format!("head.{m}.global.gn.gain"),
        format!("head.{m}.global.gn.bias"),
        format!("head.{m}.global.fc.w"),
        format!("head.{m}.global.fc.b"),
        format!("head.{m}.local.gn.gain"),
        format!("head.{m}.local.gn.bias"),
        format!("head.{m}.local.fc1.w"),
        format!("head.{m}.local.fc1.b"),
        format!("head.{m}.local.fc2.w"),
        format!("head.{m}.local.fc2.b"),
    ]
}

/// Registers freshly initialized head blocks: gains one, biases zero,
/// linear maps fan-in uniform.
pub fn init_heads(
    set: &mut ParamSet,
    modality: Modality,
    d_raw: usize,
    p: usize,
    rng: &mut Stream,
) -> Result<()> {
    let [gg, gbn, gw, gb, lg, lb, l1w, l1b, l2w, l2b] = head_block_names(modality);
    set.add(&gg, vec![d_raw], vec![1.0; d_raw])?;
    set.add(&gbn, vec![d_raw], vec![0.0; d_raw])?;
    set.add(&gw, vec![p, d_raw], uniform_init(rng, d_raw, p * d_raw))?;
    set.add(&gb, vec![p], vec![0.0; p])?;
    set.add(&lg, vec![d_raw], vec![1.0; d_raw])?;
    set.add(&lb, vec![d_raw], vec![0.0; d_raw])?;
    set.add(&l1w, vec![p, d_raw], uniform_init(rng, d_raw, p * d_raw))?;
    set.add(&l1b, vec![p], vec![0.0; p])?;
    set.add(&l2w, vec![p, p], uniform_init(rng, p, p * p))?;
    set.add(&l2b, vec![p], vec![0.0; p])?;
    Ok(())
}

pub fn bind_heads(binding: &Binding, modality: Modality) -> Result<HeadIds> {
    let [gg, gb_gn, gw, gb, lg, lb_gn, l1w, l1b, l2w, l2b] = head_block_names(modality);
    Ok(HeadIds {
        gn_gain_g: binding.id(&gg)?,
        gn_bias_g: binding.id(&gb_gn)?,
        fc_g_w: binding.id(&gw)?,
        fc_g_b: binding.id(&gb)?,
        gn_gain_l: binding.id(&lg)?,
        gn_bias_l: binding.id(&lb_gn)?,
        fc_l1_w: binding.id(&l1w)?,
        fc_l1_b: binding.id(&l1b)?,
        fc_l2_w: binding.id(&l2w)?,
        fc_l2_b: binding.id(&l2b)?,
    })
}

/// Per-vector normalization with learned gain and bias:
/// gain ⊙ (x − μ(x))/σ(x) + bias, σ clamped at EPS.
pub fn group_norm(g: &mut Graph, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
    let (mu, sd) = g.moments(x)?;
    let neg_mu = g.mul_const(mu, -1.0);
    let centered = g.offset(x, neg_mu)?;
    let unit = g.div_scalar(centered, sd)?;
    let scaled = g.mul(unit, gain)?;
    g.add(scaled, bias)
}

/// Encodes one raw sample into its feature matrix. The global column is
/// FC(GN(raw global)); each local column is FC(ELU(FC(GN(raw local)))).
pub fn encode(g: &mut Graph, rec: &SampleRecord, d_raw: usize, h: &HeadIds) -> Result<FeatureMatrix> {
    if rec.m == 0 {
        return Err(C3mError::contract("encode needs at least one local column"));
    }
    if rec.raw.len() != (rec.m as usize + 1) * d_raw {
        return Err(C3mError::dim(format!(
            "record holds {} raw values, expected {} columns of length {d_raw}",
            rec.raw.len(),
            rec.m + 1
        )));
    }
    let load = |g: &mut Graph, col: &[f32]| {
        let vals: Vec<f64> = col.iter().map(|&v| v as f64).collect();
        g.leaf_vec(vals, false)
    };

    let raw_g = load(g, rec.global(d_raw));
    let norm_g = group_norm(g, raw_g, h.gn_gain_g, h.gn_bias_g)?;
    let global = g.affine(h.fc_g_w, norm_g, Some(h.fc_g_b))?;

    let mut locals = Vec::with_capacity(rec.m as usize);
    for i in 0..rec.m as usize {
        let raw_l = load(g, rec.local(d_raw, i));
        let norm_l = group_norm(g, raw_l, h.gn_gain_l, h.gn_bias_l)?;
        let hidden = g.affine(h.fc_l1_w, norm_l, Some(h.fc_l1_b))?;
        let act = g.elu(hidden);
        locals.push(g.affine(h.fc_l2_w, act, Some(h.fc_l2_b))?);
    }
    Ok(FeatureMatrix { modality: rec.modality, global, locals })
}

/// Attention pooling of locals against the global column, returning the
/// unified feature and the softmax weights (exposed for inspection).
pub fn usem_with_weights(g: &mut Graph, f: &FeatureMatrix) -> Result<(TensorId, TensorId)> {
    if f.locals.is_empty() {
        return Err(C3mError::contract("usem needs at least one local column"));
    }
    let mut scores = Vec::with_capacity(f.locals.len());
    for &l in &f.locals {
        scores.push(g.dot(f.global, l)?);
    }
    let score_vec = g.from_scalars(&scores)?;
    let weights = g.softmax_weights(score_vec)?;
    let mix = g.weighted_sum(weights, &f.locals, None)?;
    let unified = g.add(mix, f.global)?;
    Ok((unified, weights))
}

pub fn usem(g: &mut Graph, f: &FeatureMatrix) -> Result<TensorId> {
    usem_with_weights(g, f).map(|(u, _)| u)
}

/// Distillation variants compared in the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UsemKind {
    /// Global column alone.
    Glo,
    /// Mean of all m+1 columns.
    Avg,
    /// Uniform mean of locals plus the global column.
    AvglocGlo,
    /// Attention pooling.
    Usem,
}

impl UsemKind {
    pub const ALL: [UsemKind; 4] = [UsemKind::Glo, UsemKind::Avg, UsemKind::AvglocGlo, UsemKind::Usem];

    pub fn name(self) -> &'static str {
        match self {
            UsemKind::Glo => "glo",
            UsemKind::Avg => "avg",
            UsemKind::AvglocGlo => "avgloc_glo",
            UsemKind::Usem => "usem",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| C3mError::config(format!("usem kind must be one of glo|avg|avgloc_glo|usem (got {s})")))
    }
}

/// Distills a feature matrix into one unified vector under the given variant.
pub fn distill(g: &mut Graph, f: &FeatureMatrix, kind: UsemKind) -> Result<TensorId> {
    match kind {
        UsemKind::Glo => Ok(f.global),
        UsemKind::Avg => {
            let mut cols = vec![f.global];
            cols.extend_from_slice(&f.locals);
            let total = g.add_n(&cols)?;
            Ok(g.mul_const(total, 1.0 / cols.len() as f64))
        }
        UsemKind::AvglocGlo => {
            if f.locals.is_empty() {
                return Err(C3mError::contract("avgloc_glo needs at least one local column"));
            }
            let total = g.add_n(&f.locals)?;
            let mean = g.mul_const(total, 1.0 / f.locals.len() as f64);
            g.add(mean, f.global)
        }
        UsemKind::Usem => usem(g, f),
    }
}

// ====== tests ======

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prng::{self, Purpose};
    use crate::tensor::{finite_difference_check, FdConfig};

    fn record(modality: Modality, cols: &[&[f64]]) -> SampleRecord {
        let d_raw = cols[0].len();
        let mut raw = Vec::with_capacity(cols.len() * d_raw);
        for c in cols {
            assert_eq!(c.len(), d_raw);
            raw.extend(c.iter().map(|&v| v as f32));
        }
        SampleRecord {
            identity: 0,
            modality,
            m: (cols.len() - 1) as u16,
            raw,
        }
    }

    fn leaf_heads(g: &mut Graph, d_raw: usize, p: usize, fill: impl Fn(&mut Graph, usize, usize, &str) -> TensorId) -> HeadIds {
        HeadIds {
            gn_gain_g: fill(g, d_raw, 1, "gain"),
            gn_bias_g: fill(g, d_raw, 1, "bias"),
            fc_g_w: fill(g, p, d_raw, "w"),
            fc_g_b: fill(g, p, 1, "bias"),
            gn_gain_l: fill(g, d_raw, 1, "gain"),
            gn_bias_l: fill(g, d_raw, 1, "bias"),
            fc_l1_w: fill(g, p, d_raw, "w"),
            fc_l1_b: fill(g, p, 1, "bias"),
            fc_l2_w: fill(g, p, p, "w"),
            fc_l2_b: fill(g, p, 1, "bias"),
        }
    }

    fn identity_heads(g: &mut Graph, n: usize) -> HeadIds {
        leaf_heads(g, n, n, |g, rows, cols, role| match role {
            "gain" => g.leaf_vec(vec![1.0; rows], false),
            "bias" => g.leaf_vec(vec![0.0; rows * cols.max(1)], false),
            _ => {
                let mut w = vec![0.0; rows * cols];
                for i in 0..rows.min(cols) {
                    w[i * cols + i] = 1.0;
                }
                let t = crate::tensor::Tensor::new(vec![rows, cols], w, false).unwrap();
                g.leaf(&t)
            }
        })
    }

    fn elu_scalar(v: f64) -> f64 {
        if v > 0.0 {
            v
        } else {
            v.exp() - 1.0
        }
    }

    // Plain-loop oracle of the head chain for one column.
    fn oracle_encode_column(raw: &[f64], gain: &[f64], bias: &[f64], chain: &[(&[f64], &[f64])], elu_between: bool) -> Vec<f64> {
        let n = raw.len() as f64;
        let mu = raw.iter().sum::<f64>() / n;
        let var = raw.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt().max(crate::tensor::EPS);
        let mut x: Vec<f64> = raw
            .iter()
            .zip(gain.iter().zip(bias))
            .map(|(&v, (&g, &b))| g * (v - mu) / sd + b)
            .collect();
        for (stage, (w, b)) in chain.iter().enumerate() {
            let rows = b.len();
            let cols = x.len();
            let mut y = vec![0.0; rows];
            for r in 0..rows {
                let mut acc = b[r];
                for c in 0..cols {
                    acc += w[r * cols + c] * x[c];
                }
                y[r] = acc;
            }
            if elu_between && stage + 1 < chain.len() {
                for v in &mut y {
                    *v = elu_scalar(*v);
                }
            }
            x = y;
        }
        x
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn identity_heads_pass_normalized_columns_through() {
        let raw_g = [1.0, -1.0, 1.0, -1.0];
        let raw_l = [-1.0, 1.0, -1.0, 1.0];
        let rec = record(Modality::Visual, &[&raw_g, &raw_l]);
        let mut g = Graph::new();
        let heads = identity_heads(&mut g, 4);
        let f = encode(&mut g, &rec, 4, &heads).unwrap();
        assert_eq!(f.modality, Modality::Visual);
        assert!(max_abs_diff(g.values(f.global), &raw_g) < 1e-12);
        let expect_l: Vec<f64> = raw_l.iter().map(|&v| elu_scalar(v)).collect();
        assert!(max_abs_diff(g.values(f.locals[0]), &expect_l) < 1e-12);
    }

    #[test]
    fn zero_linear_maps_give_zero_columns() {
        let rec = record(Modality::Textual, &[&[3.0, 1.0, 4.0], &[1.0, 5.0, 9.0], &[2.0, 6.0, 5.0]]);
        let mut g = Graph::new();
        let heads = leaf_heads(&mut g, 3, 3, |g, rows, cols, role| match role {
            "gain" => g.leaf_vec(vec![1.0; rows], false),
            "bias" => g.leaf_vec(vec![0.0; rows * cols.max(1)], false),
            _ => {
                let t = crate::tensor::Tensor::new(vec![rows, cols], vec![0.0; rows * cols], false).unwrap();
                g.leaf(&t)
            }
        });
        let f = encode(&mut g, &rec, 3, &heads).unwrap();
        assert!(g.values(f.global).iter().all(|&v| v == 0.0));
        for &l in &f.locals {
            assert!(g.values(l).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn random_heads_match_scalar_oracle() {
        let d_raw = 8;
        let p = 4;
        let mut rng = prng::stream(11, Purpose::ParamInit, 0);
        let draw = |rng: &mut Stream, n: usize| -> Vec<f64> { (0..n).map(|_| prng::normal(rng)).collect() };

        let gain_g = draw(&mut rng, d_raw);
        let bias_g = draw(&mut rng, d_raw);
        let wg = draw(&mut rng, p * d_raw);
        let bg = draw(&mut rng, p);
        let gain_l = draw(&mut rng, d_raw);
        let bias_l = draw(&mut rng, d_raw);
        let w1 = draw(&mut rng, p * d_raw);
        let b1 = draw(&mut rng, p);
        let w2 = draw(&mut rng, p * p);
        let b2 = draw(&mut rng, p);
        let cols: Vec<Vec<f64>> = (0..3).map(|_| draw(&mut rng, d_raw)).collect();
        let col_refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        let rec = record(Modality::Visual, &col_refs);

        let mut g = Graph::new();
        let mat = |g: &mut Graph, rows: usize, cols: usize, v: &[f64]| {
            let t = crate::tensor::Tensor::new(vec![rows, cols], v.to_vec(), false).unwrap();
            g.leaf(&t)
        };
        let heads = HeadIds {
            gn_gain_g: g.leaf_vec(gain_g.clone(), false),
            gn_bias_g: g.leaf_vec(bias_g.clone(), false),
            fc_g_w: mat(&mut g, p, d_raw, &wg),
            fc_g_b: g.leaf_vec(bg.clone(), false),
            gn_gain_l: g.leaf_vec(gain_l.clone(), false),
            gn_bias_l: g.leaf_vec(bias_l.clone(), false),
            fc_l1_w: mat(&mut g, p, d_raw, &w1),
            fc_l1_b: g.leaf_vec(b1.clone(), false),
            fc_l2_w: mat(&mut g, p, p, &w2),
            fc_l2_b: g.leaf_vec(b2.clone(), false),
        };
        let f = encode(&mut g, &rec, d_raw, &heads).unwrap();

        let round = |v: &[f64]| -> Vec<f64> { v.iter().map(|&x| x as f32 as f64).collect() };
        let want_g = oracle_encode_column(&round(&cols[0]), &gain_g, &bias_g, &[(&wg, &bg)], false);
        assert!(max_abs_diff(g.values(f.global), &want_g) < 1e-12);
        for i in 0..2 {
            let want = oracle_encode_column(
                &round(&cols[i + 1]),
                &gain_l,
                &bias_l,
                &[(&w1, &b1), (&w2, &b2)],
                true,
            );
            assert!(max_abs_diff(g.values(f.locals[i]), &want) < 1e-12);
        }
    }

    #[test]
    fn mismatched_raw_length_is_a_dimension_error() {
        let rec = SampleRecord { identity: 0, modality: Modality::Visual, m: 2, raw: vec![0.0; 7] };
        let mut g = Graph::new();
        let heads = identity_heads(&mut g, 4);
        assert!(matches!(encode(&mut g, &rec, 4, &heads), Err(C3mError::Dim(_))));
    }

    fn matrix_from(g: &mut Graph, global: &[f64], locals: &[Vec<f64>]) -> FeatureMatrix {
        let global_id = g.leaf_vec(global.to_vec(), false);
        let local_ids = locals.iter().map(|l| g.leaf_vec(l.clone(), false)).collect();
        FeatureMatrix { modality: Modality::Visual, global: global_id, locals: local_ids }
    }

    #[test]
    fn usem_with_zero_locals_returns_global() {
        let mut g = Graph::new();
        let f = matrix_from(&mut g, &[0.5, -1.5, 2.0], &[vec![0.0; 3], vec![0.0; 3]]);
        let (u, w) = usem_with_weights(&mut g, &f).unwrap();
        assert_eq!(g.values(u), &[0.5, -1.5, 2.0]);
        assert!(max_abs_diff(g.values(w), &[0.5, 0.5]) < 1e-15);
    }

    #[test]
    fn usem_single_local_adds_it_to_global() {
        let mut g = Graph::new();
        let f = matrix_from(&mut g, &[1.0, 2.0], &[vec![3.0, -4.0]]);
        let (u, w) = usem_with_weights(&mut g, &f).unwrap();
        assert_eq!(g.values(w), &[1.0]);
        assert!(max_abs_diff(g.values(u), &[4.0, -2.0]) < 1e-15);
    }

    fn oracle_usem(global: &[f64], locals: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let scores: Vec<f64> = locals
            .iter()
            .map(|l| l.iter().zip(global).map(|(a, b)| a * b).sum())
            .collect();
        let max = scores.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let mut out = global.to_vec();
        for (w, l) in weights.iter().zip(locals) {
            for (o, &v) in out.iter_mut().zip(l) {
                *o += w * v;
            }
        }
        (out, weights)
    }

    #[test]
    fn usem_matches_scalar_oracle() {
        for seed in 0..20u64 {
            let mut rng = prng::stream(seed, Purpose::Probe, 3);
            let global: Vec<f64> = (0..4).map(|_| prng::normal(&mut rng)).collect();
            let locals: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| prng::normal(&mut rng)).collect()).collect();
            let mut g = Graph::new();
            let f = matrix_from(&mut g, &global, &locals);
            let (u, w) = usem_with_weights(&mut g, &f).unwrap();
            let (want_u, want_w) = oracle_usem(&global, &locals);
            assert!(max_abs_diff(g.values(u), &want_u) < 1e-12);
            assert!(max_abs_diff(g.values(w), &want_w) < 1e-12);
        }
    }

    #[test]
    fn usem_weights_are_a_distribution() {
        for seed in 0..20u64 {
            let mut rng = prng::stream(seed, Purpose::Probe, 4);
            let global: Vec<f64> = (0..5).map(|_| prng::normal(&mut rng)).collect();
            let locals: Vec<Vec<f64>> =
                (0..4).map(|_| (0..5).map(|_| prng::normal(&mut rng)).collect()).collect();
            let mut g = Graph::new();
            let f = matrix_from(&mut g, &global, &locals);
            let (_, w) = usem_with_weights(&mut g, &f).unwrap();
            let wv = g.values(w);
            assert!(wv.iter().all(|&x| x > 0.0));
            assert!((wv.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn usem_is_equivariant_under_local_permutation() {
        let mut rng = prng::stream(5, Purpose::Probe, 5);
        let global: Vec<f64> = (0..4).map(|_| prng::normal(&mut rng)).collect();
        let locals: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| prng::normal(&mut rng)).collect()).collect();
        let perm = [2usize, 0, 3, 1];

        let mut g1 = Graph::new();
        let f1 = matrix_from(&mut g1, &global, &locals);
        let (u1, w1) = usem_with_weights(&mut g1, &f1).unwrap();

        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| locals[i].clone()).collect();
        let mut g2 = Graph::new();
        let f2 = matrix_from(&mut g2, &global, &permuted);
        let (u2, w2) = usem_with_weights(&mut g2, &f2).unwrap();

        assert!(max_abs_diff(g1.values(u1), g2.values(u2)) < 1e-12);
        let w1v = g1.values(w1);
        let w2v = g2.values(w2);
        for (slot, &src) in perm.iter().enumerate() {
            assert!((w2v[slot] - w1v[src]).abs() < 1e-12);
        }
    }

    #[test]
    fn usem_output_minus_global_lies_in_local_span() {
        let mut rng = prng::stream(8, Purpose::Probe, 6);
        let global: Vec<f64> = (0..4).map(|_| prng::normal(&mut rng)).collect();
        let locals: Vec<Vec<f64>> = (0..2).map(|_| (0..4).map(|_| prng::normal(&mut rng)).collect()).collect();
        let mut g = Graph::new();
        let f = matrix_from(&mut g, &global, &locals);
        let (u, _) = usem_with_weights(&mut g, &f).unwrap();
        let y: Vec<f64> = g.values(u).iter().zip(&global).map(|(a, b)| a - b).collect();

        // Least squares on the 2-column system via its normal equations.
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let (a11, a12, a22) = (dot(&locals[0], &locals[0]), dot(&locals[0], &locals[1]), dot(&locals[1], &locals[1]));
        let (b1, b2) = (dot(&locals[0], &y), dot(&locals[1], &y));
        let det = a11 * a22 - a12 * a12;
        let c1 = (b1 * a22 - b2 * a12) / det;
        let c2 = (a11 * b2 - a12 * b1) / det;
        let residual: f64 = (0..4)
            .map(|i| (y[i] - c1 * locals[0][i] - c2 * locals[1][i]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(residual <= 1e-9, "residual {residual}");
    }

    #[test]
    fn distill_variants_cover_the_ablation_grid() {
        let global = [1.0, 2.0, 3.0];
        let locals = vec![vec![1.0, 0.0, -1.0], vec![3.0, 2.0, 1.0]];

        let mut g = Graph::new();
        let f = matrix_from(&mut g, &global, &locals);
        let glo = distill(&mut g, &f, UsemKind::Glo).unwrap();
        assert_eq!(g.values(glo), &global);

        let avg = distill(&mut g, &f, UsemKind::Avg).unwrap();
        let want_avg = [(1.0 + 1.0 + 3.0) / 3.0, (2.0 + 0.0 + 2.0) / 3.0, (3.0 - 1.0 + 1.0) / 3.0];
        assert!(max_abs_diff(g.values(avg), &want_avg) < 1e-12);

        let al = distill(&mut g, &f, UsemKind::AvglocGlo).unwrap();
        let want_al = [1.0 + 2.0, 2.0 + 1.0, 3.0 + 0.0];
        assert!(max_abs_diff(g.values(al), &want_al) < 1e-12);

        let u = distill(&mut g, &f, UsemKind::Usem).unwrap();
        let (want_u, _) = oracle_usem(&global, &locals);
        assert!(max_abs_diff(g.values(u), &want_u) < 1e-12);
    }

    #[test]
    fn distill_avg_of_identical_columns_is_that_column() {
        let c = [0.25, -0.75, 0.5];
        let mut g = Graph::new();
        let f = matrix_from(&mut g, &c, &[c.to_vec(), c.to_vec()]);
        let avg = distill(&mut g, &f, UsemKind::Avg).unwrap();
        assert!(max_abs_diff(g.values(avg), &c) < 1e-12);
    }

    #[test]
    fn usem_kind_parsing_round_trips_and_rejects_unknowns() {
        for kind in UsemKind::ALL {
            assert_eq!(UsemKind::parse(kind.name()).unwrap(), kind);
        }
        assert!(matches!(UsemKind::parse("pool"), Err(C3mError::Config(_))));
    }

    #[test]
    fn encode_usem_gradients_match_finite_differences() {
        let d_raw = 6;
        let p = 4;
        let m = 2;
        let sizes = [d_raw, d_raw, p * d_raw, p, d_raw, d_raw, p * d_raw, p, p * p, p];
        let total: usize = sizes.iter().sum();

        let mut seed = 0u64;
        let mut checked = 0;
        while checked < 3 {
            seed += 1;
            let mut rng = prng::stream(seed, Purpose::Probe, 7);
            let theta: Vec<f64> = (0..total).map(|_| prng::normal(&mut rng) * 0.4).collect();
            let cols: Vec<Vec<f64>> =
                (0..=m).map(|_| (0..d_raw).map(|_| prng::normal(&mut rng)).collect()).collect();
            let probe: Vec<f64> = (0..p).map(|_| prng::normal(&mut rng)).collect();
            let col_refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
            let rec = record(Modality::Visual, &col_refs);

            let build = |theta: &[f64]| -> Result<(Graph, TensorId, Vec<TensorId>)> {
                let mut g = Graph::new();
                let mut ids = Vec::new();
                let mut off = 0;
                let shapes = [
                    vec![d_raw],
                    vec![d_raw],
                    vec![p, d_raw],
                    vec![p],
                    vec![d_raw],
                    vec![d_raw],
                    vec![p, d_raw],
                    vec![p],
                    vec![p, p],
                    vec![p],
                ];
                for (size, shape) in sizes.iter().zip(shapes) {
                    let t = crate::tensor::Tensor::new(shape, theta[off..off + size].to_vec(), true)?;
                    ids.push(g.leaf(&t));
                    off += size;
                }
                let heads = HeadIds {
                    gn_gain_g: ids[0],
                    gn_bias_g: ids[1],
                    fc_g_w: ids[2],
                    fc_g_b: ids[3],
                    gn_gain_l: ids[4],
                    gn_bias_l: ids[5],
                    fc_l1_w: ids[6],
                    fc_l1_b: ids[7],
                    fc_l2_w: ids[8],
                    fc_l2_b: ids[9],
                };
                let f = encode(&mut g, &rec, d_raw, &heads)?;
                let (u, _) = usem_with_weights(&mut g, &f)?;
                let pr = g.leaf_vec(probe.clone(), false);
                let out = g.dot(u, pr)?;
                Ok((g, out, ids))
            };

            let (g0, _, _) = build(&theta).unwrap();
            if g0.diagnostics().kink_margin < 1e-3 {
                continue;
            }

            let value_fn = |t: &[f64]| -> Result<f64> {
                let (g, out, _) = build(t)?;
                Ok(g.value(out))
            };
            let grad_fn = |t: &[f64]| -> Result<Vec<f64>> {
                let (mut g, out, ids) = build(t)?;
                g.backward(out)?;
                let mut grads = Vec::with_capacity(total);
                for id in ids {
                    grads.extend_from_slice(g.grad(id).unwrap());
                }
                Ok(grads)
            };
            let report = finite_difference_check(&value_fn, &grad_fn, &theta, &FdConfig::default()).unwrap();
            assert!(report.passed, "seed {seed}: max rel err {}", report.max_rel_err);
            checked += 1;
        }
    }
}
