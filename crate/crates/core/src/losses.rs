//! Training objectives: unsupervised flow terms, the uncertainty-weighted
//! pose loss and their level-weighted totals. All losses are sums over points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{knn, Point, Quaternion, INTERP_EPS};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Number of pyramid levels that carry an estimate.
pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Per-level flow weights, index = level (0 finest).
    pub alpha: [Real; LEVELS],
    /// Chamfer, smoothness, Laplacian.
    pub sigma: [Real; 3],
    /// Per-level pose weights.
    pub lambda: [Real; LEVELS],
    /// Scene flow, pose.
    pub mu: [Real; 2],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: [0.02, 0.04, 0.08, 0.16],
            sigma: [1.0, 1.0, 0.3],
            lambda: [0.2, 0.4, 0.8, 1.6],
            mu: [1.0, 1.0],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self.alpha.iter().chain(&self.sigma).chain(&self.lambda).chain(&self.mu);
        for v in all {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

fn points_of(g: &Graph, v: Var, ctx: &'static str) -> Result<Vec<Point>> {
    let t = g.value(v);
    if t.cols() != 3 || t.rows() == 0 {
        return Err(Error::shape(ctx, &[t.rows().max(1), 3], t.shape()));
    }
    Ok(t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Sum of squared row norms.
fn sum_sq(g: &mut Graph, v: Var) -> Var {
    let s = g.square(v);
    g.sum_all(s)
}

/// Symmetric sum of squared nearest-neighbor distances.
pub fn chamfer_loss(g: &mut Graph, pw: Var, q: Var) -> Result<Var> {
    let pp = points_of(g, pw, "chamfer_loss P")?;
    let qp = points_of(g, q, "chamfer_loss Q")?;
    let p2q = knn(&pp, &qp, 1)?;
    let q2p = knn(&qp, &pp, 1)?;
    let qn = g.gather(q, &p2q)?;
    let d1 = g.sub(pw, qn)?;
    let pn = g.gather(pw, &q2p)?;
    let d2 = g.sub(q, pn)?;
    let a = sum_sq(g, d1);
    let b = sum_sq(g, d2);
    g.add(a, b)
}

/// `Σ_i (1/K) Σ_{k ∈ N(i)} ‖SF_i − SF_k‖²` over the `k` nearest neighbors of
/// each point (the point itself included).
pub fn smoothness_loss(g: &mut Graph, points: &[Point], sf: Var, k: usize) -> Result<Var> {
    let n = points.len();
    if g.value(sf).rows() != n || g.value(sf).cols() != 3 {
        return Err(Error::shape("smoothness_loss flow", &[n, 3], g.value(sf).shape()));
    }
    let nb = knn(points, points, k)?;
    let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let a = g.gather(sf, &centers)?;
    let b = g.gather(sf, &nb)?;
    let d = g.sub(a, b)?;
    let s = sum_sq(g, d);
    Ok(g.scale(s, 1.0 / k as Real))
}

/// Indices of the `k` nearest neighbors of every point excluding itself.
pub fn neighbors_excluding_self(points: &[Point], k: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!(
            "self-exclusive k = {k} needs more than {n} points"
        )));
    }
    let all = knn(points, points, k + 1)?;
    let mut out = Vec::with_capacity(n * k);
    for (i, row) in all.chunks(k + 1).enumerate() {
        let mut taken = 0;
        let mut skipped = false;
        for &j in row {
            if j == i && !skipped {
                skipped = true;
                continue;
            }
            if taken < k {
                out.push(j);
                taken += 1;
            }
        }
    }
    Ok(out)
}

/// Mean offset of each point's `k` neighbors (self excluded) from the point.
pub fn laplacian_vectors(g: &mut Graph, pts: Var, k: usize) -> Result<Var> {
    let p = points_of(g, pts, "laplacian_vectors")?;
    let nb = neighbors_excluding_self(&p, k)?;
    let gathered = g.gather(pts, &nb)?;
    let s = g.group_sum(gathered, k)?;
    let mean = g.scale(s, 1.0 / k as Real);
    g.sub(mean, pts)
}

/// Interpolates rows of `values` (attached to `sources`) at `targets` with
/// inverse-distance weights over the three nearest sources. The weights are
/// differentiated through both point sets.
pub fn idw3_interpolate(g: &mut Graph, targets: Var, sources: Var, values: Var) -> Result<Var> {
    let t = points_of(g, targets, "idw3_interpolate targets")?;
    let s = points_of(g, sources, "idw3_interpolate sources")?;
    if s.len() < 3 {
        return Err(Error::invalid("three-NN interpolation needs at least 3 sources"));
    }
    let idx = knn(&t, &s, 3)?;
    let rep: Vec<usize> = (0..t.len()).flat_map(|i| std::iter::repeat_n(i, 3)).collect();
    let tr = g.gather(targets, &rep)?;
    let sr = g.gather(sources, &idx)?;
    let diff = g.sub(tr, sr)?;
    let sq = g.square(diff);
    let d2 = g.row_sum(sq)?;
    let d = g.sqrt(d2);
    let shifted = g.affine(d, 1.0, INTERP_EPS);
    let inv = g.recip(shifted);
    let total = g.group_sum(inv, 3)?;
    let total_rep = g.gather(total, &rep)?;
    let norm = g.recip(total_rep);
    let w = g.mul(inv, norm)?;
    let cols = g.value(values).cols();
    let w = g.expand_cols(w, cols)?;
    let vals = g.gather(values, &idx)?;
    let weighted = g.mul(w, vals)?;
    g.group_sum(weighted, 3)
}

/// `Σ ‖v(p_w) − v_Q(p_w)‖²` where `v` are Laplacian vectors and `v_Q` is
/// interpolated from the target cloud.
pub fn laplacian_loss(g: &mut Graph, pw: Var, q: Var, k: usize) -> Result<Var> {
    let vp = laplacian_vectors(g, pw, k)?;
    let vq = laplacian_vectors(g, q, k)?;
    let vq_at_p = idw3_interpolate(g, pw, q, vq)?;
    let d = g.sub(vp, vq_at_p)?;
    Ok(sum_sq(g, d))
}

/// The three unsupervised terms at one level.
#[derive(Clone, Copy, Debug)]
pub struct FlowLevelTerms {
    pub chamfer: Var,
    pub smoothness: Var,
    pub laplacian: Var,
}

/// Neighborhood sizes and level-0 subsampling for the unsupervised terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowLossConfig {
    pub k_smooth: usize,
    pub k_laplacian: usize,
}

impl Default for FlowLossConfig {
    fn default() -> Self {
        Self {
            k_smooth: 8,
            k_laplacian: 8,
        }
    }
}

/// Computes all three terms for one level's flow `sf` on first-frame points `p`.
pub fn flow_level_terms(g: &mut Graph, p: &[Point], sf: Var, q: Var, cfg: &FlowLossConfig) -> Result<FlowLevelTerms> {
    let n = p.len();
    let pt = Tensor::new(&[n, 3], p.iter().flatten().copied().collect())?;
    let pv = g.constant(pt);
    let pw = g.add(pv, sf)?;
    Ok(FlowLevelTerms {
        chamfer: chamfer_loss(g, pw, q)?,
        smoothness: smoothness_loss(g, p, sf, cfg.k_smooth.min(n))?,
        laplacian: laplacian_loss(g, pw, q, cfg.k_laplacian.min(n - 1).min(g.value(q).rows() - 1))?,
    })
}

/// `Σ_l α_l (σ_C ℓ_C + σ_S ℓ_S + σ_L ℓ_L)`; `levels[l]` is level `l`.
pub fn flow_loss_total(g: &mut Graph, levels: &[FlowLevelTerms], w: &LossWeights) -> Result<Var> {
    if levels.len() != LEVELS {
        return Err(Error::shape("flow_loss_total levels", &[LEVELS], &[levels.len()]));
    }
    let mut parts = Vec::with_capacity(LEVELS * 3);
    for (l, t) in levels.iter().enumerate() {
        parts.push(g.scale(t.chamfer, w.alpha[l] * w.sigma[0]));
        parts.push(g.scale(t.smoothness, w.alpha[l] * w.sigma[1]));
        parts.push(g.scale(t.laplacian, w.alpha[l] * w.sigma[2]));
    }
    sum_vars(g, &parts)
}

pub(crate) fn sum_vars(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let (first, rest) = parts.split_first().ok_or_else(|| Error::invalid("sum of no terms"))?;
    let mut acc = *first;
    for p in rest {
        acc = g.add(acc, *p)?;
    }
    Ok(acc)
}

/// Learnable homoscedastic weights of the translation and rotation terms.
#[derive(Clone, Copy, Debug)]
pub struct Uncertainty {
    pub w_x: Var,
    pub w_q: Var,
}

/// Ground-truth pose in loss-ready form.
#[derive(Clone, Copy, Debug)]
pub struct PoseTarget {
    pub q: Quaternion,
    pub t: Point,
}

/// `‖t_gt − t‖₁ e^{−w_x} + w_x + ‖q_gt − q/‖q‖‖₂ e^{−w_q} + w_q` for one level.
///
/// `q_gt` is taken with `w ≥ 0` and `q` is sign-flipped to the same
/// hemisphere before comparison.
pub fn pose_loss_level(g: &mut Graph, q: Var, t: Var, target: &PoseTarget, u: Uncertainty) -> Result<Var> {
    if g.value(q).numel() != 4 || g.value(t).numel() != 3 {
        return Err(Error::invalid(
            "pose loss expects a 4-value quaternion and 3-value translation",
        ));
    }
    let q = g.reshape(q, &[1, 4])?;
    let t = g.reshape(t, &[1, 3])?;
    // Renormalized with the same operation sequence as the prediction below,
    // so an exact prediction yields an exact zero.
    let qg = {
        let c = target.q.canonical().to_array();
        let inv = 1.0 / c.iter().map(|v| v * v).sum::<Real>().sqrt();
        Quaternion::new(c[0] * inv, c[1] * inv, c[2] * inv, c[3] * inv)
    };
    let flip = g
        .value(q)
        .data()
        .iter()
        .zip(qg.to_array())
        .map(|(a, b)| a * b)
        .sum::<Real>()
        < 0.0;
    let q = if flip { g.neg(q) } else { q };

    let tgt = g.constant(Tensor::new(&[1, 3], target.t.to_vec())?);
    let dt = g.sub(tgt, t)?;
    let dt = g.abs(dt);
    let l1 = g.sum_all(dt);
    let e_x = g.neg(u.w_x);
    let e_x = g.exp(e_x);
    let t_term = g.mul_scalar(l1, e_x)?;

    let sq = g.square(q);
    let n2 = g.sum_all(sq);
    let n = g.sqrt(n2);
    let inv = g.recip(n);
    let qn = g.mul_scalar(q, inv)?;
    let qgt = g.constant(Tensor::new(&[1, 4], qg.to_array().to_vec())?);
    let dq = g.sub(qgt, qn)?;
    let dq2 = g.square(dq);
    let dq2 = g.sum_all(dq2);
    let l2 = g.sqrt(dq2);
    let e_q = g.neg(u.w_q);
    let e_q = g.exp(e_q);
    let q_term = g.mul_scalar(l2, e_q)?;

    let wx = g.reshape(u.w_x, &[1])?;
    let wq = g.reshape(u.w_q, &[1])?;
    sum_vars(g, &[t_term, wx, q_term, wq])
}

/// `Σ_l λ_l ℓ_l`; `levels[l] = (q, t)` at level `l`.
pub fn pose_loss_total(
    g: &mut Graph,
    levels: &[(Var, Var)],
    target: &PoseTarget,
    u: Uncertainty,
    w: &LossWeights,
) -> Result<Var> {
    if levels.len() != LEVELS {
        return Err(Error::shape("pose_loss_total levels", &[LEVELS], &[levels.len()]));
    }
    let mut parts = Vec::with_capacity(LEVELS);
    for (l, (q, t)) in levels.iter().enumerate() {
        let li = pose_loss_level(g, *q, *t, target, u)?;
        parts.push(g.scale(li, w.lambda[l]));
    }
    sum_vars(g, &parts)
}

/// `μ_sf L_sf + μ_p L_pose`; a missing term counts as zero.
pub fn total_loss(g: &mut Graph, l_sf: Option<Var>, l_pose: Option<Var>, w: &LossWeights) -> Result<Var> {
    let mut parts = Vec::new();
    if let Some(v) = l_sf {
        parts.push(g.scale(v, w.mu[0]));
    }
    if let Some(v) = l_pose {
        parts.push(g.scale(v, w.mu[1]));
    }
    if parts.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    sum_vars(g, &parts)
}
