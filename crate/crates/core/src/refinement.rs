//! Coarse-to-fine refinement: upsample the previous estimates, warp the
//! first frame with a mask-weighted blend of pose and flow, and refine pose
//! and flow from an occlusion-aware cost volume.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::costvolume::OccPerceptionCostVolume;
use crate::encoder::{points_tensor, PyramidLevel, SetUpconv};
use crate::error::{Error, Result};
use crate::geometry::{pose_apply_var, three_nn_interpolate_var, Point};
use crate::init_heads::{weighted_pool, Dropout, FlowState, MaskHeads, PoseRegressor, PoseState};
use crate::tensor::{Graph, Mlp, MlpSpec, ParamStore, Part, Var};

/// How the per-point pose/flow blend weight `H` is formed from the static
/// mask `M` and the visibility mask `O`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpMask {
    /// `H = clamp(M·(1 − O), 0, 1)`.
    #[default]
    Literal,
    /// `H = clamp(M·O, 0, 1)`: static and visible points follow the pose.
    Inverted,
    /// `H = softmax over points of M·(1 − O)`.
    PointSoftmax,
}

/// What the predicted flow residual is added to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualBase {
    /// `SF = ΔSF + SF_up`.
    #[default]
    Upsampled,
    /// `SF = ΔSF + (P_warp − P)`.
    Blended,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineOptions {
    pub warp_mask: WarpMask,
    pub residual_base: ResidualBase,
}

/// Pose and flow estimate produced at one level. Flow quantities live on
/// `flow_points`, pose quantities on `pose_points`; the two differ only for
/// the initial estimate.
#[derive(Clone, Debug)]
pub struct LevelEstimate {
    pub flow_points: Vec<Point>,
    pub flow: FlowState,
    pub pose_points: Vec<Point>,
    pub pose: PoseState,
}

/// Quantities carried from a coarser level onto the current points.
#[derive(Clone, Copy, Debug)]
pub struct Upsampled {
    pub sf: Var,
    pub occ: Var,
    pub m: Var,
    pub ff: Var,
    pub ef: Var,
}

/// Checks that every entry of an `N x 1` mask lies in `[0, 1]`.
fn check_mask(g: &Graph, v: Var, ctx: &str) -> Result<()> {
    if g.value(v).cols() != 1 {
        return Err(Error::invalid(format!(
            "{ctx} must be N x 1, got {:?}",
            g.value(v).shape()
        )));
    }
    if let Some(x) = g.value(v).data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::invalid(format!("{ctx} value {x} outside [0, 1]")));
    }
    Ok(())
}

/// Per-point blend weight `H` (`N x 1`).
pub fn blend_weight(g: &mut Graph, m: Var, occ: Var, mode: WarpMask) -> Result<Var> {
    check_mask(g, m, "static mask")?;
    check_mask(g, occ, "occlusion mask")?;
    match mode {
        WarpMask::Literal => {
            let inv = g.one_minus(occ);
            g.mul(m, inv)
        }
        WarpMask::Inverted => g.mul(m, occ),
        WarpMask::PointSoftmax => {
            let inv = g.one_minus(occ);
            let h = g.mul(m, inv)?;
            g.softmax(h, 0)
        }
    }
}

/// Output of [`warp_layer`].
#[derive(Clone, Copy, Debug)]
pub struct Warp {
    pub p_pose: Var,
    pub p_sf: Var,
    pub h: Var,
    pub p_warp: Var,
}

/// `P_warp = H ⊙ pose(P) + (1 − H) ⊙ (P + SF_up)`.
#[allow(clippy::too_many_arguments)]
pub fn warp_layer(
    g: &mut Graph,
    points: Var,
    sf_up: Var,
    q_prev: Var,
    t_prev: Var,
    m_up: Var,
    o_up: Var,
    mode: WarpMask,
) -> Result<Warp> {
    let h = blend_weight(g, m_up, o_up, mode)?;
    warp_with_weight(g, points, sf_up, q_prev, t_prev, h)
}

/// [`warp_layer`] with an explicit blend weight.
pub fn warp_with_weight(g: &mut Graph, points: Var, sf_up: Var, q_prev: Var, t_prev: Var, h: Var) -> Result<Warp> {
    let p_pose = pose_apply_var(g, q_prev, t_prev, points)?;
    let p_sf = g.add(points, sf_up)?;
    let hx = g.expand_cols(h, 3)?;
    let p_warp = g.lerp(hx, p_pose, p_sf)?;
    Ok(Warp {
        p_pose,
        p_sf,
        h,
        p_warp,
    })
}

/// `q = q_prev · Δq`, `t = R(Δq) t_prev + Δt`.
pub fn compose_residual(g: &mut Graph, q_prev: Var, t_prev: Var, dq: Var, dt: Var) -> Result<(Var, Var)> {
    let q = g.quat_mul(q_prev, dq)?;
    let r = g.quat_to_rot(dq)?;
    let rt = g.transpose(r)?;
    let rotated = g.matmul(t_prev, rt)?;
    let t = g.add(rotated, dt)?;
    Ok((q, t))
}

/// Widths of one refinement level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelWidths {
    /// Encoder feature width at this level.
    pub feature: usize,
    /// Flow feature width `FF` of the coarser level.
    pub coarse_flow: usize,
    /// Pose embedding width `EF` of the coarser level.
    pub coarse_pose: usize,
    /// Flow feature width at this level.
    pub flow: usize,
    /// Pose embedding width at this level.
    pub pose: usize,
    /// Occlusion branch width.
    pub occ: usize,
    pub k_up: usize,
    pub k1: usize,
    pub k2: usize,
    pub k_local: usize,
}

/// One refinement level.
#[derive(Clone, Debug)]
pub struct RefineLevel {
    up_ff: SetUpconv,
    up_ef: SetUpconv,
    occ_cv: OccPerceptionCostVolume,
    ef_mlp: Mlp,
    masks: MaskHeads,
    regressor: PoseRegressor,
    ff_mlp: Mlp,
    flow_head: Mlp,
}

/// Everything [`RefineLevel::forward`] computes.
#[derive(Clone, Copy, Debug)]
pub struct RefineOutput {
    pub up: Upsampled,
    pub warp: Warp,
    pub cv_o: Var,
    pub cv_self: Var,
    pub flow: FlowState,
    pub pose: PoseState,
    /// Pose residual `(Δq, Δt)`.
    pub residual: (Var, Var),
}

impl RefineLevel {
    /// Parameter names are `{flow}.*` for flow-only heads, `{pose}.*` for
    /// pose-only heads and `{shared}.*` for the cost volume both consume.
    pub fn new(store: &mut ParamStore, names: [&str; 3], w: &LevelWidths, rng: &mut impl Rng) -> Result<Self> {
        let [flow, pose, shared] = names;
        let c = w.flow;
        Ok(Self {
            up_ff: SetUpconv::new(
                store,
                &format!("{flow}.up"),
                w.coarse_flow,
                w.feature,
                w.flow,
                w.k_up,
                rng,
            )?,
            up_ef: SetUpconv::new(
                store,
                &format!("{pose}.up"),
                w.coarse_pose,
                w.feature,
                w.pose,
                w.k_up,
                rng,
            )?,
            occ_cv: OccPerceptionCostVolume::new(
                store, shared, w.feature, c, w.occ, w.pose, w.k1, w.k2, w.k_local, rng,
            )?,
            ef_mlp: Mlp::new(
                store,
                &format!("{pose}.ef"),
                MlpSpec::relu(&[w.pose + c + w.feature, w.pose, w.pose]),
                rng,
            )?,
            masks: MaskHeads::new(store, &format!("{pose}.mask"), 1 + w.pose + w.feature, w.pose, rng)?,
            regressor: PoseRegressor::new(store, &format!("{pose}.reg"), w.pose, w.pose, rng)?,
            ff_mlp: Mlp::new(
                store,
                &format!("{flow}.ff"),
                MlpSpec::relu(&[w.feature + w.flow + c + 1, w.flow, w.flow]),
                rng,
            )?,
            flow_head: Mlp::fc(store, &format!("{flow}.sf"), w.flow, 3, rng)?,
        })
    }

    pub fn flow_head(&self) -> &Mlp {
        &self.flow_head
    }

    pub fn regressor(&self) -> &PoseRegressor {
        &self.regressor
    }

    /// 3-NN interpolation of flow, masks; learned upsampling of features.
    pub fn upsample(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prev: &LevelEstimate,
        p: &PyramidLevel,
    ) -> Result<Upsampled> {
        let sf = three_nn_interpolate_var(g, &p.points, &prev.flow_points, prev.flow.sf)?;
        let occ = three_nn_interpolate_var(g, &p.points, &prev.flow_points, prev.flow.occ)?;
        let m = three_nn_interpolate_var(g, &p.points, &prev.pose_points, prev.pose.m)?;
        let ff = self
            .up_ff
            .forward(g, store, &prev.flow_points, prev.flow.ff, &p.points, p.features)?;
        let ef = self
            .up_ef
            .forward(g, store, &prev.pose_points, prev.pose.ef, &p.points, p.features)?;
        Ok(Upsampled { sf, occ, m, ff, ef })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prev: &LevelEstimate,
        p: &PyramidLevel,
        q: &PyramidLevel,
        opts: &RefineOptions,
        dropout: &mut Dropout,
    ) -> Result<RefineOutput> {
        let up = self.upsample(g, store, prev, p)?;
        let pts = g.constant(points_tensor(&p.points));
        let warp = warp_layer(g, pts, up.sf, prev.pose.q, prev.pose.t, up.m, up.occ, opts.warp_mask)?;
        let q_pts = g.constant(points_tensor(&q.points));
        let cv = self
            .occ_cv
            .forward(g, store, warp.p_warp, p.features, q_pts, q.features, up.ef)?;

        let ef = self.ef_mlp.forward_parts(
            g,
            store,
            &[Part::dense(up.ef), Part::dense(cv.cv_self), Part::dense(p.features)],
        )?;
        let (w, m) = self
            .masks
            .forward(g, store, &[Part::dense(up.m), Part::dense(ef), Part::dense(p.features)])?;
        let pooled = weighted_pool(g, w, ef)?;
        let (dq, dt) = self.regressor.forward(g, store, pooled, dropout)?;
        let (q_new, t_new) = compose_residual(g, prev.pose.q, prev.pose.t, dq, dt)?;

        let ff = self.ff_mlp.forward_parts(
            g,
            store,
            &[
                Part::dense(p.features),
                Part::dense(up.ff),
                Part::dense(cv.cv_o),
                Part::dense(cv.occ),
            ],
        )?;
        let dsf = self.flow_head.forward(g, store, ff)?;
        let base = match opts.residual_base {
            ResidualBase::Upsampled => up.sf,
            ResidualBase::Blended => g.sub(warp.p_warp, pts)?,
        };
        let sf = g.add(dsf, base)?;
        Ok(RefineOutput {
            up,
            warp,
            cv_o: cv.cv_o,
            cv_self: cv.cv_self,
            flow: FlowState { sf, occ: cv.occ, ff },
            pose: PoseState {
                q: q_new,
                t: t_new,
                m,
                w,
                ef,
                pooled,
            },
            residual: (dq, dt),
        })
    }
}

/// Runs the given levels from coarse to fine starting at `init`; returns
/// the initial estimate followed by one estimate per refined level.
/// `levels[i]` refines pyramid level `targets[i]`.
#[allow(clippy::too_many_arguments)]
pub fn refine_all(
    g: &mut Graph,
    store: &ParamStore,
    init: LevelEstimate,
    levels: &[RefineLevel],
    targets: &[usize],
    p: &[PyramidLevel],
    q: &[PyramidLevel],
    opts: &RefineOptions,
    dropout: &mut Dropout,
) -> Result<Vec<LevelEstimate>> {
    if levels.len() != targets.len() {
        return Err(Error::shape("refine_all levels", &[targets.len()], &[levels.len()]));
    }
    let mut out = vec![init];
    for (level, &l) in levels.iter().zip(targets) {
        if l >= p.len() || l >= q.len() {
            return Err(Error::invalid(format!(
                "refinement target level {l} missing from the pyramid"
            )));
        }
        let prev = out.last().expect("initial estimate");
        let r = level.forward(g, store, prev, &p[l], &q[l], opts, dropout)?;
        out.push(LevelEstimate {
            flow_points: p[l].points.clone(),
            flow: r.flow,
            pose_points: p[l].points.clone(),
            pose: r.pose,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
