//! Coarse scene-flow and pose initialization from the initial cost volume.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::costvolume::{OccCvOutput, OccPerceptionCostVolume};
use crate::encoder::{points_tensor, PyramidGeometry, PyramidLevel, SetConv, SetUpconv, PYRAMID_LEVELS};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Mlp, MlpSpec, ParamStore, Part, Real, Tensor, Var};

/// Added to the quaternion norm before dividing.
pub const QUAT_EPS: Real = 1e-8;

/// Inverted dropout driven by a seeded generator; a no-op when disabled.
#[derive(Clone, Debug)]
pub struct Dropout {
    rate: Real,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: Real, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self {
            rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        })
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some() && self.rate > 0.0
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let rate = self.rate;
        let Some(rng) = self.rng.as_mut().filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - rate);
        let shape = g.value(x).shape().to_vec();
        let n = g.value(x).numel();
        let mask: Vec<Real> = (0..n)
            .map(|_| if rng.random::<Real>() < rate { 0.0 } else { keep })
            .collect();
        g.mul_const(x, &Tensor::new(&shape, mask)?)
    }
}

/// `q / (‖q‖ + ε)` for a `1 x 4` quaternion.
pub fn normalize_quat(g: &mut Graph, q: Var) -> Result<Var> {
    let sq = g.square(q);
    let n2 = g.sum_all(sq);
    let n = g.sqrt(n2);
    let n = g.affine(n, 1.0, QUAT_EPS);
    let inv = g.recip(n);
    g.mul_scalar(q, inv)
}

/// Per-channel softmax over the point axis of an `N x C` tensor.
pub fn point_softmax(g: &mut Graph, x: Var) -> Result<Var> {
    g.softmax(x, 0)
}

/// `Σ_i w_i ⊙ x_i` over points, returned as `1 x C`.
pub fn weighted_pool(g: &mut Graph, w: Var, x: Var) -> Result<Var> {
    let c = g.value(x).cols();
    let m = g.mul(w, x)?;
    let s = g.sum_axis(m, 0)?;
    g.reshape(s, &[1, c])
}

/// Regresses a pose from a pooled `1 x C` feature:
/// `feat = dropout(FC(pooled))`, `q = FC_q(feat)` normalized, `t = FC_t(feat)`.
#[derive(Clone, Debug)]
pub struct PoseRegressor {
    fc: Mlp,
    q_head: Mlp,
    t_head: Mlp,
}

impl PoseRegressor {
    /// The rotation head's bias starts at the identity quaternion.
    pub fn new(store: &mut ParamStore, name: &str, in_width: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let fc = Mlp::fc(store, &format!("{name}.fc"), in_width, hidden, rng)?;
        let q_head = Mlp::fc(store, &format!("{name}.q"), hidden, 4, rng)?;
        let t_head = Mlp::fc(store, &format!("{name}.t"), hidden, 3, rng)?;
        if let Some(b) = q_head.layers()[0].bias {
            store.value_mut(b).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        }
        Ok(Self { fc, q_head, t_head })
    }

    pub fn q_head(&self) -> &Mlp {
        &self.q_head
    }

    pub fn t_head(&self) -> &Mlp {
        &self.t_head
    }

    /// Returns `(q, t)` as `1 x 4` and `1 x 3`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pooled: Var, dropout: &mut Dropout) -> Result<(Var, Var)> {
        let feat = self.fc.forward(g, store, pooled)?;
        let feat = dropout.apply(g, feat)?;
        let q_raw = self.q_head.forward(g, store, feat)?;
        let q = normalize_quat(g, q_raw)?;
        let t = self.t_head.forward(g, store, feat)?;
        Ok((q, t))
    }
}

/// Static mask and embedding weights from point-wise features:
/// `W = point_softmax(scorer(parts))`, `M = sigmoid(FC(N·W))` over `N` points,
/// so a uniform `W` feeds the FC with ones.
#[derive(Clone, Debug)]
pub struct MaskHeads {
    scorer: Mlp,
    static_head: Mlp,
}

impl MaskHeads {
    pub fn new(store: &mut ParamStore, name: &str, in_width: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        let scorer = Mlp::new(
            store,
            &format!("{name}.w"),
            MlpSpec::fc(in_width, width).without_bias(),
            rng,
        )?;
        let static_head = Mlp::fc(store, &format!("{name}.m"), width, 1, rng)?;
        Ok(Self { scorer, static_head })
    }

    pub fn scorer(&self) -> &Mlp {
        &self.scorer
    }

    /// Returns `(W, M)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, parts: &[Part]) -> Result<(Var, Var)> {
        let logits = self.scorer.forward_parts(g, store, parts)?;
        let w = point_softmax(g, logits)?;
        let n = g.value(w).rows() as Real;
        let w_rel = g.scale(w, n);
        let z = self.static_head.forward(g, store, w_rel)?;
        Ok((w, g.sigmoid(z)))
    }
}

/// Flow estimate at one pyramid level.
#[derive(Clone, Copy, Debug)]
pub struct FlowState {
    /// Scene flow, `N x 3`.
    pub sf: Var,
    /// Visibility probability, `N x 1`.
    pub occ: Var,
    /// Flow feature, `N x C`.
    pub ff: Var,
}

/// Pose estimate together with the point-wise quantities that produced it.
#[derive(Clone, Copy, Debug)]
pub struct PoseState {
    /// Unit quaternion, `1 x 4`.
    pub q: Var,
    /// Translation, `1 x 3`.
    pub t: Var,
    /// Static probability, `N x 1`.
    pub m: Var,
    /// Embedding mask, `N x C`, each column sums to one over points.
    pub w: Var,
    /// Embedding feature, `N x C`.
    pub ef: Var,
    /// Pooled feature the pose was regressed from, `1 x C`.
    pub pooled: Var,
}

/// Widths and neighborhood sizes of the initialization heads.
#[derive(Clone, Debug, PartialEq)]
pub struct InitWidths {
    /// Width of the initial cost volume at level 2.
    pub cv: usize,
    /// Width of the coarse flow features at level 3.
    pub flow: usize,
    /// Width of the occlusion branch.
    pub occ: usize,
    /// Width of the pose embedding at level 4.
    pub pose: usize,
    pub k_enc: usize,
    pub k_up: usize,
    pub k1: usize,
    pub k2: usize,
    pub k_local: usize,
}

/// Coarse flow at level 3: downsample the initial cost volume twice,
/// upsample once, regress a coarse flow, warp, and refine it with an
/// occlusion-aware cost volume.
#[derive(Clone, Debug)]
pub struct FlowInit {
    down3: SetConv,
    down4: SetConv,
    up: SetUpconv,
    coarse_head: Mlp,
    occ_cv: OccPerceptionCostVolume,
    ff_mlp: Mlp,
    residual_head: Mlp,
}

/// Intermediate results of [`FlowInit::forward`].
#[derive(Clone, Copy, Debug)]
pub struct FlowInitOutput {
    pub state: FlowState,
    /// `FC(CV⁴)`, the flow before the occlusion-aware correction.
    pub sf_coarse: Var,
    /// Level-3 points moved by `sf_coarse`.
    pub p_warped: Var,
    pub cv: OccCvOutput,
}

impl FlowInit {
    /// `level3_width` is the encoder feature width at level 3.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        level3_width: usize,
        w: &InitWidths,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let h = w.flow;
        Ok(Self {
            down3: SetConv::new(store, &format!("{name}.down3"), w.cv, &[h, h], w.k_enc, rng)?,
            down4: SetConv::new(store, &format!("{name}.down4"), h, &[h, h], w.k_enc, rng)?,
            up: SetUpconv::new(store, &format!("{name}.up"), h, h, h, w.k_up, rng)?,
            coarse_head: Mlp::fc(store, &format!("{name}.sf_coarse"), h, 3, rng)?,
            occ_cv: OccPerceptionCostVolume::new(
                store,
                &format!("{name}.cv"),
                level3_width,
                h,
                w.occ,
                h,
                w.k1,
                w.k2,
                w.k_local,
                rng,
            )?,
            ff_mlp: Mlp::new(store, &format!("{name}.ff"), MlpSpec::relu(&[2 * h + 1, h, h]), rng)?,
            residual_head: Mlp::fc(store, &format!("{name}.sf"), h, 3, rng)?,
        })
    }

    pub fn output_width(&self) -> usize {
        self.ff_mlp.output_width()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        geom: &PyramidGeometry,
        p: &[PyramidLevel],
        q: &[PyramidLevel],
        cv_init: Var,
    ) -> Result<FlowInitOutput> {
        check_levels(p, q)?;
        if g.value(cv_init).rows() != geom.points[2].len() {
            return Err(Error::shape(
                "flow_init cost volume",
                &[geom.points[2].len()],
                &[g.value(cv_init).rows()],
            ));
        }
        let cv3 = self
            .down3
            .forward_with(g, store, &geom.points[2], cv_init, &geom.parents[3], &geom.neighbors[3])?;
        let cv4 = self
            .down4
            .forward_with(g, store, &geom.points[3], cv3, &geom.parents[4], &geom.neighbors[4])?;
        let cv_up = self.up.forward(g, store, &geom.points[4], cv4, &geom.points[3], cv3)?;
        let sf_coarse = self.coarse_head.forward(g, store, cv_up)?;
        let p3 = g.constant(points_tensor(&p[3].points));
        let p_warped = g.add(p3, sf_coarse)?;
        let q3 = g.constant(points_tensor(&q[3].points));
        let cv = self
            .occ_cv
            .forward(g, store, p_warped, p[3].features, q3, q[3].features, cv3)?;
        let ff = self.ff_mlp.forward_parts(
            g,
            store,
            &[Part::dense(cv.cv_o), Part::dense(cv_up), Part::dense(cv.occ)],
        )?;
        let res = self.residual_head.forward(g, store, ff)?;
        let sf = g.add(sf_coarse, res)?;
        Ok(FlowInitOutput {
            state: FlowState { sf, occ: cv.occ, ff },
            sf_coarse,
            p_warped,
            cv,
        })
    }
}

/// Pose at level 4: aggregate the initial cost volume onto the level-4
/// points, weight it with a learned embedding mask, and regress `(q, t)`.
#[derive(Clone, Debug)]
pub struct PoseInit {
    down: SetConv,
    ef_mlp: Mlp,
    masks: MaskHeads,
    regressor: PoseRegressor,
}

impl PoseInit {
    /// `level4_width` is the encoder feature width at level 4.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        level4_width: usize,
        w: &InitWidths,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let h = w.pose;
        Ok(Self {
            down: SetConv::new(store, &format!("{name}.down"), w.cv, &[h, h], w.k_enc, rng)?,
            ef_mlp: Mlp::new(store, &format!("{name}.ef"), MlpSpec::relu(&[h, h]), rng)?,
            masks: MaskHeads::new(store, &format!("{name}.mask"), h + level4_width, h, rng)?,
            regressor: PoseRegressor::new(store, &format!("{name}.reg"), h, h, rng)?,
        })
    }

    pub fn output_width(&self) -> usize {
        self.ef_mlp.output_width()
    }

    pub fn regressor(&self) -> &PoseRegressor {
        &self.regressor
    }

    pub fn masks(&self) -> &MaskHeads {
        &self.masks
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        geom: &PyramidGeometry,
        p: &[PyramidLevel],
        cv_init: Var,
        dropout: &mut Dropout,
    ) -> Result<PoseState> {
        if p.len() != PYRAMID_LEVELS + 1 {
            return Err(Error::shape("pose_init pyramid", &[PYRAMID_LEVELS + 1], &[p.len()]));
        }
        let idx = geom.indices_between(2, 4)?;
        let nb = self.down.neighbors(&geom.points[2], &idx)?;
        let cv_p = self.down.forward_with(g, store, &geom.points[2], cv_init, &idx, &nb)?;
        let ef = self.ef_mlp.forward(g, store, cv_p)?;
        let (w, m) = self
            .masks
            .forward(g, store, &[Part::dense(ef), Part::dense(p[4].features)])?;
        let pooled = weighted_pool(g, w, cv_p)?;
        let (q, t) = self.regressor.forward(g, store, pooled, dropout)?;
        Ok(PoseState { q, t, m, w, ef, pooled })
    }
}

fn check_levels(p: &[PyramidLevel], q: &[PyramidLevel]) -> Result<()> {
    if p.len() != PYRAMID_LEVELS + 1 || q.len() != PYRAMID_LEVELS + 1 {
        return Err(Error::shape(
            "pyramid levels",
            &[PYRAMID_LEVELS + 1],
            &[p.len().min(q.len())],
        ));
    }
    Ok(())
}
