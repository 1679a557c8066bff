//! The full two-frame network: siamese encoder, initial cost volume,
//! flow/pose initialization and three refinement levels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costvolume::AttentiveCostVolume;
use crate::encoder::{points_tensor, Encoder, PyramidConfig, PyramidGeometry, PyramidLevel, PYRAMID_LEVELS};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::init_heads::{Dropout, FlowInit, InitWidths, PoseInit};
use crate::losses::LEVELS;
use crate::refinement::{refine_all, LevelEstimate, LevelWidths, RefineLevel, RefineOptions};
use crate::tensor::{Graph, ParamStore, Real, Var};

/// Parameter-name prefixes of the independently trainable parts.
pub mod groups {
    pub const ENCODER: &str = "enc.";
    pub const INITIAL_COST_VOLUME: &str = "cvinit.";
    pub const POSE: &str = "pose.";
    pub const FLOW: &str = "flow.";
    /// Occlusion-aware cost volumes of the refinement levels, consumed by
    /// both the pose and the flow heads.
    pub const SHARED_COST_VOLUME: &str = "cv.";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub pyramid: PyramidConfig,
    /// Flow and pose feature widths at output levels 0..=3.
    pub head_widths: [usize; LEVELS],
    /// Neighbors searched in the second frame by every cost volume.
    pub k1: usize,
    /// Neighbors aggregated within the first frame by every cost volume.
    pub k2: usize,
    /// Neighborhood of the local maximum in the occlusion blend.
    pub k_local: usize,
    /// Dropout rate before the pose regressors during training.
    pub dropout: Real,
    #[serde(default)]
    pub refine: RefineOptions,
}

impl NetConfig {
    pub fn full() -> Self {
        Self {
            pyramid: PyramidConfig::full(),
            head_widths: [32, 32, 64, 128],
            k1: 16,
            k2: 8,
            k_local: 8,
            dropout: 0.5,
            refine: RefineOptions::default(),
        }
    }

    pub fn reduced() -> Self {
        Self {
            pyramid: PyramidConfig::reduced(),
            head_widths: [16, 16, 32, 64],
            ..Self::full()
        }
    }

    /// Reduced-preset widths on a 32-point pyramid (16 / 12 / 8 / 4) with
    /// neighborhoods shrunk to fit; small enough for exhaustive gradient checks.
    pub fn reduced_tiny() -> Self {
        Self {
            pyramid: PyramidConfig {
                input_points: 32,
                level_sizes: [16, 12, 8, 4],
                k_enc: 4,
                k_up: 3,
                ..PyramidConfig::reduced()
            },
            k1: 4,
            k2: 3,
            k_local: 3,
            ..Self::reduced()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        if self.head_widths.contains(&0) {
            return Err(Error::Config("head widths must be positive".into()));
        }
        if self.k1 == 0 || self.k2 == 0 || self.k_local == 0 {
            return Err(Error::Config("cost volume neighbor counts must be positive".into()));
        }
        let coarsest = self.pyramid.size(PYRAMID_LEVELS - 1);
        if self.k1.max(self.k2).max(self.k_local) > coarsest {
            return Err(Error::Config(format!(
                "cost volume neighbor counts k1 = {}, k2 = {}, k_local = {} exceed the {coarsest} points of level 3",
                self.k1, self.k2, self.k_local
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn occ_width(&self, l: usize) -> usize {
        (self.head_widths[l] / 2).max(1)
    }

    fn init_widths(&self) -> InitWidths {
        InitWidths {
            cv: self.head_widths[2],
            flow: self.head_widths[3],
            occ: self.occ_width(3),
            pose: self.head_widths[3],
            k_enc: self.pyramid.k_enc,
            k_up: self.pyramid.k_up,
            k1: self.k1,
            k2: self.k2,
            k_local: self.k_local,
        }
    }

    fn level_widths(&self, l: usize) -> LevelWidths {
        LevelWidths {
            feature: self.pyramid.width(l),
            coarse_flow: self.head_widths[l + 1],
            coarse_pose: self.head_widths[l + 1],
            flow: self.head_widths[l],
            pose: self.head_widths[l],
            occ: self.occ_width(l),
            k_up: self.pyramid.k_up,
            k1: self.k1,
            k2: self.k2,
            k_local: self.k_local,
        }
    }
}

/// Pyramid geometry of both frames, computed once per scene pair.
#[derive(Clone, Debug)]
pub struct PairGeometry {
    pub p: PyramidGeometry,
    pub q: PyramidGeometry,
}

impl PairGeometry {
    pub fn build(p: &[Point], q: &[Point], cfg: &PyramidConfig) -> Result<Self> {
        Ok(Self {
            p: PyramidGeometry::build(p, cfg)?,
            q: PyramidGeometry::build(q, cfg)?,
        })
    }
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct NetOutput {
    pub p: Vec<PyramidLevel>,
    pub q: Vec<PyramidLevel>,
    /// Estimates ordered coarse to fine: output levels 3, 2, 1, 0.
    pub estimates: Vec<LevelEstimate>,
}

impl NetOutput {
    /// Estimate at output level `l` (0 = input resolution).
    pub fn level(&self, l: usize) -> &LevelEstimate {
        &self.estimates[LEVELS - 1 - l]
    }

    /// Final full-resolution estimate.
    pub fn finest(&self) -> &LevelEstimate {
        self.level(0)
    }

    /// `(q, t)` per output level, index = level.
    pub fn poses(&self) -> Vec<(Var, Var)> {
        (0..LEVELS)
            .map(|l| (self.level(l).pose.q, self.level(l).pose.t))
            .collect()
    }

    /// Points of the second frame at output level `l` as a constant.
    pub fn q_points(&self, g: &mut Graph, l: usize) -> Var {
        g.constant(points_tensor(&self.q[l].points))
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    cfg: NetConfig,
    encoder: Encoder,
    cv_init: AttentiveCostVolume,
    flow_init: FlowInit,
    pose_init: PoseInit,
    /// Refinement of output levels 2, 1, 0 in that order.
    levels: Vec<RefineLevel>,
}

const REFINED: [usize; 3] = [2, 1, 0];

impl Network {
    /// Creates the network and registers its parameters in `store`.
    pub fn new(store: &mut ParamStore, cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pc = &cfg.pyramid;
        let iw = cfg.init_widths();
        let encoder = Encoder::new(store, "enc", pc, &mut rng)?;
        let cv_init = AttentiveCostVolume::new(
            store,
            "cvinit",
            pc.width(2),
            pc.width(2),
            iw.cv,
            3,
            cfg.k1,
            cfg.k2,
            &mut rng,
        )?;
        let flow_init = FlowInit::new(store, "flow.init", pc.width(3), &iw, &mut rng)?;
        let pose_init = PoseInit::new(store, "pose.init", pc.width(4), &iw, &mut rng)?;
        let mut levels = Vec::with_capacity(REFINED.len());
        for l in REFINED {
            let names = [format!("flow.l{l}"), format!("pose.l{l}"), format!("cv.l{l}")];
            levels.push(RefineLevel::new(
                store,
                [&names[0], &names[1], &names[2]],
                &cfg.level_widths(l),
                &mut rng,
            )?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            cv_init,
            flow_init,
            pose_init,
            levels,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Dropout for a training pass, or a disabled one for evaluation.
    pub fn dropout(&self, training: bool, seed: u64) -> Result<Dropout> {
        if training {
            Dropout::new(self.cfg.dropout, seed)
        } else {
            Ok(Dropout::disabled())
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        geom: &PairGeometry,
        dropout: &mut Dropout,
    ) -> Result<NetOutput> {
        let p = self.encoder.forward(g, store, &geom.p)?;
        let q = self.encoder.forward(g, store, &geom.q)?;
        let p2 = g.constant(points_tensor(&p[2].points));
        let q2 = g.constant(points_tensor(&q[2].points));
        let cv = self.cv_init.forward(g, store, p2, p[2].features, q2, q[2].features)?;
        let flow = self.flow_init.forward(g, store, &geom.p, &p, &q, cv)?;
        let pose = self.pose_init.forward(g, store, &geom.p, &p, cv, dropout)?;
        let init = LevelEstimate {
            flow_points: p[3].points.clone(),
            flow: flow.state,
            pose_points: p[4].points.clone(),
            pose,
        };
        let estimates = refine_all(
            g,
            store,
            init,
            &self.levels,
            &REFINED,
            &p,
            &q,
            &self.cfg.refine,
            dropout,
        )?;
        Ok(NetOutput { p, q, estimates })
    }
}
