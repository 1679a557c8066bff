//! Optimization, staged training, evaluation and inference export.

mod adam;
mod checkpoint;
mod config;
mod eval;
mod run;

pub use adam::{clip_grad_norm, Adam, Moments};
pub use checkpoint::{Checkpoint, NamedTensor};
pub use config::{Convergence, Preset, Stage, StageEpochs, TrainConfig};
pub use eval::{evaluate, read_export, write_export, InferenceExport, Prediction, EXPORT_JSON, EXPORT_PLY};
pub use run::{train, EpochLog, TrainLog};

use crate::data::FramePair;
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::init_heads::Dropout;
use crate::losses::{flow_level_terms, flow_loss_total, pose_loss_total, total_loss, PoseTarget, Uncertainty, LEVELS};
use crate::model::{NetOutput, Network, PairGeometry};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Name prefix of the learnable loss weights.
pub const UNCERTAINTY_PREFIX: &str = "loss.";
const W_X: &str = "loss.w_x";
const W_Q: &str = "loss.w_q";

/// The network, its parameters and the learnable pose-loss weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub store: ParamStore,
    w_x: ParamId,
    w_q: ParamId,
}

impl Model {
    /// Freshly initialized from `cfg` and its seed.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let net = Network::new(&mut store, &cfg.net_config(), cfg.seed)?;
        let w_x = store.insert(W_X, Tensor::new(&[1], vec![cfg.uncertainty_init[0]])?)?;
        let w_q = store.insert(W_Q, Tensor::new(&[1], vec![cfg.uncertainty_init[1]])?)?;
        Ok(Self { net, store, w_x, w_q })
    }

    /// Current `(w_x, w_q)`.
    pub fn uncertainty(&self) -> (Real, Real) {
        (self.store.value(self.w_x).item(), self.store.value(self.w_q).item())
    }

    /// Ids of every parameter whose name starts with one of `prefixes`.
    pub fn ids_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| prefixes.iter().any(|p| self.store.name(id).starts_with(p)))
            .collect()
    }

    pub fn input_points(&self) -> usize {
        self.net.config().pyramid.input_points
    }

    pub fn geometry(&self, pair: &FramePair) -> Result<PairGeometry> {
        let n = self.input_points();
        if pair.p.len() != n || pair.q.len() != n {
            return Err(Error::shape("network input", &[n, n], &[pair.p.len(), pair.q.len()]));
        }
        PairGeometry::build(pair.p.points(), pair.q.points(), &self.net.config().pyramid)
    }

    pub fn forward(&self, g: &mut Graph, geom: &PairGeometry, dropout: &mut Dropout) -> Result<NetOutput> {
        self.net.forward(g, &self.store, geom, dropout)
    }

    /// Stage objective of one sample: `μ_sf L_sf + μ_p L_pose`, where the
    /// term the stage does not use is left out.
    pub fn loss(
        &self,
        g: &mut Graph,
        geom: &PairGeometry,
        gt_pose: Option<&crate::geometry::Pose>,
        stage: Stage,
        cfg: &TrainConfig,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        self.loss_with(g, &self.store, geom, gt_pose, stage, cfg, dropout)
    }

    /// [`Model::loss`] evaluated with the parameter values in `store`,
    /// which must share this model's layout.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        geom: &PairGeometry,
        gt_pose: Option<&crate::geometry::Pose>,
        stage: Stage,
        cfg: &TrainConfig,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let out = self.net.forward(g, store, geom, dropout)?;
        let l_sf = if stage.uses_flow() {
            Some(self.flow_loss(g, &out, cfg)?)
        } else {
            None
        };
        let l_pose = if stage.uses_pose() {
            let gt =
                gt_pose.ok_or_else(|| Error::Config(format!("stage {} needs ground-truth poses", stage.name())))?;
            let target = PoseTarget { q: gt.q, t: gt.t };
            let u = Uncertainty {
                w_x: g.param(store, self.w_x),
                w_q: g.param(store, self.w_q),
            };
            Some(pose_loss_total(g, &out.poses(), &target, u, &cfg.loss)?)
        } else {
            None
        };
        total_loss(g, l_sf, l_pose, &cfg.loss)
    }

    fn flow_loss(&self, g: &mut Graph, out: &NetOutput, cfg: &TrainConfig) -> Result<Var> {
        let mut terms = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let est = out.level(l);
            let q = out.q_points(g, l);
            terms.push(flow_level_terms(g, &est.flow_points, est.flow.sf, q, &cfg.flow_loss)?);
        }
        flow_loss_total(g, &terms, &cfg.loss)
    }
}

fn rows3(t: &Tensor) -> Vec<Point> {
    t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}
