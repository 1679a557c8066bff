use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{FlowLossConfig, LossWeights};
use crate::model::NetConfig;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Full,
    Reduced,
}

impl Preset {
    pub fn net(self) -> NetConfig {
        match self {
            Preset::Full => NetConfig::full(),
            Preset::Reduced => NetConfig::reduced(),
        }
    }
}

/// Training stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Pose loss only; flow heads frozen.
    PoseOnly,
    /// Flow loss only; pose heads frozen.
    FlowOnly,
    /// Both losses, everything trainable.
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::PoseOnly, Stage::FlowOnly, Stage::Joint];

    pub fn uses_pose(self) -> bool {
        self != Stage::FlowOnly
    }

    pub fn uses_flow(self) -> bool {
        self != Stage::PoseOnly
    }

    /// Parameter-name prefixes held fixed during this stage.
    pub fn frozen_prefixes(self) -> &'static [&'static str] {
        use crate::model::groups::{FLOW, POSE};
        match self {
            Stage::PoseOnly => &[FLOW],
            Stage::FlowOnly => &[POSE, super::UNCERTAINTY_PREFIX],
            Stage::Joint => &[],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::PoseOnly => "pose_only",
            Stage::FlowOnly => "flow_only",
            Stage::Joint => "joint",
        }
    }
}

/// Epoch caps per stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEpochs {
    pub pose_only: usize,
    pub flow_only: usize,
    pub joint: usize,
}

impl StageEpochs {
    pub fn cap(&self, s: Stage) -> usize {
        match s {
            Stage::PoseOnly => self.pose_only,
            Stage::FlowOnly => self.flow_only,
            Stage::Joint => self.joint,
        }
    }
}

/// A stage ends early once its epoch loss has improved by less than
/// `min_improvement` (relative) over the last `window` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Convergence {
    pub window: usize,
    pub min_improvement: Real,
}

impl Default for Convergence {
    fn default() -> Self {
        Self {
            window: 5,
            min_improvement: 0.01,
        }
    }
}

impl Convergence {
    /// Whether the newest entry of `losses` ends the stage.
    pub fn converged(&self, losses: &[Real]) -> bool {
        if self.window == 0 || losses.len() <= self.window {
            return false;
        }
        let now = losses[losses.len() - 1];
        let then = losses[losses.len() - 1 - self.window];
        then - now < self.min_improvement * then.abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: Real,
    pub betas: [Real; 2],
    pub eps: Real,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    pub decay_rate: Real,
    pub batch: usize,
    pub stages: StageEpochs,
    pub convergence: Convergence,
    /// Hard cap on optimizer steps over all stages.
    pub max_iterations: Option<usize>,
    /// Global gradient-norm clip.
    pub clip_norm: Option<Real>,
    pub loss: LossWeights,
    pub flow_loss: FlowLossConfig,
    /// Initial `(w_x, w_q)`.
    pub uncertainty_init: [Real; 2],
    pub preset: Preset,
    /// Replaces the preset's network when set.
    pub net: Option<NetConfig>,
    /// Evaluate on the held-out split every this many epochs (0 = never).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            betas: [0.9, 0.999],
            eps: 1e-8,
            decay_every: 13,
            decay_rate: 0.7,
            batch: 8,
            stages: StageEpochs {
                pose_only: 200,
                flow_only: 200,
                joint: 200,
            },
            convergence: Convergence::default(),
            max_iterations: None,
            clip_norm: Some(5.0),
            loss: LossWeights::default(),
            flow_loss: FlowLossConfig::default(),
            uncertainty_init: [0.0, -2.5],
            preset: Preset::Full,
            net: None,
            eval_every: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn net_config(&self) -> NetConfig {
        self.net.clone().unwrap_or_else(|| self.preset.net())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config(format!("decay rate {} outside (0, 1]", self.decay_rate)));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be positive".into()));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) || !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "Adam betas {:?} must lie in [0, 1) and eps {} be positive",
                self.betas, self.eps
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm {c} must be positive")));
            }
        }
        if !self.uncertainty_init.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("uncertainty weights must start finite".into()));
        }
        self.loss.validate()?;
        self.net_config().validate()
    }

    /// `lr · decay_rate^⌊epoch / decay_every⌋`.
    pub fn lr_at(&self, epoch: usize) -> Real {
        self.lr * self.decay_rate.powi((epoch / self.decay_every) as i32)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
