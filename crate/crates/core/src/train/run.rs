use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_grad_norm, evaluate, Adam, Checkpoint, Model, Stage, TrainConfig};
use crate::data::FramePair;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::PairGeometry;
use crate::tensor::{Graph, ParamId, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    /// Epoch within the stage.
    pub epoch: usize,
    pub lr: Real,
    /// Mean per-sample stage loss over the epoch's steps.
    pub loss: Real,
    pub iterations: usize,
    pub heldout: Option<EvalReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Optimizer steps over all stages.
    pub iterations: usize,
}

impl TrainLog {
    pub fn stage_losses(&self, stage: Stage) -> Vec<Real> {
        self.epochs
            .iter()
            .filter(|e| e.stage == stage)
            .map(|e| e.loss)
            .collect()
    }
}

fn out_of_budget(cfg: &TrainConfig, log: &TrainLog) -> bool {
    cfg.max_iterations.is_some_and(|m| log.iterations >= m)
}

/// Seed of the dropout mask of one sample in one step.
fn dropout_seed(seed: u64, iteration: usize, sample: usize) -> u64 {
    seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (sample as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Runs the three stages in order on `train_set`, evaluating on `heldout`
/// every `cfg.eval_every` epochs. `on_stage_end` receives a checkpoint
/// after every stage that ran. Returns the final checkpoint.
pub fn train(
    train_set: &[FramePair],
    heldout: &[FramePair],
    cfg: &TrainConfig,
    mut on_stage_end: impl FnMut(Stage, &Checkpoint) -> Result<()>,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    let mut model = Model::new(cfg)?;
    let mut adam = Adam::new(&model.store, cfg.betas, cfg.eps);
    let mut log = TrainLog::default();

    let active: Vec<Stage> = Stage::ALL.into_iter().filter(|s| cfg.stages.cap(*s) > 0).collect();
    if !active.is_empty() && train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for s in &active {
        if s.uses_pose() {
            if let Some(i) = train_set.iter().position(|p| p.gt_pose.is_none()) {
                return Err(Error::Config(format!(
                    "stage {} needs ground-truth poses, training pair {i} has none",
                    s.name()
                )));
            }
        }
    }
    let geoms = train_set
        .iter()
        .map(|p| model.geometry(p))
        .collect::<Result<Vec<PairGeometry>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut total_epochs = 0;
    let mut last_stage = None;
    for stage in active {
        let frozen = model.ids_with_prefix(stage.frozen_prefixes());
        let trainable: Vec<ParamId> = model.store.ids().filter(|id| !frozen.contains(id)).collect();
        let mut losses = Vec::new();
        for epoch in 0..cfg.stages.cap(stage) {
            if out_of_budget(cfg, &log) {
                break;
            }
            let lr = cfg.lr_at(epoch);
            let mut order: Vec<usize> = (0..train_set.len()).collect();
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut seen = 0;
            for batch in order.chunks(cfg.batch) {
                if out_of_budget(cfg, &log) {
                    break;
                }
                model.store.zero_grads();
                for &i in batch {
                    let mut g = Graph::new();
                    g.freeze(frozen.iter().copied());
                    let mut dropout = model.net.dropout(true, dropout_seed(cfg.seed, log.iterations, i))?;
                    let loss = model.loss(
                        &mut g,
                        &geoms[i],
                        train_set[i].gt_pose.as_ref(),
                        stage,
                        cfg,
                        &mut dropout,
                    )?;
                    let value = g.value(loss).item();
                    if !value.is_finite() {
                        return Err(Error::NonFinite(format!("{} loss of training pair {i}", stage.name())));
                    }
                    sum += value;
                    seen += 1;
                    let scaled = g.scale(loss, 1.0 / batch.len() as Real);
                    g.backward(scaled, &mut model.store)?;
                }
                if let Some(c) = cfg.clip_norm {
                    clip_grad_norm(&mut model.store, &trainable, c);
                }
                adam.step(&mut model.store, &trainable, lr)?;
                log.iterations += 1;
            }
            total_epochs += 1;
            let loss = sum / seen as Real;
            losses.push(loss);
            let heldout = if !heldout.is_empty() && cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
                Some(evaluate(&model, heldout)?)
            } else {
                None
            };
            log.epochs.push(EpochLog {
                stage,
                epoch,
                lr,
                loss,
                iterations: log.iterations,
                heldout,
            });
            if cfg.convergence.converged(&losses) {
                break;
            }
        }
        last_stage = Some(stage);
        on_stage_end(
            stage,
            &Checkpoint::capture(&model, &adam, cfg, total_epochs, last_stage),
        )?;
        if out_of_budget(cfg, &log) {
            break;
        }
    }
    Ok((Checkpoint::capture(&model, &adam, cfg, total_epochs, last_stage), log))
}
