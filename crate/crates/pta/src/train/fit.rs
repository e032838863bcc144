//! The epoch loop: batched gradient accumulation over student-forced
//! rollouts, greedy evaluation on both validation splits, the plateau
//! schedule on validation-unseen SPL, and best-checkpoint tracking.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{geodesic_distance, Episode, World};
use crate::metrics::{MeanMetrics, MetricsReport, TrajectoryRecord};
use crate::model::PtaModel;
use crate::tensor::ParamGrads;

use super::rollout::{eval_rollout, il_rollout_capped, Forcing, RolloutTrace};
use super::{AdamState, PlateauSchedule, TrainConfig, TrainError};

/// Worlds keyed by scan name. Ordered map keeps iteration deterministic.
pub type WorldMap = BTreeMap<String, World>;

fn world_of<'w>(worlds: &'w WorldMap, episode: &Episode) -> Result<&'w World, TrainError> {
    worlds
        .get(&episode.scan)
        .ok_or_else(|| TrainError::UnknownWorld(episode.scan.clone()))
}

/// Deterministic per-rollout RNG: independent of thread scheduling.
fn episode_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mix = seed
        ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    ChaCha8Rng::seed_from_u64(mix)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub val_seen: MeanMetrics,
    pub val_unseen: MeanMetrics,
}

pub struct FitOutcome {
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_monitor: f64,
    pub epochs_run: usize,
}

/// Converts a finished rollout into the metric record for its episode.
pub fn trajectory_record(
    world: &World,
    episode: &Episode,
    trace: &RolloutTrace,
) -> Result<TrajectoryRecord, TrainError> {
    let goal = episode.goal();
    let geodesic = geodesic_distance(world, episode.path[0], goal)?;
    Ok(TrajectoryRecord {
        episode_id: episode.id.clone(),
        predicted: trace.visited.iter().map(|&n| world.position(n)).collect(),
        reference: episode.reference_positions(world),
        goal: world.position(goal),
        d_th: episode.d_th,
        geodesic,
    })
}

/// Greedy evaluation of a whole split.
pub fn evaluate_split(
    model: &PtaModel,
    worlds: &WorldMap,
    episodes: &[Episode],
) -> Result<MetricsReport, TrainError> {
    let records: Vec<TrajectoryRecord> = episodes
        .par_iter()
        .map(|ep| {
            let world = world_of(worlds, ep)?;
            let trace = eval_rollout(model, world, ep)?;
            trajectory_record(world, ep, &trace)
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(MetricsReport::from_records(&records))
}

/// One optimizer step over a batch of episodes: mean of per-episode
/// gradients, each from a fresh graph (gradients can never leak across
/// steps). Returns the mean per-step loss.
pub fn train_batch(
    model: &mut PtaModel,
    adam: &mut AdamState,
    worlds: &WorldMap,
    batch: &[(usize, &Episode)],
    cfg: &TrainConfig,
    epoch: usize,
    lr: f64,
) -> Result<f64, TrainError> {
    let forcing = if cfg.teacher_forcing || epoch < cfg.warmup_epochs {
        Forcing::Teacher
    } else {
        Forcing::Student
    };
    let shared: &PtaModel = model;
    let results: Vec<(f64, ParamGrads)> = batch
        .par_iter()
        .map(|(index, ep)| {
            let world = world_of(worlds, ep)?;
            let mut rng = episode_rng(cfg.seed, epoch, *index);
            let rollout = il_rollout_capped(shared, world, ep, &mut rng, forcing, cfg.max_steps)?;
            let grads = rollout.loss.backward()?.param_grads(&shared.store);
            Ok((rollout.mean_step_loss, grads))
        })
        .collect::<Result<_, TrainError>>()?;

    let weight = 1.0 / batch.len() as f64;
    let mut total = ParamGrads::zeros_like(&model.store);
    let mut loss_sum = 0.0;
    for (loss, grads) in &results {
        loss_sum += loss;
        total.add_scaled(grads, weight);
    }
    if let Some(max_norm) = cfg.grad_clip {
        super::clip_global_norm(&mut total, &model.store, max_norm);
    }
    adam.step(&mut model.store, &total, lr);
    Ok(loss_sum * weight)
}

/// Full imitation-learning run. Monitors validation-unseen SPL, reduces
/// the learning rate by `lr_factor` after `lr_patience_epochs` flat
/// epochs, stops after `early_stop_epochs` without improvement, and leaves
/// the model holding the best-by-monitor parameters.
pub fn fit(
    model: &mut PtaModel,
    worlds: &WorldMap,
    train: &[Episode],
    val_seen: &[Episode],
    val_unseen: &[Episode],
    cfg: &TrainConfig,
) -> Result<FitOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("empty training split".into()));
    }
    let mut adam = AdamState::new(&model.store);
    let mut schedule = PlateauSchedule::new(cfg.lr_patience_epochs, cfg.early_stop_epochs);
    let mut lr = cfg.lr;
    let mut logs = Vec::new();
    let mut best_snapshot: Option<Vec<Vec<f64>>> = None;
    let mut epochs_run = 0;

    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut shuffle_rng);
        if let Some(cap) = cfg.max_episodes_per_epoch {
            order.truncate(cap.max(1));
        }

        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(usize, &Episode)> =
                chunk.iter().map(|&i| (i, &train[i])).collect();
            epoch_loss += train_batch(model, &mut adam, worlds, &batch, cfg, epoch, lr)?;
            batches += 1.0;
        }
        let train_loss = epoch_loss / batches.max(1.0);

        let seen_report = evaluate_split(model, worlds, val_seen)?;
        let unseen_report = evaluate_split(model, worlds, val_unseen)?;
        let monitor = unseen_report.mean.spl;

        logs.push(EpochLog {
            epoch,
            train_loss,
            lr,
            val_seen: seen_report.mean,
            val_unseen: unseen_report.mean,
        });

        let decision = schedule.observe(monitor);
        if decision.improved {
            best_snapshot = Some(snapshot(model));
        }
        if decision.reduce_lr {
            lr /= cfg.lr_factor;
        }
        if decision.stop {
            break;
        }
    }

    if let Some(snap) = best_snapshot {
        restore(model, &snap);
    }
    Ok(FitOutcome {
        logs,
        best_epoch: schedule.best_epoch(),
        best_monitor: schedule.best(),
        epochs_run,
    })
}

fn snapshot(model: &PtaModel) -> Vec<Vec<f64>> {
    model
        .store
        .ids()
        .map(|id| model.store.value(id).to_vec())
        .collect()
}

fn restore(model: &mut PtaModel, snap: &[Vec<f64>]) {
    let ids: Vec<_> = model.store.ids().collect();
    for (id, values) in ids.into_iter().zip(snap) {
        model.store.value_mut(id).copy_from_slice(values);
    }
}
