//! Training: imitation learning with sampled rollouts and teacher
//! supervision, policy-gradient finetuning with the nDTW-gain reward, the
//! Adam optimizer, and the plateau learning-rate schedule.

mod adam;
mod fit;
mod rollout;
mod schedule;

pub use adam::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use fit::{evaluate_split, fit, trajectory_record, EpochLog, FitOutcome, WorldMap};
pub use rollout::{
    episode_step_cap, eval_rollout, il_rollout, il_rollout_capped, rl_rollout, success_reward,
    Forcing, IlRollout, RewardTrace, RolloutTrace,
};
pub use schedule::{PlateauSchedule, ScheduleDecision};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvError;
use crate::model::{ModelError, PtaModel};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("unknown world '{0}' referenced by episode")]
    UnknownWorld(String),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub rl_lr: f64,
    pub batch_size: usize,
    pub lr_patience_epochs: usize,
    pub lr_factor: f64,
    pub early_stop_epochs: usize,
    /// Overall epoch budget for one run.
    pub max_epochs: usize,
    pub seed: u64,
    /// Execute teacher actions instead of sampling (debugging aid).
    pub teacher_forcing: bool,
    /// Teacher-force the first N epochs before switching to sampled
    /// rollouts (0 = pure student forcing).
    pub warmup_epochs: usize,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
    /// Moving-average reward baseline for finetuning (off by default: the
    /// advantage is the raw step + success reward).
    pub rl_baseline: bool,
    /// Optional cap on train episodes consumed per epoch (quick runs).
    pub max_episodes_per_epoch: Option<usize>,
    /// Optional tighter step cap for training rollouts; evaluation always
    /// uses the default cap (3x teacher length, floor 23).
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            rl_lr: 1e-7,
            batch_size: 32,
            lr_patience_epochs: 5,
            lr_factor: 10.0,
            early_stop_epochs: 30,
            max_epochs: 10,
            seed: 0,
            teacher_forcing: false,
            warmup_epochs: 0,
            grad_clip: None,
            rl_baseline: false,
            max_episodes_per_epoch: None,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 || self.rl_lr <= 0.0 || self.lr_factor <= 1.0 {
            return Err(TrainError::Config(
                "learning rates must be positive and the factor above 1".into(),
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config(
                "batch size and epoch budget must be positive".into(),
            ));
        }
        if self.lr_patience_epochs >= self.early_stop_epochs {
            return Err(TrainError::Config(format!(
                "patience ({}) must be below the early-stop horizon ({})",
                self.lr_patience_epochs, self.early_stop_epochs
            )));
        }
        Ok(())
    }
}

/// Exponential moving average of episode returns, used as an optional
/// advantage baseline.
#[derive(Debug, Default)]
pub struct MovingBaseline {
    value: Option<f64>,
}

impl MovingBaseline {
    pub fn current(&self) -> f64 {
        self.value.unwrap_or(0.0)
    }

    pub fn update(&mut self, episode_return: f64) {
        self.value = Some(match self.value {
            None => episode_return,
            Some(v) => 0.9 * v + 0.1 * episode_return,
        });
    }
}

/// One policy-gradient update from a completed reward trace. The trace is
/// consumed: a trace can never drive two updates.
pub fn reinforce_update(
    model: &mut PtaModel,
    adam: &mut AdamState,
    trace: RewardTrace,
    rl_lr: f64,
    baseline: Option<&mut MovingBaseline>,
) -> Result<f64, TrainError> {
    let episode_return = trace.total_return();
    let base = baseline.as_ref().map(|b| b.current()).unwrap_or(0.0);
    let mut loss: Option<crate::tensor::Tensor> = None;
    for (nlp, reward) in trace.neg_log_probs.iter().zip(&trace.rewards) {
        let advantage = reward + trace.success_reward - base;
        let term = nlp.scale(advantage)?;
        loss = Some(match loss {
            None => term,
            Some(l) => l.add(&term)?,
        });
    }
    let loss = loss.ok_or_else(|| TrainError::Config("empty reward trace".into()))?;
    let grads = loss.backward()?.param_grads(&model.store);
    adam.step(&mut model.store, &grads, rl_lr);
    if let Some(b) = baseline {
        b.update(episode_return);
    }
    Ok(episode_return)
}

/// Clips a gradient set to a maximum global L2 norm.
pub fn clip_global_norm(grads: &mut crate::tensor::ParamGrads, store: &crate::tensor::ParamStore, max_norm: f64) {
    let mut sq = 0.0;
    for id in store.ids() {
        if let Some(g) = grads.get(id) {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
}
