//! Episode rollouts: student-forced imitation rollouts with teacher
//! supervision, reward-collecting rollouts for policy-gradient finetuning,
//! and greedy evaluation rollouts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::DropoutCtx;
use crate::config::ActionSpace;
use crate::env::{
    advance_progress, candidate_views, observe, step_cap, step_high, step_low, teacher_high,
    teacher_low, teacher_rollout, AgentPose, Episode, HighLevelAction, LowLevelAction, World,
};
use crate::metrics::{ndtw, Point};
use crate::model::{act, history_token_high, history_token_low, start_token, ActMode, PtaModel};
use crate::tensor::{Graph, Tensor};

use super::TrainError;

/// What drives the action choice during a supervised rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Forcing {
    /// Sample from the policy (the default).
    Student,
    /// Execute the teacher action (debugging aid).
    Teacher,
}

/// Shared bookkeeping of one rollout.
pub struct RolloutTrace {
    pub visited: Vec<usize>,
    pub final_pose: AgentPose,
    pub steps: usize,
    /// Episode ended by the policy's own stop action (vs. the step cap).
    pub stopped: bool,
    /// Number of instruction encodings performed (per-step work must not
    /// re-encode; asserted in tests).
    pub instruction_encodings: usize,
}

/// Supervised rollout result: the scalar loss tensor is still attached to
/// its graph so the caller can run backward.
pub struct IlRollout {
    pub loss: Tensor,
    pub mean_step_loss: f64,
    pub trace: RolloutTrace,
}

/// Step cap for an episode: three teacher lengths, floor 23. The teacher
/// length is measured in the episode's own action space.
pub fn episode_step_cap(world: &World, episode: &Episode, space: ActionSpace) -> usize {
    match space {
        ActionSpace::Low => {
            let len = teacher_rollout(world, episode)
                .map(|(actions, _)| actions.len())
                .unwrap_or(episode.path.len() * 8);
            step_cap(len)
        }
        ActionSpace::High => step_cap(episode.path.len()),
    }
}

/// Per-step artifacts handed to rollout flavors: the cross-entropy of the
/// taken action (for policy gradients) and of the teacher action (for
/// imitation).
struct StepOutcome {
    taken_index: usize,
    ce_taken: Tensor,
    ce_teacher: Tensor,
}

fn run_policy_rollout(
    model: &PtaModel,
    world: &World,
    episode: &Episode,
    rng: &mut ChaCha8Rng,
    training: bool,
    forcing: Forcing,
    mode: ActMode,
    cap_override: Option<usize>,
    mut on_step: impl FnMut(&StepOutcome, &RolloutTrace),
) -> Result<(Graph, RolloutTrace, Vec<StepOutcome>), TrainError> {
    episode.validate(world)?;
    let space = model.config.action_space;
    let graph = Graph::new();
    let dropout_p = if training { model.config.dropout } else { 0.0 };

    let instruction = {
        let mut ctx = DropoutCtx {
            p: dropout_p,
            training,
            rng,
        };
        model.encode_instruction(&graph, &episode.instruction_tokens, &mut ctx)?
    };

    let mut pose = episode.start_pose();
    let mut progress = 0;
    advance_progress(episode, pose.node, &mut progress);
    let mut history = vec![start_token(space)];
    let mut trace = RolloutTrace {
        visited: vec![pose.node],
        final_pose: pose,
        steps: 0,
        stopped: false,
        instruction_encodings: 1,
    };
    let mut outcomes = Vec::new();
    let cap = cap_override
        .unwrap_or(usize::MAX)
        .min(episode_step_cap(world, episode, space))
        .max(1);

    for _ in 0..cap {
        let state = {
            let mut ctx = DropoutCtx {
                p: dropout_p,
                training,
                rng,
            };
            let obs = observe(world, &pose)?;
            let visual =
                model.encode_observation(&graph, obs.views(), &instruction.encoded, &mut ctx)?;
            model.decode_state(&graph, &history, &instruction.encoded, &visual, &mut ctx)?
        };

        let outcome;
        match space {
            ActionSpace::Low => {
                let teacher = teacher_low(world, &pose, episode, progress)?;
                let logits = model.low_logits(&graph, &state)?;
                let probs = logits.softmax(crate::tensor::Axis::Cols)?;
                let taken_index = match forcing {
                    Forcing::Teacher => teacher.index(),
                    Forcing::Student => act(probs.value(), mode, rng),
                };
                outcome = StepOutcome {
                    taken_index,
                    ce_taken: logits.cross_entropy(taken_index)?,
                    ce_teacher: logits.cross_entropy(teacher.index())?,
                };
                let action = LowLevelAction::from_index(taken_index).expect("index in range");
                history.push(history_token_low(action));
                let (next, done) = step_low(world, &pose, action);
                pose = next;
                trace.stopped = done;
            }
            ActionSpace::High => {
                let candidates = candidate_views(world, &pose)?;
                let teacher = teacher_high(world, &pose, episode, progress)?;
                let teacher_index = match teacher {
                    HighLevelAction::Stop => candidates.len(),
                    HighLevelAction::MoveTo(n) => candidates
                        .iter()
                        .position(|c| c.node == n)
                        .expect("teacher hop must be a neighbor"),
                };
                let logits = model.high_logits(&graph, &state, &candidates)?;
                let probs = logits.softmax(crate::tensor::Axis::Cols)?;
                let taken_index = match forcing {
                    Forcing::Teacher => teacher_index,
                    Forcing::Student => act(probs.value(), mode, rng),
                };
                outcome = StepOutcome {
                    taken_index,
                    ce_taken: logits.cross_entropy(taken_index)?,
                    ce_teacher: logits.cross_entropy(teacher_index)?,
                };
                let action = if taken_index == candidates.len() {
                    HighLevelAction::Stop
                } else {
                    HighLevelAction::MoveTo(candidates[taken_index].node)
                };
                history.push(match action {
                    HighLevelAction::Stop => history_token_high(None),
                    HighLevelAction::MoveTo(n) => {
                        history_token_high(Some(world.sector_towards(pose.node, n)))
                    }
                });
                let (next, done) = step_high(world, &pose, action)?;
                pose = next;
                trace.stopped = done;
            }
        }

        trace.steps += 1;
        if pose.node != *trace.visited.last().unwrap() {
            trace.visited.push(pose.node);
        }
        advance_progress(episode, pose.node, &mut progress);
        trace.final_pose = pose;
        on_step(&outcome, &trace);
        outcomes.push(outcome);
        if trace.stopped {
            break;
        }
    }
    Ok((graph, trace, outcomes))
}

/// Student-forced rollout accumulating the per-step cross-entropy against
/// the teacher action; returns the mean step loss on the graph.
pub fn il_rollout(
    model: &PtaModel,
    world: &World,
    episode: &Episode,
    rng: &mut ChaCha8Rng,
    forcing: Forcing,
) -> Result<IlRollout, TrainError> {
    il_rollout_capped(model, world, episode, rng, forcing, None)
}

/// [`il_rollout`] with an optional tighter step cap for training.
pub fn il_rollout_capped(
    model: &PtaModel,
    world: &World,
    episode: &Episode,
    rng: &mut ChaCha8Rng,
    forcing: Forcing,
    cap_override: Option<usize>,
) -> Result<IlRollout, TrainError> {
    let (_, trace, outcomes) = run_policy_rollout(
        model,
        world,
        episode,
        rng,
        true,
        forcing,
        ActMode::Train,
        cap_override,
        |_, _| {},
    )?;
    debug_assert!(!outcomes.is_empty(), "step cap is at least 23");
    let mut total: Option<Tensor> = None;
    for o in &outcomes {
        total = Some(match total {
            None => o.ce_teacher.clone(),
            Some(t) => t.add(&o.ce_teacher)?,
        });
    }
    let loss = total.expect("at least one step").scale(1.0 / outcomes.len() as f64)?;
    Ok(IlRollout {
        mean_step_loss: loss.item(),
        loss,
        trace,
    })
}

/// Reward trace of one sampled rollout: per-step nDTW gains, the terminal
/// success reward, and the log-probabilities of the taken actions (still on
/// the rollout's graph). Consumed exactly once by `reinforce_update`; the
/// move makes reuse a compile error.
pub struct RewardTrace {
    pub rewards: Vec<f64>,
    pub success_reward: f64,
    /// -log pi(a_t | s_t) per step, attached to the rollout graph.
    pub neg_log_probs: Vec<Tensor>,
    /// Index of the action taken at each step.
    pub actions: Vec<usize>,
    pub trace: RolloutTrace,
}

impl RewardTrace {
    /// Total episode return: sum of step rewards plus the success reward.
    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum::<f64>() + self.success_reward
    }
}

/// Terminal reward for stopping `d_goal` meters from the target:
/// `max(0, 1 - d_goal / d_th)`.
pub fn success_reward(d_goal: f64, d_th: f64) -> f64 {
    (1.0 - d_goal / d_th).max(0.0)
}

/// Sampled rollout collecting the extrinsic reward: each step is rewarded
/// with the gain in nDTW of the visited-node prefix against the reference
/// path; termination adds `max(0, 1 - d_goal / d_th)`.
pub fn rl_rollout(
    model: &PtaModel,
    world: &World,
    episode: &Episode,
    rng: &mut ChaCha8Rng,
) -> Result<RewardTrace, TrainError> {
    let reference = episode.reference_positions(world);
    let to_points = |visited: &[usize]| -> Vec<Point> {
        visited.iter().map(|&n| world.position(n)).collect()
    };
    let mut prev_ndtw = {
        let start = to_points(&[episode.path[0]]);
        ndtw(&start, &reference, episode.d_th)
    };
    let mut rewards = Vec::new();
    let (_, trace, outcomes) = run_policy_rollout(
        model,
        world,
        episode,
        rng,
        true,
        Forcing::Student,
        ActMode::Train,
        None,
        |_, t| {
            let current = ndtw(&to_points(&t.visited), &reference, episode.d_th);
            rewards.push(current - prev_ndtw);
            prev_ndtw = current;
        },
    )?;
    let d_goal = crate::env::euclidean(
        world.position(trace.final_pose.node),
        world.position(episode.goal()),
    );
    let reward = success_reward(d_goal, episode.d_th);
    let (neg_log_probs, actions) = outcomes
        .into_iter()
        .map(|o| (o.ce_taken, o.taken_index))
        .unzip();
    Ok(RewardTrace {
        rewards,
        success_reward: reward,
        neg_log_probs,
        actions,
        trace,
    })
}

/// Greedy (argmax) rollout used for evaluation; instruction encoded once,
/// per-step graphs dropped as soon as the action is chosen.
pub fn eval_rollout(
    model: &PtaModel,
    world: &World,
    episode: &Episode,
) -> Result<RolloutTrace, TrainError> {
    // deterministic: eval never consults the rng
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, trace, _) = run_policy_rollout(
        model,
        world,
        episode,
        &mut rng,
        false,
        Forcing::Student,
        ActMode::Eval,
        None,
        |_, _| {},
    )?;
    Ok(trace)
}
