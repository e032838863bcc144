//! Templated instruction synthesis: verbalizes a teacher trajectory over
//! the fixed vocabulary, with connective and filler stop words for texture.
//! Executing the instruction's literal motion verbs reproduces the teacher
//! action sequence, so generated instructions are self-consistent.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::teacher::teacher_rollout;
use super::{EnvResult, Episode, LowLevelAction, World};
use crate::vocab;

const ORDINALS: [&str; 6] = ["first", "second", "third", "fourth", "fifth", "sixth"];
const CONNECTIVES: [&str; 3] = ["then", "and", "now"];
const FILLERS: [&str; 4] = ["please", "you should", "keep straight to", "head to the door and"];

fn push_words(tokens: &mut Vec<u16>, words: &str) {
    for w in words.split_whitespace() {
        tokens.push(vocab::id(w).expect("template word must be in the vocabulary"));
    }
}

/// Verbalizes the teacher action sequence for `path`. Deterministic in
/// `(world, path, rng seed)`.
pub fn generate_instruction(
    world: &World,
    episode: &Episode,
    rng: &mut ChaCha8Rng,
) -> EnvResult<Vec<u16>> {
    let (actions, _) = teacher_rollout(world, episode)?;
    let mut tokens = Vec::new();
    for (i, action) in actions.iter().enumerate() {
        // a connective or ordinal before most phrases
        if i == 0 {
            if rng.gen_bool(0.6) {
                push_words(&mut tokens, ORDINALS[0]);
            }
        } else if rng.gen_bool(0.75) {
            let roll: f64 = rng.gen();
            if roll < 0.3 && i < ORDINALS.len() {
                push_words(&mut tokens, ORDINALS[i]);
            } else {
                push_words(&mut tokens, CONNECTIVES[rng.gen_range(0..CONNECTIVES.len())]);
            }
        }
        if rng.gen_bool(0.12) {
            push_words(&mut tokens, FILLERS[rng.gen_range(0..FILLERS.len())]);
        }
        let phrase = match action {
            LowLevelAction::TurnLeft => "turn left",
            LowLevelAction::TurnRight => "turn right",
            LowLevelAction::TiltUp => {
                if rng.gen_bool(0.5) {
                    "tilt up"
                } else {
                    "go up the step"
                }
            }
            LowLevelAction::TiltDown => {
                if rng.gen_bool(0.5) {
                    "tilt down"
                } else {
                    "go down the step"
                }
            }
            LowLevelAction::StepForward => match rng.gen_range(0..3) {
                0 => "go forward",
                1 => "step forward",
                _ => "walk forward",
            },
            LowLevelAction::EndEpisode => {
                if rng.gen_bool(0.5) {
                    "stop at the goal"
                } else {
                    "now stop"
                }
            }
        };
        push_words(&mut tokens, phrase);
    }
    Ok(tokens)
}

/// The motion-verb reading of an instruction: content tokens mapped back
/// to atomic actions, stop words ignored.
pub fn literal_actions(tokens: &[u16]) -> Vec<LowLevelAction> {
    tokens
        .iter()
        .filter_map(|&t| match vocab::token(t) {
            "left" => Some(LowLevelAction::TurnLeft),
            "right" => Some(LowLevelAction::TurnRight),
            "up" => Some(LowLevelAction::TiltUp),
            "down" => Some(LowLevelAction::TiltDown),
            "forward" => Some(LowLevelAction::StepForward),
            "stop" => Some(LowLevelAction::EndEpisode),
            _ => None,
        })
        .collect()
}

/// Replays the instruction's literal actions through the simulator and
/// reports whether they end the episode at the goal node.
pub fn replay_reaches_goal(world: &World, episode: &Episode) -> bool {
    let mut pose = episode.start_pose();
    for action in literal_actions(&episode.instruction_tokens) {
        let (next, done) = super::step_low(world, &pose, action);
        pose = next;
        if done {
            return pose.node == episode.goal();
        }
    }
    false
}
