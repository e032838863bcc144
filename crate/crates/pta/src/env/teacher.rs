//! Teacher oracles: the supervised ground-truth action at each step is the
//! one reaching the next target viewpoint in the minimum number of steps.

use super::{
    elevation_sector_towards, generate::shortest_path, AgentPose, EnvError, EnvResult, Episode,
    HighLevelAction, LowLevelAction, World, SECTORS,
};

/// Advances `progress` past every reference node the agent currently
/// stands on. `progress` always indexes the next unreached reference node.
pub fn advance_progress(episode: &Episode, node: usize, progress: &mut usize) {
    while *progress < episode.path.len() && episode.path[*progress] == node {
        *progress += 1;
    }
}

/// Next node on the way to the next unreached reference node: the node
/// itself when adjacent (or identical), otherwise the first hop of the
/// minimum-hop route back to it.
fn next_hop(world: &World, current: usize, target: usize) -> EnvResult<usize> {
    if world.has_edge(current, target) {
        return Ok(target);
    }
    let path = shortest_path(world, current, target).map_err(|_| {
        EnvError::Oracle(format!(
            "reference node {target} unreachable from node {current}"
        ))
    })?;
    Ok(path[1])
}

/// Ground-truth low-level action: end the episode once every reference
/// node is reached; otherwise face the next hop (turning the cheaper way,
/// ties to the right), match its elevation sector, then step forward.
pub fn teacher_low(
    world: &World,
    pose: &AgentPose,
    episode: &Episode,
    progress: usize,
) -> EnvResult<LowLevelAction> {
    world.check_pose(pose)?;
    if progress >= episode.path.len() {
        return Ok(LowLevelAction::EndEpisode);
    }
    let hop = next_hop(world, pose.node, episode.path[progress])?;
    let desired = world.sector_towards(pose.node, hop);
    if desired != pose.heading_sector {
        let right_turns =
            (desired as usize + SECTORS - pose.heading_sector as usize) % SECTORS;
        return Ok(if right_turns <= SECTORS / 2 {
            LowLevelAction::TurnRight
        } else {
            LowLevelAction::TurnLeft
        });
    }
    let target_elev = elevation_sector_towards(world, pose.node, hop);
    if target_elev != pose.elevation_sector {
        return Ok(if target_elev > pose.elevation_sector {
            LowLevelAction::TiltUp
        } else {
            LowLevelAction::TiltDown
        });
    }
    Ok(LowLevelAction::StepForward)
}

/// Ground-truth high-level action: the next hop toward the next unreached
/// reference node, or stop once the path is exhausted. On the reference
/// path this is exactly `path[i] -> path[i+1]`.
pub fn teacher_high(
    world: &World,
    pose: &AgentPose,
    episode: &Episode,
    progress: usize,
) -> EnvResult<HighLevelAction> {
    world.check_pose(pose)?;
    if progress >= episode.path.len() {
        return Ok(HighLevelAction::Stop);
    }
    Ok(HighLevelAction::MoveTo(next_hop(
        world,
        pose.node,
        episode.path[progress],
    )?))
}

/// Full teacher rollout from the episode start; returns the action
/// sequence (ending with end-episode) and the final pose.
pub fn teacher_rollout(
    world: &World,
    episode: &Episode,
) -> EnvResult<(Vec<LowLevelAction>, AgentPose)> {
    let mut pose = episode.start_pose();
    let mut progress = 0;
    advance_progress(episode, pose.node, &mut progress);
    let mut actions = Vec::new();
    // generous safety bound; teacher rollouts terminate long before it
    let bound = 40 * (episode.path.len() + 2) + 60;
    while actions.len() < bound {
        let action = teacher_low(world, &pose, episode, progress)?;
        actions.push(action);
        let (next, done) = super::step_low(world, &pose, action);
        pose = next;
        advance_progress(episode, pose.node, &mut progress);
        if done {
            return Ok((actions, pose));
        }
    }
    Err(EnvError::Oracle(format!(
        "teacher rollout for episode {} exceeded {bound} steps",
        episode.id
    )))
}
