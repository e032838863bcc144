//! Synthetic world generation, shortest paths, and the atomic-step planner
//! used to build episodes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    sector_of, wrap_deg, AgentPose, EnvError, EnvResult, World, ELEV_ROWS, SECTORS, SECTOR_DEG,
    VIEWS,
};

/// Degrees a neighbor must clear a sector boundary by, so that forward
/// semantics never sit on a rounding edge.
const SECTOR_MARGIN_DEG: f64 = 1.0;

const MAX_ATTEMPTS: usize = 400;

/// Generates a connected world with `n_nodes` uniform in the `area` cuboid
/// and edges between nodes within `radius`. Regenerates until the graph is
/// connected and every node sees at most one neighbor per heading sector
/// (with a margin off sector boundaries), which keeps forward motion
/// unambiguous.
pub fn generate_world(
    seed: u64,
    n_nodes: usize,
    radius: f64,
    area: [f64; 3],
    d_feat: usize,
) -> EnvResult<World> {
    if n_nodes < 2 {
        return Err(EnvError::Generation(format!(
            "need at least 2 nodes, got {n_nodes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let min_sep = (radius * 0.35).min(1.5);
    for _attempt in 0..MAX_ATTEMPTS {
        let Some(positions) = sample_positions(&mut rng, n_nodes, area, min_sep) else {
            continue;
        };
        let mut edges = Vec::new();
        for a in 0..n_nodes {
            for b in (a + 1)..n_nodes {
                if super::euclidean(positions[a], positions[b]) <= radius {
                    edges.push((a, b));
                }
            }
        }
        let world = World::from_parts(format!("w{seed}"), seed, d_feat, positions, &edges)?;
        if is_connected(&world) && sectors_unambiguous(&world) {
            return Ok(world);
        }
    }
    Err(EnvError::Generation(format!(
        "no valid layout after {MAX_ATTEMPTS} attempts (seed {seed}, {n_nodes} nodes, radius {radius})"
    )))
}

fn sample_positions(
    rng: &mut ChaCha8Rng,
    n: usize,
    area: [f64; 3],
    min_sep: f64,
) -> Option<Vec<[f64; 3]>> {
    let mut positions: Vec<[f64; 3]> = Vec::with_capacity(n);
    let mut rejections = 0;
    while positions.len() < n {
        let p = [
            rng.gen_range(0.0..area[0]),
            rng.gen_range(0.0..area[1]),
            if area[2] > 0.0 {
                rng.gen_range(0.0..area[2])
            } else {
                0.0
            },
        ];
        let horiz_ok = positions.iter().all(|q| {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            (dx * dx + dy * dy).sqrt() >= min_sep
        });
        if horiz_ok {
            positions.push(p);
        } else {
            rejections += 1;
            if rejections > 200 * n {
                return None;
            }
        }
    }
    Some(positions)
}

fn is_connected(world: &World) -> bool {
    let n = world.n_nodes();
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = stack.pop() {
        for &v in world.neighbors(u) {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                stack.push(v);
            }
        }
    }
    count == n
}

/// Every node's neighbors must occupy distinct heading sectors and stay
/// clear of sector boundaries.
fn sectors_unambiguous(world: &World) -> bool {
    for u in 0..world.n_nodes() {
        let mut taken = [false; SECTORS];
        for &v in world.neighbors(u) {
            let deg = world.azimuth(u, v).to_degrees();
            let sector = sector_of(world.azimuth(u, v)) as usize;
            let off_center = wrap_deg(deg - sector as f64 * SECTOR_DEG).abs();
            if off_center > SECTOR_DEG / 2.0 - SECTOR_MARGIN_DEG {
                return false;
            }
            if taken[sector] {
                return false;
            }
            taken[sector] = true;
        }
    }
    true
}

/// Deterministic synthetic features. Each node draws a base vector plus a
/// directional field, so nearby views of the same node correlate; views
/// whose sector faces an unobstructed neighbor additionally carry a global
/// "passage" signature, giving the policy a visual cue for navigability.
pub(super) fn synthesize_features(
    seed: u64,
    d_feat: usize,
    positions: &[[f64; 3]],
    adjacency: &[Vec<usize>],
) -> Vec<f64> {
    let n = positions.len();
    let mut features = vec![0.0; n * VIEWS * d_feat];

    let mut marker_rng = ChaCha8Rng::seed_from_u64(0x70A5_5A6E ^ seed.rotate_left(17));
    let passage: Vec<f64> = (0..d_feat).map(|_| marker_rng.gen_range(-1.0..1.0)).collect();

    for node in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((node as u64 + 1) * 0x5DEE_CE66));
        let base: Vec<f64> = (0..d_feat).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let amp: Vec<f64> = (0..d_feat).map(|_| rng.gen_range(-0.6..0.6)).collect();
        let phase: Vec<f64> = (0..d_feat)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        let elev_amp: Vec<f64> = (0..d_feat).map(|_| rng.gen_range(-0.4..0.4)).collect();

        let mut open = [false; SECTORS];
        for &nb in &adjacency[node] {
            let pa = positions[node];
            let pb = positions[nb];
            let az = (pb[0] - pa[0]).atan2(pb[1] - pa[1]);
            open[sector_of(az) as usize] = true;
        }

        for row in 0..ELEV_ROWS {
            let theta = (row as f64 - 1.0) * SECTOR_DEG.to_radians();
            for s in 0..SECTORS {
                let az = (s as f64 * SECTOR_DEG).to_radians();
                let view = row * SECTORS + s;
                let out = &mut features
                    [(node * VIEWS + view) * d_feat..(node * VIEWS + view + 1) * d_feat];
                for j in 0..d_feat {
                    let mut v = base[j] + amp[j] * (az - phase[j]).cos() + elev_amp[j] * theta.sin();
                    if open[s] {
                        v += passage[j];
                    }
                    out[j] = v;
                }
            }
        }
    }
    features
}

/// Minimum-hop path from `a` to `b`, ties broken toward the smallest next
/// node id (the lexicographically smallest of all minimum-hop paths).
pub fn shortest_path(world: &World, a: usize, b: usize) -> EnvResult<Vec<usize>> {
    if a == b {
        return Ok(vec![a]);
    }
    // hop counts to b, then greedy descent choosing the smallest id
    let dist = hop_distances(world, b);
    if dist[a] == usize::MAX {
        return Err(EnvError::PathNotFound { from: a, to: b });
    }
    let mut path = vec![a];
    let mut cur = a;
    while cur != b {
        let next = world
            .neighbors(cur)
            .iter()
            .copied()
            .filter(|&v| dist[v] + 1 == dist[cur])
            .min()
            .expect("descent step must exist on a finite-distance node");
        path.push(next);
        cur = next;
    }
    Ok(path)
}

fn hop_distances(world: &World, from: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; world.n_nodes()];
    dist[from] = 0;
    let mut queue = std::collections::VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        for &v in world.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Metric length of the shortest path by edge length (Dijkstra); used for
/// SPL geodesics.
pub fn geodesic_distance(world: &World, a: usize, b: usize) -> EnvResult<f64> {
    if a == b {
        return Ok(0.0);
    }
    let n = world.n_nodes();
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    dist[a] = 0.0;
    loop {
        let mut u = None;
        let mut best = f64::INFINITY;
        for i in 0..n {
            if !done[i] && dist[i] < best {
                best = dist[i];
                u = Some(i);
            }
        }
        let Some(u) = u else { break };
        if u == b {
            return Ok(dist[b]);
        }
        done[u] = true;
        for &v in world.neighbors(u) {
            let alt = dist[u] + world.distance(u, v);
            if alt < dist[v] {
                dist[v] = alt;
            }
        }
    }
    Err(EnvError::PathNotFound { from: a, to: b })
}

/// Node path minimizing the number of atomic low-level steps (turns +
/// forward moves) from a start pose to `goal`, via breadth-first search
/// over (node, heading) states. Returns the node sequence and the atomic
/// step count including the final end-episode action.
pub fn optimal_low_level_path(
    world: &World,
    start: &AgentPose,
    goal: usize,
) -> EnvResult<(Vec<usize>, usize)> {
    #[derive(Clone, Copy)]
    struct Back {
        prev: u32,
        moved: bool,
    }
    let n = world.n_nodes();
    let state = |node: usize, heading: usize| node * SECTORS + heading;
    let mut back: Vec<Option<Back>> = vec![None; n * SECTORS];
    let mut depth = vec![usize::MAX; n * SECTORS];
    let s0 = state(start.node, start.heading_sector as usize);
    depth[s0] = 0;
    let mut queue = std::collections::VecDeque::from([s0]);
    let mut found: Option<usize> = None;
    while let Some(s) = queue.pop_front() {
        let (node, heading) = (s / SECTORS, s % SECTORS);
        if node == goal {
            found = Some(s);
            break;
        }
        let mut successors = [(usize::MAX, false); 3];
        successors[0] = (state(node, (heading + SECTORS - 1) % SECTORS), false);
        successors[1] = (state(node, (heading + 1) % SECTORS), false);
        let pose = AgentPose::new(node, heading as u8, 0);
        if let Some(nb) = super::forward_neighbor(world, &pose) {
            successors[2] = (state(nb, heading), true);
        }
        for &(t, moved) in successors.iter().filter(|(t, _)| *t != usize::MAX) {
            if depth[t] == usize::MAX {
                depth[t] = depth[s] + 1;
                back[t] = Some(Back {
                    prev: s as u32,
                    moved,
                });
                queue.push_back(t);
            }
        }
    }
    let Some(mut s) = found else {
        return Err(EnvError::PathNotFound {
            from: start.node,
            to: goal,
        });
    };
    let steps = depth[s] + 1; // + end_episode
    let mut nodes = vec![s / SECTORS];
    while let Some(b) = back[s] {
        let prev = b.prev as usize;
        if b.moved {
            nodes.push(prev / SECTORS);
        }
        s = prev;
    }
    nodes.reverse();
    Ok((nodes, steps))
}

/// Uniformly samples a goal whose hop distance from `start` lies in
/// `[min_hops, max_hops]`.
pub fn sample_goal(
    world: &World,
    start: usize,
    min_hops: usize,
    max_hops: usize,
    rng: &mut ChaCha8Rng,
) -> Option<usize> {
    let dist = hop_distances(world, start);
    let mut candidates: Vec<usize> = (0..world.n_nodes())
        .filter(|&v| dist[v] != usize::MAX && dist[v] >= min_hops && dist[v] <= max_hops)
        .collect();
    candidates.sort_unstable();
    candidates.choose(rng).copied()
}

#[cfg(test)]
pub(crate) mod test_oracles {
    use super::*;

    /// Exhaustive simple-path enumeration; oracle for `shortest_path` on
    /// small graphs.
    pub fn brute_force_shortest(world: &World, a: usize, b: usize) -> Option<Vec<usize>> {
        let mut best: Option<Vec<usize>> = None;
        let mut stack = vec![a];
        let mut visited = vec![false; world.n_nodes()];
        visited[a] = true;
        fn dfs(
            world: &World,
            b: usize,
            stack: &mut Vec<usize>,
            visited: &mut Vec<bool>,
            best: &mut Option<Vec<usize>>,
        ) {
            let cur = *stack.last().unwrap();
            if cur == b {
                let better = match best {
                    None => true,
                    Some(p) => (stack.len(), &*stack) < (p.len(), p),
                };
                if better {
                    *best = Some(stack.clone());
                }
                return;
            }
            if let Some(p) = best {
                if stack.len() >= p.len() {
                    return;
                }
            }
            for &v in world.neighbors(cur) {
                if !visited[v] {
                    visited[v] = true;
                    stack.push(v);
                    dfs(world, b, stack, visited, best);
                    stack.pop();
                    visited[v] = false;
                }
            }
        }
        dfs(world, b, &mut stack, &mut visited, &mut best);
        best
    }
}
