//! Graph-world navigation environment: metric worlds, discretized agent
//! poses, panoramic observations, dual action interfaces, and teacher
//! oracles.
//!
//! Geometry conventions, fixed across the crate:
//! - azimuth `phi = atan2(dx, dy)` in (-pi, pi], so 0 points along +y and
//!   positive angles turn clockwise (toward +x);
//! - 12 heading sectors of 30 degrees; sector `h` is centered at `h * 30`
//!   degrees;
//! - 3 elevation sectors {-1, 0, +1} mapping to pitch {-30, 0, +30} degrees.

mod generate;
mod instruction;
mod observe;
mod teacher;

pub use generate::{generate_world, geodesic_distance, optimal_low_level_path, sample_goal, shortest_path};
pub use instruction::{generate_instruction, literal_actions, replay_reaches_goal};
pub use observe::{candidate_views, observe, Candidate, ObservationView, PanoramicObservation};
pub use teacher::{advance_progress, teacher_high, teacher_low, teacher_rollout};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SECTORS: usize = 12;
pub const SECTOR_DEG: f64 = 30.0;
pub const ELEV_ROWS: usize = 3;
pub const VIEWS: usize = SECTORS * ELEV_ROWS;

/// Height difference below which a neighbor counts as level for the
/// teacher's tilt rule.
pub const ELEV_THRESHOLD: f64 = 0.75;

/// Step cap: low-level episodes get three teacher lengths, never less
/// than 23 atomic steps.
pub const MIN_STEP_CAP: usize = 23;

pub fn step_cap(teacher_len: usize) -> usize {
    MIN_STEP_CAP.max(3 * teacher_len)
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("node {target} is not adjacent to node {current}")]
    NotAdjacent { current: usize, target: usize },
    #[error("teacher oracle failure: {0}")]
    Oracle(String),
    #[error("world generation failed: {0}")]
    Generation(String),
    #[error("no path between node {from} and node {to}")]
    PathNotFound { from: usize, to: usize },
    #[error("invalid episode data: {0}")]
    Data(String),
}

pub type EnvResult<T> = std::result::Result<T, EnvError>;

/// Navigable world: metric node positions, symmetric adjacency, and a
/// dense per-(node, view) feature table. Immutable after construction.
pub struct World {
    pub name: String,
    pub seed: u64,
    pub d_feat: usize,
    positions: Vec<[f64; 3]>,
    adjacency: Vec<Vec<usize>>,
    features: Vec<f64>,
}

impl World {
    /// Builds a world from explicit geometry, synthesizing features from
    /// `seed` (see [`generate::synthesize_features`]).
    pub fn from_parts(
        name: impl Into<String>,
        seed: u64,
        d_feat: usize,
        positions: Vec<[f64; 3]>,
        edges: &[(usize, usize)],
    ) -> EnvResult<World> {
        let n = positions.len();
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(EnvError::Data("non-finite node position".into()));
        }
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n || a == b {
                return Err(EnvError::Data(format!("bad edge ({a}, {b})")));
            }
            if !adjacency[a].contains(&b) {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
        for adj in adjacency.iter_mut() {
            adj.sort_unstable();
        }
        let features = generate::synthesize_features(seed, d_feat, &positions, &adjacency);
        Ok(World {
            name: name.into(),
            seed,
            d_feat,
            positions,
            adjacency,
            features,
        })
    }

    /// Replaces the synthetic feature table with an externally supplied one
    /// (row-major `[node][view][feat]`), e.g. real image features.
    pub fn set_features(&mut self, d_feat: usize, features: Vec<f64>) -> EnvResult<()> {
        if features.len() != self.n_nodes() * VIEWS * d_feat {
            return Err(EnvError::Data(format!(
                "feature table length {} != {} nodes x {VIEWS} views x {d_feat}",
                features.len(),
                self.n_nodes()
            )));
        }
        self.d_feat = d_feat;
        self.features = features;
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.positions.len()
    }

    pub fn position(&self, node: usize) -> [f64; 3] {
        self.positions[node]
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    /// Canonical (a < b) edge list.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, adj) in self.adjacency.iter().enumerate() {
            for &b in adj {
                if a < b {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Feature vector of one absolute view (row-major index `row * 12 + sector`).
    pub fn feature(&self, node: usize, view: usize) -> &[f64] {
        let base = (node * VIEWS + view) * self.d_feat;
        &self.features[base..base + self.d_feat]
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        euclidean(self.positions[a], self.positions[b])
    }

    /// Compass azimuth of the direction a -> b.
    pub fn azimuth(&self, a: usize, b: usize) -> f64 {
        let pa = self.positions[a];
        let pb = self.positions[b];
        (pb[0] - pa[0]).atan2(pb[1] - pa[1])
    }

    /// Heading sector containing the direction a -> b.
    pub fn sector_towards(&self, a: usize, b: usize) -> u8 {
        sector_of(self.azimuth(a, b))
    }

    pub fn check_pose(&self, pose: &AgentPose) -> EnvResult<()> {
        if pose.node >= self.n_nodes() {
            return Err(EnvError::InvalidPose(format!(
                "node {} out of range ({} nodes)",
                pose.node,
                self.n_nodes()
            )));
        }
        if pose.heading_sector as usize >= SECTORS || pose.elevation_sector.abs() > 1 {
            return Err(EnvError::InvalidPose(format!("{pose:?}")));
        }
        Ok(())
    }
}

pub fn euclidean(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Sector whose 30-degree span contains azimuth `phi` (radians).
pub fn sector_of(phi: f64) -> u8 {
    let deg = phi.to_degrees();
    let s = (deg / SECTOR_DEG).round() as i64;
    (s.rem_euclid(SECTORS as i64)) as u8
}

/// Wraps an angle in degrees to (-180, 180].
pub fn wrap_deg(deg: f64) -> f64 {
    let mut d = deg % 360.0;
    if d <= -180.0 {
        d += 360.0;
    } else if d > 180.0 {
        d -= 360.0;
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentPose {
    pub node: usize,
    /// 0..12, each sector spanning 30 degrees of azimuth.
    pub heading_sector: u8,
    /// -1 (down), 0 (level), +1 (up).
    pub elevation_sector: i8,
}

impl AgentPose {
    pub fn new(node: usize, heading_sector: u8, elevation_sector: i8) -> Self {
        Self {
            node,
            heading_sector,
            elevation_sector,
        }
    }

    pub fn level(node: usize, heading_sector: u8) -> Self {
        Self::new(node, heading_sector, 0)
    }
}

/// The six atomic locomotion commands, in canonical index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum LowLevelAction {
    TurnLeft = 0,
    TurnRight = 1,
    TiltUp = 2,
    TiltDown = 3,
    StepForward = 4,
    EndEpisode = 5,
}

pub const N_LOW_ACTIONS: usize = 6;

impl LowLevelAction {
    pub const ALL: [LowLevelAction; 6] = [
        LowLevelAction::TurnLeft,
        LowLevelAction::TurnRight,
        LowLevelAction::TiltUp,
        LowLevelAction::TiltDown,
        LowLevelAction::StepForward,
        LowLevelAction::EndEpisode,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// High-level command: teleport to an adjacent viewpoint or stop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HighLevelAction {
    Stop,
    MoveTo(usize),
}

/// One navigation task: an instruction, a reference path, and a goal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    /// Name of the world ("scan") this episode runs in.
    pub scan: String,
    pub instruction_tokens: Vec<u16>,
    /// Reference trajectory; starts at the start node, consecutive nodes
    /// adjacent, ends at the goal.
    pub path: Vec<usize>,
    pub heading_sector: u8,
    pub d_th: f64,
}

impl Episode {
    pub fn start_pose(&self) -> AgentPose {
        AgentPose::level(self.path[0], self.heading_sector)
    }

    pub fn goal(&self) -> usize {
        *self.path.last().unwrap()
    }

    pub fn validate(&self, world: &World) -> EnvResult<()> {
        if self.path.is_empty() {
            return Err(EnvError::Data(format!("episode {}: empty path", self.id)));
        }
        if self.d_th <= 0.0 {
            return Err(EnvError::Data(format!(
                "episode {}: non-positive d_th",
                self.id
            )));
        }
        for w in self.path.windows(2) {
            if !world.has_edge(w[0], w[1]) {
                return Err(EnvError::Data(format!(
                    "episode {}: path nodes {} and {} are not adjacent",
                    self.id, w[0], w[1]
                )));
            }
        }
        if self.path.iter().any(|&n| n >= world.n_nodes()) {
            return Err(EnvError::Data(format!(
                "episode {}: path node out of range",
                self.id
            )));
        }
        world.check_pose(&self.start_pose())
    }

    /// Positions of the reference path, for metric computation.
    pub fn reference_positions(&self, world: &World) -> Vec<[f64; 3]> {
        self.path.iter().map(|&n| world.position(n)).collect()
    }
}

/// Applies one low-level action. Never fails: a forward step with no
/// navigable neighbor in the facing sector is a wasted step, not an error.
pub fn step_low(world: &World, pose: &AgentPose, action: LowLevelAction) -> (AgentPose, bool) {
    let mut next = *pose;
    match action {
        LowLevelAction::TurnLeft => {
            next.heading_sector = ((pose.heading_sector as usize + SECTORS - 1) % SECTORS) as u8;
        }
        LowLevelAction::TurnRight => {
            next.heading_sector = ((pose.heading_sector as usize + 1) % SECTORS) as u8;
        }
        LowLevelAction::TiltUp => {
            next.elevation_sector = (pose.elevation_sector + 1).min(1);
        }
        LowLevelAction::TiltDown => {
            next.elevation_sector = (pose.elevation_sector - 1).max(-1);
        }
        LowLevelAction::StepForward => {
            if let Some(target) = forward_neighbor(world, pose) {
                next.node = target;
            }
        }
        LowLevelAction::EndEpisode => return (next, true),
    }
    (next, false)
}

/// The neighbor a forward step would move to: the unobstructed neighbor
/// whose azimuth falls in the facing sector, preferring the smallest
/// relative angle, then the smallest distance, then the smallest id.
pub fn forward_neighbor(world: &World, pose: &AgentPose) -> Option<usize> {
    let heading_deg = pose.heading_sector as f64 * SECTOR_DEG;
    let mut best: Option<(f64, f64, usize)> = None;
    for &nb in world.neighbors(pose.node) {
        if world.sector_towards(pose.node, nb) != pose.heading_sector {
            continue;
        }
        let rel = wrap_deg(world.azimuth(pose.node, nb).to_degrees() - heading_deg).abs();
        let dist = world.distance(pose.node, nb);
        let key = (rel, dist, nb);
        if best.map_or(true, |b| key < b) {
            best = Some(key);
        }
    }
    best.map(|(_, _, nb)| nb)
}

/// Applies one high-level action: teleport to an adjacent node (arrival
/// heading faces the direction of travel) or stop.
pub fn step_high(
    world: &World,
    pose: &AgentPose,
    action: HighLevelAction,
) -> EnvResult<(AgentPose, bool)> {
    match action {
        HighLevelAction::Stop => Ok((*pose, true)),
        HighLevelAction::MoveTo(target) => {
            if !world.has_edge(pose.node, target) {
                return Err(EnvError::NotAdjacent {
                    current: pose.node,
                    target,
                });
            }
            let heading = world.sector_towards(pose.node, target);
            Ok((AgentPose::new(target, heading, pose.elevation_sector), false))
        }
    }
}

/// Elevation sector of `target` as seen from `from`: level unless the
/// height difference exceeds [`ELEV_THRESHOLD`].
pub fn elevation_sector_towards(world: &World, from: usize, target: usize) -> i8 {
    let dz = world.position(target)[2] - world.position(from)[2];
    if dz.abs() <= ELEV_THRESHOLD {
        0
    } else if dz > 0.0 {
        1
    } else {
        -1
    }
}
