//! Panoramic observations: the 3 x 12 grid of per-view features with
//! appended heading/elevation coordinates, and the candidate views used by
//! the high-level head.

use super::{AgentPose, EnvResult, World, ELEV_ROWS, SECTORS, SECTOR_DEG, VIEWS};

/// One view: raw features plus `(sin phi, cos phi, sin theta)` relative to
/// the agent's current heading.
#[derive(Debug, Clone)]
pub struct ObservationView {
    pub feature: Vec<f64>,
    pub coord: [f64; 3],
}

impl ObservationView {
    /// Feature with the coordinate vector appended; the model input.
    pub fn with_coord(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.feature.len() + 3);
        v.extend_from_slice(&self.feature);
        v.extend_from_slice(&self.coord);
        v
    }
}

/// The full 36-view grid, elevation-major: row 0 looks down 30 degrees,
/// row 1 level, row 2 up; within a row, column c looks `c * 30` degrees
/// clockwise of the current heading.
#[derive(Debug, Clone)]
pub struct PanoramicObservation {
    views: Vec<ObservationView>,
}

impl PanoramicObservation {
    pub fn views(&self) -> &[ObservationView] {
        &self.views
    }

    pub fn view(&self, row: usize, col: usize) -> &ObservationView {
        &self.views[row * SECTORS + col]
    }
}

fn rel_coord(col: usize, row: usize) -> [f64; 3] {
    let phi = super::wrap_deg(col as f64 * SECTOR_DEG).to_radians();
    let theta = ((row as f64 - 1.0) * SECTOR_DEG).to_radians();
    [phi.sin(), phi.cos(), theta.sin()]
}

/// Renders the panoramic grid at a pose. Pure: identical (world, pose)
/// yield identical observations. Changing the heading cyclically shifts
/// the columns of the same 36 feature vectors.
pub fn observe(world: &World, pose: &AgentPose) -> EnvResult<PanoramicObservation> {
    world.check_pose(pose)?;
    let mut views = Vec::with_capacity(VIEWS);
    for row in 0..ELEV_ROWS {
        for col in 0..SECTORS {
            let abs_sector = (pose.heading_sector as usize + col) % SECTORS;
            let feature = world.feature(pose.node, row * SECTORS + abs_sector).to_vec();
            views.push(ObservationView {
                feature,
                coord: rel_coord(col, row),
            });
        }
    }
    Ok(PanoramicObservation { views })
}

/// A navigable destination as the high-level head sees it: the view in the
/// neighbor's direction (level row unless the height difference demands a
/// tilted row), with the relative coordinate vector appended.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub node: usize,
    pub view: ObservationView,
}

/// Candidate views for all neighbors of the current node, sorted by node id.
pub fn candidate_views(world: &World, pose: &AgentPose) -> EnvResult<Vec<Candidate>> {
    world.check_pose(pose)?;
    let mut out = Vec::new();
    for &nb in world.neighbors(pose.node) {
        let abs_sector = world.sector_towards(pose.node, nb) as usize;
        let elev = super::elevation_sector_towards(world, pose.node, nb);
        let row = (elev + 1) as usize;
        let rel_col = (abs_sector + SECTORS - pose.heading_sector as usize) % SECTORS;
        let feature = world.feature(pose.node, row * SECTORS + abs_sector).to_vec();
        out.push(Candidate {
            node: nb,
            view: ObservationView {
                feature,
                coord: rel_coord(rel_col, row),
            },
        });
    }
    Ok(out)
}
