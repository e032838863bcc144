//! Adapters for room-to-room style data files: connectivity graphs (node
//! pose matrices plus `unobstructed` adjacency) and episode records
//! (`scan`, `path`, `heading`, natural-language instructions).
//!
//! Schema violations are reported with the JSON path of the offending
//! field, e.g. `[3].unobstructed[2]`.

use std::path::Path;

use serde_json::Value;

use crate::corpus::{DataError, DataResult};
use crate::env::{sector_of, Episode, EnvError, World};
use crate::vocab;

/// A world loaded from a connectivity file, with the original viewpoint
/// identifiers (index = node id).
pub struct ConnectivityLoad {
    pub world: World,
    pub viewpoints: Vec<String>,
}

impl ConnectivityLoad {
    pub fn node_of(&self, viewpoint: &str) -> Option<usize> {
        self.viewpoints.iter().position(|v| v == viewpoint)
    }
}

fn schema(path: &Path, at: &str, message: impl std::fmt::Display) -> DataError {
    DataError::schema(path, format!("{at}: {message}"))
}

fn as_array<'v>(path: &Path, at: &str, v: &'v Value) -> DataResult<&'v Vec<Value>> {
    v.as_array()
        .ok_or_else(|| schema(path, at, "expected an array"))
}

fn as_str<'v>(path: &Path, at: &str, v: &'v Value) -> DataResult<&'v str> {
    v.as_str()
        .ok_or_else(|| schema(path, at, "expected a string"))
}

fn as_f64(path: &Path, at: &str, v: &Value) -> DataResult<f64> {
    v.as_f64()
        .ok_or_else(|| schema(path, at, "expected a number"))
}

fn as_bool(path: &Path, at: &str, v: &Value) -> DataResult<bool> {
    v.as_bool()
        .ok_or_else(|| schema(path, at, "expected a boolean"))
}

fn field<'v>(path: &Path, at: &str, obj: &'v Value, name: &str) -> DataResult<&'v Value> {
    obj.get(name)
        .ok_or_else(|| schema(path, &format!("{at}.{name}"), "missing field"))
}

/// Loads a connectivity file: a JSON array of records carrying `image_id`,
/// a 4x4 `pose` matrix (translation in entries 3, 7, 11), an `included`
/// flag, and a per-viewpoint `unobstructed` adjacency row.
pub fn load_connectivity(path: &Path) -> DataResult<ConnectivityLoad> {
    let root: Value = crate::corpus::read_json(path)?;
    let records = as_array(path, "$", &root)?;
    let n = records.len();

    let mut viewpoints = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    let mut included = Vec::with_capacity(n);
    let mut rows: Vec<Vec<bool>> = Vec::with_capacity(n);

    for (i, rec) in records.iter().enumerate() {
        let at = format!("[{i}]");
        viewpoints.push(as_str(path, &format!("{at}.image_id"), field(path, &at, rec, "image_id")?)?.to_string());
        let pose = as_array(path, &format!("{at}.pose"), field(path, &at, rec, "pose")?)?;
        if pose.len() != 16 {
            return Err(schema(path, &format!("{at}.pose"), "expected 16 entries"));
        }
        let mut xyz = [0.0; 3];
        for (slot, idx) in [(0usize, 3usize), (1, 7), (2, 11)] {
            xyz[slot] = as_f64(path, &format!("{at}.pose[{idx}]"), &pose[idx])?;
        }
        let height = match rec.get("height") {
            Some(h) => as_f64(path, &format!("{at}.height"), h)?,
            None => 0.0,
        };
        xyz[2] += height;
        positions.push(xyz);
        included.push(as_bool(
            path,
            &format!("{at}.included"),
            field(path, &at, rec, "included")?,
        )?);
        let row_v = as_array(
            path,
            &format!("{at}.unobstructed"),
            field(path, &at, rec, "unobstructed")?,
        )?;
        if row_v.len() != n {
            return Err(schema(
                path,
                &format!("{at}.unobstructed"),
                format!("expected {n} entries, got {}", row_v.len()),
            ));
        }
        let mut row = Vec::with_capacity(n);
        for (j, b) in row_v.iter().enumerate() {
            row.push(as_bool(path, &format!("{at}.unobstructed[{j}]"), b)?);
        }
        rows.push(row);
    }

    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if included[i] && included[j] && (rows[i][j] || rows[j][i]) {
                edges.push((i, j));
            }
        }
    }
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("connectivity")
        .trim_end_matches("_connectivity")
        .to_string();
    let world = World::from_parts(name, 0, 64, positions, &edges)?;
    Ok(ConnectivityLoad { world, viewpoints })
}

/// Loads an episode file: a JSON array of records with `scan`,
/// `path` (viewpoint ids), `heading` (radians), and `instructions`
/// (free text, tokenized by the shipped vocabulary with `<unk>` fallback).
/// One episode is produced per instruction.
pub fn load_r2r_episodes(
    path: &Path,
    connectivity: &ConnectivityLoad,
    d_th: f64,
) -> DataResult<Vec<Episode>> {
    let root: Value = crate::corpus::read_json(path)?;
    let records = as_array(path, "$", &root)?;
    let mut episodes = Vec::new();

    for (i, rec) in records.iter().enumerate() {
        let at = format!("[{i}]");
        let scan = as_str(path, &format!("{at}.scan"), field(path, &at, rec, "scan")?)?;
        let path_v = as_array(path, &format!("{at}.path"), field(path, &at, rec, "path")?)?;
        let mut node_path = Vec::with_capacity(path_v.len());
        for (j, vp) in path_v.iter().enumerate() {
            let vp_at = format!("{at}.path[{j}]");
            let vp_id = as_str(path, &vp_at, vp)?;
            let node = connectivity.node_of(vp_id).ok_or_else(|| {
                schema(path, &vp_at, format!("unknown viewpoint '{vp_id}'"))
            })?;
            node_path.push(node);
        }
        let heading = as_f64(
            path,
            &format!("{at}.heading"),
            field(path, &at, rec, "heading")?,
        )?;
        let heading_sector = sector_of(heading);
        let path_id = rec
            .get("path_id")
            .and_then(|v| v.as_u64())
            .unwrap_or(i as u64);
        let instructions = as_array(
            path,
            &format!("{at}.instructions"),
            field(path, &at, rec, "instructions")?,
        )?;
        for (k, instr) in instructions.iter().enumerate() {
            let text = as_str(path, &format!("{at}.instructions[{k}]"), instr)?;
            let episode = Episode {
                id: format!("{path_id}_{k}"),
                scan: scan.to_string(),
                instruction_tokens: vocab::tokenize(text),
                path: node_path.clone(),
                heading_sector,
                d_th,
            };
            episode
                .validate(&connectivity.world)
                .map_err(|e: EnvError| schema(path, &at, e))?;
            episodes.push(episode);
        }
    }
    Ok(episodes)
}
