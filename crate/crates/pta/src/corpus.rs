//! Corpus generation and the on-disk schemas for worlds, episode splits,
//! and the corpus manifest.
//!
//! Reference paths are the atomic-step-optimal routes from the start pose,
//! so the teacher rollout is exactly as short as the best possible action
//! sequence.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    generate_instruction, generate_world, optimal_low_level_path, replay_reaches_goal, AgentPose,
    EnvError, Episode, World, SECTORS,
};
use crate::train::WorldMap;
use crate::vocab;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error(transparent)]
    Env(#[from] EnvError),
}

impl DataError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
        let path = path.into();
        move |source| DataError::Io { path, source }
    }

    pub fn schema(path: impl Into<PathBuf>, message: impl Into<String>) -> DataError {
        DataError::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type DataResult<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_train_worlds: usize,
    pub n_unseen_worlds: usize,
    pub nodes_per_world: usize,
    pub episodes_per_world: usize,
    /// Episodes per train world held out as validation-seen.
    pub val_seen_per_world: usize,
    pub d_feat: usize,
    pub radius: f64,
    pub area: [f64; 3],
    pub d_th: f64,
    pub min_hops: usize,
    pub max_hops: usize,
    /// Episodes whose teacher rollout exceeds this are resampled, keeping
    /// instructions short.
    pub max_teacher_steps: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train_worlds: 20,
            n_unseen_worlds: 5,
            nodes_per_world: 12,
            episodes_per_world: 40,
            val_seen_per_world: 6,
            d_feat: 64,
            radius: 4.5,
            area: [12.0, 12.0, 0.4],
            d_th: 3.0,
            min_hops: 2,
            max_hops: 3,
            max_teacher_steps: 14,
        }
    }
}

impl CorpusConfig {
    /// A few small worlds; handy for tests.
    pub fn tiny(seed: u64) -> Self {
        Self {
            seed,
            n_train_worlds: 2,
            n_unseen_worlds: 1,
            nodes_per_world: 8,
            episodes_per_world: 6,
            val_seen_per_world: 2,
            d_feat: 16,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub vocab_version: u32,
    pub seed: u64,
    pub config: CorpusConfig,
    pub train_worlds: Vec<String>,
    pub unseen_worlds: Vec<String>,
    pub world_files: Vec<String>,
    pub episode_files: BTreeMap<String, String>,
}

pub struct Corpus {
    pub worlds: WorldMap,
    pub train: Vec<Episode>,
    pub val_seen: Vec<Episode>,
    pub val_unseen: Vec<Episode>,
    pub manifest: CorpusManifest,
}

fn world_seed(corpus_seed: u64, index: usize, unseen: bool) -> u64 {
    corpus_seed
        .wrapping_mul(127)
        .wrapping_add(index as u64)
        .wrapping_add(if unseen { 0x8000_0000 } else { 0 })
}

fn build_world(cfg: &CorpusConfig, index: usize, unseen: bool) -> DataResult<World> {
    let seed = world_seed(cfg.seed, index, unseen);
    let mut world = generate_world(
        seed,
        cfg.nodes_per_world,
        cfg.radius,
        cfg.area,
        cfg.d_feat,
    )?;
    world.name = if unseen {
        format!("unseen_w{index:02}")
    } else {
        format!("train_w{index:02}")
    };
    Ok(world)
}

fn build_episodes(
    world: &World,
    cfg: &CorpusConfig,
    world_index: usize,
    unseen: bool,
) -> DataResult<Vec<Episode>> {
    let mut episodes = Vec::with_capacity(cfg.episodes_per_world);
    let base = world_seed(cfg.seed, world_index, unseen) ^ 0xE915_0D5B;
    for e in 0..cfg.episodes_per_world {
        let mut rng = ChaCha8Rng::seed_from_u64(base.wrapping_add(e as u64 * 7919));
        let episode = sample_episode(world, cfg, &mut rng, e)?;
        episodes.push(episode);
    }
    Ok(episodes)
}

fn sample_episode(
    world: &World,
    cfg: &CorpusConfig,
    rng: &mut ChaCha8Rng,
    index: usize,
) -> DataResult<Episode> {
    for _attempt in 0..200 {
        let start = rng.gen_range(0..world.n_nodes());
        let heading = rng.gen_range(0..SECTORS) as u8;
        let Some(goal) =
            crate::env::sample_goal(world, start, cfg.min_hops, cfg.max_hops, rng)
        else {
            continue;
        };
        let pose = AgentPose::level(start, heading);
        let Ok((path, steps)) = optimal_low_level_path(world, &pose, goal) else {
            continue;
        };
        if steps > cfg.max_teacher_steps {
            continue;
        }
        let mut episode = Episode {
            id: format!("{}_e{index:03}", world.name),
            scan: world.name.clone(),
            instruction_tokens: Vec::new(),
            path,
            heading_sector: heading,
            d_th: cfg.d_th,
        };
        episode.instruction_tokens = generate_instruction(world, &episode, rng)?;
        if !replay_reaches_goal(world, &episode) {
            continue;
        }
        return Ok(episode);
    }
    Err(DataError::Env(EnvError::Generation(format!(
        "no valid episode for world {} after 200 attempts",
        world.name
    ))))
}

/// Generates the full corpus in memory: disjoint train and unseen worlds,
/// per-world episode sets, and the train / val-seen / val-unseen splits.
pub fn generate_corpus(cfg: &CorpusConfig) -> DataResult<Corpus> {
    let mut worlds = WorldMap::new();
    let mut train = Vec::new();
    let mut val_seen = Vec::new();
    let mut val_unseen = Vec::new();
    let mut train_names = Vec::new();
    let mut unseen_names = Vec::new();

    for i in 0..cfg.n_train_worlds {
        let world = build_world(cfg, i, false)?;
        let mut episodes = build_episodes(&world, cfg, i, false)?;
        let held_out = cfg.val_seen_per_world.min(episodes.len());
        let split_at = episodes.len() - held_out;
        val_seen.extend(episodes.split_off(split_at));
        train.extend(episodes);
        train_names.push(world.name.clone());
        worlds.insert(world.name.clone(), world);
    }
    for i in 0..cfg.n_unseen_worlds {
        let world = build_world(cfg, i, true)?;
        val_unseen.extend(build_episodes(&world, cfg, i, true)?);
        unseen_names.push(world.name.clone());
        worlds.insert(world.name.clone(), world);
    }

    let manifest = CorpusManifest {
        version: 1,
        vocab_version: vocab::VOCAB_VERSION,
        seed: cfg.seed,
        config: cfg.clone(),
        train_worlds: train_names,
        unseen_worlds: unseen_names,
        world_files: Vec::new(),
        episode_files: BTreeMap::new(),
    };
    Ok(Corpus {
        worlds,
        train,
        val_seen,
        val_unseen,
        manifest,
    })
}

// ── on-disk schemas ─────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct WorldFileNode {
    id: usize,
    xyz: [f64; 3],
}

/// World file: `{nodes: [{id, xyz}], edges: [[a, b]], seed, d_feat}`.
#[derive(Serialize, Deserialize)]
struct WorldFile {
    nodes: Vec<WorldFileNode>,
    edges: Vec<(usize, usize)>,
    seed: u64,
    d_feat: usize,
}

pub fn save_world(world: &World, path: &Path) -> DataResult<()> {
    let file = WorldFile {
        nodes: (0..world.n_nodes())
            .map(|id| WorldFileNode {
                id,
                xyz: world.position(id),
            })
            .collect(),
        edges: world.edges(),
        seed: world.seed,
        d_feat: world.d_feat,
    };
    write_json(path, &file)
}

/// Loads a world file; the scan name is the file stem. Features are
/// resynthesized deterministically from the stored seed.
pub fn load_world(path: &Path) -> DataResult<World> {
    let file: WorldFile = read_json(path)?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| DataError::schema(path, "world file needs a UTF-8 stem"))?
        .to_string();
    let mut positions = vec![[0.0; 3]; file.nodes.len()];
    for (i, node) in file.nodes.iter().enumerate() {
        if node.id >= positions.len() {
            return Err(DataError::schema(
                path,
                format!("nodes[{i}].id {} out of range", node.id),
            ));
        }
        positions[node.id] = node.xyz;
    }
    World::from_parts(name, file.seed, file.d_feat, positions, &file.edges)
        .map_err(DataError::from)
}

pub fn save_episodes(episodes: &[Episode], path: &Path) -> DataResult<()> {
    write_json(path, &episodes)
}

pub fn load_episodes(path: &Path) -> DataResult<Vec<Episode>> {
    read_json(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> DataResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(DataError::io(path))?;
    }
    let file = fs::File::create(path).map_err(DataError::io(path))?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, value)
        .map_err(|e| DataError::schema(path, e.to_string()))?;
    writer.flush().map_err(DataError::io(path))?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> DataResult<T> {
    let file = fs::File::open(path).map_err(DataError::io(path))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| DataError::schema(path, e.to_string()))
}

/// Writes the corpus to `out_dir`: `manifest.json`, `worlds/*.json`, and
/// one episode file per split.
pub fn save_corpus(corpus: &mut Corpus, out_dir: &Path) -> DataResult<()> {
    let worlds_dir = out_dir.join("worlds");
    fs::create_dir_all(&worlds_dir).map_err(DataError::io(out_dir))?;
    let mut world_files = Vec::new();
    for world in corpus.worlds.values() {
        let rel = format!("worlds/{}.json", world.name);
        save_world(world, &out_dir.join(&rel))?;
        world_files.push(rel);
    }
    let mut episode_files = BTreeMap::new();
    for (split, episodes) in [
        ("train", &corpus.train),
        ("val_seen", &corpus.val_seen),
        ("val_unseen", &corpus.val_unseen),
    ] {
        let rel = format!("episodes/{split}.json");
        save_episodes(episodes, &out_dir.join(&rel))?;
        episode_files.insert(split.to_string(), rel);
    }
    corpus.manifest.world_files = world_files;
    corpus.manifest.episode_files = episode_files;
    write_json(&out_dir.join("manifest.json"), &corpus.manifest)
}

/// Loads a corpus previously written by [`save_corpus`].
pub fn load_corpus(dir: &Path) -> DataResult<Corpus> {
    let manifest: CorpusManifest = read_json(&dir.join("manifest.json"))?;
    let mut worlds = WorldMap::new();
    for rel in &manifest.world_files {
        let world = load_world(&dir.join(rel))?;
        worlds.insert(world.name.clone(), world);
    }
    let split = |name: &str| -> DataResult<Vec<Episode>> {
        let rel = manifest.episode_files.get(name).ok_or_else(|| {
            DataError::schema(dir.join("manifest.json"), format!("missing split '{name}'"))
        })?;
        let episodes = load_episodes(&dir.join(rel))?;
        for ep in &episodes {
            let world = worlds.get(&ep.scan).ok_or_else(|| {
                DataError::schema(dir.join(rel), format!("episode {} references unknown world {}", ep.id, ep.scan))
            })?;
            ep.validate(world)?;
        }
        Ok(episodes)
    };
    let train = split("train")?;
    let val_seen = split("val_seen")?;
    let val_unseen = split("val_unseen")?;
    Ok(Corpus {
        worlds,
        train,
        val_seen,
        val_unseen,
        manifest,
    })
}
