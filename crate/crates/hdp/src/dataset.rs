//! Demonstration dataset: normalization statistics, binary file format, and
//! generation-time validation.
//!
//! File layout (little endian): magic `HDPD`, u32 version, u64 header
//! length, JSON header (world config, horizons, vocabulary, normalization
//! stats, master seed, episode count), then length-prefixed episode
//! records. Actions are 32-bit floats, tokens 16-bit ids.

use crate::error::{HdpError, Result};
use crate::expert::{generate_demonstration, horizons, task_vocabulary, Demonstration};
use crate::md4::Vocabulary;
use crate::rngcore::SeedTree;
use crate::sortworld::{reset, rollout, Action, WorldConfig};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;

/// Per-dimension min/max used to map data into [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub act_min: Vec<f32>,
    pub act_max: Vec<f32>,
    pub obs_min: Vec<f32>,
    pub obs_max: Vec<f32>,
}

const FLAT_RANGE: f32 = 1e-8;

fn norm_value(x: f32, min: f32, max: f32) -> f32 {
    if max - min < FLAT_RANGE {
        0.0
    } else {
        2.0 * (x - min) / (max - min) - 1.0
    }
}

fn denorm_value(v: f32, min: f32, max: f32) -> f32 {
    if max - min < FLAT_RANGE {
        min
    } else {
        min + (v + 1.0) * 0.5 * (max - min)
    }
}

impl NormStats {
    pub fn from_episodes(episodes: &[Demonstration]) -> Result<Self> {
        let first = episodes
            .first()
            .ok_or_else(|| HdpError::InvalidArgument("no episodes".into()))?;
        let act_dim = first.continuous.ncols();
        let obs_dim = first.observation.len();
        let mut act_min = vec![f32::INFINITY; act_dim];
        let mut act_max = vec![f32::NEG_INFINITY; act_dim];
        let mut obs_min = vec![f32::INFINITY; obs_dim];
        let mut obs_max = vec![f32::NEG_INFINITY; obs_dim];
        for ep in episodes {
            for row in ep.continuous.rows() {
                for (d, v) in row.iter().enumerate() {
                    act_min[d] = act_min[d].min(*v);
                    act_max[d] = act_max[d].max(*v);
                }
            }
            for (d, v) in ep.observation.iter().enumerate() {
                obs_min[d] = obs_min[d].min(*v as f32);
                obs_max[d] = obs_max[d].max(*v as f32);
            }
        }
        Ok(NormStats {
            act_min,
            act_max,
            obs_min,
            obs_max,
        })
    }

    pub fn normalize_actions(&self, raw: &Array2<f32>) -> Array2<f32> {
        Array2::from_shape_fn(raw.raw_dim(), |(r, c)| {
            norm_value(raw[[r, c]], self.act_min[c], self.act_max[c])
        })
    }

    pub fn denormalize_actions(&self, normed: &Array2<f32>) -> Array2<f32> {
        Array2::from_shape_fn(normed.raw_dim(), |(r, c)| {
            denorm_value(normed[[r, c]], self.act_min[c], self.act_max[c])
        })
    }

    pub fn normalize_obs(&self, obs: &[f64]) -> Vec<f32> {
        obs.iter()
            .enumerate()
            .map(|(d, v)| norm_value(*v as f32, self.obs_min[d], self.obs_max[d]))
            .collect()
    }
}

/// In-memory dataset with its generation provenance.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub world: WorldConfig,
    pub h_c: usize,
    pub h_d: usize,
    pub vocab: Vocabulary,
    pub norm: NormStats,
    pub master_seed: u64,
    pub episodes: Vec<Demonstration>,
}

pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    world: WorldConfig,
    h_c: usize,
    h_d: usize,
    vocab: Vocabulary,
    norm: NormStats,
    master_seed: u64,
    episode_count: u64,
}

/// Generate `count` validated demonstrations.
///
/// Episode streams derive from the master seed by index, so generation is
/// order-independent and reproducible.
pub fn generate_dataset(cfg: &WorldConfig, count: usize, master_seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(HdpError::InvalidArgument(
            "dataset needs at least one episode".into(),
        ));
    }
    cfg.validate()?;
    let (h_c, h_d) = horizons(cfg);
    let vocab = task_vocabulary(cfg.n_blocks)?;
    let tree = SeedTree::new(master_seed).derive("dataset", 0);
    let mut episodes = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = tree.derive("episode", i as u64).stream();
        episodes.push(generate_demonstration(cfg, h_c, h_d, i as u64, &mut rng)?);
    }
    let norm = NormStats::from_episodes(&episodes)?;
    Ok(Dataset {
        world: cfg.clone(),
        h_c,
        h_d,
        vocab,
        norm,
        master_seed,
        episodes,
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(b"HDPD");
    buf.write_u32::<LittleEndian>(DATASET_VERSION)?;
    let header = Header {
        version: DATASET_VERSION,
        world: ds.world.clone(),
        h_c: ds.h_c,
        h_d: ds.h_d,
        vocab: ds.vocab.clone(),
        norm: ds.norm.clone(),
        master_seed: ds.master_seed,
        episode_count: ds.episodes.len() as u64,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| HdpError::CorruptFile(format!("header encode: {e}")))?;
    buf.write_u64::<LittleEndian>(header_json.len() as u64)?;
    buf.extend_from_slice(&header_json);
    for ep in &ds.episodes {
        let mut rec: Vec<u8> = Vec::new();
        rec.write_u64::<LittleEndian>(ep.episode_index)?;
        rec.write_u16::<LittleEndian>(ep.permutation.len() as u16)?;
        for &p in &ep.permutation {
            rec.write_u16::<LittleEndian>(p as u16)?;
        }
        rec.write_u32::<LittleEndian>(ep.observation.len() as u32)?;
        for &o in &ep.observation {
            rec.write_f64::<LittleEndian>(o)?;
        }
        rec.write_u32::<LittleEndian>(ep.continuous.nrows() as u32)?;
        rec.write_u32::<LittleEndian>(ep.continuous.ncols() as u32)?;
        for v in ep.continuous.iter() {
            rec.write_f32::<LittleEndian>(*v)?;
        }
        rec.write_u32::<LittleEndian>(ep.discrete.len() as u32)?;
        for &t in &ep.discrete {
            rec.write_u16::<LittleEndian>(t)?;
        }
        rec.write_u32::<LittleEndian>(ep.segments.len() as u32)?;
        for &(a, b) in &ep.segments {
            rec.write_u32::<LittleEndian>(a)?;
            rec.write_u32::<LittleEndian>(b)?;
        }
        buf.write_u32::<LittleEndian>(rec.len() as u32)?;
        buf.extend_from_slice(&rec);
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let mut r = std::io::Cursor::new(&bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"HDPD" {
        return Err(HdpError::CorruptFile("bad dataset magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != DATASET_VERSION {
        return Err(HdpError::CorruptFile(format!(
            "unsupported dataset version {version}"
        )));
    }
    let hlen = r.read_u64::<LittleEndian>()? as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header: Header = serde_json::from_slice(&hbuf)
        .map_err(|e| HdpError::CorruptFile(format!("header decode: {e}")))?;
    let mut episodes = Vec::with_capacity(header.episode_count as usize);
    for _ in 0..header.episode_count {
        let rec_len = r.read_u32::<LittleEndian>()? as usize;
        let mut rec = vec![0u8; rec_len];
        r.read_exact(&mut rec)?;
        let mut rr = std::io::Cursor::new(&rec);
        let episode_index = rr.read_u64::<LittleEndian>()?;
        let n = rr.read_u16::<LittleEndian>()? as usize;
        let mut permutation = Vec::with_capacity(n);
        for _ in 0..n {
            permutation.push(rr.read_u16::<LittleEndian>()? as usize);
        }
        let obs_len = rr.read_u32::<LittleEndian>()? as usize;
        let mut observation = Vec::with_capacity(obs_len);
        for _ in 0..obs_len {
            observation.push(rr.read_f64::<LittleEndian>()?);
        }
        let rows = rr.read_u32::<LittleEndian>()? as usize;
        let cols = rr.read_u32::<LittleEndian>()? as usize;
        let mut continuous = Array2::zeros((rows, cols));
        for i in 0..rows {
            for j in 0..cols {
                continuous[[i, j]] = rr.read_f32::<LittleEndian>()?;
            }
        }
        let tlen = rr.read_u32::<LittleEndian>()? as usize;
        let mut discrete = Vec::with_capacity(tlen);
        for _ in 0..tlen {
            discrete.push(rr.read_u16::<LittleEndian>()?);
        }
        let slen = rr.read_u32::<LittleEndian>()? as usize;
        let mut segments = Vec::with_capacity(slen);
        for _ in 0..slen {
            let a = rr.read_u32::<LittleEndian>()?;
            let b = rr.read_u32::<LittleEndian>()?;
            segments.push((a, b));
        }
        episodes.push(Demonstration {
            observation,
            continuous,
            discrete,
            permutation,
            episode_index,
            segments,
        });
    }
    Ok(Dataset {
        world: header.world,
        h_c: header.h_c,
        h_d: header.h_d,
        vocab: header.vocab,
        norm: header.norm,
        master_seed: header.master_seed,
        episodes,
    })
}

/// Git-style content hash of a file (hex SHA-256).
pub fn content_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Re-roll every episode and assert reward 1.0 plus structural invariants.
pub fn validate_dataset(ds: &Dataset) -> Result<()> {
    let tree = SeedTree::new(ds.master_seed).derive("dataset", 0);
    for ep in &ds.episodes {
        // Reset must reproduce bit-identically from the episode stream.
        let mut rng = tree.derive("episode", ep.episode_index).stream();
        let sampled = crate::expert::sample_permutation(ds.world.n_blocks, &mut rng);
        if sampled != ep.permutation {
            return Err(HdpError::Validation(format!(
                "episode {}: permutation does not replay",
                ep.episode_index
            )));
        }
        let (state, obs) = reset(&ds.world, &ep.permutation, &mut rng)?;
        if obs != ep.observation {
            return Err(HdpError::Validation(format!(
                "episode {}: observation does not replay",
                ep.episode_index
            )));
        }
        let actions = (0..ep.continuous.nrows()).map(|i| Action {
            x: ep.continuous[[i, 0]] as f64,
            y: ep.continuous[[i, 1]] as f64,
            grip: ep.continuous[[i, 2]] as f64,
        });
        let (terminal, _) = rollout(&ds.world, &state, actions);
        let r = crate::sortworld::reward(&ds.world, &terminal);
        if r < 1.0 {
            return Err(HdpError::Validation(format!(
                "episode {}: rollout reward {r} < 1.0",
                ep.episode_index
            )));
        }
        // PAD forms a strict suffix.
        let first_pad = ep
            .discrete
            .iter()
            .position(|&t| t == crate::expert::PAD_ID)
            .unwrap_or(ep.discrete.len());
        if ep.discrete[first_pad..]
            .iter()
            .any(|&t| t != crate::expert::PAD_ID)
        {
            return Err(HdpError::Validation(format!(
                "episode {}: PAD appears before a real op",
                ep.episode_index
            )));
        }
        if first_pad % 3 != 0 {
            return Err(HdpError::Validation(format!(
                "episode {}: token count not a multiple of 3",
                ep.episode_index
            )));
        }
        // Segment bookkeeping aligns ops with primitives.
        let sp = ds.world.steps_per_primitive as u32;
        for (k, &(a, b)) in ep.segments.iter().enumerate() {
            if a != k as u32 * sp || b != (k as u32 + 1) * sp {
                return Err(HdpError::Validation(format!(
                    "episode {}: segment {k} misaligned",
                    ep.episode_index
                )));
            }
        }
        if ep.segments.len() * 3 != first_pad {
            return Err(HdpError::Validation(format!(
                "episode {}: {} segments vs {} real tokens",
                ep.episode_index,
                ep.segments.len(),
                first_pad
            )));
        }
    }
    Ok(())
}
