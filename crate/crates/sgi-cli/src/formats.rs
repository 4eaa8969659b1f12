//! Binary artifact formats.
//!
//! Dataset file (magic `SGID`, version 1), all integers little-endian:
//!
//! ```text
//! "SGID"  u16 version  u32 meta_len  meta JSON (UTF-8)
//! u32 episode_count
//! per episode:
//!   u32 steps   u8 terminated
//!   (steps+1) * frame_len  u8 frame bytes (quantized [0,255])
//!   steps * u8  actions
//!   steps * f64 rewards
//! ```
//!
//! Checkpoint file (magic `SGIC`, version 1):
//!
//! ```text
//! "SGIC"  u16 version  u32 header_len  header JSON (spec + provenance)
//! u32 param_count
//! per parameter:
//!   u16 name_len  name UTF-8
//!   u8 rank  rank * u32 dims
//!   numel * f64 values
//! ```
//!
//! Both formats round-trip bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sgi_core::agent::{AgentCheckpoint, Provenance};
use sgi_core::nets::{AgentNets, ConvLayerSpec, EncoderSpec};
use sgi_core::optim::ParamSet;
use sgi_core::replay::{DatasetMeta, EpisodeData, ReplayDataset, SegmentMeta};
use sgi_core::tensor::Tensor;

use crate::{CliError, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"SGID";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGIC";
pub const FORMAT_VERSION: u16 = 1;

// ── dataset ─────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct SegmentJson {
    collector: String,
    start_episode: u64,
    episodes: u64,
    transitions: u64,
    mean_return: f64,
}

#[derive(Serialize, Deserialize)]
struct DatasetMetaJson {
    collector: String,
    env_seed: u64,
    created_unix: u64,
    transitions: u64,
    frame_shape: [usize; 2],
    frame_stack: usize,
    num_actions: usize,
    final_episode_truncated: bool,
    segments: Vec<SegmentJson>,
    config_hash: String,
    tool_version: String,
}

pub fn write_dataset(path: &Path, data: &ReplayDataset, config_hash: &str) -> Result<()> {
    data.validate()?;
    let meta = DatasetMetaJson {
        collector: data.meta.collector.clone(),
        env_seed: data.meta.env_seed,
        created_unix: data.meta.created_unix,
        transitions: data.meta.transitions,
        frame_shape: data.meta.frame_shape,
        frame_stack: data.meta.frame_stack,
        num_actions: data.meta.num_actions,
        final_episode_truncated: data.meta.final_episode_truncated,
        segments: data
            .meta
            .segments
            .iter()
            .map(|s| SegmentJson {
                collector: s.collector.clone(),
                start_episode: s.start_episode,
                episodes: s.episodes,
                transitions: s.transitions,
                mean_return: s.mean_return,
            })
            .collect(),
        config_hash: config_hash.to_string(),
        tool_version: crate::TOOL_VERSION.to_string(),
    };
    let meta_bytes = serde_json::to_vec(&meta).expect("meta serializes");

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    buf.extend_from_slice(&(data.episodes.len() as u32).to_le_bytes());
    for ep in &data.episodes {
        buf.extend_from_slice(&(ep.steps() as u32).to_le_bytes());
        buf.push(ep.terminated as u8);
        for f in &ep.frames {
            buf.extend_from_slice(f);
        }
        buf.extend_from_slice(&ep.actions);
        for r in &ep.rewards {
            buf.extend_from_slice(&r.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| CliError::io(path.display().to_string(), e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CliError::Format(format!(
                "{}: truncated at byte {} (wanted {n} more)",
                self.path, self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Read a dataset file; also returns the stored config hash.
pub fn read_dataset(path: &Path) -> Result<(ReplayDataset, String)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
        path: &p,
    };
    if c.take(4)? != DATASET_MAGIC {
        return Err(CliError::Format(format!("{p}: bad magic (not a dataset file)")));
    }
    let version = c.u16()?;
    if version != FORMAT_VERSION {
        return Err(CliError::Format(format!("{p}: unsupported version {version}")));
    }
    let meta_len = c.u32()? as usize;
    let meta: DatasetMetaJson = serde_json::from_slice(c.take(meta_len)?)
        .map_err(|e| CliError::Format(format!("{p}: bad metadata: {e}")))?;
    let frame_len = meta.frame_shape[0] * meta.frame_shape[1];
    let n_eps = c.u32()? as usize;
    let mut episodes = Vec::with_capacity(n_eps);
    for _ in 0..n_eps {
        let steps = c.u32()? as usize;
        let terminated = c.u8()? != 0;
        let mut frames = Vec::with_capacity(steps + 1);
        for _ in 0..=steps {
            frames.push(c.take(frame_len)?.to_vec());
        }
        let actions = c.take(steps)?.to_vec();
        let mut rewards = Vec::with_capacity(steps);
        for _ in 0..steps {
            rewards.push(c.f64()?);
        }
        episodes.push(EpisodeData {
            frames,
            actions,
            rewards,
            terminated,
        });
    }
    if c.pos != bytes.len() {
        return Err(CliError::Format(format!("{p}: trailing bytes after payload")));
    }
    let data = ReplayDataset {
        meta: DatasetMeta {
            collector: meta.collector,
            env_seed: meta.env_seed,
            created_unix: meta.created_unix,
            transitions: meta.transitions,
            frame_shape: meta.frame_shape,
            frame_stack: meta.frame_stack,
            num_actions: meta.num_actions,
            final_episode_truncated: meta.final_episode_truncated,
            segments: meta
                .segments
                .into_iter()
                .map(|s| SegmentMeta {
                    collector: s.collector,
                    start_episode: s.start_episode,
                    episodes: s.episodes,
                    transitions: s.transitions,
                    mean_return: s.mean_return,
                })
                .collect(),
        },
        episodes,
    };
    data.validate()?;
    Ok((data, meta.config_hash))
}

// ── checkpoint ──────────────────────────────────────────────────────

#[derive(Serialize, Deserialize, Clone)]
pub struct EncoderSpecJson {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub convs: Vec<(usize, usize, usize)>, // (channels, kernel, stride)
    pub proj_dim: usize,
    pub dynamics_hidden: usize,
    pub inverse_hidden: usize,
    pub head_hidden: usize,
    pub film_channels: usize,
    pub num_actions: usize,
}

impl From<&EncoderSpec> for EncoderSpecJson {
    fn from(s: &EncoderSpec) -> Self {
        EncoderSpecJson {
            in_channels: s.in_channels,
            in_height: s.in_height,
            in_width: s.in_width,
            convs: s.convs.iter().map(|c| (c.channels, c.kernel, c.stride)).collect(),
            proj_dim: s.proj_dim,
            dynamics_hidden: s.dynamics_hidden,
            inverse_hidden: s.inverse_hidden,
            head_hidden: s.head_hidden,
            film_channels: s.film_channels,
            num_actions: s.num_actions,
        }
    }
}

impl From<EncoderSpecJson> for EncoderSpec {
    fn from(j: EncoderSpecJson) -> Self {
        EncoderSpec {
            in_channels: j.in_channels,
            in_height: j.in_height,
            in_width: j.in_width,
            convs: j
                .convs
                .into_iter()
                .map(|(channels, kernel, stride)| ConvLayerSpec {
                    channels,
                    kernel,
                    stride,
                })
                .collect(),
            proj_dim: j.proj_dim,
            dynamics_hidden: j.dynamics_hidden,
            inverse_hidden: j.inverse_hidden,
            head_hidden: j.head_hidden,
            film_channels: j.film_channels,
            num_actions: j.num_actions,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: EncoderSpecJson,
    pretrained: bool,
    objectives: String,
    dataset_id: String,
    config_fingerprint: String,
    seed: u64,
    tool_version: String,
}

fn collect_params(nets: &AgentNets) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    nets.online.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
    nets.target.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

pub fn write_checkpoint(path: &Path, ckpt: &AgentCheckpoint) -> Result<()> {
    let header = CheckpointHeader {
        spec: (&ckpt.nets.spec).into(),
        pretrained: ckpt.provenance.pretrained,
        objectives: ckpt.provenance.objectives.clone(),
        dataset_id: ckpt.provenance.dataset_id.clone(),
        config_fingerprint: ckpt.provenance.config_fingerprint.clone(),
        seed: ckpt.provenance.seed,
        tool_version: crate::TOOL_VERSION.to_string(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let params = collect_params(&ckpt.nets);

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in &params {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| CliError::io(path.display().to_string(), e))
}

pub fn read_checkpoint(path: &Path) -> Result<AgentCheckpoint> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
        path: &p,
    };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(CliError::Format(format!("{p}: bad magic (not a checkpoint file)")));
    }
    let version = c.u16()?;
    if version != FORMAT_VERSION {
        return Err(CliError::Format(format!("{p}: unsupported version {version}")));
    }
    let header_len = c.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(c.take(header_len)?)
        .map_err(|e| CliError::Format(format!("{p}: bad header: {e}")))?;
    let spec: EncoderSpec = header.spec.clone().into();

    let mut nets = AgentNets::init(spec, 0).map_err(CliError::Core)?;
    let n_params = c.u32()? as usize;
    let mut loaded: std::collections::BTreeMap<String, Tensor> = std::collections::BTreeMap::new();
    for _ in 0..n_params {
        let name_len = c.u16()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|e| CliError::Format(format!("{p}: bad parameter name: {e}")))?;
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            values.push(c.f64()?);
        }
        let t = Tensor::new(&shape, values).map_err(CliError::Core)?;
        if loaded.insert(name.clone(), t).is_some() {
            return Err(CliError::Format(format!("{p}: duplicate parameter {name}")));
        }
    }
    if c.pos != bytes.len() {
        return Err(CliError::Format(format!("{p}: trailing bytes after payload")));
    }

    let mut missing = Vec::new();
    let mut apply = |name: &str, t: &mut Tensor| match loaded.remove(name) {
        Some(stored) => {
            if stored.shape() != t.shape() {
                missing.push(format!("{name}: shape {:?} vs {:?}", stored.shape(), t.shape()));
            } else {
                *t = stored;
            }
        }
        None => missing.push(format!("{name}: absent")),
    };
    nets.online.visit_mut(&mut |name, t| apply(name, t));
    nets.target.visit_mut(&mut |name, t| apply(name, t));
    if !missing.is_empty() {
        return Err(CliError::Format(format!("{p}: parameter problems: {}", missing.join("; "))));
    }
    if !loaded.is_empty() {
        let extra: Vec<String> = loaded.keys().cloned().collect();
        return Err(CliError::Format(format!("{p}: unknown parameters: {}", extra.join(", "))));
    }

    Ok(AgentCheckpoint {
        nets,
        provenance: Provenance {
            pretrained: header.pretrained,
            objectives: header.objectives,
            dataset_id: header.dataset_id,
            config_fingerprint: header.config_fingerprint,
            seed: header.seed,
        },
    })
}

/// Byte-level SHA-256 of a file on disk, for reproducibility checks.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| CliError::io(path.display().to_string(), e))?;
    Ok(crate::sha256_hex(&bytes))
}

/// Append one line to a file, creating it if needed.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path.display().to_string(), e))?;
    writeln!(f, "{line}").map_err(|e| CliError::io(path.display().to_string(), e))
}
