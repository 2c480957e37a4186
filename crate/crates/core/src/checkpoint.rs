//! Model checkpoints.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! magic "FBM1" | version u32 | n_classes u32 | n_modalities u32
//! input_dims u32 x M | hidden u32 | embed u32 | fusion_dim u32
//! fusion_kind u8 | seed u64 | parameters f64 x total
//! ```
//!
//! Parameters follow the canonical block and tensor order, so the file
//! is self-describing given the header. A `<name>.json` sidecar lists
//! the block boundaries for external tooling.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockedModel, FusionKind, ModelSpec};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FBM1";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockRange {
    pub id: String,
    /// Offset into the parameter payload, in scalars.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub seed: u64,
    pub blocks: Vec<BlockRange>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

fn block_ranges(spec: &ModelSpec) -> Result<Vec<BlockRange>> {
    let mut blocks = Vec::new();
    let mut offset = 0;
    for id in spec.block_ids() {
        let len = spec.block_param_count(id)?;
        blocks.push(BlockRange {
            id: id.to_string(),
            offset,
            len,
        });
        offset += len;
    }
    Ok(blocks)
}

/// Write the checkpoint and its JSON sidecar.
pub fn save_checkpoint(path: &Path, model: &BlockedModel<f64>, seed: u64) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let spec = model.spec();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(spec.n_classes as u32).to_le_bytes());
    bytes.extend_from_slice(&(spec.n_modalities() as u32).to_le_bytes());
    for d in &spec.input_dims {
        bytes.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&(spec.hidden_dim as u32).to_le_bytes());
    bytes.extend_from_slice(&(spec.embed_dim as u32).to_le_bytes());
    bytes.extend_from_slice(&(spec.fusion_dim as u32).to_le_bytes());
    bytes.push(match spec.fusion {
        FusionKind::Concat => 0,
        FusionKind::Attention => 1,
    });
    bytes.extend_from_slice(&seed.to_le_bytes());
    for v in model.flatten() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&bytes)?;

    let sidecar = CheckpointSidecar {
        format_version: CHECKPOINT_FORMAT_VERSION,
        spec: spec.clone(),
        seed,
        blocks: block_ranges(spec)?,
    };
    let body = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Format {
        path: sidecar_path(path).display().to_string(),
        detail: e.to_string(),
    })?;
    fs::write(sidecar_path(path), body + "\n")?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.display().to_string(),
                detail: format!(
                    "truncated: wanted {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Read a checkpoint back into a model, plus the stored seed.
pub fn load_checkpoint(path: &Path) -> Result<(BlockedModel<f64>, u64)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let fail = |detail: String| Error::Format {
        path: path.display().to_string(),
        detail,
    };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(fail("bad magic, not a checkpoint".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(fail(format!(
            "format version {version} unsupported (expected {CHECKPOINT_FORMAT_VERSION})"
        )));
    }
    let n_classes = cur.u32()? as usize;
    let n_modalities = cur.u32()? as usize;
    if n_modalities == 0 || n_modalities > 64 {
        return Err(fail(format!("implausible modality count {n_modalities}")));
    }
    let mut input_dims = Vec::with_capacity(n_modalities);
    for _ in 0..n_modalities {
        input_dims.push(cur.u32()? as usize);
    }
    let hidden_dim = cur.u32()? as usize;
    let embed_dim = cur.u32()? as usize;
    let fusion_dim = cur.u32()? as usize;
    let fusion = match cur.u8()? {
        0 => FusionKind::Concat,
        1 => FusionKind::Attention,
        other => return Err(fail(format!("unknown fusion kind tag {other}"))),
    };
    let seed = cur.u64()?;
    let spec = ModelSpec {
        n_classes,
        input_dims,
        hidden_dim,
        embed_dim,
        fusion_dim,
        fusion,
    };
    spec.validate()?;
    let total = spec.total_param_count();
    let payload = cur.take(total * 8)?;
    if cur.pos != bytes.len() {
        return Err(fail(format!(
            "{} trailing bytes after parameters",
            bytes.len() - cur.pos
        )));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((BlockedModel::from_flat(&spec, &flat)?, seed))
}

/// Per-block statistics for human inspection.
#[derive(Debug, Clone, Serialize)]
pub struct BlockStats {
    pub id: String,
    pub tensors: usize,
    pub params: usize,
    pub l2_norm: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckpointSummary {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub seed: u64,
    pub total_params: usize,
    pub blocks: Vec<BlockStats>,
}

pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointSummary> {
    let (model, seed) = load_checkpoint(path)?;
    let spec = model.spec().clone();
    let mut blocks = Vec::new();
    for id in spec.block_ids() {
        let params = model.block(id)?;
        let mut sq = 0.0;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut count = 0;
        for t in params {
            for v in t.data() {
                sq += v * v;
                min = min.min(*v);
                max = max.max(*v);
                count += 1;
            }
        }
        blocks.push(BlockStats {
            id: id.to_string(),
            tensors: params.len(),
            params: count,
            l2_norm: sq.sqrt(),
            min,
            max,
        });
    }
    Ok(CheckpointSummary {
        format_version: CHECKPOINT_FORMAT_VERSION,
        spec,
        seed,
        total_params: model.spec().total_param_count(),
        blocks,
    })
}
