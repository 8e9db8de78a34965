//! Checkpoint files: a single-line JSON manifest (config, tensor names,
//! shapes, byte offsets, format version) followed by raw little-endian f64
//! values in manifest order. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, ProjectionBasis};

use super::{BaseModel, HookedModel, ModelConfig, ParamLayout};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "mrplab-checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
    #[serde(default)]
    pub stage: Option<u32>,
    #[serde(default)]
    pub method: Option<String>,
    #[serde(default)]
    pub unlearned_topics: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct HookEntry {
    layer: usize,
    rank: usize,
    byte_offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    format_version: u32,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
    hooks: Vec<HookEntry>,
    data_len: usize,
    #[serde(flatten)]
    meta: CheckpointMeta,
}

pub fn save_checkpoint(path: &Path, model: &HookedModel, meta: &CheckpointMeta) -> Result<()> {
    let layout = &model.base.layout;
    let mut tensors = Vec::with_capacity(layout.tensors.len());
    for t in &layout.tensors {
        tensors.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            byte_offset: t.offset * 8,
            len: t.len,
        });
    }
    let mut hooks = Vec::new();
    let mut cursor = layout.total;
    for (&layer, basis) in &model.hooks {
        let len = basis.rank() * basis.dim();
        hooks.push(HookEntry {
            layer,
            rank: basis.rank(),
            byte_offset: cursor * 8,
            len,
        });
        cursor += len;
    }
    let manifest = Manifest {
        kind: MAGIC.into(),
        format_version: CHECKPOINT_FORMAT_VERSION,
        model: model.base.config.clone(),
        tensors,
        hooks,
        data_len: cursor,
        meta: meta.clone(),
    };

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    let line = serde_json::to_string(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization: {e}")))?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    for v in &model.base.params {
        w.write_all(&v.to_le_bytes())?;
    }
    for basis in model.hooks.values() {
        for v in &basis.rows().data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(HookedModel, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(Error::Checkpoint("missing manifest line".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 16 * 1024 * 1024 {
            return Err(Error::Checkpoint("manifest line too long".into()));
        }
    }
    let manifest: Manifest = serde_json::from_slice(&line)
        .map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;
    if manifest.kind != MAGIC {
        return Err(Error::Checkpoint(format!(
            "unexpected kind {:?}",
            manifest.kind
        )));
    }
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    manifest.model.validate()?;

    let layout = ParamLayout::new(&manifest.model);
    if manifest.tensors.len() != layout.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "tensor count {} does not match config-derived layout {}",
            manifest.tensors.len(),
            layout.tensors.len()
        )));
    }
    for (entry, spec) in manifest.tensors.iter().zip(&layout.tensors) {
        if entry.name != spec.name
            || entry.shape != spec.shape
            || entry.byte_offset != spec.offset * 8
            || entry.len != spec.len
        {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} does not match config-derived layout",
                entry.name
            )));
        }
    }

    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != manifest.data_len * 8 {
        return Err(Error::Checkpoint(format!(
            "data section is {} bytes, manifest declares {}",
            raw.len(),
            manifest.data_len * 8
        )));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let params = values[..layout.total].to_vec();
    if params.iter().any(|v| !v.is_finite()) {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    let base = BaseModel {
        config: manifest.model.clone(),
        layout,
        params,
    };

    let mut hooks = BTreeMap::new();
    for h in &manifest.hooks {
        if h.byte_offset % 8 != 0 || h.len != h.rank * manifest.model.d_model {
            return Err(Error::Checkpoint(format!(
                "hook entry for layer {} is inconsistent",
                h.layer
            )));
        }
        let start = h.byte_offset / 8;
        let rows = Matrix::from_vec(
            h.rank,
            manifest.model.d_model,
            values[start..start + h.len].to_vec(),
        )?;
        if !rows.all_finite() {
            return Err(Error::Checkpoint("non-finite hook basis values".into()));
        }
        // Stored bases were validated when constructed; runs with
        // re-orthonormalization disabled may hold non-orthonormal rows.
        hooks.insert(h.layer, ProjectionBasis::from_rows_unchecked(rows));
    }

    let model = HookedModel::with_hooks(base, hooks)?;
    Ok((model, manifest.meta))
}
