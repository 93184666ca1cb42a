//! Single-file checkpoint container.
//!
//! Layout: magic `STCK`, format version, a JSON header (model spec, run
//! metadata, tensor index), then raw little-endian f64 tensor data in index
//! order. Loading rebuilds the architecture from the spec and overwrites its
//! state by name, rejecting any shape or architecture mismatch.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FusedEncoder, ModelSpec};

const MAGIC: &[u8; 4] = b"STCK";
const VERSION: u32 = 1;

/// Provenance recorded beside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub class_names: Vec<String>,
    pub split_seed: u64,
    /// Identifier of the embedding table (path or tag).
    pub embedding_source: String,
    /// Identifier of the backbone initialization (checkpoint id or
    /// `random:<seed>`).
    pub backbone_init: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    meta: RunMeta,
    tensors: Vec<TensorInfo>,
}

/// Writes the model and metadata to one file.
pub fn save(path: &Path, model: &FusedEncoder, meta: &RunMeta) -> Result<()> {
    if meta.class_names.len() != model.num_classes() {
        return Err(Error::CheckpointMismatch(format!(
            "{} class names for a {}-class head",
            meta.class_names.len(),
            model.num_classes()
        )));
    }
    let mut tensors = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    model.visit_state(&mut |name, view| {
        tensors.push(TensorInfo {
            name,
            shape: view.shape().to_vec(),
        });
        payload.extend(view.iter());
    });
    let header = Header {
        spec: model.spec.clone(),
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
    w.write_u64::<LittleEndian>(json.len() as u64).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for v in payload {
        w.write_f64::<LittleEndian>(v).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a checkpoint, rebuilds the model, and restores its state.
pub fn load(path: &Path) -> Result<(FusedEncoder, RunMeta)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::CheckpointMismatch(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let json_len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: format!("checkpoint header: {e}"),
    })?;

    let mut model = FusedEncoder::build(header.spec.clone())?;
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    model.visit_state(&mut |name, view| {
        expected.push((name, view.shape().to_vec()));
    });
    if expected.len() != header.tensors.len() {
        return Err(Error::CheckpointMismatch(format!(
            "tensor count {} differs from architecture ({})",
            header.tensors.len(),
            expected.len()
        )));
    }
    for (have, info) in expected.iter().zip(header.tensors.iter()) {
        if have.0 != info.name || have.1 != info.shape {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {} {:?} does not match architecture tensor {} {:?}",
                info.name, info.shape, have.0, have.1
            )));
        }
    }
    let mut restore_err = None;
    model.visit_state_mut(&mut |_name, mut view| {
        if restore_err.is_some() {
            return;
        }
        for v in view.iter_mut() {
            match r.read_f64::<LittleEndian>() {
                Ok(x) => *v = x,
                Err(e) => {
                    restore_err = Some(Error::io(path, e));
                    return;
                }
            }
        }
    });
    if let Some(e) = restore_err {
        return Err(e);
    }
    if header.meta.class_names.len() != model.num_classes() {
        return Err(Error::CheckpointMismatch(format!(
            "{} class names for a {}-class head",
            header.meta.class_names.len(),
            model.num_classes()
        )));
    }
    Ok((model, header.meta))
}

const TENSORS_MAGIC: &[u8; 4] = b"STTW";

/// A bag of named tensors, used for externally converted backbone weights.
pub type NamedTensors = Vec<(String, Vec<usize>, Vec<f64>)>;

/// Writes a plain named-tensor file (same container style as checkpoints,
/// without model metadata).
pub fn save_tensors(path: &Path, tensors: &NamedTensors) -> Result<()> {
    let index: Vec<TensorInfo> = tensors
        .iter()
        .map(|(name, shape, _)| TensorInfo {
            name: name.clone(),
            shape: shape.clone(),
        })
        .collect();
    let json = serde_json::to_vec(&index).expect("index serializes");
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(TENSORS_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
    w.write_u64::<LittleEndian>(json.len() as u64).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for (_, _, data) in tensors {
        for v in data {
            w.write_f64::<LittleEndian>(*v).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads a named-tensor file written by [`save_tensors`] (or an external
/// converter emitting the same layout).
pub fn load_tensors(path: &Path) -> Result<NamedTensors> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != TENSORS_MAGIC {
        return Err(Error::CheckpointMismatch(format!(
            "{} is not a named-tensor file",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "unsupported tensor-file version {version}"
        )));
    }
    let json_len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json).map_err(io)?;
    let index: Vec<TensorInfo> = serde_json::from_slice(&json).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: format!("tensor index: {e}"),
    })?;
    let mut out = Vec::with_capacity(index.len());
    for info in index {
        let len: usize = info.shape.iter().product();
        let mut data = vec![0.0f64; len];
        for v in data.iter_mut() {
            *v = r.read_f64::<LittleEndian>().map_err(io)?;
        }
        out.push((info.name, info.shape, data));
    }
    Ok(out)
}
