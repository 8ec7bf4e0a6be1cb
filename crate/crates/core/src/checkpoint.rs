//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"HATTCKPT"            8 bytes
//! version: u32           currently 1
//! header_len: u64
//! header: JSON           {"config": ModelConfig, "tensors": [{"name", "shape", "offset"}]}
//! data: f64 * total      raw values; `offset` counts f64 elements from here
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HattFlowModel, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HATTCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<Entry>,
}

pub fn to_bytes(model: &HattFlowModel) -> Result<Vec<u8>> {
    let mut offset = 0;
    let tensors = model
        .store
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in model.store.iter() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("checkpoint truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<HattFlowModel> {
    let b = &mut bytes;
    if take(b, 8, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(b, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(take(b, 8, "header length")?.try_into().expect("8 bytes"));
    let header: Header = serde_json::from_slice(take(b, len as usize, "header")?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let data = *b;
    if data.len() % 8 != 0 {
        return Err(Error::Format("checkpoint data is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let mut model = HattFlowModel::new(header.config)?;
    if header.tensors.len() != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            header.tensors.len(),
            model.store.len()
        )));
    }
    for e in header.tensors {
        let id = model
            .store
            .find(&e.name)
            .ok_or_else(|| Error::Format(format!("unexpected tensor {:?}", e.name)))?;
        let n: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Format(format!("tensor {:?} runs past the data section", e.name)))?;
        let t = Tensor::new(e.shape.clone(), slice.to_vec())
            .map_err(|err| Error::Format(format!("tensor {:?}: {err}", e.name)))?;
        model
            .store
            .set(id, t)
            .map_err(|err| Error::Format(format!("tensor {:?}: {err}", e.name)))?;
    }
    Ok(model)
}

pub fn save(model: &HattFlowModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<HattFlowModel> {
    from_bytes(&std::fs::read(path)?)
}
