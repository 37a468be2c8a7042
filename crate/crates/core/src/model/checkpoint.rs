//! Checkpoint layout (little-endian): `u64` header length, JSON header,
//! then every parameter tensor as raw `f64` in store order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::rngs::mock::StepRng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelDims, ModelError, ModelMeta};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    dims: ModelDims,
    meta: ModelMeta,
    params: Vec<(String, [usize; 2])>,
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<(), ModelError> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        dims: model.dims,
        meta: model.meta,
        params: model
            .store
            .iter()
            .map(|(n, t)| (n.to_string(), [t.rows(), t.cols()]))
            .collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    let json = serde_json::to_vec(&header)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in model.store.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 26 {
        return Err(ModelError::Checkpoint(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "format version {} (expected {CHECKPOINT_VERSION})",
            header.format_version
        )));
    }
    // Initial values are overwritten below, so any generator will do.
    let mut model = Model::new(header.config, header.dims, header.meta, &mut StepRng::new(0, 1))?;
    if model.store.len() != header.params.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} parameter tensors in file, model has {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, (name, shape)) in ids.into_iter().zip(&header.params) {
        let t = model.store.get(id);
        if model.store.name(id) != name || [t.rows(), t.cols()] != *shape {
            return Err(ModelError::Checkpoint(format!(
                "parameter `{name}` {shape:?} does not match `{}`",
                model.store.name(id)
            )));
        }
        let mut buf = vec![0u8; 8 * t.numel()];
        r.read_exact(&mut buf)?;
        let dst = model.store.get_mut(id).data_mut();
        for (d, chunk) in dst.iter_mut().zip(buf.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(ModelError::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(model)
}
