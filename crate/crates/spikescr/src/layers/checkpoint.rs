//! Model checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SSCR" | format version u32 | config JSON (u32 length + UTF-8)
//! | tensor count u32
//! | per tensor: name (u32 length + UTF-8) | rank u32 | dims u32… | f32 payload
//! ```
//!
//! Parameters are stored under their parameter-store names; batch-norm
//! running buffers under `<site>.running_mean` / `<site>.running_var`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Model, ModelConfig};
use crate::compute::Tensor;

pub const MAGIC: &[u8; 4] = b"SSCR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Malformed(String),
    #[error("config error: {0}")]
    Config(#[from] super::ConfigError),
    #[error("config json: {0}")]
    Json(#[from] serde_json::Error),
}

fn write_tensor(w: &mut impl Write, name: &str, shape: &[usize], data: &[f32]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_model(model: &mut Model, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let config = serde_json::to_string(&model.cfg)?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(config.as_bytes())?;

    let params: Vec<(String, Vec<usize>, Vec<f32>)> = model
        .store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()))
        .collect();
    let buffers: Vec<(String, Vec<f32>)> = model
        .bn_states()
        .into_iter()
        .flat_map(|(name, bn)| {
            [
                (format!("{name}.running_mean"), bn.running_mean.clone()),
                (format!("{name}.running_var"), bn.running_var.clone()),
            ]
        })
        .collect();

    let count = (params.len() + buffers.len()) as u32;
    w.write_all(&count.to_le_bytes())?;
    for (name, shape, data) in &params {
        write_tensor(&mut w, name, shape, data)?;
    }
    for (name, data) in &buffers {
        write_tensor(&mut w, name, &[data.len()], data)?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let mut buf = [0u8; 4];
        self.inner.read_exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return Err(CheckpointError::Malformed(format!("string length {len}")));
        }
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let mut bytes = vec![0u8; n * 4];
        self.inner.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn load_model(path: &Path) -> Result<Model, CheckpointError> {
    let mut r = Reader { inner: BufReader::new(File::open(path)?) };
    let mut magic = [0u8; 4];
    r.inner.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Malformed(format!(
            "magic {magic:?} is not {MAGIC:?}"
        )));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Malformed(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let cfg: ModelConfig = serde_json::from_str(&r.string()?)?;
    let mut model = Model::new(cfg, 0)?;

    let count = r.u32()? as usize;
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Malformed(format!("tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f32s(numel)?;
        tensors.insert(name, (shape, data));
    }

    for id in model.store.ids().collect::<Vec<_>>() {
        let name = model.store.name(id).to_string();
        let (shape, data) = tensors
            .remove(&name)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing parameter {name}")))?;
        if shape != model.store.value(id).shape() {
            return Err(CheckpointError::Malformed(format!(
                "parameter {name} has shape {shape:?}, model expects {:?}",
                model.store.value(id).shape()
            )));
        }
        *model.store.value_mut(id) = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    for (name, bn) in model.bn_states() {
        for (suffix, buf) in [
            ("running_mean", &mut bn.running_mean),
            ("running_var", &mut bn.running_var),
        ] {
            let key = format!("{name}.{suffix}");
            let (_, data) = tensors
                .remove(&key)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing buffer {key}")))?;
            if data.len() != buf.len() {
                return Err(CheckpointError::Malformed(format!(
                    "buffer {key} has {} entries, model expects {}",
                    data.len(),
                    buf.len()
                )));
            }
            *buf = data;
        }
    }
    Ok(model)
}
