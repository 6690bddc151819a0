//! Binary checkpoints: magic, version, config JSON, then named little-endian f64 arrays.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelError, ModelParams};
use crate::Tensor;

const MAGIC: &[u8; 8] = b"MCCOTCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(params: &ModelParams, out: &mut impl Write) -> Result<(), ModelError> {
    let config = serde_json::to_vec(&params.config).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(config.len() as u64).to_le_bytes())?;
    out.write_all(&config)?;
    out.write_all(&(params.tensors.len() as u64).to_le_bytes())?;
    for (name, t) in &params.tensors {
        out.write_all(&(name.len() as u64).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            out.write_all(&x.to_bits().to_le_bytes())?;
        }
    }
    Ok(())
}

fn u32_of(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn u64_of(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Guards allocations against corrupt length fields.
fn bounded(n: u64, limit: u64, what: &str) -> Result<usize, ModelError> {
    if n > limit {
        return Err(ModelError::Checkpoint(format!("{what} of {n} exceeds {limit}")));
    }
    Ok(n as usize)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ModelParams, ModelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = u32_of(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut config = vec![0u8; bounded(u64_of(r)?, 1 << 20, "config length")?];
    r.read_exact(&mut config)?;
    let config: ModelConfig = serde_json::from_slice(&config).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    config.validate()?;

    let expected: BTreeMap<String, Vec<usize>> = super::Weights::<()>::shapes(&config).into_iter().collect();
    let count = bounded(u64_of(r)?, expected.len() as u64, "tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let mut name = vec![0u8; bounded(u64_of(r)?, 256, "name length")?];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let ndim = bounded(u64_of(r)?, 8, "rank")?;
        let shape = (0..ndim).map(|_| u64_of(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if expected.get(&name) != Some(&shape) {
            return Err(ModelError::Checkpoint(format!("unexpected tensor {name} with shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(u64_of(r)?));
        }
        if tensors.insert(name.clone(), Tensor::new(shape, data)?.with_requires_grad(true)).is_some() {
            return Err(ModelError::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if tensors.len() != expected.len() {
        return Err(ModelError::Checkpoint(format!("{} of {} tensors present", tensors.len(), expected.len())));
    }
    Ok(ModelParams { config, tensors })
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
