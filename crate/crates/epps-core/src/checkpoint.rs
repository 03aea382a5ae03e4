//! Binary checkpoint format: the model config plus every parameter-store
//! entry (weights, biases, norm statistics), written little-endian so a
//! save/load round trip is bitwise exact.

use std::fs;
use std::path::Path;

use crate::error::{EppsError, Result};
use crate::model::{EppsModel, ModelConfig};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"EPPSCKP1";
const VERSION: u32 = 1;

/// Serializes the config and full parameter store to `path`.
pub fn save<S: Scalar>(path: &Path, config: &ModelConfig, store: &ParamStore<S>) -> Result<()> {
    let config_json = serde_json::to_vec(config)
        .map_err(|e| EppsError::json("encoding checkpoint config", e))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    write_bytes(&mut out, S::DTYPE.as_bytes());
    write_bytes(&mut out, &config_json);
    let entries: Vec<_> = store.iter().collect();
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (_, entry) in entries {
        write_bytes(&mut out, entry.name.as_bytes());
        out.push(u8::from(entry.trainable));
        let shape = entry.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in entry.value.as_slice() {
            v.write_le(&mut out);
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| EppsError::io(format!("creating {}", parent.display()), e))?;
    }
    fs::write(path, &out).map_err(|e| EppsError::io(format!("writing {}", path.display()), e))
}

fn write_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(EppsError::Checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn sized_bytes(&mut self) -> Result<&'a [u8]> {
        let len = self.u32()? as usize;
        self.take(len)
    }
}

/// Parses a checkpoint into its config and named parameter tensors.
pub fn load_raw<S: Scalar>(path: &Path) -> Result<(ModelConfig, Vec<(String, Tensor<S>, bool)>)> {
    let bytes = fs::read(path)
        .map_err(|e| EppsError::io(format!("reading {}", path.display()), e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(EppsError::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(EppsError::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let dtype = String::from_utf8_lossy(cur.sized_bytes()?).into_owned();
    if dtype != S::DTYPE {
        return Err(EppsError::Checkpoint(format!(
            "dtype mismatch: checkpoint holds {dtype}, caller expects {}",
            S::DTYPE
        )));
    }
    let config: ModelConfig = serde_json::from_slice(cur.sized_bytes()?)
        .map_err(|e| EppsError::json("decoding checkpoint config", e))?;
    let count = cur.u64()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8_lossy(cur.sized_bytes()?).into_owned();
        let trainable = cur.take(1)?[0] != 0;
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * S::BYTES)?;
        let data: Vec<S> = raw.chunks_exact(S::BYTES).map(S::read_le).collect();
        params.push((name, Tensor::new(shape, data), trainable));
    }
    if cur.pos != bytes.len() {
        return Err(EppsError::Checkpoint(format!(
            "{} trailing bytes after last parameter",
            bytes.len() - cur.pos
        )));
    }
    Ok((config, params))
}

/// Rebuilds a model from a checkpoint: constructs the architecture the
/// stored config describes, then overwrites every parameter by name.
pub fn load_model<S: Scalar>(path: &Path) -> Result<EppsModel<S>> {
    let (config, params) = load_raw::<S>(path)?;
    let mut model = EppsModel::new(config, 0);
    let expected = model.store().iter().count();
    if params.len() != expected {
        return Err(EppsError::Checkpoint(format!(
            "parameter count mismatch: checkpoint holds {}, model wants {expected}",
            params.len()
        )));
    }
    for (name, tensor, _) in params {
        let id = model.store().find(&name).ok_or_else(|| {
            EppsError::Checkpoint(format!("checkpoint parameter '{name}' not in model"))
        })?;
        let current = model.store().get(id);
        if current.shape() != tensor.shape() {
            return Err(EppsError::Checkpoint(format!(
                "shape mismatch for '{name}': checkpoint {:?}, model {:?}",
                tensor.shape(),
                current.shape()
            )));
        }
        model.store_mut().set(id, tensor);
    }
    Ok(model)
}
