//! Versioned binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        8 bytes  "SCIFLOW\0"
//! version      u32      currently 1
//! elem_bytes   u32      4 (f32) or 8 (f64)
//! config_len   u32
//! config       config_len bytes, UTF-8 key=value lines (model config)
//! count        u32      number of tensors
//! count × {
//!   name_len   u32
//!   name       name_len bytes UTF-8
//!   rank       u32
//!   dims       rank × u64
//!   data       prod(dims) × elem_bytes, little-endian IEEE-754
//! }
//! ```
//!
//! Trailing bytes after the last tensor are rejected.

use std::path::Path;

use super::{FlowModel, ModelConfig};
use crate::config::{model_config_from_kv, model_config_to_kv, parse_kv};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCIFLOW\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model loaded at whichever precision the checkpoint was written in.
#[derive(Clone, Debug)]
pub enum AnyModel {
    F32(FlowModel<f32>),
    F64(FlowModel<f64>),
}

impl AnyModel {
    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::F32(m) => m.config(),
            AnyModel::F64(m) => m.config(),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Length {
            expected: self.pos.saturating_add(n),
            actual: self.bytes.len(),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

impl<T: Element> FlowModel<T> {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
        let cfg = model_config_to_kv(&self.config);
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.named_parameters() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Decode a checkpoint, converting stored values to `T` if the stored
    /// precision differs.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let elem = read_header(&mut r)?;
        let cfg_text = r.string()?;
        let config = model_config_from_kv(&parse_kv(&cfg_text)?)?;
        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("tensor {name}: implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name}: dimension overflow")))?;
            let raw = r.take(numel.checked_mul(elem).ok_or_else(|| Error::Format("size overflow".into()))?)?;
            let data: Vec<T> = if elem == 4 {
                raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect()
            } else {
                raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect()
            };
            named.push((name, Tensor::new(data, &shape)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        FlowModel::from_parameters(config, named)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<usize> {
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    match r.u32()? {
        e @ (4 | 8) => Ok(e as usize),
        e => Err(Error::Format(format!("unsupported element size {e}"))),
    }
}

/// Stored element size in bytes (4 or 8).
pub fn checkpoint_precision(bytes: &[u8]) -> Result<usize> {
    read_header(&mut Reader { bytes, pos: 0 })
}

/// Load a checkpoint at its stored precision.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AnyModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(match checkpoint_precision(&bytes)? {
        4 => AnyModel::F32(FlowModel::from_checkpoint_bytes(&bytes)?),
        _ => AnyModel::F64(FlowModel::from_checkpoint_bytes(&bytes)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            feature_channels: 8,
            hidden_channels: 6,
            correlation_radius: 1,
            iterations: 3,
            sci_enabled: true,
            downsample_factor: 2,
            seed: 11,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = FlowModel::<f64>::new(cfg()).unwrap();
        let bytes = model.to_checkpoint_bytes();
        let back = FlowModel::<f64>::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.to_checkpoint_bytes(), bytes);
    }

    #[test]
    fn precision_is_recorded() {
        let bytes = FlowModel::<f32>::new(cfg()).unwrap().to_checkpoint_bytes();
        assert_eq!(checkpoint_precision(&bytes).unwrap(), 4);
        let widened = FlowModel::<f64>::from_checkpoint_bytes(&bytes).unwrap();
        let narrowed = FlowModel::<f32>::from_checkpoint_bytes(&widened.to_checkpoint_bytes()).unwrap();
        assert_eq!(narrowed.to_checkpoint_bytes(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_typed_errors() {
        let bytes = FlowModel::<f32>::new(cfg()).unwrap().to_checkpoint_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FlowModel::<f32>::from_checkpoint_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(
            FlowModel::<f32>::from_checkpoint_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Length { .. })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(FlowModel::<f32>::from_checkpoint_bytes(&long), Err(Error::Format(_))));
    }
}
