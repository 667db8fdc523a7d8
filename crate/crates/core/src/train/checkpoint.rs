//! `TSVC` parameter checkpoints.
//!
//! ```text
//! "TSVC" | version u32 | config_len u32 | model config (JSON)
//! count u32 | count × { name_len u16 | name | rank u8 | rank × u64 | offset u64 }
//! f64 buffers, little-endian; offsets are bytes from the start of this block
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSVC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<S: Scalar>(model: &Model<S>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config)?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for p in model.store.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("parameter name {} too long", p.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * p.value.len() as u64;
    }
    for p in model.store.iter() {
        for &v in p.value.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        message: message.into(),
    }
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    match pos.checked_add(n).filter(|&e| e <= bytes.len()) {
        Some(end) => {
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        }
        None => Err(parse_err(*pos, format!("truncated: {what}"))),
    }
}

/// Rebuilds the architecture from the stored configuration and fills every
/// parameter; names and shapes must match exactly.
pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<Model<S>> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(parse_err(0, "bad magic, expected \"TSVC\""));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(parse_err(4, format!("unsupported version {version}")));
    }
    let config_len = u32::from_le_bytes(take(bytes, &mut pos, 4, "config length")?.try_into().unwrap()) as usize;
    let config_at = pos;
    let config: ModelConfig = serde_json::from_slice(take(bytes, &mut pos, config_len, "config")?)
        .map_err(|e| parse_err(config_at, format!("model config: {e}")))?;
    let mut model = Model::<S>::new(config, 0)?;
    let count = u32::from_le_bytes(take(bytes, &mut pos, 4, "parameter count")?.try_into().unwrap()) as usize;
    if count != model.store.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {count} parameters, architecture has {}",
            model.store.len()
        )));
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(bytes, &mut pos, 2, "name length")?.try_into().unwrap()) as usize;
        let at = pos;
        let name = std::str::from_utf8(take(bytes, &mut pos, len, "name")?)
            .map_err(|_| parse_err(at, "parameter name is not UTF-8"))?
            .to_string();
        let rank = take(bytes, &mut pos, 1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(bytes, &mut pos, 8, "extent")?.try_into().unwrap()) as usize);
        }
        let offset = u64::from_le_bytes(take(bytes, &mut pos, 8, "offset")?.try_into().unwrap()) as usize;
        entries.push((name, shape, offset));
    }
    let data = &bytes[pos..];
    let mut expected_end = 0;
    for (name, shape, offset) in entries {
        let n: usize = shape.iter().product();
        let buf = offset
            .checked_add(8 * n)
            .filter(|&e| e <= data.len())
            .map(|e| &data[offset..e])
            .ok_or_else(|| parse_err(pos + offset, format!("buffer of {name} runs past the end")))?;
        expected_end = expected_end.max(offset + 8 * n);
        let values = buf
            .chunks_exact(8)
            .map(|b| S::of(f64::from_le_bytes(b.try_into().unwrap())))
            .collect();
        let tensor = Tensor::new(shape, values)?;
        if model.store.find(&name).is_none() {
            return Err(Error::Config(format!("checkpoint parameter {name} not in the architecture")));
        }
        model
            .store
            .assign(&name, tensor)
            .map_err(|e| Error::Config(format!("checkpoint parameter {name}: {e}")))?;
    }
    if expected_end != data.len() {
        return Err(parse_err(pos + expected_end, "trailing bytes after parameter buffers"));
    }
    Ok(model)
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    crate::data::write_atomic(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FusionMode, TsvitConfig};

    fn model() -> Model<f64> {
        let cfg = ModelConfig {
            mode: FusionMode::SyncClassToken,
            tsvit: TsvitConfig {
                patch_t: 1,
                patch_h: 2,
                patch_w: 2,
                dim: 8,
                heads: 2,
                mlp_ratio: 2,
                temporal_depth: 1,
                spatial_depth: 1,
                num_classes: 3,
                height: 4,
                width: 4,
            },
            modalities: vec!["a".into(), "b".into()],
            channels: vec![2, 3],
        };
        Model::new(cfg, 17).unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let m = model();
        let bytes = encode_checkpoint(&m).unwrap();
        let back: Model<f64> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.store.named_tensors(), m.store.named_tensors());
        assert_eq!(back.config, m.config);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = encode_checkpoint(&model()).unwrap();
        assert!(matches!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 3]), Err(Error::Parse { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint::<f64>(&bad), Err(Error::Parse { offset: 0, .. })));
    }
}
