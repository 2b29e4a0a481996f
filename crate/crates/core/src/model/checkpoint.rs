//! Checkpoint persistence: a versioned header followed by named tensors.
//!
//! ```text
//! magic     4 bytes  "TACK"
//! version   u32
//! count     u32      number of tensors
//! tensors   count ×:
//!   name_len u16, name utf-8
//!   ndim     u8, dims ndim × u32
//!   data     prod(dims) × f64, little-endian
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelError, NetworkParams};

const MAGIC: &[u8; 4] = b"TACK";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &NetworkParams) -> Result<(), ModelError> {
    let tensors = params.tensors();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, data) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[shape.len() as u8])?;
        for d in &shape {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(data.len() * 8);
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint into the parameter structure implied by `cfg`.
/// Names and shapes must match exactly; extra or missing tensors fail.
pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<NetworkParams, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Format("bad checkpoint magic".into()));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(ModelError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    r.read_exact(&mut buf4)?;
    let count = u32::from_le_bytes(buf4) as usize;

    let mut loaded: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for _ in 0..count {
        let mut buf2 = [0u8; 2];
        r.read_exact(&mut buf2)?;
        let name_len = u16::from_le_bytes(buf2) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| ModelError::Format("tensor name is not utf-8".into()))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            r.read_exact(&mut buf4)?;
            shape.push(u32::from_le_bytes(buf4) as usize);
        }
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if loaded.insert(name.clone(), (shape, data)).is_some() {
            return Err(ModelError::Format(format!("duplicate tensor {name}")));
        }
    }

    let mut params = NetworkParams::zeros(cfg)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .iter()
        .map(|(n, s, _)| (n.clone(), s.clone()))
        .collect();
    if expected.len() != loaded.len() {
        return Err(ModelError::Format(format!(
            "checkpoint has {} tensors, config implies {}",
            loaded.len(),
            expected.len()
        )));
    }
    for ((name, shape), (_, slot)) in expected.iter().zip(params.tensors_mut()) {
        let (got_shape, data) = loaded
            .get(name)
            .ok_or_else(|| ModelError::Format(format!("missing tensor {name}")))?;
        if got_shape != shape {
            return Err(ModelError::ShapeMismatch {
                expected: format!("{name}: {shape:?}"),
                got: format!("{got_shape:?}"),
            });
        }
        slot.copy_from_slice(data);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            conv_channels: vec![4],
            embed_dim: 8,
            attn_heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ff_dim: 16,
            n_heads: 2,
            head_hidden: 8,
            arch: Arch::Transformer,
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tack");
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let params = NetworkParams::init(&cfg(), &mut rng).unwrap();
        save_checkpoint(&path, &params).unwrap();
        let back = load_checkpoint(&path, &cfg()).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.tack");
        let b = dir.path().join("b.tack");
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let params = NetworkParams::init(&cfg(), &mut rng).unwrap();
        save_checkpoint(&a, &params).unwrap();
        save_checkpoint(&b, &params).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn load_rejects_wrong_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tack");
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let params = NetworkParams::init(&cfg(), &mut rng).unwrap();
        save_checkpoint(&path, &params).unwrap();
        let mut other = cfg();
        other.n_heads = 4;
        assert!(load_checkpoint(&path, &other).is_err());
    }
}
