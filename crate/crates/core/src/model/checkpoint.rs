//! Versioned binary checkpoint format with named arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes   b"INCREC01"
//! header_len       u32
//! header           JSON: format_version, config, tokens, labels,
//!                        epochs_trained, seed
//! array_count      u32
//! per array:
//!   name_len       u32
//!   name           UTF-8 bytes
//!   ndim           u32
//!   dims           u64 * ndim
//!   data           f64 (LE bits) * prod(dims)
//! ```
//!
//! Floats are stored as raw IEEE-754 bits, so save/load round-trips are
//! bit-exact. Arrays appear in `ModelWeights::named` order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::weights::ModelWeights;
use super::ModelConfig;
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"INCREC01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tokens: Vec<String>,
    labels: Vec<String>,
    epochs_trained: usize,
    seed: u64,
}

/// A trained (or initialized) model together with everything needed to run
/// it on raw text: config, weights, token vocabulary and label names.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    /// Token strings in id order (position 0 is the padding token).
    pub tokens: Vec<String>,
    /// Label names in id order.
    pub labels: Vec<String>,
    pub epochs_trained: usize,
    pub seed: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            tokens: self.tokens.clone(),
            labels: self.labels.clone(),
            epochs_trained: self.epochs_trained,
            seed: self.seed,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        w.write_all(&header_bytes)?;

        let named = self.weights.named();
        w.write_all(&(named.len() as u32).to_le_bytes())?;
        for (name, tensor) in named {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
            for &dim in tensor.shape() {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Format(format!(
                "bad magic {:?} (not a checkpoint file?)",
                magic
            )));
        }
        let header_len = read_u32(&mut r)? as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }

        let mut weights = ModelWeights::zeros(&header.config);
        let array_count = read_u32(&mut r)? as usize;
        let expected = weights.named().len();
        if array_count != expected {
            return Err(CheckpointError::Format(format!(
                "expected {expected} arrays for this config, found {array_count}"
            )));
        }
        for (expected_name, tensor) in weights.named_mut() {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| CheckpointError::Format(format!("array name: {e}")))?;
            if name != expected_name {
                return Err(CheckpointError::Format(format!(
                    "array order mismatch: expected `{expected_name}`, found `{name}`"
                )));
            }
            let ndim = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                dims.push(u64::from_le_bytes(b) as usize);
            }
            if dims != tensor.shape() {
                return Err(CheckpointError::Format(format!(
                    "`{name}`: shape {:?} does not match config shape {:?}",
                    dims,
                    tensor.shape()
                )));
            }
            let numel: usize = dims.iter().product();
            let mut data = vec![0.0f64; numel];
            let mut b = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            let mut loaded = Tensor::new(dims, data)
                .map_err(|e| CheckpointError::Format(e.to_string()))?;
            loaded.requires_grad = tensor.requires_grad;
            *tensor = loaded;
        }

        Ok(Checkpoint {
            config: header.config,
            weights,
            tokens: header.tokens,
            labels: header.labels,
            epochs_trained: header.epochs_trained,
            seed: header.seed,
        })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadKind;

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let cfg = ModelConfig::desk_default(9, 3, HeadKind::Tagging);
        let ckpt = Checkpoint {
            weights: ModelWeights::init(&cfg, 77),
            config: cfg,
            tokens: (0..9).map(|i| format!("tok{i}")).collect(),
            labels: vec!["A".into(), "B".into(), "C".into()],
            epochs_trained: 12,
            seed: 42,
        };
        let dir = std::env::temp_dir().join("increc_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.tokens, ckpt.tokens);
        assert_eq!(loaded.labels, ckpt.labels);
        assert_eq!(loaded.epochs_trained, 12);
        for ((n1, t1), (n2, t2)) in ckpt.weights.named().iter().zip(loaded.weights.named()) {
            assert_eq!(n1, &n2);
            assert_eq!(t1.shape(), t2.shape());
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{n1} not bit-exact");
            }
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = std::env::temp_dir().join("increc_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("garbage.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::Format(_))
        ));
        std::fs::remove_file(&path).ok();
    }
}
