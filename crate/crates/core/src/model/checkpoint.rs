use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Tokenizer};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "medna-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    /// Base64 of little-endian `f64` values.
    data: String,
}

#[derive(Serialize, Deserialize)]
struct File {
    format: String,
    version: u32,
    dtype: String,
    config: ModelConfig,
    config_hash: String,
    seed: u64,
    training: serde_json::Value,
    tokenizer: Tokenizer,
    tensors: BTreeMap<String, StoredTensor>,
}

/// A loaded model plus the free-form training metadata saved with it.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub model: Model<T>,
    pub config_hash: String,
    pub training: serde_json::Value,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>, training: serde_json::Value) -> Result<()> {
    let tensors = model
        .params
        .iter()
        .map(|(name, t)| {
            let bytes: Vec<u8> = t.data().iter().flat_map(|x| x.as_f64().to_le_bytes()).collect();
            let stored = StoredTensor {
                shape: t.shape().to_vec(),
                data: STANDARD.encode(bytes),
            };
            (name.clone(), stored)
        })
        .collect();
    let file = File {
        format: CHECKPOINT_FORMAT.into(),
        version: VERSION,
        dtype: T::DTYPE.into(),
        config: model.config.clone(),
        config_hash: model.config.hash(),
        seed: model.seed,
        training,
        tokenizer: model.tokenizer.clone(),
        tensors,
    };
    std::fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

/// The scalar type a checkpoint was written with (`f32` or `f64`).
pub fn checkpoint_dtype(path: &Path) -> Result<String> {
    #[derive(Deserialize)]
    struct Header {
        dtype: String,
    }
    let h: Header = serde_json::from_slice(&std::fs::read(path)?)?;
    Ok(h.dtype)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bad = |msg: String| Error::Invalid(format!("{}: {msg}", path.display()));
    let file: File = serde_json::from_slice(&std::fs::read(path)?)?;
    if file.format != CHECKPOINT_FORMAT || file.version != VERSION {
        return Err(bad(format!("unsupported checkpoint {} v{}", file.format, file.version)));
    }
    if file.config.hash() != file.config_hash {
        return Err(Error::ConfigMismatch(format!(
            "{}: stored hash does not match stored config",
            path.display()
        )));
    }
    let mut params = BTreeMap::new();
    for (name, stored) in file.tensors {
        let bytes = STANDARD
            .decode(&stored.data)
            .map_err(|e| bad(format!("tensor {name}: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(bad(format!("tensor {name}: truncated data")));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        params.insert(name, Tensor::new(stored.shape, data)?);
    }
    Ok(Checkpoint {
        model: Model::from_parts(file.config, file.tokenizer, params, file.seed)?,
        config_hash: file.config_hash,
        training: file.training,
    })
}
