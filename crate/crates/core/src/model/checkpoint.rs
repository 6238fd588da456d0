//! Checkpoint container: a JSON header (config, vocabulary version, step
//! counter, tensor names and shapes) followed by raw little-endian `f64`
//! parameter data.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelError, Parameters, Seq2Seq};

const MAGIC: &[u8; 9] = b"LDTCKPT1\n";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a checkpoint: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_version: String,
    step: u64,
    tensors: Vec<(String, usize, usize)>,
}

#[derive(Clone)]
pub struct Checkpoint {
    pub model: Seq2Seq,
    pub vocab_version: String,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl Checkpoint {
    pub fn fresh(config: ModelConfig, vocab_version: impl Into<String>) -> Result<Checkpoint, ModelError> {
        Ok(Checkpoint {
            model: Seq2Seq::new(config)?,
            vocab_version: vocab_version.into(),
            step: 0,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = &self.model.params;
        let header = Header {
            config: self.model.config.clone(),
            vocab_version: self.vocab_version.clone(),
            step: self.step,
            tensors: params
                .names
                .iter()
                .zip(&params.tensors)
                .map(|(n, t)| (n.clone(), t.nrows(), t.ncols()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + params.count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &params.tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Checkpoint, CheckpointError> {
        let bad = |message: &str| CheckpointError::Format {
            path: origin.to_string(),
            message: message.to_string(),
        };
        let mut r = bytes;
        let mut magic = [0u8; 9];
        r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated"))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&r[..len]).map_err(|e| bad(&e.to_string()))?;
        r = &r[len..];
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, rows, cols) in header.tensors {
            let n = rows * cols;
            if r.len() < n * 8 {
                return Err(bad("truncated tensor data"));
            }
            let data: Vec<f64> = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            r = &r[n * 8..];
            tensors.push(Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(&e.to_string()))?);
            names.push(name);
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let model = Seq2Seq::from_parameters(header.config, Parameters { names, tensors })?;
        Ok(Checkpoint {
            model,
            vocab_version: header.vocab_version,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;

    #[test]
    fn save_load_preserves_outputs_bit_exactly() {
        let mut ck = Checkpoint::fresh(tiny_config(40), "abc").unwrap();
        ck.step = 17;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.vocab_version, "abc");
        assert_eq!(back.model.params, ck.model.params);
        let input = [3, 4, 5, 6];
        let a = ck.model.forward(&input, &[7, 8]).unwrap();
        let b = back.model.forward(&input, &[7, 8]).unwrap();
        assert_eq!(a, b);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn corrupt_file_rejected() {
        let ck = Checkpoint::fresh(tiny_config(40), "abc").unwrap();
        let mut bytes = ck.to_bytes();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes, "x").is_err());
        assert!(Checkpoint::from_bytes(b"hello", "x").is_err());
    }
}
