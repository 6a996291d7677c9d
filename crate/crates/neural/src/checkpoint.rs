//! Self-describing binary checkpoint container.
//!
//! Layout: the magic line `VYCKPT1\n`, a little-endian `u64` header length,
//! a JSON header, then every tensor's values as little-endian `f64` in the
//! order listed by the header.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NeuralError, Result};
use crate::params::Params;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"VYCKPT1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `"cnn"` or `"transformer"`.
    pub model: String,
    /// Echo of the model configuration.
    pub config: serde_json::Value,
    pub seed: u64,
    /// Free-form training metadata (history, best epoch, loss parameters).
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Params<f64>,
}

impl Checkpoint {
    pub fn new<T: Scalar>(
        model: &str,
        config: serde_json::Value,
        seed: u64,
        metadata: serde_json::Value,
        params: &Params<T>,
    ) -> Self {
        let params = params.cast::<f64>();
        let tensors = params
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Self {
            header: CheckpointHeader {
                model: model.to_string(),
                config,
                seed,
                metadata,
                tensors,
            },
            params,
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for e in &self.header.tensors {
            for v in self.params.get(&e.name)?.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NeuralError::Checkpoint("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)
            .map_err(|e| NeuralError::Checkpoint(format!("bad header: {e}")))?;
        let mut params = Params::new();
        let mut buf = [0u8; 8];
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf)
                    .map_err(|_| NeuralError::Checkpoint(format!("truncated tensor `{}`", e.name)))?;
                data.push(f64::from_le_bytes(buf));
            }
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    pub fn params_as<T: Scalar>(&self) -> Params<T> {
        self.params.cast()
    }
}
