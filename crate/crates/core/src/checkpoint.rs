//! Model checkpoint container.
//!
//! Layout: magic `UNET`, version byte `0x01`, `u32` little-endian length of
//! a JSON header, the header text, then every parameter as little-endian
//! `f32` in registration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::RegionKind;
use crate::model::{UNetConfig, UNetModel};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"UNET";
pub const VERSION: u8 = 0x01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: UNetConfig,
    pub task: Option<RegionKind>,
    pub param_count: usize,
    /// Epochs the parameters were trained for.
    #[serde(default)]
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: UNetModel,
}

impl Checkpoint {
    pub fn new(model: UNetModel, task: Option<RegionKind>, epochs: usize) -> Self {
        let header = CheckpointHeader {
            config: model.config().clone(),
            task,
            param_count: model.config().param_count(),
            epochs,
        };
        Self { header, model }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let len = u32::try_from(header.len())
            .map_err(|_| Error::Format("checkpoint header too large".into()))?;
        let mut out = Vec::with_capacity(9 + header.len() + self.header.param_count * 4);
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.model.parameters() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 {
            return Err(Error::Truncated {
                expected: 9,
                found: bytes.len(),
            });
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("length checked");
        if found != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found,
            });
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                bytes[4]
            )));
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into().expect("length checked")) as usize;
        if bytes.len() < 9 + len {
            return Err(Error::Truncated {
                expected: 9 + len,
                found: bytes.len(),
            });
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[9..9 + len])?;
        header.config.validate()?;
        if header.param_count != header.config.param_count() {
            return Err(Error::Format(format!(
                "header declares {} parameters but its config implies {}",
                header.param_count,
                header.config.param_count()
            )));
        }
        let payload = &bytes[9 + len..];
        let expected = header.param_count * 4;
        if payload.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() != expected {
            return Err(Error::LengthMismatch {
                declared: header.param_count,
                actual: payload.len() / 4,
            });
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("chunk of 4"))));
        let params = header
            .config
            .param_shapes()
            .into_iter()
            .map(|shape| {
                let n = shape.iter().product();
                Tensor::new(shape, values.by_ref().take(n).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let model = UNetModel::from_parameters(header.config.clone(), params)?;
        Ok(Self { header, model })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
