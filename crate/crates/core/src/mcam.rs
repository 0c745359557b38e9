//! MCAM tensor container.
//!
//! Layout:
//!
//! ```text
//! "MCAM"                     4 bytes magic
//! version                    u32 little-endian (currently 1)
//! header_len                 u64 little-endian
//! header                     header_len bytes of UTF-8 JSON
//! data                       raw little-endian f32, row-major
//! ```
//!
//! The JSON header holds the optional model config, a free-form
//! `metadata` object and the tensor index. Each index entry is
//! `{name, shape, offset}` with `offset` in bytes from the start of the
//! data section. Model tensors are named `layer{i}.expert{j}.up|gate|down`
//! and `layer{i}.router`; expert `j` counts shared experts first. Pruned
//! models are stored with their ragged per-expert widths in the shapes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CameraError, Result};
use crate::model::{ExpertWeights, MoELayer, MoEModel, ModelConfig};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"MCAM";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<ModelConfig>,
    #[serde(default)]
    metadata: Map<String, Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub config: Option<ModelConfig>,
    pub metadata: Map<String, Value>,
    pub tensors: Vec<(String, Matrix<f32>)>,
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, m: Matrix<f32>) {
        self.tensors.push((name.into(), m));
    }

    pub fn get(&self, name: &str) -> Result<&Matrix<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| CameraError::TensorNotFound(name.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, m) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: [m.rows(), m.cols()],
                offset,
            });
            offset += (m.as_slice().len() * 4) as u64;
        }
        let header = Header {
            config: self.config,
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)?;

        let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &self.tensors {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE || &bytes[..4] != MAGIC {
            return Err(CameraError::BadContainer("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CameraError::BadContainer(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = PREAMBLE
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| CameraError::BadContainer("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..data_start])?;
        let data = &bytes[data_start..];

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let [rows, cols] = entry.shape;
            let n_bytes = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CameraError::BadContainer(format!("tensor {} too large", entry.name)))?;
            let start = entry.offset as usize;
            let chunk = start
                .checked_add(n_bytes)
                .and_then(|end| data.get(start..end))
                .ok_or_else(|| CameraError::BadContainer(format!("tensor {} out of bounds", entry.name)))?;
            let values = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            tensors.push((entry.name, Matrix::from_vec(rows, cols, values)?));
        }
        Ok(Self {
            config: header.config,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| CameraError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CameraError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn tensor_name(layer: usize, expert: usize, kind: &str) -> String {
    format!("layer{layer}.expert{expert}.{kind}")
}

pub fn router_name(layer: usize) -> String {
    format!("layer{layer}.router")
}

pub fn model_to_container(model: &MoEModel, metadata: Map<String, Value>) -> Container {
    let mut c = Container {
        config: Some(model.config),
        metadata,
        tensors: Vec::new(),
    };
    for (i, layer) in model.layers.iter().enumerate() {
        for (j, e) in layer.experts.iter().enumerate() {
            c.push(tensor_name(i, j, "up"), e.w_up.clone());
            c.push(tensor_name(i, j, "gate"), e.w_gate.clone());
            c.push(tensor_name(i, j, "down"), e.w_down.clone());
        }
        c.push(router_name(i), layer.router.clone());
    }
    c
}

pub fn model_from_container(c: &Container) -> Result<MoEModel> {
    let config = c
        .config
        .ok_or_else(|| CameraError::BadContainer("container has no model config".into()))?;
    config.validate()?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let experts = (0..config.total_experts())
            .map(|j| {
                ExpertWeights::new(
                    c.get(&tensor_name(i, j, "up"))?.clone(),
                    c.get(&tensor_name(i, j, "gate"))?.clone(),
                    c.get(&tensor_name(i, j, "down"))?.clone(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        layers.push(MoELayer::new(config, experts, c.get(&router_name(i))?.clone())?);
    }
    MoEModel::new(config, layers)
}

pub fn save_model(path: &Path, model: &MoEModel, metadata: Map<String, Value>) -> Result<()> {
    model_to_container(model, metadata).write(path)
}

pub fn load_model(path: &Path) -> Result<MoEModel> {
    model_from_container(&Container::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{random_model, LayerGen};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_experts: 3,
            n_shared: 1,
            d_model: 6,
            d_ff: 4,
            top_k: 2,
        }
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let model = random_model(&cfg(), 5, &LayerGen::default()).unwrap();
        let c = model_to_container(&model, Map::new());
        let back = model_from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn ragged_widths_survive() {
        let mut model = random_model(&cfg(), 5, &LayerGen::default()).unwrap();
        model.layers[1].experts[2] = ExpertWeights::empty(6);
        let e = &model.layers[0].experts[0];
        model.layers[0].experts[0] = ExpertWeights::new(
            e.w_up.select_rows(&[1, 3]),
            e.w_gate.select_rows(&[1, 3]),
            e.w_down.select_cols(&[1, 3]),
        )
        .unwrap();
        let bytes = model_to_container(&model, Map::new()).to_bytes().unwrap();
        let back = model_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.layers[0].widths(), vec![2, 4, 4, 4]);
        assert_eq!(back.layers[1].widths(), vec![4, 4, 0, 4]);
        assert_eq!(back, model);
    }

    #[test]
    fn preamble_layout() {
        let mut c = Container::default();
        c.push("X", Matrix::from_vec(1, 2, vec![1.0, -2.0]).unwrap());
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"MCAM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 16 + hl + 8);
        assert_eq!(&bytes[16 + hl..16 + hl + 4], &1.0f32.to_le_bytes());
        let header: Value = serde_json::from_slice(&bytes[16..16 + hl]).unwrap();
        assert_eq!(header["tensors"][0]["name"], "X");
        assert_eq!(header["tensors"][0]["shape"], serde_json::json!([1, 2]));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            Container::from_bytes(b"NOPE0000000000000000"),
            Err(CameraError::BadContainer(_))
        ));
        let mut c = Container::default();
        c.push("X", Matrix::from_vec(2, 2, vec![1.0; 4]).unwrap());
        let bytes = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn missing_tensor() {
        let c = Container::default();
        assert!(matches!(c.get("X"), Err(CameraError::TensorNotFound(_))));
    }
}
