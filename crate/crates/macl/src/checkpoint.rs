//! Checkpoint directory format: a manifest JSON describing every tensor
//! (name, component tag, shape, byte range) plus one raw little-endian f32
//! blob. Component tags let transfer select subsets without parsing names.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MaclModel, SegModel};
use crate::nn::ParamModule;
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossScalars {
    pub total: f64,
    pub lg: f64,
    pub ld: f64,
    pub ler: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct TensorRecord {
    pub name: String,
    pub component: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tensors: Vec<TensorRecord>,
    /// Snapshot of the experiment configuration that produced this model.
    pub config: serde_json::Value,
    pub final_loss: Option<LossScalars>,
    pub rng_state: RngState,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    component: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: usize,
    byte_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    config: serde_json::Value,
    final_loss: Option<LossScalars>,
    rng_state: RngState,
}

fn collect<M, T>(model: &M, tag: T) -> Vec<TensorRecord>
where
    M: ParamModule<f32>,
    T: Fn(&str) -> String,
{
    let mut tensors = Vec::new();
    model.visit_params_ref("", &mut |name, p| {
        tensors.push(TensorRecord {
            name: name.to_string(),
            component: tag(name),
            shape: p.data.shape().to_vec(),
            data: p.data.iter().copied().collect(),
        });
    });
    tensors
}

impl Checkpoint {
    pub fn from_macl(
        model: &MaclModel<f32>,
        config: serde_json::Value,
        final_loss: Option<LossScalars>,
        rng_state: RngState,
    ) -> Self {
        Self {
            tensors: collect(model, |n| MaclModel::<f32>::component_tag(n).to_string()),
            config,
            final_loss,
            rng_state,
        }
    }

    pub fn from_seg(
        model: &SegModel<f32>,
        config: serde_json::Value,
        rng_state: RngState,
    ) -> Self {
        let tag = |name: &str| match name.split('.').next().unwrap_or("") {
            "encoder" => "encoder".to_string(),
            "decoder" => "decoder".to_string(),
            "head" => "head".to_string(),
            other => panic!("unknown segmentation component {other}"),
        };
        Self {
            tensors: collect(model, tag),
            config,
            final_loss: None,
            rng_state,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_map(&self) -> BTreeMap<&str, &TensorRecord> {
        self.tensors.iter().map(|t| (t.name.as_str(), t)).collect()
    }

    fn blob(&self) -> Vec<u8> {
        let total: usize = self.tensors.iter().map(|t| t.data.len() * 4).sum();
        let mut blob = Vec::with_capacity(total);
        for t in &self.tensors {
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        blob
    }

    /// Content id of the parameter blob.
    pub fn params_digest(&self) -> String {
        sha256_hex(&self.blob())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let blob = self.blob();
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for t in &self.tensors {
            let byte_len = t.data.len() * 4;
            entries.push(TensorEntry {
                name: t.name.clone(),
                component: t.component.clone(),
                shape: t.shape.clone(),
                dtype: "f32".to_string(),
                byte_offset: offset,
                byte_len,
            });
            offset += byte_len;
        }
        let manifest = Manifest {
            tensors: entries,
            config: self.config.clone(),
            final_loss: self.final_loss.clone(),
            rng_state: self.rng_state,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        std::fs::write(dir.join("params.bin"), blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let blob = std::fs::read(dir.join("params.bin"))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f32" {
                return Err(Error::Shape(format!(
                    "tensor {} has unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            let end = e.byte_offset + e.byte_len;
            if end > blob.len() || e.byte_len % 4 != 0 {
                return Err(Error::Shape(format!(
                    "tensor {} byte range {}..{end} outside blob of {} bytes",
                    e.name, e.byte_offset, blob.len()
                )));
            }
            let expected: usize = e.shape.iter().product();
            if expected * 4 != e.byte_len {
                return Err(Error::Shape(format!(
                    "tensor {} shape {:?} disagrees with byte length {}",
                    e.name, e.shape, e.byte_len
                )));
            }
            let data: Vec<f32> = blob[e.byte_offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(TensorRecord {
                name: e.name,
                component: e.component,
                shape: e.shape,
                data,
            });
        }
        Ok(Self {
            tensors,
            config: manifest.config,
            final_loss: manifest.final_loss,
            rng_state: manifest.rng_state,
        })
    }

    /// Copy every checkpoint tensor into a module with matching parameter
    /// names. Fails if a name is missing or a shape differs.
    pub fn apply_all<M: ParamModule<f32>>(&self, module: &mut M) -> Result<()> {
        let map = self.tensor_map();
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        module.visit_params("", &mut |name, p| match map.get(name) {
            None => missing.push(name.to_string()),
            Some(t) => {
                if t.shape != p.data.shape() {
                    mismatched.push(format!("{name}: {:?} vs {:?}", t.shape, p.data.shape()));
                } else {
                    p.data = ArrayD::from_shape_vec(IxDyn(&t.shape), t.data.clone())
                        .expect("validated shape");
                }
            }
        });
        if !missing.is_empty() || !mismatched.is_empty() {
            return Err(Error::Transfer(format!(
                "missing tensors: {missing:?}; shape mismatches: {mismatched:?}"
            )));
        }
        Ok(())
    }
}
