//! Versioned model file: magic bytes, format version, a JSON header and raw
//! little-endian `f64` tensor data.
//!
//! ```text
//! [8]  magic "FMLPMODL"
//! [4]  format version, u32 LE
//! [8]  header length in bytes, u64 LE
//! [..] header JSON: schema, run config, tensor table, training summary
//! [..] tensors, concatenated in header order, f64 LE
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::FeatureSchema;
use crate::error::{Error, Result};
use crate::model::{FieldInfo, Model, ParamCounts};
use crate::params::Parameters;

pub const MAGIC: &[u8; 8] = b"FMLPMODL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Outcome of the run that produced the model. Holds no timings, so
/// repeated runs serialize identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: String,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub val_auc: f64,
    pub val_logloss: f64,
    pub test_auc: f64,
    pub test_logloss: f64,
    pub parameters: ParamCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema: FeatureSchema,
    config: RunConfig,
    tensors: Vec<TensorMeta>,
    summary: Option<TrainSummary>,
}

#[derive(Debug, Clone)]
pub struct ModelContainer {
    pub schema: FeatureSchema,
    pub config: RunConfig,
    pub model: Model,
    pub summary: Option<TrainSummary>,
}

impl ModelContainer {
    pub fn new(schema: FeatureSchema, mut config: RunConfig, model: Model, summary: Option<TrainSummary>) -> Self {
        config.out_dir = None;
        Self {
            schema,
            config,
            model,
            summary,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let views = self.model.params();
        let header = Header {
            schema: self.schema.clone(),
            config: self.config.clone(),
            tensors: views
                .iter()
                .map(|v| TensorMeta {
                    name: v.name.clone(),
                    shape: v.shape.clone(),
                })
                .collect(),
            summary: self.summary.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let n_values: usize = views.iter().map(|v| v.data.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &views {
            for x in v.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: origin.to_path_buf(),
            reason,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a model file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {version}; this build reads version {FORMAT_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < header_len {
            return Err(bad("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])?;
        header.schema.validate()?;
        let mut model = Model::new(
            &header.config.model_config(),
            &FieldInfo::from_schema(&header.schema),
            header.config.seed,
        )?;

        let mut data = &body[header_len..];
        {
            let mut views = model.params_mut();
            if views.len() != header.tensors.len() {
                return Err(bad(format!(
                    "file lists {} tensors, the configured model has {}",
                    header.tensors.len(),
                    views.len()
                )));
            }
            for (v, meta) in views.iter_mut().zip(&header.tensors) {
                if v.name != meta.name || v.shape != meta.shape {
                    return Err(bad(format!(
                        "tensor {} {:?} does not match model tensor {} {:?}",
                        meta.name, meta.shape, v.name, v.shape
                    )));
                }
                let n = v.data.len() * 8;
                if data.len() < n {
                    return Err(bad(format!("truncated data in tensor {}", meta.name)));
                }
                for (x, chunk) in v.data.iter_mut().zip(data[..n].chunks_exact(8)) {
                    *x = f64::from_le_bytes(chunk.try_into().unwrap());
                }
                data = &data[n..];
            }
        }
        if !data.is_empty() {
            return Err(bad(format!("{} trailing bytes", data.len())));
        }
        Ok(Self {
            schema: header.schema,
            config: header.config,
            model,
            summary: header.summary,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
