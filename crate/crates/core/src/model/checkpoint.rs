//! Model checkpoints.
//!
//! ```text
//! "FARD" | u32 version | u32 header_len | header JSON | named-tensor table
//! ```
//! The header holds the model config and free-form training metadata. Optimizer moments,
//! when present, are stored as `adam.m.<param>` and `adam.v.<param>`.

use std::fs;
use std::path::Path;

use far_tensor::{AdamW, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::mmdit::Model;
use crate::codec::PatchCodec;
use crate::error::{io_err, FarError, Result};
use crate::scene::CodecInfo;
use crate::tensorfile::{take_named, write_table, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FARD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: serde_json::Value,
    optimizer_step: Option<u64>,
}

pub struct Checkpoint {
    pub model: Model,
    pub meta: serde_json::Value,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    /// The codec recorded in the metadata by training.
    pub fn codec(&self) -> Result<PatchCodec> {
        let info: CodecInfo = self
            .meta
            .get("codec")
            .cloned()
            .and_then(|v| serde_json::from_value(v).ok())
            .ok_or_else(|| FarError::Contract("checkpoint metadata has no codec".into()))?;
        PatchCodec::new(info.patch, info.seed)
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    meta: &serde_json::Value,
    optimizer: Option<&AdamW>,
) -> Result<()> {
    let with_moments = optimizer.filter(|o| !o.moments().0.is_empty());
    let header = Header {
        model: model.config.clone(),
        meta: meta.clone(),
        optimizer_step: with_moments.map(|o| o.step_count()),
    };
    let json = serde_json::to_vec(&header).map_err(|source| FarError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let mut names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    let mut tensors: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    if let Some(opt) = with_moments {
        let (m, v) = opt.moments();
        for ((name, t), (m, v)) in model.params.iter().zip(m.iter().zip(v)) {
            names.push(format!("adam.m.{name}"));
            tensors.push(Tensor::new(t.shape().to_vec(), m.clone())?);
            names.push(format!("adam.v.{name}"));
            tensors.push(Tensor::new(t.shape().to_vec(), v.clone())?);
        }
    }
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let table: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(&tensors).collect();
    write_table(&mut out, &table);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut r = Reader::new(&bytes, path);
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let len = r.u32("header length")? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len, "header")?).map_err(|source| FarError::Json {
            path: path.to_path_buf(),
            source,
        })?;
    let mut tensors = r.table()?;
    let template = Model::new(header.model.clone(), 0).map_err(|e| r.format_err(e.to_string()))?;
    let mut store = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, _) in template.params.iter() {
        store.add(name, take_named(&mut tensors, name, path)?);
        if header.optimizer_step.is_some() {
            m.push(take_named(&mut tensors, &format!("adam.m.{name}"), path)?.into_data());
            v.push(take_named(&mut tensors, &format!("adam.v.{name}"), path)?.into_data());
        }
    }
    let model = Model::from_params(header.model, store).map_err(|e| r.format_err(e.to_string()))?;
    let optimizer = header.optimizer_step.map(|step| {
        let mut opt = AdamW::default();
        opt.restore(step, m, v);
        opt
    });
    Ok(Checkpoint {
        model,
        meta: header.meta,
        optimizer,
    })
}
