//! Checkpoints are directories holding `header.json` and `params.bin`.
//!
//! The blob stores every parameter as little-endian `f32` in sorted name
//! order, matching the `params` list of the header.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mdfn, ModelConfig};
use crate::nn::{ParamRegistry, Tensor};

pub const HEADER_FILE: &str = "header.json";
pub const BLOB_FILE: &str = "params.bin";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: u32,
    pub config_hash: String,
    pub config: ModelConfig,
    pub step: u64,
    pub epoch: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub params: Vec<ParamEntry>,
}

/// Training position recorded with a checkpoint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Snapshot {
    pub step: u64,
    pub epoch: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

pub fn save(dir: impl AsRef<Path>, model: &Mdfn<f32>, snap: &Snapshot) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let params = model.params();
    let header = Header {
        format: FORMAT_VERSION,
        config_hash: model.config().hash(),
        config: model.config().clone(),
        step: snap.step,
        epoch: snap.epoch,
        seed: snap.seed,
        metrics: snap.metrics.clone(),
        params: params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut blob = Vec::with_capacity(params.num_scalars() * 4);
    for (_, t) in params.iter() {
        for x in t.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut json = serde_json::to_vec_pretty(&header)?;
    json.push(b'\n');
    fs::write(dir.join(HEADER_FILE), json)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn read_header(dir: impl AsRef<Path>) -> Result<Header> {
    let path = dir.as_ref().join(HEADER_FILE);
    let header: Header = serde_json::from_slice(&fs::read(&path)?)?;
    if header.format != FORMAT_VERSION {
        return Err(Error::HeaderMismatch {
            path,
            detail: format!("format {} (expected {FORMAT_VERSION})", header.format),
        });
    }
    let found = header.config.hash();
    if found != header.config_hash {
        return Err(Error::ConfigHashMismatch {
            expected: header.config_hash,
            found,
        });
    }
    Ok(header)
}

/// Loads a checkpoint. With `expected`, its config hash must match the
/// stored one.
pub fn load(dir: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<(Mdfn<f32>, Header)> {
    let dir = dir.as_ref();
    let header = read_header(dir)?;
    if let Some(cfg) = expected {
        let want = cfg.hash();
        if want != header.config_hash {
            return Err(Error::ConfigHashMismatch {
                expected: want,
                found: header.config_hash,
            });
        }
    }
    let path = dir.join(BLOB_FILE);
    let blob = fs::read(&path)?;
    let total: usize = header
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if blob.len() != total * 4 {
        return Err(Error::HeaderMismatch {
            path,
            detail: format!("{} bytes for {total} values", blob.len()),
        });
    }
    let mut values = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut params = ParamRegistry::new();
    for p in &header.params {
        let n = p.shape.iter().product();
        let data: Vec<f32> = values.by_ref().take(n).collect();
        params.insert(p.name.clone(), Tensor::new(p.shape.clone(), data)?)?;
    }
    let model = Mdfn::from_params(header.config.clone(), params)?;
    Ok((model, header))
}
