//! Versioned checkpoint files: a JSON list of named arrays with shape
//! headers, guarded by a magic string. Shared by the GAN networks, the
//! inference network and the regression baselines.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor2;

pub const MAGIC: &str = "dose-response-ckpt";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    magic: String,
    version: u32,
    arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Serialize named parameters from a store.
pub fn save(path: &Path, store: &ParamStore, named: &[(String, ParamId)]) -> Result<()> {
    let arrays = named
        .iter()
        .map(|(name, id)| {
            let t = store.get(*id);
            NamedArray {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
                data: t.as_slice().to_vec(),
            }
        })
        .collect();
    let file = CheckpointFile {
        magic: MAGIC.to_string(),
        version: VERSION,
        arrays,
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| Error::contract("checkpoint::save", e.to_string()))?;
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load a checkpoint as a list of named tensors.
pub fn load(path: &Path) -> Result<Vec<(String, Tensor2)>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| {
        Error::parse(path.display().to_string(), e.line(), e.to_string())
    })?;
    if file.magic != MAGIC {
        return Err(Error::parse(
            path.display().to_string(),
            1,
            format!("bad magic string {:?}", file.magic),
        ));
    }
    if file.version != VERSION {
        return Err(Error::parse(
            path.display().to_string(),
            1,
            format!("unsupported checkpoint version {}", file.version),
        ));
    }
    file.arrays
        .into_iter()
        .map(|a| {
            let name = a.name;
            Tensor2::from_vec(a.rows, a.cols, a.data)
                .map_err(|e| Error::contract("checkpoint::load", format!("{name}: {e}")))
                .map(|t| (name, t))
        })
        .collect()
}

/// Load a checkpoint into existing parameters, matching by name and
/// validating shapes.
pub fn restore(path: &Path, store: &mut ParamStore, named: &[(String, ParamId)]) -> Result<()> {
    let loaded = load(path)?;
    if loaded.len() != named.len() {
        return Err(Error::contract(
            "checkpoint::restore",
            format!("checkpoint has {} arrays, model has {}", loaded.len(), named.len()),
        ));
    }
    for (name, id) in named {
        let found = loaded
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::contract("checkpoint::restore", format!("missing array {name}")))?;
        let target = store.get(*id);
        if found.1.shape() != target.shape() {
            return Err(Error::dimension(
                "checkpoint::restore",
                format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    found.1.shape(),
                    target.shape()
                ),
            ));
        }
        *store.get_mut(*id) = found.1.clone();
    }
    Ok(())
}
