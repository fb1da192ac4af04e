//! Checkpoint directories: `manifest.json` describing the model and every
//! parameter, and `weights.bin` holding the parameters as consecutive flat
//! tensors in manifest order.

use std::path::Path;

use ovseg_core::config::{ModelConfig, Toggles};
use ovseg_core::nn::{ParamGroup, ParamStore};
use ovseg_core::Model;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::tensor_io::{load_tensors, save_tensors};

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
pub const FORMAT: &str = "ovseg-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub iteration: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub toggles: Toggles,
    pub params: Vec<ParamRecord>,
}

pub fn save(dir: &Path, model: &Model, iteration: usize, seed: u64) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let entries = model.store().entries();
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        iteration,
        seed,
        model: model.config().clone(),
        toggles: model.toggles(),
        params: entries
            .iter()
            .map(|e| ParamRecord { name: e.name.clone(), group: e.group, shape: e.value.shape().to_vec() })
            .collect(),
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))?;
    let tensors: Vec<_> = entries.iter().map(|e| &e.value).collect();
    save_tensors(&dir.join(WEIGHTS), &tensors)
}

/// Manifest and parameters of a checkpoint, checked against each other.
pub fn load(dir: &Path) -> CliResult<(Manifest, ParamStore)> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CliError::format(&path, e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(CliError::format(&path, format!("not a version-1 {FORMAT} manifest")));
    }
    let weights = dir.join(WEIGHTS);
    let tensors = load_tensors(&weights)?;
    if tensors.len() != manifest.params.len() {
        return Err(CliError::format(
            &weights,
            format!("{} tensors for {} manifest entries", tensors.len(), manifest.params.len()),
        ));
    }
    let mut store = ParamStore::new();
    for (rec, t) in manifest.params.iter().zip(tensors) {
        if t.shape() != rec.shape.as_slice() {
            return Err(CliError::format(&weights, format!("{} has shape {:?}, manifest says {:?}", rec.name, t.shape(), rec.shape)));
        }
        store.add(rec.name.clone(), rec.group, t);
    }
    Ok((manifest, store))
}

/// Builds a model of `config` from the checkpoint in `dir`; the toggles
/// stored in the checkpoint are kept.
pub fn load_model(dir: &Path, config: Option<&ModelConfig>) -> CliResult<(Manifest, Model)> {
    let (manifest, store) = load(dir)?;
    let config = config.unwrap_or(&manifest.model);
    let model = Model::with_params(config, manifest.toggles, &store).map_err(|e| CliError::Mismatch(e.to_string()))?;
    Ok((manifest, model))
}
