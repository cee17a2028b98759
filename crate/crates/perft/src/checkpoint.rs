//! Checkpoints: a directory of PMAT tensor dumps plus `manifest.json`
//! recording shapes, roles, digests and the full experiment config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{PerftError, Result};
use crate::model::{Model, TensorRole};
use crate::numeric::{read_matrix, write_matrix};
use crate::train::tensor_digest;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTensor {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
    pub role: TensorRole,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub tensors: Vec<ManifestTensor>,
}

fn tensor_file_name(name: &str) -> String {
    format!("{}.pmat", name.replace('.', "_"))
}

/// Write every model tensor and the manifest into `dir` (created if absent).
pub fn save_checkpoint(dir: &Path, model: &Model, config: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for t in model.named_tensors() {
        let file = tensor_file_name(&t.name);
        write_matrix(&dir.join(&file), &t.matrix)?;
        tensors.push(ManifestTensor {
            name: t.name,
            file,
            rows: t.matrix.rows(),
            cols: t.matrix.cols(),
            trainable: t.trainable,
            role: t.role,
            sha256: tensor_digest(&t.matrix),
        });
    }
    let manifest = Manifest {
        config: config.clone(),
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST_NAME), json + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    if !path.exists() {
        return Err(PerftError::Config(format!(
            "missing {} in {}",
            MANIFEST_NAME,
            dir.display()
        )));
    }
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text)
        .map_err(|e| PerftError::Config(format!("{}: {e}", path.display())))
}

/// Rebuild the model described by the manifest and load the saved tensor
/// data over it, verifying shapes and digests.
pub fn load_checkpoint(dir: &Path) -> Result<(ExperimentConfig, Model)> {
    let manifest = read_manifest(dir)?;
    manifest.config.validate()?;
    let model = manifest.config.build_model(None)?;
    let live = model.named_tensors();
    if live.len() != manifest.tensors.len() {
        return Err(PerftError::Config(format!(
            "checkpoint lists {} tensors, model has {}",
            manifest.tensors.len(),
            live.len()
        )));
    }
    for entry in &manifest.tensors {
        let t = live
            .iter()
            .find(|t| t.name == entry.name)
            .ok_or_else(|| PerftError::Config(format!("unknown tensor {}", entry.name)))?;
        let m = read_matrix(&dir.join(&entry.file))?;
        if m.rows() != entry.rows || m.cols() != entry.cols {
            return Err(PerftError::Config(format!(
                "{}: file shape {}x{} does not match manifest {}x{}",
                entry.name,
                m.rows(),
                m.cols(),
                entry.rows,
                entry.cols
            )));
        }
        if m.rows() != t.matrix.rows() || m.cols() != t.matrix.cols() {
            return Err(PerftError::Config(format!(
                "{}: checkpoint shape {}x{} does not match model {}x{}",
                entry.name,
                m.rows(),
                m.cols(),
                t.matrix.rows(),
                t.matrix.cols()
            )));
        }
        if tensor_digest(&m) != entry.sha256 {
            return Err(PerftError::Config(format!(
                "{}: digest mismatch, checkpoint is corrupt",
                entry.name
            )));
        }
        let data = m.to_vec();
        t.matrix.update_data(|d| d.copy_from_slice(&data));
    }
    Ok((manifest.config, model))
}
