//! JSON experiment configuration. Unknown keys are hard errors so that a
//! typo in a sweep grid fails loudly instead of silently running defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::CountSpec;
use crate::error::{PerftError, Result};
use crate::model::{Model, ModelConfig, PeftStrategyConfig};
use crate::moe::{FfnForm, MoeLayerConfig};
use crate::train::{SyntheticTaskSpec, TrainConfig};

/// The `model` section: layer count plus the per-layer MoE dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub d: usize,
    pub d_ffn: usize,
    pub n: usize,
    pub k: usize,
    pub ffn_form: FfnForm,
    #[serde(default)]
    pub renormalize_gates: bool,
    #[serde(default)]
    pub causal: bool,
}

impl ModelSection {
    pub fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            moe: MoeLayerConfig {
                d: self.d,
                d_ffn: self.d_ffn,
                n: self.n,
                k: self.k,
                ffn_form: self.ffn_form,
                renormalize_gates: self.renormalize_gates,
            },
            causal: self.causal,
        }
    }
}

/// Top-level experiment description. `task` and `train` may be omitted for
/// counting-only configurations (referenced backbones that are never built).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for model construction. `--seed` on the CLI overrides it.
    pub seed: u64,
    pub model: ModelSection,
    pub strategy: PeftStrategyConfig,
    #[serde(default)]
    pub task: Option<SyntheticTaskSpec>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub output_dir: Option<String>,
    /// Total activated model parameters; set for referenced backbones whose
    /// tensors are never built, computed exactly for toy models when unset.
    #[serde(default)]
    pub model_activated_total: Option<u64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| PerftError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let model_cfg = self.model.to_model_config();
        model_cfg.validate()?;
        self.strategy.validate(&model_cfg.moe)?;
        if let Some(task) = &self.task {
            task.validate()?;
            if task.d != self.model.d {
                return Err(PerftError::Config(format!(
                    "task.d ({}) must match model.d ({})",
                    task.d, self.model.d
                )));
            }
        }
        if let Some(train) = &self.train {
            train.validate()?;
        }
        Ok(())
    }

    /// Symbolic counting description; never builds tensors.
    pub fn count_spec(&self) -> CountSpec {
        CountSpec {
            layers: self.model.layers,
            d: self.model.d,
            d_ffn: self.model.d_ffn,
            n: self.model.n,
            k: self.model.k,
            ffn_form: self.model.ffn_form,
            variant: self.strategy.variant,
            d_b: self.strategy.d_b,
            model_activated_total: self.model_activated_total,
        }
    }

    /// Readout width demanded by the task, if any.
    pub fn readout_dim(&self) -> Option<usize> {
        self.task.as_ref().map(|t| match t.kind {
            crate::train::TaskKind::ClusterRegression => t.d,
            crate::train::TaskKind::ClusterClassification => t.num_clusters,
        })
    }

    pub fn build_model(&self, seed_override: Option<u64>) -> Result<Model> {
        Model::build(
            self.model.to_model_config(),
            self.strategy.clone(),
            seed_override.unwrap_or(self.seed),
            self.readout_dim(),
        )
    }
}
