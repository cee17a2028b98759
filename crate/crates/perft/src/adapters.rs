//! Bottleneck adaptation blocks: LoRA (identity activation, scaled by
//! `alpha / D_B`) and parallel adapters (SiLU after the bottleneck). Both use
//! a zero-initialized up-projection so a fresh adapter is the zero map.

use serde::{Deserialize, Serialize};

use crate::error::{PerftError, Result};
use crate::numeric::{InitScheme, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterArch {
    Lora,
    ParallelAdapter,
}

pub struct BottleneckAdapter {
    pub w_down: Matrix,
    pub w_up: Matrix,
    pub arch: AdapterArch,
    /// LoRA output scale numerator; the applied factor is `alpha / D_B`.
    pub alpha: f64,
}

impl BottleneckAdapter {
    pub fn bottleneck(&self) -> usize {
        self.w_down.cols()
    }

    pub fn model_dim(&self) -> usize {
        self.w_down.rows()
    }
}

/// Deterministic adapter initialization: `w_down` from Normal(0, 1/D),
/// `w_up` all zeros.
pub fn init_adapter(
    d: usize,
    d_b: usize,
    arch: AdapterArch,
    alpha: f64,
    rng: &mut Rng,
) -> Result<BottleneckAdapter> {
    if d == 0 || d_b == 0 {
        return Err(PerftError::Config(format!(
            "adapter dimensions must be positive, got D={d} D_B={d_b}"
        )));
    }
    let std = 1.0 / (d as f64).sqrt();
    Ok(BottleneckAdapter {
        w_down: crate::numeric::init_matrix(d, d_b, InitScheme::ScaledNormal(std), rng)?,
        w_up: Matrix::zeros(d_b, d),
        arch,
        alpha,
    })
}

/// Adapter forward: LoRA `(alpha/D_B) * h W_down W_up`, parallel adapter
/// `silu(h W_down) W_up`.
pub fn adapter_forward(a: &BottleneckAdapter, h: &Matrix) -> Result<Matrix> {
    let bottleneck = h.matmul(&a.w_down)?;
    match a.arch {
        AdapterArch::Lora => bottleneck
            .matmul(&a.w_up)?
            .scale(a.alpha / a.bottleneck() as f64),
        AdapterArch::ParallelAdapter => bottleneck.silu()?.matmul(&a.w_up),
    }
}

/// Trainable parameter count of one adapter: both projection matrices.
/// `alpha` is a constant and is not counted.
pub fn adapter_param_count(a: &BottleneckAdapter) -> usize {
    a.w_down.len() + a.w_up.len()
}
