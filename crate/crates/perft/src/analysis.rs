//! Parameter accounting, routing statistics, key/expert vector extraction,
//! cosine structure and 2-D PCA export.

use serde::{Deserialize, Serialize};

use crate::error::{PerftError, Result};
use crate::model::{Model, PeftVariant, StrategyState};
use crate::moe::FfnForm;
use crate::train::Dataset;

/// Activated trainable parameter accounting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamReport {
    pub trainable_total: u64,
    pub trainable_activated_per_token: u64,
    pub model_activated_total: u64,
    /// `100 * trainable_activated_per_token / model_activated_total`.
    pub activated_efficiency: f64,
}

/// Symbolic model description for closed-form counting; no tensors are built.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CountSpec {
    pub layers: usize,
    pub d: usize,
    pub d_ffn: usize,
    pub n: usize,
    pub k: usize,
    pub ffn_form: FfnForm,
    pub variant: PeftVariant,
    pub d_b: usize,
    /// Total activated model parameters. When unset it is computed exactly
    /// from the dimensions (toy models); referenced backbones supply their
    /// published constant instead.
    pub model_activated_total: Option<u64>,
}

impl CountSpec {
    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d == 0 {
            return Err(PerftError::Config("L and D must be positive".into()));
        }
        if self.variant != PeftVariant::None && self.d_b == 0 {
            return Err(PerftError::Config("D_B must be at least 1".into()));
        }
        if self.k == 0 || self.k > self.n {
            return Err(PerftError::Config(format!(
                "K must satisfy 1 <= K <= N, got K={} N={}",
                self.k, self.n
            )));
        }
        Ok(())
    }
}

/// Closed-form trainable and activated-trainable counts per strategy.
pub fn count_params(spec: &CountSpec) -> Result<ParamReport> {
    spec.validate()?;
    let l = spec.layers as u64;
    let d = spec.d as u64;
    let d_b = spec.d_b as u64;
    let adapter = 2 * d * d_b;
    let (total, activated) = match spec.variant {
        PeftVariant::None => (0, 0),
        PeftVariant::PerftS => (l * adapter, l * adapter),
        PeftVariant::PerftD { m } => (l * m as u64 * adapter, l * m as u64 * adapter),
        PeftVariant::PerftE => (
            l * spec.n as u64 * adapter,
            l * spec.k as u64 * adapter,
        ),
        PeftVariant::PerftR { m, k_tilde } => (
            l * (m as u64 * adapter + d * m as u64),
            l * (k_tilde as u64 * adapter + d * m as u64),
        ),
        // q and v each get a D x D_B and a D_B x D factor
        PeftVariant::BaselineAttnLora => (l * 4 * d * d_b, l * 4 * d * d_b),
        PeftVariant::BaselineGateLora => (
            l * (d * d_b + d_b * spec.n as u64),
            l * (d * d_b + d_b * spec.n as u64),
        ),
    };
    let model_activated_total = match spec.model_activated_total {
        Some(v) => v,
        None => base_activated_params(spec) + activated,
    };
    if model_activated_total == 0 {
        return Err(PerftError::Config("model_activated_total is zero".into()));
    }
    Ok(ParamReport {
        trainable_total: total,
        trainable_activated_per_token: activated,
        model_activated_total,
        activated_efficiency: 100.0 * activated as f64 / model_activated_total as f64,
    })
}

/// Frozen-backbone parameters executed per token: attention projections,
/// router, and the K selected experts, per layer.
pub fn base_activated_params(spec: &CountSpec) -> u64 {
    let d = spec.d as u64;
    let d_ffn = spec.d_ffn as u64;
    let expert = match spec.ffn_form {
        FfnForm::Vanilla => 2 * d * d_ffn,
        FfnForm::Glu => 3 * d * d_ffn,
    };
    spec.layers as u64 * (4 * d * d + d * spec.n as u64 + spec.k as u64 * expert)
}

/// Build a `CountSpec` mirroring a live model.
pub fn count_spec_of(model: &Model, model_activated_total: Option<u64>) -> CountSpec {
    CountSpec {
        layers: model.cfg.layers,
        d: model.cfg.moe.d,
        d_ffn: model.cfg.moe.d_ffn,
        n: model.cfg.moe.n,
        k: model.cfg.moe.k,
        ffn_form: model.cfg.moe.ffn_form,
        variant: model.strategy_cfg.variant,
        d_b: model.strategy_cfg.d_b,
        model_activated_total,
    }
}

/// Aggregated dispatch statistics for one router.
#[derive(Debug, Clone, Serialize)]
pub struct RoutingStats {
    /// Fraction of dispatch slots landing on each expert; sums to 1.
    pub fractions: Vec<f64>,
    /// Mean softmax probability per expert.
    pub mean_probs: Vec<f64>,
    /// Dispatch entropy in nats; at most `ln(N)`.
    pub entropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhichRouter {
    Moe,
    Peft,
}

/// Per-layer routing statistics over a dataset.
pub fn routing_stats(model: &Model, dataset: &Dataset, which: WhichRouter) -> Result<Vec<RoutingStats>> {
    if which == WhichRouter::Peft
        && !matches!(model.strategy_cfg.variant, PeftVariant::PerftR { .. })
    {
        return Err(PerftError::Config(
            "this variant has no independent PEFT router".into(),
        ));
    }
    let l = model.cfg.layers;
    let mut counts: Vec<Vec<f64>> = Vec::new();
    let mut prob_sums: Vec<Vec<f64>> = Vec::new();
    let mut tokens_seen = vec![0usize; l];
    let mut slots_seen = vec![0usize; l];
    for x in &dataset.inputs {
        let out = model.forward(x)?;
        for (li, log) in out.routing.iter().enumerate() {
            let ro = match which {
                WhichRouter::Moe => &log.moe,
                WhichRouter::Peft => log.peft.as_ref().expect("checked above"),
            };
            let n = ro.num_experts;
            if counts.len() <= li {
                counts.push(vec![0.0; n]);
                prob_sums.push(vec![0.0; n]);
            }
            for sel in &ro.selected {
                for &i in sel {
                    counts[li][i] += 1.0;
                }
            }
            for t in 0..ro.tokens {
                let p = crate::numeric::softmax(&ro.logits[t * n..(t + 1) * n]);
                for i in 0..n {
                    prob_sums[li][i] += p[i];
                }
            }
            tokens_seen[li] += ro.tokens;
            slots_seen[li] += ro.tokens * ro.k;
        }
    }
    Ok((0..l)
        .map(|li| {
            let fractions: Vec<f64> = counts[li]
                .iter()
                .map(|c| c / slots_seen[li] as f64)
                .collect();
            let mean_probs: Vec<f64> = prob_sums[li]
                .iter()
                .map(|p| p / tokens_seen[li] as f64)
                .collect();
            let entropy = -fractions
                .iter()
                .filter(|f| **f > 0.0)
                .map(|f| f * f.ln())
                .sum::<f64>();
            RoutingStats {
                fractions,
                mean_probs,
                entropy,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorKind {
    /// Column of an FFN expert's up-projection.
    FfnKey,
    /// Column of the MoE router matrix.
    ExpertVector,
    /// Column of a PEFT adapter's down-projection.
    PeftKey,
    /// Column of the PEFT router matrix.
    PeftExpertVector,
}

#[derive(Debug, Clone, Serialize)]
pub struct LabeledVector {
    pub kind: VectorKind,
    pub layer: usize,
    pub index: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VectorBundle {
    pub vectors: Vec<LabeledVector>,
}

impl VectorBundle {
    pub fn of_kind(&self, kind: VectorKind) -> Vec<&LabeledVector> {
        self.vectors.iter().filter(|v| v.kind == kind).collect()
    }
}

fn columns_of(m: &crate::numeric::Matrix) -> Vec<Vec<f64>> {
    let data = m.to_vec();
    let (rows, cols) = (m.rows(), m.cols());
    (0..cols)
        .map(|c| (0..rows).map(|r| data[r * cols + c]).collect())
        .collect()
}

/// Copy out the key memory and expert vectors of one layer. All vectors have
/// length D.
pub fn extract_vectors(model: &Model, layer_index: usize) -> Result<VectorBundle> {
    let layer = model
        .layers
        .get(layer_index)
        .ok_or_else(|| PerftError::Argument(format!("layer {layer_index} out of range")))?;
    let mut vectors = Vec::new();
    let mut push = |kind: VectorKind, cols: Vec<Vec<f64>>, start: usize| {
        for (i, values) in cols.into_iter().enumerate() {
            vectors.push(LabeledVector {
                kind,
                layer: layer_index,
                index: start + i,
                values,
            });
        }
    };
    for (ei, e) in layer.experts.iter().enumerate() {
        let cols = columns_of(&e.w_up);
        let width = cols.len();
        push(VectorKind::FfnKey, cols, ei * width);
    }
    push(VectorKind::ExpertVector, columns_of(&layer.router.w_g), 0);
    match &layer.strategy {
        StrategyState::None | StrategyState::AttnLora | StrategyState::GateLora { .. } => {}
        StrategyState::PerftS { adapter } => {
            push(VectorKind::PeftKey, columns_of(&adapter.w_down), 0);
        }
        StrategyState::PerftD { adapters } | StrategyState::PerftE { adapters } => {
            for (ai, a) in adapters.iter().enumerate() {
                let cols = columns_of(&a.w_down);
                let width = cols.len();
                push(VectorKind::PeftKey, cols, ai * width);
            }
        }
        StrategyState::PerftR { adapters, router, .. } => {
            for (ai, a) in adapters.iter().enumerate() {
                let cols = columns_of(&a.w_down);
                let width = cols.len();
                push(VectorKind::PeftKey, cols, ai * width);
            }
            push(VectorKind::PeftExpertVector, columns_of(&router.w_g), 0);
        }
    }
    Ok(VectorBundle { vectors })
}

#[derive(Debug, Clone)]
pub struct PcaResult {
    /// Projected coordinates of the transform set, one row per vector.
    pub coords: Vec<Vec<f64>>,
    /// Per-component fraction of total variance; non-increasing, sums <= 1.
    pub explained_variance_ratio: Vec<f64>,
    /// Principal axes (row per component).
    pub components: Vec<Vec<f64>>,
    /// Mean of the fitting set.
    pub mean: Vec<f64>,
    /// Set when the requested dimension exceeded the covariance rank.
    pub warning: Option<String>,
}

/// PCA by eigendecomposition of the fitting set's covariance. The fitting
/// and transform sets may differ; both are centered with the fit mean.
pub fn pca_project(fit: &[Vec<f64>], transform: &[Vec<f64>], out_dims: usize) -> Result<PcaResult> {
    if fit.len() < out_dims.max(1) {
        return Err(PerftError::Argument(format!(
            "pca needs at least {out_dims} fitting vectors, got {}",
            fit.len()
        )));
    }
    let d = fit[0].len();
    for v in fit.iter().chain(transform.iter()) {
        if v.len() != d {
            return Err(PerftError::Argument(
                "pca: vectors have inconsistent lengths".into(),
            ));
        }
    }
    let n = fit.len() as f64;
    let mut mean = vec![0.0; d];
    for v in fit {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n;
        }
    }
    // covariance (biased by n, the normalization cancels in the ratios)
    let mut cov = vec![0.0; d * d];
    for v in fit {
        for i in 0..d {
            let ci = v[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += ci * (v[j] - mean[j]) / n;
            }
        }
    }
    let (eigvals, eigvecs) = jacobi_eigh(&cov, d);
    let trace: f64 = eigvals.iter().sum();
    let rank = eigvals.iter().filter(|&&v| v > 1e-12 * trace.max(1e-300)).count();
    let (dims, warning) = if rank < out_dims {
        (
            rank.max(1),
            Some(format!(
                "covariance rank {rank} below requested {out_dims} dimensions; reduced"
            )),
        )
    } else {
        (out_dims, None)
    };
    let components: Vec<Vec<f64>> = (0..dims).map(|c| eigvecs[c].clone()).collect();
    let explained_variance_ratio: Vec<f64> = (0..dims)
        .map(|c| if trace > 0.0 { eigvals[c] / trace } else { 0.0 })
        .collect();
    let coords = transform
        .iter()
        .map(|v| {
            components
                .iter()
                .map(|axis| {
                    v.iter()
                        .zip(axis.iter().zip(mean.iter()))
                        .map(|(x, (a, m))| (x - m) * a)
                        .sum()
                })
                .collect()
        })
        .collect();
    Ok(PcaResult {
        coords,
        explained_variance_ratio,
        components,
        mean,
        warning,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix; returns
/// eigenvalues (descending) and matching unit eigenvectors.
fn jacobi_eigh(a: &[f64], d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += m[i * d + j] * m[i * d + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..d)
        .map(|i| (m[i * d + i], (0..d).map(|k| v[k * d + i]).collect()))
        .collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let vals = pairs.iter().map(|p| p.0).collect();
    let vecs = pairs.into_iter().map(|p| p.1).collect();
    (vals, vecs)
}

/// Pairwise cosine similarities; zero vectors map to cosine 0.
pub fn cosine_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if let (Some(x), Some(y)) = (a.first(), b.first()) {
        if x.len() != y.len() {
            return Err(PerftError::Argument(format!(
                "cosine_matrix: vector lengths {} vs {}",
                x.len(),
                y.len()
            )));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(a.iter()
        .map(|x| {
            let nx = norm(x);
            b.iter()
                .map(|y| {
                    let ny = norm(y);
                    if nx == 0.0 || ny == 0.0 {
                        0.0
                    } else {
                        x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (nx * ny)
                    }
                })
                .collect()
        })
        .collect())
}
