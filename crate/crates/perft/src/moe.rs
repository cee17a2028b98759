//! FFN experts (vanilla and GLU forms), the expert router with top-K softmax
//! gating, sparse dispatch, and the auxiliary losses.

use serde::{Deserialize, Serialize};

use crate::error::{PerftError, Result};
use crate::numeric::{top_k, InitScheme, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnForm {
    Vanilla,
    Glu,
}

/// One expert FFN. Columns of `w_up` act as key memory vectors, rows of
/// `w_down` as value memory vectors.
pub struct FfnExpert {
    pub w_up: Matrix,
    pub w_gate: Option<Matrix>,
    pub w_down: Matrix,
}

impl FfnExpert {
    pub fn init(d: usize, d_ffn: usize, form: FfnForm, rng: &mut Rng) -> Result<FfnExpert> {
        let std_in = 1.0 / (d as f64).sqrt();
        let std_out = 1.0 / (d_ffn as f64).sqrt();
        Ok(FfnExpert {
            w_up: crate::numeric::init_matrix(d, d_ffn, InitScheme::ScaledNormal(std_in), rng)?,
            w_gate: match form {
                FfnForm::Vanilla => None,
                FfnForm::Glu => Some(crate::numeric::init_matrix(
                    d,
                    d_ffn,
                    InitScheme::ScaledNormal(std_in),
                    rng,
                )?),
            },
            w_down: crate::numeric::init_matrix(d_ffn, d, InitScheme::ScaledNormal(std_out), rng)?,
        })
    }
}

/// Linear router: `w_g` columns are the expert vectors.
pub struct Router {
    pub w_g: Matrix,
}

impl Router {
    pub fn init(d: usize, n: usize, rng: &mut Rng) -> Result<Router> {
        let std = 1.0 / (d as f64).sqrt();
        Ok(Router {
            w_g: crate::numeric::init_matrix(d, n, InitScheme::ScaledNormal(std), rng)?,
        })
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeLayerConfig {
    pub d: usize,
    pub d_ffn: usize,
    pub n: usize,
    pub k: usize,
    pub ffn_form: FfnForm,
    pub renormalize_gates: bool,
}

impl MoeLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_ffn == 0 {
            return Err(PerftError::Config("D and D_ffn must be at least 1".into()));
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

/// Plain-data snapshot of one routing pass.
#[derive(Debug, Clone)]
pub struct RouterOutput {
    pub tokens: usize,
    pub num_experts: usize,
    pub k: usize,
    /// T x N row-major affinity logits.
    pub logits: Vec<f64>,
    /// T x N row-major gate weights, zero outside the selected set.
    pub gate_weights: Vec<f64>,
    /// Selected expert indices per token, ascending.
    pub selected: Vec<Vec<usize>>,
}

/// Routing pass with the graph-tracked tensors needed downstream.
pub struct Routing {
    /// T x N softmax probabilities (differentiable).
    pub probs: Matrix,
    /// T x N gate weights, zero outside the selected set (differentiable
    /// through the kept softmax values only).
    pub gates: Matrix,
    /// T x N raw logits (differentiable).
    pub logits: Matrix,
    pub output: RouterOutput,
}

/// Expert FFN forward: vanilla `silu(h W_up) W_down` or GLU
/// `(silu(h W_up) * h W_gate) W_down`.
pub fn ffn_forward(expert: &FfnExpert, h: &Matrix) -> Result<Matrix> {
    let up = h.matmul(&expert.w_up)?.silu()?;
    let hidden = match &expert.w_gate {
        Some(gate) => up.mul(&h.matmul(gate)?)?,
        None => up,
    };
    hidden.matmul(&expert.w_down)
}

/// Top-K softmax routing: softmax first, then keep the K largest
/// probabilities per token (ties break toward the lowest index), optionally
/// renormalizing the kept values to sum to one.
pub fn route(router: &Router, h: &Matrix, k: usize, renormalize: bool) -> Result<Routing> {
    let logits = h.matmul(&router.w_g)?;
    route_logits(&logits, k, renormalize)
}

/// Routing from precomputed affinity logits (used when the router matrix is
/// itself adapted, e.g. by a LoRA pair).
pub fn route_logits(logits: &Matrix, k: usize, renormalize: bool) -> Result<Routing> {
    let n = logits.cols();
    if k == 0 || k > n {
        return Err(PerftError::Argument(format!(
            "route: K={k} out of range for {n} experts"
        )));
    }
    let probs = logits.softmax_rows()?;
    let t = logits.rows();
    let prob_data = probs.to_vec();
    let mut mask = vec![0.0; t * n];
    let mut selected = Vec::with_capacity(t);
    for row in 0..t {
        let (idx, _) = top_k(&prob_data[row * n..(row + 1) * n], k)?;
        for &i in &idx {
            mask[row * n + i] = 1.0;
        }
        selected.push(idx);
    }
    let kept = probs.mul(&Matrix::from_vec(t, n, mask)?)?;
    let gates = if renormalize {
        let ones = Matrix::from_vec(n, 1, vec![1.0; n])?;
        let row_sums = kept.matmul(&ones)?;
        kept.scale_rows(&row_sums.recip()?)?
    } else {
        kept
    };
    let output = RouterOutput {
        tokens: t,
        num_experts: n,
        k,
        logits: logits.to_vec(),
        gate_weights: gates.to_vec(),
        selected,
    };
    Ok(Routing {
        probs,
        gates,
        logits: logits.clone(),
        output,
    })
}

/// Weighted combination over routed experts. `expert_fn` receives the expert
/// index and the sub-matrix of tokens routed to it; unselected experts are
/// never evaluated, so their parameters receive exactly zero gradient.
pub fn combine_routed(
    h: &Matrix,
    routing: &Routing,
    n: usize,
    mut expert_fn: impl FnMut(usize, &Matrix) -> Result<Matrix>,
) -> Result<Matrix> {
    let t = h.rows();
    let mut acc: Option<Matrix> = None;
    for i in 0..n {
        let tokens: Vec<usize> = routing
            .output
            .selected
            .iter()
            .enumerate()
            .filter(|(_, sel)| sel.contains(&i))
            .map(|(t, _)| t)
            .collect();
        if tokens.is_empty() {
            continue;
        }
        let h_sub = h.gather_rows(&tokens)?;
        let out = expert_fn(i, &h_sub)?;
        let gate_entries: Vec<(usize, usize)> = tokens.iter().map(|&t| (t, i)).collect();
        let gate_col = routing.gates.gather_entries(&gate_entries)?;
        let contribution = out.scale_rows(&gate_col)?.scatter_add_rows(&tokens, t)?;
        acc = Some(match acc {
            Some(prev) => prev.add(&contribution)?,
            None => contribution,
        });
    }
    match acc {
        Some(m) => Ok(m),
        None => Ok(Matrix::zeros(t, h.cols())),
    }
}

/// Sparse MoE forward: sum of gate-weighted selected expert outputs.
pub fn moe_forward(
    experts: &[FfnExpert],
    router: &Router,
    h: &Matrix,
    cfg: &MoeLayerConfig,
) -> Result<(Matrix, Routing)> {
    if experts.len() != cfg.n {
        return Err(PerftError::Config(format!(
            "expected {} experts, got {}",
            cfg.n,
            experts.len()
        )));
    }
    let routing = route(router, h, cfg.k, cfg.renormalize_gates)?;
    let out = combine_routed(h, &routing, cfg.n, |i, h_sub| ffn_forward(&experts[i], h_sub))?;
    Ok((out, routing))
}

/// Load-balancing loss `N * sum_i f_i * P_i` where `f_i` is the fraction of
/// dispatch slots landing on expert `i` and `P_i` the mean softmax
/// probability. Differentiable through `P_i` only; equals 1 at uniform
/// dispatch.
pub fn load_balance_loss(routing: &Routing) -> Result<Matrix> {
    let t = routing.output.tokens;
    let n = routing.output.num_experts;
    let k = routing.output.k;
    let mut counts = vec![0.0f64; n];
    for sel in &routing.output.selected {
        for &i in sel {
            counts[i] += 1.0;
        }
    }
    let f: Vec<f64> = counts.iter().map(|c| c / (t as f64 * k as f64)).collect();
    let ones_over_t = Matrix::from_vec(1, t, vec![1.0 / t as f64; t])?;
    let p_mean = ones_over_t.matmul(&routing.probs)?; // 1 x N
    let f_row = Matrix::from_vec(1, n, f)?;
    f_row.mul(&p_mean)?.sum()?.scale(n as f64)
}

/// Router z-loss: mean over tokens of the squared log-partition of the
/// logits, computed stably. Not shift invariant by construction.
pub fn router_z_loss(logits: &Matrix) -> Result<Matrix> {
    let t = logits.rows();
    let lse = logits.logsumexp_rows()?;
    lse.sum_squares()?.scale(1.0 / t as f64)
}
