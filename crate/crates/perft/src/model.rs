//! Transformer layers combining a single-head attention block with a sparse
//! MoE FFN, and the adaptation strategies layered on top: routed PEFT
//! experts with their own router, embedded PEFT experts reusing the MoE
//! router, dense shared adapters, a single shared adapter, and the
//! MoE-agnostic attention / router-matrix LoRA baselines.

use serde::{Deserialize, Serialize};

use crate::adapters::{adapter_forward, init_adapter, AdapterArch, BottleneckAdapter};
use crate::error::{PerftError, Result};
use crate::moe::{
    combine_routed, ffn_forward, load_balance_loss, moe_forward, route, route_logits,
    router_z_loss, FfnExpert, MoeLayerConfig, Router, RouterOutput,
};
use crate::numeric::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeftVariant {
    None,
    PerftR { m: usize, k_tilde: usize },
    PerftE,
    PerftD { m: usize },
    PerftS,
    BaselineAttnLora,
    BaselineGateLora,
}

impl PeftVariant {
    pub fn name(&self) -> &'static str {
        match self {
            PeftVariant::None => "none",
            PeftVariant::PerftR { .. } => "perft_r",
            PeftVariant::PerftE => "perft_e",
            PeftVariant::PerftD { .. } => "perft_d",
            PeftVariant::PerftS => "perft_s",
            PeftVariant::BaselineAttnLora => "baseline_attn_lora",
            PeftVariant::BaselineGateLora => "baseline_gate_lora",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeftStrategyConfig {
    pub variant: PeftVariant,
    pub arch: AdapterArch,
    pub d_b: usize,
    /// LoRA scale numerator; applied factor is `alpha / d_b`.
    pub alpha: f64,
    /// Defaults to the MoE router's policy when unset.
    #[serde(default)]
    pub renormalize_peft_gates: Option<bool>,
    /// Dropout rate on adapter outputs during training.
    #[serde(default)]
    pub dropout: f64,
}

impl PeftStrategyConfig {
    pub fn none() -> PeftStrategyConfig {
        PeftStrategyConfig {
            variant: PeftVariant::None,
            arch: AdapterArch::Lora,
            d_b: 1,
            alpha: 2.0,
            renormalize_peft_gates: None,
            dropout: 0.0,
        }
    }

    pub fn validate(&self, moe: &MoeLayerConfig) -> Result<()> {
        if self.variant != PeftVariant::None && self.d_b == 0 {
            return Err(PerftError::Config("D_B must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(PerftError::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        match self.variant {
            PeftVariant::PerftR { m, k_tilde } => {
                if k_tilde == 0 || k_tilde > m {
                    return Err(PerftError::Config(format!(
                        "K_tilde must satisfy 1 <= K_tilde <= M, got K_tilde={k_tilde} M={m}"
                    )));
                }
            }
            PeftVariant::PerftD { m } => {
                if m == 0 {
                    return Err(PerftError::Config("M must be at least 1".into()));
                }
            }
            PeftVariant::PerftE => {
                // one adapter per FFN expert; count fixed by N
                let _ = moe.n;
            }
            _ => {}
        }
        Ok(())
    }
}

/// LoRA factor pair adapting one frozen matrix.
pub struct LoraPair {
    pub a: Matrix,
    pub b: Matrix,
    pub alpha: f64,
}

impl LoraPair {
    fn init(rows: usize, rank: usize, cols: usize, alpha: f64, rng: &mut Rng) -> Result<LoraPair> {
        let std = 1.0 / (rows as f64).sqrt();
        Ok(LoraPair {
            a: crate::numeric::init_matrix(rows, rank, crate::numeric::InitScheme::ScaledNormal(std), rng)?,
            b: Matrix::zeros(rank, cols),
            alpha,
        })
    }

    /// Low-rank contribution `(alpha / rank) * x A B`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.a)?
            .matmul(&self.b)?
            .scale(self.alpha / self.a.cols() as f64)
    }
}

pub struct AttentionBlock {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub lora_q: Option<LoraPair>,
    pub lora_v: Option<LoraPair>,
}

/// Independent router over the PEFT experts.
pub struct PerftRouter {
    pub w_g: Matrix,
}

pub enum StrategyState {
    None,
    PerftR {
        adapters: Vec<BottleneckAdapter>,
        router: PerftRouter,
        k_tilde: usize,
        renormalize: bool,
    },
    PerftE {
        adapters: Vec<BottleneckAdapter>,
    },
    PerftD {
        adapters: Vec<BottleneckAdapter>,
    },
    PerftS {
        adapter: BottleneckAdapter,
    },
    /// Attention LoRA lives inside the attention block.
    AttnLora,
    GateLora {
        lora: LoraPair,
    },
}

pub struct TransformerLayer {
    pub attention: AttentionBlock,
    pub experts: Vec<FfnExpert>,
    pub router: Router,
    pub strategy: StrategyState,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub moe: MoeLayerConfig,
    pub causal: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(PerftError::Config("L must be at least 1".into()));
        }
        self.moe.validate()
    }
}

/// Auxiliary losses averaged over layers, each a 1x1 graph matrix.
pub struct AuxLosses {
    pub lb_moe: Matrix,
    pub z_moe: Matrix,
    pub lb_peft: Matrix,
}

/// Routing snapshots for one layer.
pub struct LayerRouting {
    pub moe: RouterOutput,
    pub peft: Option<RouterOutput>,
}

pub struct ForwardOutput {
    pub hidden: Matrix,
    pub aux: AuxLosses,
    pub routing: Vec<LayerRouting>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Base,
    Adaptation,
    TaskHead,
}

pub struct TensorEntry {
    pub name: String,
    pub matrix: Matrix,
    pub trainable: bool,
    pub role: TensorRole,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub strategy_cfg: PeftStrategyConfig,
    pub layers: Vec<TransformerLayer>,
    /// Optional task head mapping the mean-pooled final hidden state to the
    /// task output. Always trainable.
    pub readout: Option<Matrix>,
}

impl Model {
    /// Build a model with frozen random base weights and freshly initialized
    /// adaptation. Base weights depend only on `cfg` and `seed`, never on
    /// the strategy, so any two variants built from the same seed share an
    /// identical frozen backbone.
    pub fn build(
        cfg: ModelConfig,
        strategy_cfg: PeftStrategyConfig,
        seed: u64,
        readout_dim: Option<usize>,
    ) -> Result<Model> {
        cfg.validate()?;
        strategy_cfg.validate(&cfg.moe)?;
        let d = cfg.moe.d;
        let mut base_rng = Rng::new(seed);
        let mut base_layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let std = 1.0 / (d as f64).sqrt();
            let attn = AttentionBlock {
                w_q: base_rng.matrix(d, d, std)?,
                w_k: base_rng.matrix(d, d, std)?,
                w_v: base_rng.matrix(d, d, std)?,
                w_o: base_rng.matrix(d, d, std)?,
                lora_q: None,
                lora_v: None,
            };
            let experts = (0..cfg.moe.n)
                .map(|_| FfnExpert::init(d, cfg.moe.d_ffn, cfg.moe.ffn_form, &mut base_rng))
                .collect::<Result<Vec<_>>>()?;
            let router = Router::init(d, cfg.moe.n, &mut base_rng)?;
            base_layers.push((attn, experts, router));
        }
        let readout = match readout_dim {
            Some(out) => Some(base_rng.matrix(d, out, 1.0 / (d as f64).sqrt())?.with_grad()),
            None => None,
        };

        // Adaptation draws come from a fork so the base stays seed-stable.
        let mut adapt_rng = base_rng.fork();
        let renorm_peft = strategy_cfg
            .renormalize_peft_gates
            .unwrap_or(cfg.moe.renormalize_gates);
        let mut layers = Vec::with_capacity(cfg.layers);
        for (mut attn, experts, router) in base_layers {
            let mk_adapter = |rng: &mut Rng| {
                init_adapter(d, strategy_cfg.d_b, strategy_cfg.arch, strategy_cfg.alpha, rng)
            };
            let strategy = match strategy_cfg.variant {
                PeftVariant::None => StrategyState::None,
                PeftVariant::PerftS => StrategyState::PerftS {
                    adapter: mark_trainable(mk_adapter(&mut adapt_rng)?),
                },
                PeftVariant::PerftD { m } => StrategyState::PerftD {
                    adapters: (0..m)
                        .map(|_| Ok(mark_trainable(mk_adapter(&mut adapt_rng)?)))
                        .collect::<Result<Vec<_>>>()?,
                },
                PeftVariant::PerftE => StrategyState::PerftE {
                    adapters: (0..cfg.moe.n)
                        .map(|_| Ok(mark_trainable(mk_adapter(&mut adapt_rng)?)))
                        .collect::<Result<Vec<_>>>()?,
                },
                PeftVariant::PerftR { m, k_tilde } => {
                    let adapters = (0..m)
                        .map(|_| Ok(mark_trainable(mk_adapter(&mut adapt_rng)?)))
                        .collect::<Result<Vec<_>>>()?;
                    let std = 1.0 / (d as f64).sqrt();
                    let w_g = adapt_rng.matrix(d, m, std)?.with_grad();
                    StrategyState::PerftR {
                        adapters,
                        router: PerftRouter { w_g },
                        k_tilde,
                        renormalize: renorm_peft,
                    }
                }
                PeftVariant::BaselineAttnLora => {
                    let mut mk = |rows, cols| {
                        let p = LoraPair::init(rows, strategy_cfg.d_b, cols, strategy_cfg.alpha, &mut adapt_rng)?;
                        p.a.set_requires_grad(true);
                        p.b.set_requires_grad(true);
                        Ok::<_, PerftError>(p)
                    };
                    attn.lora_q = Some(mk(d, d)?);
                    attn.lora_v = Some(mk(d, d)?);
                    StrategyState::AttnLora
                }
                PeftVariant::BaselineGateLora => {
                    let lora =
                        LoraPair::init(d, strategy_cfg.d_b, cfg.moe.n, strategy_cfg.alpha, &mut adapt_rng)?;
                    lora.a.set_requires_grad(true);
                    lora.b.set_requires_grad(true);
                    StrategyState::GateLora { lora }
                }
            };
            layers.push(TransformerLayer {
                attention: attn,
                experts,
                router,
                strategy,
            });
        }
        Ok(Model {
            cfg,
            strategy_cfg,
            layers,
            readout,
        })
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardOutput> {
        self.forward_with(x, &mut None)
    }

    /// Forward pass; pass a generator to enable adapter-output dropout.
    pub fn forward_with(&self, x: &Matrix, dropout_rng: &mut Option<&mut Rng>) -> Result<ForwardOutput> {
        if x.cols() != self.cfg.moe.d {
            return Err(PerftError::Argument(format!(
                "input width {} does not match D={}",
                x.cols(),
                self.cfg.moe.d
            )));
        }
        let mut current = x.clone();
        let mut lb_moe: Option<Matrix> = None;
        let mut z_moe: Option<Matrix> = None;
        let mut lb_peft: Option<Matrix> = None;
        let mut routing_logs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, layer_aux, log) =
                layer_forward(layer, &current, &self.cfg, &self.strategy_cfg, dropout_rng)?;
            current = next;
            lb_moe = Some(accumulate(lb_moe, layer_aux.lb_moe)?);
            z_moe = Some(accumulate(z_moe, layer_aux.z_moe)?);
            lb_peft = Some(accumulate(lb_peft, layer_aux.lb_peft)?);
            routing_logs.push(log);
        }
        let l = self.layers.len() as f64;
        Ok(ForwardOutput {
            hidden: current,
            aux: AuxLosses {
                lb_moe: lb_moe.unwrap().scale(1.0 / l)?,
                z_moe: z_moe.unwrap().scale(1.0 / l)?,
                lb_peft: lb_peft.unwrap().scale(1.0 / l)?,
            },
            routing: routing_logs,
        })
    }

    /// Every named tensor in the model.
    pub fn named_tensors(&self) -> Vec<TensorEntry> {
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let p = format!("layer{li}");
            let attn = &layer.attention;
            for (name, m) in [
                ("attn.w_q", &attn.w_q),
                ("attn.w_k", &attn.w_k),
                ("attn.w_v", &attn.w_v),
                ("attn.w_o", &attn.w_o),
            ] {
                out.push(entry(format!("{p}.{name}"), m, TensorRole::Base));
            }
            for (tag, lora) in [("q", &attn.lora_q), ("v", &attn.lora_v)] {
                if let Some(l) = lora {
                    out.push(entry(format!("{p}.attn.lora_{tag}.a"), &l.a, TensorRole::Adaptation));
                    out.push(entry(format!("{p}.attn.lora_{tag}.b"), &l.b, TensorRole::Adaptation));
                }
            }
            for (ei, e) in layer.experts.iter().enumerate() {
                out.push(entry(format!("{p}.expert{ei}.w_up"), &e.w_up, TensorRole::Base));
                if let Some(g) = &e.w_gate {
                    out.push(entry(format!("{p}.expert{ei}.w_gate"), g, TensorRole::Base));
                }
                out.push(entry(format!("{p}.expert{ei}.w_down"), &e.w_down, TensorRole::Base));
            }
            out.push(entry(format!("{p}.router.w_g"), &layer.router.w_g, TensorRole::Base));
            match &layer.strategy {
                StrategyState::None | StrategyState::AttnLora => {}
                StrategyState::GateLora { lora } => {
                    out.push(entry(format!("{p}.gate_lora.a"), &lora.a, TensorRole::Adaptation));
                    out.push(entry(format!("{p}.gate_lora.b"), &lora.b, TensorRole::Adaptation));
                }
                StrategyState::PerftS { adapter } => {
                    push_adapter(&mut out, &p, 0, adapter);
                }
                StrategyState::PerftD { adapters } | StrategyState::PerftE { adapters } => {
                    for (ai, a) in adapters.iter().enumerate() {
                        push_adapter(&mut out, &p, ai, a);
                    }
                }
                StrategyState::PerftR { adapters, router, .. } => {
                    for (ai, a) in adapters.iter().enumerate() {
                        push_adapter(&mut out, &p, ai, a);
                    }
                    out.push(entry(
                        format!("{p}.peft_router.w_g"),
                        &router.w_g,
                        TensorRole::Adaptation,
                    ));
                }
            }
        }
        if let Some(r) = &self.readout {
            out.push(entry("readout".to_string(), r, TensorRole::TaskHead));
        }
        out
    }

    pub fn trainable_tensors(&self) -> Vec<TensorEntry> {
        self.named_tensors().into_iter().filter(|t| t.trainable).collect()
    }

    pub fn zero_grad(&self) {
        for t in self.named_tensors() {
            t.matrix.zero_grad();
        }
    }
}

fn entry(name: String, m: &Matrix, role: TensorRole) -> TensorEntry {
    TensorEntry {
        name,
        matrix: m.clone(),
        trainable: m.requires_grad(),
        role,
    }
}

fn push_adapter(out: &mut Vec<TensorEntry>, prefix: &str, idx: usize, a: &BottleneckAdapter) {
    out.push(entry(
        format!("{prefix}.peft.adapter{idx}.w_down"),
        &a.w_down,
        TensorRole::Adaptation,
    ));
    out.push(entry(
        format!("{prefix}.peft.adapter{idx}.w_up"),
        &a.w_up,
        TensorRole::Adaptation,
    ));
}

fn mark_trainable(a: BottleneckAdapter) -> BottleneckAdapter {
    a.w_down.set_requires_grad(true);
    a.w_up.set_requires_grad(true);
    a
}

fn accumulate(acc: Option<Matrix>, term: Matrix) -> Result<Matrix> {
    match acc {
        Some(a) => a.add(&term),
        None => Ok(term),
    }
}

fn zero_scalar() -> Matrix {
    Matrix::zeros(1, 1)
}

/// Single-head scaled dot-product attention with optional causal masking and
/// optional LoRA on the query and value projections.
pub fn attention_forward(layer: &TransformerLayer, x: &Matrix, causal: bool) -> Result<Matrix> {
    let attn = &layer.attention;
    let d = attn.w_q.rows();
    if x.cols() != d {
        return Err(PerftError::Argument(format!(
            "attention input width {} does not match D={d}",
            x.cols()
        )));
    }
    let mut q = x.matmul(&attn.w_q)?;
    if let Some(lora) = &attn.lora_q {
        q = q.add(&lora.forward(x)?)?;
    }
    let k = x.matmul(&attn.w_k)?;
    let mut v = x.matmul(&attn.w_v)?;
    if let Some(lora) = &attn.lora_v {
        v = v.add(&lora.forward(x)?)?;
    }
    let t = x.rows();
    let mut scores = q.matmul(&k.transpose()?)?.scale(1.0 / (d as f64).sqrt())?;
    if causal {
        let mask = Matrix::from_fn(t, t, |r, c| if c > r { -1e30 } else { 0.0 })?;
        scores = scores.add(&mask)?;
    }
    let probs = scores.softmax_rows()?;
    probs.matmul(&v)?.matmul(&attn.w_o)
}

fn maybe_dropout(
    m: Matrix,
    rate: f64,
    dropout_rng: &mut Option<&mut Rng>,
) -> Result<Matrix> {
    if rate == 0.0 {
        return Ok(m);
    }
    let Some(rng) = dropout_rng else {
        return Ok(m);
    };
    let keep = 1.0 - rate;
    let mask = Matrix::from_fn(m.rows(), m.cols(), |_, _| {
        if rng.uniform(0.5) + 0.5 < rate {
            0.0
        } else {
            1.0 / keep
        }
    })?;
    m.mul(&mask)
}

struct LayerAux {
    lb_moe: Matrix,
    z_moe: Matrix,
    lb_peft: Matrix,
}

/// Full layer: attention with residual, then the MoE block composed with the
/// active adaptation strategy, with residual.
fn layer_forward(
    layer: &TransformerLayer,
    x_prev: &Matrix,
    cfg: &ModelConfig,
    strategy_cfg: &PeftStrategyConfig,
    dropout_rng: &mut Option<&mut Rng>,
) -> Result<(Matrix, LayerAux, LayerRouting)> {
    let h = attention_forward(layer, x_prev, cfg.causal)?.add(x_prev)?;
    let moe_cfg = &cfg.moe;
    let dropout = strategy_cfg.dropout;
    let (x, moe_routing, peft_routing) = match &layer.strategy {
        StrategyState::None | StrategyState::AttnLora => {
            let (out, routing) = moe_forward(&layer.experts, &layer.router, &h, moe_cfg)?;
            (out.add(&h)?, routing, None)
        }
        StrategyState::GateLora { lora } => {
            let logits = h.matmul(&layer.router.w_g)?.add(&lora.forward(&h)?)?;
            let routing = route_logits(&logits, moe_cfg.k, moe_cfg.renormalize_gates)?;
            let out = combine_routed(&h, &routing, moe_cfg.n, |i, h_sub| {
                ffn_forward(&layer.experts[i], h_sub)
            })?;
            (out.add(&h)?, routing, None)
        }
        StrategyState::PerftS { adapter } => {
            let (out, routing) = moe_forward(&layer.experts, &layer.router, &h, moe_cfg)?;
            let delta = maybe_dropout(adapter_forward(adapter, &h)?, dropout, dropout_rng)?;
            (out.add(&delta)?.add(&h)?, routing, None)
        }
        StrategyState::PerftD { adapters } => {
            let (out, routing) = moe_forward(&layer.experts, &layer.router, &h, moe_cfg)?;
            let mut delta: Option<Matrix> = None;
            for a in adapters {
                let term = maybe_dropout(adapter_forward(a, &h)?, dropout, dropout_rng)?;
                delta = Some(accumulate(delta, term)?);
            }
            let delta = delta.expect("PERFT-D has at least one adapter");
            (out.add(&delta)?.add(&h)?, routing, None)
        }
        StrategyState::PerftR {
            adapters,
            router,
            k_tilde,
            renormalize,
        } => {
            let (out, routing) = moe_forward(&layer.experts, &layer.router, &h, moe_cfg)?;
            let peft_router = Router {
                w_g: router.w_g.clone(),
            };
            let peft_routing = route(&peft_router, &h, *k_tilde, *renormalize)?;
            let delta = combine_routed(&h, &peft_routing, adapters.len(), |j, h_sub| {
                maybe_dropout(adapter_forward(&adapters[j], h_sub)?, dropout, dropout_rng)
            })?;
            (out.add(&delta)?.add(&h)?, routing, Some(peft_routing))
        }
        StrategyState::PerftE { adapters } => {
            if adapters.len() != moe_cfg.n {
                return Err(PerftError::Config(format!(
                    "embedded strategy requires one adapter per expert: {} adapters for N={}",
                    adapters.len(),
                    moe_cfg.n
                )));
            }
            let routing = route(&layer.router, &h, moe_cfg.k, moe_cfg.renormalize_gates)?;
            let out = combine_routed(&h, &routing, moe_cfg.n, |i, h_sub| {
                let base = ffn_forward(&layer.experts[i], h_sub)?;
                let delta = maybe_dropout(adapter_forward(&adapters[i], h_sub)?, dropout, dropout_rng)?;
                base.add(&delta)
            })?;
            (out.add(&h)?, routing, None)
        }
    };
    let lb_moe = load_balance_loss(&moe_routing)?;
    let z_moe = router_z_loss(&moe_routing.logits)?;
    let lb_peft = match &peft_routing {
        Some(r) => load_balance_loss(r)?,
        None => zero_scalar(),
    };
    let log = LayerRouting {
        moe: moe_routing.output.clone(),
        peft: peft_routing.as_ref().map(|r| r.output.clone()),
    };
    Ok((
        x,
        LayerAux {
            lb_moe,
            z_moe,
            lb_peft,
        },
        log,
    ))
}
