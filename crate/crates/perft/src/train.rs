//! Synthetic tasks, loss assembly with auxiliary coefficients, AdamW with a
//! linear warmup/decay schedule, and deterministic desk-scale training loops.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PerftError, Result};
use crate::model::{ForwardOutput, Model};
use crate::numeric::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ClusterRegression,
    ClusterClassification,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub num_clusters: usize,
    pub d: usize,
    /// Tokens per sequence.
    pub t: usize,
    pub samples: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters < 2 {
            return Err(PerftError::Config("num_clusters must be at least 2".into()));
        }
        if self.noise_std < 0.0 {
            return Err(PerftError::Config("noise_std must be nonnegative".into()));
        }
        if self.d == 0 || self.t == 0 || self.samples == 0 {
            return Err(PerftError::Config("d, t and samples must be positive".into()));
        }
        Ok(())
    }
}

pub enum Targets {
    /// One 1 x D target row per sample.
    Regression(Vec<Matrix>),
    /// Cluster id per sample.
    Classification(Vec<usize>),
}

pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub inputs: Vec<Matrix>,
    pub targets: Targets,
    pub cluster_ids: Vec<usize>,
    /// Cluster means, one length-D vector per cluster.
    pub means: Vec<Vec<f64>>,
    /// Per-cluster linear maps (regression only).
    pub maps: Vec<Matrix>,
    /// Noise actually added to each regression target, for oracle replay.
    pub target_noise: Vec<Vec<f64>>,
    pub out_dim: usize,
}

/// Draw a clustered dataset: tokens come from Gaussian clusters with
/// well-separated means; targets are a cluster-specific linear map of the
/// mean-pooled input (regression) or the cluster id (classification).
pub fn generate_task(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let c = spec.num_clusters;
    let d = spec.d;
    // cluster means on scaled coordinate directions keep them far apart
    let mut means = Vec::with_capacity(c);
    for i in 0..c {
        let mut m = vec![0.0; d];
        for (j, v) in m.iter_mut().enumerate() {
            *v = if j % c == i { 3.0 } else { -1.0 } + 0.25 * rng.normal(1.0);
        }
        means.push(m);
    }
    let maps: Vec<Matrix> = (0..c)
        .map(|_| rng.matrix(d, d, 1.0 / (d as f64).sqrt()))
        .collect::<Result<Vec<_>>>()?;
    let mut inputs = Vec::with_capacity(spec.samples);
    let mut cluster_ids = Vec::with_capacity(spec.samples);
    let mut reg_targets = Vec::new();
    let mut cls_targets = Vec::new();
    let mut target_noise = Vec::new();
    for _ in 0..spec.samples {
        let cid = rng.gen_index(c);
        cluster_ids.push(cid);
        let x = Matrix::from_fn(spec.t, d, |_, j| means[cid][j] + spec.noise_std * rng.normal(1.0))?;
        match spec.kind {
            TaskKind::ClusterClassification => cls_targets.push(cid),
            TaskKind::ClusterRegression => {
                let pooled = Matrix::from_vec(1, spec.t, vec![1.0 / spec.t as f64; spec.t])?
                    .matmul(&x)?;
                let clean = pooled.matmul(&maps[cid])?;
                let noise: Vec<f64> = (0..d).map(|_| spec.noise_std * rng.normal(1.0)).collect();
                let noisy = clean.add(&Matrix::from_vec(1, d, noise.clone())?)?;
                target_noise.push(noise);
                reg_targets.push(noisy.detach());
            }
        }
        inputs.push(x);
    }
    let (targets, out_dim) = match spec.kind {
        TaskKind::ClusterRegression => (Targets::Regression(reg_targets), d),
        TaskKind::ClusterClassification => (Targets::Classification(cls_targets), c),
    };
    Ok(Dataset {
        spec: spec.clone(),
        inputs,
        targets,
        cluster_ids,
        means,
        maps,
        target_noise,
        out_dim,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub aux_coef: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            warmup_steps: 100,
            batch_size: 16,
            epochs: 3,
            aux_coef: 0.01,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(PerftError::Config("lr must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(PerftError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainRecord {
    pub step: usize,
    pub total_loss: f64,
    pub task_loss: f64,
    pub lb_moe: f64,
    pub z_moe: f64,
    pub lb_peft: f64,
    pub learning_rate: f64,
}

/// Linear warmup to `cfg.lr` at `warmup_steps`, then linear decay to zero at
/// `total_steps`. `step` is 1-based.
pub fn lr_at(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let w = cfg.warmup_steps.min(total_steps);
    if w > 0 && step <= w {
        return cfg.lr * step as f64 / w as f64;
    }
    if total_steps == w {
        return cfg.lr;
    }
    cfg.lr * (total_steps - step) as f64 / (total_steps - w) as f64
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled weight decay, bias-corrected moments,
/// beta1=0.9, beta2=0.999, eps=1e-8.
pub struct AdamW {
    states: Vec<AdamState>,
    t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(num_tensors: usize, sizes: &[usize], weight_decay: f64) -> AdamW {
        assert_eq!(num_tensors, sizes.len());
        AdamW {
            states: sizes
                .iter()
                .map(|&n| AdamState {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One update over `(tensor, gradient)` pairs in a fixed order.
    pub fn step(&mut self, params: &[(Matrix, Vec<f64>)], lr: f64) {
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for ((matrix, grad), state) in params.iter().zip(self.states.iter_mut()) {
            matrix.update_data(|data| {
                for i in 0..data.len() {
                    let g = grad[i];
                    state.m[i] = self.beta1 * state.m[i] + (1.0 - self.beta1) * g;
                    state.v[i] = self.beta2 * state.v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = state.m[i] / bc1;
                    let v_hat = state.v[i] / bc2;
                    data[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[i]);
                }
            });
        }
    }
}

/// Task loss for one sample as a scalar graph matrix.
fn sample_task_loss(model: &Model, out: &ForwardOutput, dataset: &Dataset, idx: usize) -> Result<Matrix> {
    let readout = model
        .readout
        .as_ref()
        .ok_or_else(|| PerftError::Config("model has no readout head".into()))?;
    let t = out.hidden.rows();
    let pooled = Matrix::from_vec(1, t, vec![1.0 / t as f64; t])?.matmul(&out.hidden)?;
    let pred = pooled.matmul(readout)?;
    match &dataset.targets {
        Targets::Regression(targets) => {
            let diff = pred.sub(&targets[idx])?;
            diff.sum_squares()?.scale(1.0 / pred.len() as f64)
        }
        Targets::Classification(labels) => {
            let lse = pred.logsumexp_rows()?;
            let picked = pred.gather_entries(&[(0, labels[idx])])?;
            lse.sub(&picked)?.sum()
        }
    }
}

fn batch_loss(
    model: &Model,
    dataset: &Dataset,
    indices: &[usize],
    aux_coef: f64,
    dropout_rng: &mut Option<&mut Rng>,
) -> Result<(Matrix, f64, f64, f64, f64)> {
    let mut task: Option<Matrix> = None;
    let mut lb_moe: Option<Matrix> = None;
    let mut z_moe: Option<Matrix> = None;
    let mut lb_peft: Option<Matrix> = None;
    for &i in indices {
        let out = model.forward_with(&dataset.inputs[i], dropout_rng)?;
        let t = sample_task_loss(model, &out, dataset, i)?;
        task = Some(opt_add(task, t)?);
        lb_moe = Some(opt_add(lb_moe, out.aux.lb_moe)?);
        z_moe = Some(opt_add(z_moe, out.aux.z_moe)?);
        lb_peft = Some(opt_add(lb_peft, out.aux.lb_peft)?);
    }
    let n = indices.len() as f64;
    let task = task.unwrap().scale(1.0 / n)?;
    let lb_moe = lb_moe.unwrap().scale(1.0 / n)?;
    let z_moe = z_moe.unwrap().scale(1.0 / n)?;
    let lb_peft = lb_peft.unwrap().scale(1.0 / n)?;
    let aux = lb_moe.add(&z_moe)?.add(&lb_peft)?.scale(aux_coef)?;
    let total = task.add(&aux)?;
    Ok((
        total,
        task.item(),
        lb_moe.item(),
        z_moe.item(),
        lb_peft.item(),
    ))
}

fn opt_add(acc: Option<Matrix>, term: Matrix) -> Result<Matrix> {
    match acc {
        Some(a) => a.add(&term),
        None => Ok(term),
    }
}

/// Deterministic training loop. Only trainable tensors are updated; frozen
/// tensors are bit-identical afterwards.
pub fn train(model: &Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    let trainables = model.trainable_tensors();
    if trainables.is_empty() {
        return Err(PerftError::Config("model has no trainable parameters".into()));
    }
    let n = dataset.inputs.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let sizes: Vec<usize> = trainables.iter().map(|t| t.matrix.len()).collect();
    let mut opt = AdamW::new(trainables.len(), &sizes, cfg.weight_decay);
    let mut shuffle_rng = Rng::new(cfg.seed);
    let mut dropout_master = Rng::new(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut history = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        // Fisher-Yates with the seeded generator
        for i in (1..n).rev() {
            let j = shuffle_rng.gen_index(i + 1);
            order.swap(i, j);
        }
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            model.zero_grad();
            let mut dropout_rng = if model.strategy_cfg.dropout > 0.0 {
                Some(dropout_master.fork())
            } else {
                None
            };
            let mut dr = dropout_rng.as_mut();
            let result = batch_loss(model, dataset, batch, cfg.aux_coef, &mut dr);
            let (total, task, lb_moe, z_moe, lb_peft) = match result {
                Ok(v) => v,
                Err(PerftError::NonFinite(_)) => return Err(PerftError::Diverged { step }),
                Err(e) => return Err(e),
            };
            let total_val = total.item();
            if !total_val.is_finite() {
                return Err(PerftError::Diverged { step });
            }
            total.backward()?;
            let lr = lr_at(cfg, step, total_steps);
            let params: Vec<(Matrix, Vec<f64>)> = trainables
                .iter()
                .map(|t| {
                    let g = t
                        .matrix
                        .grad()
                        .unwrap_or_else(|| vec![0.0; t.matrix.len()]);
                    (t.matrix.clone(), g)
                })
                .collect();
            opt.step(&params, lr);
            history.push(TrainRecord {
                step,
                total_loss: total_val,
                task_loss: task,
                lb_moe,
                z_moe,
                lb_peft,
                learning_rate: lr,
            });
        }
    }
    Ok(history)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: Option<f64>,
    /// Mean auxiliary losses over the dataset.
    pub lb_moe: f64,
    pub z_moe: f64,
    pub lb_peft: f64,
}

/// Evaluate without mutating any parameter.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<EvalReport> {
    let n = dataset.inputs.len();
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut lb_moe = 0.0;
    let mut z_moe = 0.0;
    let mut lb_peft = 0.0;
    for i in 0..n {
        let out = model.forward(&dataset.inputs[i])?;
        loss += sample_task_loss(model, &out, dataset, i)?.item();
        lb_moe += out.aux.lb_moe.item();
        z_moe += out.aux.z_moe.item();
        lb_peft += out.aux.lb_peft.item();
        if let Targets::Classification(labels) = &dataset.targets {
            let readout = model.readout.as_ref().unwrap();
            let t = out.hidden.rows();
            let pooled = Matrix::from_vec(1, t, vec![1.0 / t as f64; t])?.matmul(&out.hidden)?;
            let logits = pooled.matmul(readout)?.to_vec();
            let pred = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            if pred == labels[i] {
                correct += 1;
            }
        }
    }
    let accuracy = match &dataset.targets {
        Targets::Classification(_) => Some(correct as f64 / n as f64),
        Targets::Regression(_) => None,
    };
    Ok(EvalReport {
        loss: loss / n as f64,
        accuracy,
        lb_moe: lb_moe / n as f64,
        z_moe: z_moe / n as f64,
        lb_peft: lb_peft / n as f64,
    })
}

/// SHA-256 digest of a matrix's shape and raw little-endian data bytes.
pub fn tensor_digest(m: &Matrix) -> String {
    let mut hasher = Sha256::new();
    hasher.update((m.rows() as u64).to_le_bytes());
    hasher.update((m.cols() as u64).to_le_bytes());
    for v in m.to_vec() {
        hasher.update(v.to_le_bytes());
    }
    format!("{:x}", hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PeftStrategyConfig, PeftVariant, TensorRole};
    use crate::moe::{FfnForm, MoeLayerConfig};

    fn toy_spec(kind: TaskKind) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            kind,
            num_clusters: 2,
            d: 6,
            t: 4,
            samples: 12,
            noise_std: 0.0,
            seed: 5,
        }
    }

    fn toy_model(variant: PeftVariant, out_dim: usize, seed: u64) -> Model {
        let cfg = ModelConfig {
            layers: 1,
            moe: MoeLayerConfig {
                d: 6,
                d_ffn: 8,
                n: 3,
                k: 2,
                ffn_form: FfnForm::Vanilla,
                renormalize_gates: false,
            },
            causal: false,
        };
        let mut strategy = PeftStrategyConfig::none();
        strategy.variant = variant;
        strategy.d_b = 2;
        strategy.alpha = 4.0;
        Model::build(cfg, strategy, seed, Some(out_dim)).unwrap()
    }

    #[test]
    fn noise_free_clusters_are_separable_by_nearest_mean() {
        let spec = toy_spec(TaskKind::ClusterClassification);
        let ds = generate_task(&spec).unwrap();
        for (i, x) in ds.inputs.iter().enumerate() {
            let row = x.to_vec()[..spec.d].to_vec();
            let mut best = (f64::INFINITY, 0);
            for (c, mean) in ds.means.iter().enumerate() {
                let dist: f64 = row.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            assert_eq!(best.1, ds.cluster_ids[i]);
        }
    }

    #[test]
    fn same_seed_identical_dataset() {
        let spec = toy_spec(TaskKind::ClusterRegression);
        let a = generate_task(&spec).unwrap();
        let b = generate_task(&spec).unwrap();
        for (x, y) in a.inputs.iter().zip(b.inputs.iter()) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
        let (Targets::Regression(ta), Targets::Regression(tb)) = (&a.targets, &b.targets) else {
            unreachable!()
        };
        for (x, y) in ta.iter().zip(tb.iter()) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
    }

    #[test]
    fn regression_targets_replay_from_stored_maps() {
        let mut spec = toy_spec(TaskKind::ClusterRegression);
        spec.noise_std = 0.3;
        let ds = generate_task(&spec).unwrap();
        let Targets::Regression(targets) = &ds.targets else {
            unreachable!()
        };
        for i in 0..ds.inputs.len() {
            let cid = ds.cluster_ids[i];
            let pooled = Matrix::from_vec(1, spec.t, vec![1.0 / spec.t as f64; spec.t])
                .unwrap()
                .matmul(&ds.inputs[i])
                .unwrap();
            let clean = pooled.matmul(&ds.maps[cid]).unwrap();
            for j in 0..spec.d {
                let expect = clean.get(0, j) + ds.target_noise[i][j];
                assert!((targets[i].get(0, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let ds = generate_task(&toy_spec(TaskKind::ClusterClassification)).unwrap();
        let model = toy_model(PeftVariant::PerftS, 2, 3);
        let before: Vec<String> = model.named_tensors().iter().map(|t| tensor_digest(&t.matrix)).collect();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let history = train(&model, &ds, &cfg).unwrap();
        assert!(history.is_empty());
        let after: Vec<String> = model.named_tensors().iter().map(|t| tensor_digest(&t.matrix)).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn zero_lr_populates_history_without_updates() {
        let ds = generate_task(&toy_spec(TaskKind::ClusterClassification)).unwrap();
        let model = toy_model(PeftVariant::PerftS, 2, 3);
        let before: Vec<String> = model.named_tensors().iter().map(|t| tensor_digest(&t.matrix)).collect();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let history = train(&model, &ds, &cfg).unwrap();
        assert_eq!(history.len(), 3);
        let after: Vec<String> = model.named_tensors().iter().map(|t| tensor_digest(&t.matrix)).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn adamw_matches_hand_rolled_trace() {
        // single parameter, quadratic loss 0.5 * theta^2, lr fixed
        let theta = Matrix::from_vec(1, 1, vec![1.0]).unwrap().with_grad();
        let mut opt = AdamW::new(1, &[1], 0.0);
        let lr = 0.1;
        // independent reference trace
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut ref_theta = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=20 {
            theta.zero_grad();
            let loss = theta.mul(&theta).unwrap().scale(0.5).unwrap();
            loss.backward().unwrap();
            let g = theta.grad().unwrap()[0];
            opt.step(&[(theta.clone(), vec![g])], lr);

            let g_ref = ref_theta;
            m = b1 * m + (1.0 - b1) * g_ref;
            v = b2 * v + (1.0 - b2) * g_ref * g_ref;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            ref_theta -= lr * m_hat / (v_hat.sqrt() + eps);
            assert!(
                (theta.item() - ref_theta).abs() < 1e-12,
                "step {t}: {} vs {ref_theta}",
                theta.item()
            );
        }
    }

    #[test]
    fn frozen_tensors_unchanged_by_training() {
        let ds = generate_task(&toy_spec(TaskKind::ClusterClassification)).unwrap();
        let model = toy_model(PeftVariant::PerftR { m: 2, k_tilde: 1 }, 2, 3);
        let frozen_before: Vec<(String, String)> = model
            .named_tensors()
            .iter()
            .filter(|t| !t.trainable)
            .map(|t| (t.name.clone(), tensor_digest(&t.matrix)))
            .collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            warmup_steps: 2,
            ..TrainConfig::default()
        };
        train(&model, &ds, &cfg).unwrap();
        for (t, (name, before)) in model
            .named_tensors()
            .iter()
            .filter(|t| !t.trainable)
            .zip(frozen_before.iter())
        {
            assert_eq!(&t.name, name);
            assert_eq!(&tensor_digest(&t.matrix), before, "frozen tensor {name} changed");
        }
        // at least one adapter moved
        let moved = model
            .named_tensors()
            .iter()
            .filter(|t| t.role == TensorRole::Adaptation)
            .any(|t| t.matrix.to_vec().iter().any(|v| *v != 0.0));
        assert!(moved);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let ds = generate_task(&toy_spec(TaskKind::ClusterClassification)).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            warmup_steps: 1,
            ..TrainConfig::default()
        };
        let run = || {
            let model = toy_model(PeftVariant::PerftS, 2, 3);
            let h = train(&model, &ds, &cfg).unwrap();
            (
                h.iter().map(|r| r.total_loss.to_bits()).collect::<Vec<_>>(),
                model
                    .named_tensors()
                    .iter()
                    .map(|t| tensor_digest(&t.matrix))
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_composition_identity_holds() {
        let ds = generate_task(&toy_spec(TaskKind::ClusterClassification)).unwrap();
        let model = toy_model(PeftVariant::PerftR { m: 2, k_tilde: 1 }, 2, 3);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            aux_coef: 0.01,
            ..TrainConfig::default()
        };
        let history = train(&model, &ds, &cfg).unwrap();
        for r in &history {
            let recomposed = r.task_loss + cfg.aux_coef * (r.lb_moe + r.z_moe + r.lb_peft);
            assert!((r.total_loss - recomposed).abs() < 1e-10);
        }
    }

    #[test]
    fn lr_schedule_is_piecewise_linear() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..TrainConfig::default()
        };
        let total = 10;
        let values: Vec<f64> = (1..=total).map(|s| lr_at(&cfg, s, total)).collect();
        assert!((values[0] - 0.25).abs() < 1e-12);
        assert!((values[3] - 1.0).abs() < 1e-12);
        let max = values.iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, values[3]);
        assert_eq!(values[total - 1], 0.0);
        // linear decay after warmup
        for s in 5..total {
            let expect = (total - s) as f64 / 6.0;
            assert!((values[s - 1] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluate_is_pure_and_deterministic() {
        let ds = generate_task(&toy_spec(TaskKind::ClusterClassification)).unwrap();
        let model = toy_model(PeftVariant::PerftS, 2, 3);
        let before: Vec<String> = model.named_tensors().iter().map(|t| tensor_digest(&t.matrix)).collect();
        let a = evaluate(&model, &ds).unwrap();
        let b = evaluate(&model, &ds).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.accuracy, b.accuracy);
        let after: Vec<String> = model.named_tensors().iter().map(|t| tensor_digest(&t.matrix)).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn evaluate_loss_matches_per_sample_recomputation() {
        let ds = generate_task(&toy_spec(TaskKind::ClusterRegression)).unwrap();
        let model = toy_model(PeftVariant::None, 6, 3);
        let report = evaluate(&model, &ds).unwrap();
        let mut manual = 0.0;
        for i in 0..ds.inputs.len() {
            let out = model.forward(&ds.inputs[i]).unwrap();
            manual += sample_task_loss(&model, &out, &ds, i).unwrap().item();
        }
        manual /= ds.inputs.len() as f64;
        assert!((report.loss - manual).abs() < 1e-12);
    }

    #[test]
    fn perfect_model_on_noise_free_classification() {
        // construct a readout that classifies by matched filter on the means;
        // with zero base weights the network is the identity (pure residual)
        let spec = toy_spec(TaskKind::ClusterClassification);
        let ds = generate_task(&spec).unwrap();
        let model = toy_model(PeftVariant::None, 2, 3);
        for t in model.named_tensors() {
            if t.role != TensorRole::TaskHead {
                t.matrix.update_data(|d| d.fill(0.0));
            }
        }
        // readout column c = mean_c
        let readout = model.readout.as_ref().unwrap();
        let means = ds.means.clone();
        readout.update_data(|d| {
            for j in 0..6 {
                for c in 0..2 {
                    d[j * 2 + c] = means[c][j];
                }
            }
        });
        let report = evaluate(&model, &ds).unwrap();
        assert_eq!(report.accuracy, Some(1.0));
    }

    #[test]
    fn no_trainable_params_is_an_error() {
        let ds = generate_task(&toy_spec(TaskKind::ClusterClassification)).unwrap();
        let model = toy_model(PeftVariant::None, 2, 3);
        model.readout.as_ref().unwrap().set_requires_grad(false);
        let err = train(&model, &ds, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, PerftError::Config(_)));
    }
}
