//! Config-driven command line: train, eval, count, analyze, sweep.
//!
//! Exit codes: 0 success, 2 configuration error, 3 divergence, 1 other
//! failure (including a partially failed sweep).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use perft::adapters::AdapterArch;
use perft::analysis::{
    count_params, count_spec_of, extract_vectors, pca_project, routing_stats, ParamReport,
    RoutingStats, VectorKind, WhichRouter,
};
use perft::checkpoint::{load_checkpoint, save_checkpoint};
use perft::config::ExperimentConfig;
use perft::model::PeftVariant;
use perft::train::{evaluate, generate_task, train, Dataset, TrainRecord};
use perft::{PerftError, Result};

#[derive(Parser)]
#[command(name = "perft", about = "Sparse-MoE PEFT workbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file; writes history, checkpoint, summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Model-build seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a fresh or checkpointed model on its task.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Load weights from this checkpoint directory instead of building fresh.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the parameter report for a config without building tensors.
    Count {
        #[arg(long)]
        config: PathBuf,
    },
    /// Export key/expert vectors and their PCA projection from a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a grid of strategy cells and emit an efficiency frontier CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { config, out, seed } => cmd_train(&config, out.as_deref(), seed).map(|_| 0),
        Command::Eval {
            config,
            checkpoint,
            seed,
        } => cmd_eval(config.as_deref(), checkpoint.as_deref(), seed).map(|_| 0),
        Command::Count { config } => cmd_count(&config).map(|_| 0),
        Command::Analyze {
            checkpoint,
            layer,
            out,
        } => cmd_analyze(&checkpoint, layer, &out).map(|_| 0),
        Command::Sweep { config, out, seed } => cmd_sweep(&config, out.as_deref(), seed),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &PerftError) -> u8 {
    match e {
        PerftError::Config(_) | PerftError::Argument(_) | PerftError::Json(_) => 2,
        PerftError::Diverged { .. } => 3,
        _ => 1,
    }
}

#[derive(Serialize)]
struct Summary {
    final_task_loss: f64,
    accuracy: Option<f64>,
    param_report: ParamReport,
    routing_stats: Vec<RoutingStats>,
}

struct TrainArtifacts {
    history: Vec<TrainRecord>,
    summary: Summary,
}

fn resolve_out(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    out.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| {
            PerftError::Config("no output directory: pass --out or set output_dir".into())
        })
}

fn history_csv(history: &[TrainRecord]) -> String {
    let mut csv = String::from("step,total_loss,task_loss,lb_moe,z_moe,lb_peft,lr\n");
    for r in history {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.step, r.total_loss, r.task_loss, r.lb_moe, r.z_moe, r.lb_peft, r.learning_rate
        )
        .expect("write to string");
    }
    csv
}

fn require_task(cfg: &ExperimentConfig) -> Result<Dataset> {
    let task = cfg
        .task
        .as_ref()
        .ok_or_else(|| PerftError::Config("config has no task section".into()))?;
    generate_task(task)
}

/// The shared train pipeline: used verbatim by `train` and per sweep cell so
/// a one-cell sweep is bit-identical to a plain train run.
fn run_training(cfg: &ExperimentConfig, out_dir: &Path, seed: Option<u64>) -> Result<TrainArtifacts> {
    let train_cfg = cfg
        .train
        .clone()
        .ok_or_else(|| PerftError::Config("config has no train section".into()))?;
    let dataset = require_task(cfg)?;
    let model = cfg.build_model(seed)?;
    let history = train(&model, &dataset, &train_cfg)?;
    let eval = evaluate(&model, &dataset)?;
    let report = count_params(&count_spec_of(&model, cfg.model_activated_total))?;
    let stats = routing_stats(&model, &dataset, WhichRouter::Moe)?;
    let summary = Summary {
        final_task_loss: history.last().map(|r| r.task_loss).unwrap_or(eval.loss),
        accuracy: eval.accuracy,
        param_report: report,
        routing_stats: stats,
    };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("history.csv"), history_csv(&history))?;
    save_checkpoint(&out_dir.join("checkpoint"), &model, cfg)?;
    let json = serde_json::to_string_pretty(&summary)?;
    std::fs::write(out_dir.join("summary.json"), json + "\n")?;
    Ok(TrainArtifacts { history, summary })
}

fn cmd_train(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let out_dir = resolve_out(&cfg, out)?;
    let artifacts = run_training(&cfg, &out_dir, seed)?;
    println!(
        "trained {} steps, final task loss {}",
        artifacts.history.len(),
        artifacts.summary.final_task_loss
    );
    Ok(())
}

fn cmd_eval(config: Option<&Path>, checkpoint: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let (cfg, model) = match (config, checkpoint) {
        (_, Some(dir)) => load_checkpoint(dir)?,
        (Some(path), None) => {
            let cfg = ExperimentConfig::load(path)?;
            let model = cfg.build_model(seed)?;
            (cfg, model)
        }
        (None, None) => {
            return Err(PerftError::Config(
                "eval needs --config or --checkpoint".into(),
            ))
        }
    };
    let dataset = require_task(&cfg)?;
    let report = evaluate(&model, &dataset)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_count(config: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let report = count_params(&cfg.count_spec())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn csv_escape_row(fields: &[String]) -> String {
    fields.join(",")
}

fn cmd_analyze(checkpoint: &Path, layer: usize, out: &Path) -> Result<()> {
    let (_cfg, model) = load_checkpoint(checkpoint)?;
    let bundle = extract_vectors(&model, layer)?;
    std::fs::create_dir_all(out)?;
    let width = bundle.vectors.first().map(|v| v.values.len()).unwrap_or(0);
    let mut vectors_csv = String::from("kind,layer,index");
    for c in 1..=width {
        write!(vectors_csv, ",c{c}").expect("write to string");
    }
    vectors_csv.push('\n');
    for v in &bundle.vectors {
        let mut fields = vec![
            kind_label(v.kind).to_string(),
            v.layer.to_string(),
            v.index.to_string(),
        ];
        fields.extend(v.values.iter().map(|x| x.to_string()));
        vectors_csv.push_str(&csv_escape_row(&fields));
        vectors_csv.push('\n');
    }
    std::fs::write(out.join("vectors.csv"), vectors_csv)?;
    // fit the projection on the FFN key vectors, transform everything
    let fit: Vec<Vec<f64>> = bundle
        .of_kind(VectorKind::FfnKey)
        .iter()
        .map(|v| v.values.clone())
        .collect();
    let all: Vec<Vec<f64>> = bundle.vectors.iter().map(|v| v.values.clone()).collect();
    let pca = pca_project(&fit, &all, 2)?;
    if let Some(w) = &pca.warning {
        eprintln!("warning: {w}");
    }
    let mut pca_csv = String::from("kind,layer,index,c1,c2\n");
    for (v, coords) in bundle.vectors.iter().zip(&pca.coords) {
        let c1 = coords.first().copied().unwrap_or(0.0);
        let c2 = coords.get(1).copied().unwrap_or(0.0);
        writeln!(
            pca_csv,
            "{},{},{},{},{}",
            kind_label(v.kind),
            v.layer,
            v.index,
            c1,
            c2
        )
        .expect("write to string");
    }
    std::fs::write(out.join("pca.csv"), pca_csv)?;
    println!("wrote {} vectors from layer {layer}", bundle.vectors.len());
    Ok(())
}

fn kind_label(kind: VectorKind) -> &'static str {
    match kind {
        VectorKind::FfnKey => "ffn_key",
        VectorKind::ExpertVector => "expert_vector",
        VectorKind::PeftKey => "peft_key",
        VectorKind::PeftExpertVector => "peft_expert_vector",
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepGrid {
    variants: Vec<String>,
    #[serde(default = "one")]
    m: Vec<usize>,
    #[serde(default = "one")]
    k_tilde: Vec<usize>,
    d_b: Vec<usize>,
}

fn one() -> Vec<usize> {
    vec![1]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepConfig {
    base: ExperimentConfig,
    grid: SweepGrid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct SweepCell {
    variant: PeftVariant,
    d_b: usize,
}

impl SweepCell {
    fn dir_name(&self) -> String {
        let (m, k_tilde) = cell_axes(self.variant);
        format!("{}_m{}_kt{}_db{}", self.variant.name(), m, k_tilde, self.d_b)
    }
}

/// The M / K-tilde axis values a cell actually uses (1 when the variant has
/// no such axis, so grids collapse cleanly).
fn cell_axes(variant: PeftVariant) -> (usize, usize) {
    match variant {
        PeftVariant::PerftR { m, k_tilde } => (m, k_tilde),
        PeftVariant::PerftD { m } => (m, 1),
        _ => (1, 1),
    }
}

fn make_variant(name: &str, m: usize, k_tilde: usize) -> Result<Option<PeftVariant>> {
    Ok(Some(match name {
        "perft_r" => {
            if k_tilde > m || k_tilde == 0 {
                return Ok(None); // infeasible grid point, skipped
            }
            PeftVariant::PerftR { m, k_tilde }
        }
        "perft_d" => PeftVariant::PerftD { m },
        "perft_e" => PeftVariant::PerftE,
        "perft_s" => PeftVariant::PerftS,
        "baseline_attn_lora" => PeftVariant::BaselineAttnLora,
        "baseline_gate_lora" => PeftVariant::BaselineGateLora,
        "none" => PeftVariant::None,
        other => {
            return Err(PerftError::Config(format!(
                "unknown sweep variant {other:?}"
            )))
        }
    }))
}

struct CellResult {
    cell: SweepCell,
    outcome: std::result::Result<(ParamReport, f64, Option<f64>), String>,
}

fn sweep_threads() -> usize {
    std::env::var("PERFT_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn cmd_sweep(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<u8> {
    let text = std::fs::read_to_string(config)?;
    let sweep: SweepConfig = serde_json::from_str(&text)
        .map_err(|e| PerftError::Config(format!("{}: {e}", config.display())))?;
    sweep.base.validate()?;
    let out_dir = resolve_out(&sweep.base, out)?;
    std::fs::create_dir_all(&out_dir)?;

    // expand the grid, collapsing cells for variants without an M/K-tilde axis
    let mut cells = Vec::new();
    for name in &sweep.grid.variants {
        for &m in &sweep.grid.m {
            for &k_tilde in &sweep.grid.k_tilde {
                for &d_b in &sweep.grid.d_b {
                    if let Some(variant) = make_variant(name, m, k_tilde)? {
                        let cell = SweepCell { variant, d_b };
                        if !cells.contains(&cell) {
                            cells.push(cell);
                        }
                    }
                }
            }
        }
    }
    if cells.is_empty() {
        return Err(PerftError::Config("sweep grid is empty".into()));
    }

    let threads = sweep_threads().min(cells.len());
    let run_cell = |cell: &SweepCell| -> std::result::Result<(ParamReport, f64, Option<f64>), String> {
        let mut cfg = sweep.base.clone();
        cfg.strategy.variant = cell.variant;
        cfg.strategy.d_b = cell.d_b;
        if cfg.strategy.arch == AdapterArch::Lora {
            cfg.strategy.alpha = 2.0 * cell.d_b as f64;
        }
        let cell_dir = out_dir.join(cell.dir_name());
        cfg.validate().map_err(|e| e.to_string())?;
        let artifacts = run_training(&cfg, &cell_dir, seed).map_err(|e| e.to_string())?;
        Ok((
            artifacts.summary.param_report,
            artifacts.summary.final_task_loss,
            artifacts.summary.accuracy,
        ))
    };

    let mut results: Vec<CellResult> = Vec::with_capacity(cells.len());
    if threads <= 1 {
        for cell in &cells {
            results.push(CellResult {
                cell: cell.clone(),
                outcome: run_cell(cell),
            });
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let collected = std::sync::Mutex::new(Vec::with_capacity(cells.len()));
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= cells.len() {
                        break;
                    }
                    let outcome = run_cell(&cells[i]);
                    collected.lock().expect("sweep mutex").push(CellResult {
                        cell: cells[i].clone(),
                        outcome,
                    });
                });
            }
        });
        results = collected.into_inner().expect("sweep mutex");
        // restore grid order so the frontier CSV is deterministic
        results.sort_by_key(|r| cells.iter().position(|c| *c == r.cell).expect("known cell"));
    }

    let mut csv =
        String::from("variant,M,K_tilde,D_B,activated_params,efficiency,final_loss,accuracy\n");
    let mut failed = false;
    for r in &results {
        let (m, k_tilde) = cell_axes(r.cell.variant);
        match &r.outcome {
            Ok((report, final_loss, accuracy)) => {
                writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{}",
                    r.cell.variant.name(),
                    m,
                    k_tilde,
                    r.cell.d_b,
                    report.trainable_activated_per_token,
                    report.activated_efficiency,
                    final_loss,
                    accuracy.map(|a| a.to_string()).unwrap_or_default()
                )
                .expect("write to string");
            }
            Err(msg) => {
                failed = true;
                writeln!(
                    csv,
                    "{},{},{},{},,,,failed: {}",
                    r.cell.variant.name(),
                    m,
                    k_tilde,
                    r.cell.d_b,
                    msg.replace([',', '\n'], ";")
                )
                .expect("write to string");
            }
        }
    }
    std::fs::write(out_dir.join("frontier.csv"), csv)?;
    println!("swept {} cells", results.len());
    Ok(if failed { 1 } else { 0 })
}
