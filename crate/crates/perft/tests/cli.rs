//! End-to-end tests of the `perft` binary: exit codes, artifacts, and
//! cross-command consistency.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_perft")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn perft")
}

fn fast_config() -> serde_json::Value {
    serde_json::json!({
        "seed": 11,
        "model": {
            "layers": 1, "d": 8, "d_ffn": 16, "n": 4, "k": 2,
            "ffn_form": "vanilla", "renormalize_gates": false, "causal": false
        },
        "strategy": {
            "variant": {"perft_r": {"m": 4, "k_tilde": 2}},
            "arch": "lora", "d_b": 2, "alpha": 4.0, "dropout": 0.0
        },
        "task": {
            "kind": "cluster_classification", "num_clusters": 3, "d": 8,
            "t": 4, "samples": 32, "noise_std": 0.2, "seed": 11
        },
        "train": {
            "lr": 0.001, "warmup_steps": 4, "batch_size": 16, "epochs": 2,
            "aux_coef": 0.01, "weight_decay": 0.0, "seed": 11
        }
    })
}

fn write_config(dir: &Path, value: &serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

#[test]
fn invalid_k_is_exit_2_and_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = fast_config();
    cfg["model"]["k"] = 9.into();
    let path = write_config(tmp.path(), &cfg);
    let out = run(&["train", "--config", path.to_str().unwrap(), "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains('K'), "stderr: {stderr}");
}

#[test]
fn unknown_key_is_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = fast_config();
    cfg["model"]["head_count"] = 4.into();
    let path = write_config(tmp.path(), &cfg);
    let out = run(&["count", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("head_count"), "stderr: {stderr}");
}

#[test]
fn missing_config_file_is_exit_1() {
    let out = run(&["count", "--config", "/nonexistent/nope.json"]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn divergence_is_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = fast_config();
    cfg["train"]["lr"] = 1e200.into();
    cfg["train"]["warmup_steps"] = 0.into();
    cfg["train"]["epochs"] = 20.into();
    let path = write_config(tmp.path(), &cfg);
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "train",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_writes_all_artifacts_and_count_agrees() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fast_config();
    let path = write_config(tmp.path(), &cfg);
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "train",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("history.csv").exists());
    assert!(out_dir.join("summary.json").exists());
    assert!(out_dir.join("checkpoint").join("manifest.json").exists());

    // history CSV: header plus one row per step, loss composition per row
    let history = std::fs::read_to_string(out_dir.join("history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "step,total_loss,task_loss,lb_moe,z_moe,lb_peft,lr");
    assert_eq!(lines.len(), 1 + 2 * 2); // 32 samples / batch 16 * 2 epochs
    for row in &lines[1..] {
        let f: Vec<f64> = row.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        let (total, task, lb_moe, z_moe, lb_peft) = (f[0], f[1], f[2], f[3], f[4]);
        assert!((total - (task + 0.01 * (lb_moe + z_moe + lb_peft))).abs() < 1e-9);
    }

    // count on the same config reproduces the embedded param report
    let count = run(&["count", "--config", path.to_str().unwrap()]);
    assert_eq!(count.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&count.stdout).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(report, summary["param_report"]);
}

#[test]
fn strategy_none_counts_zero_trainable() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = fast_config();
    cfg["strategy"]["variant"] = "none".into();
    let path = write_config(tmp.path(), &cfg);
    let out = run(&["count", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["trainable_total"], 0);
    assert_eq!(report["trainable_activated_per_token"], 0);
}

#[test]
fn analyze_round_trips_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fast_config();
    let path = write_config(tmp.path(), &cfg);
    let out_dir = tmp.path().join("out");
    assert_eq!(
        run(&[
            "train",
            "--config",
            path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap()
        ])
        .status
        .code(),
        Some(0)
    );
    let ckpt = out_dir.join("checkpoint");
    let analysis_dir = tmp.path().join("analysis");
    let out = run(&[
        "analyze",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--layer",
        "0",
        "--out",
        analysis_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let vectors = std::fs::read_to_string(analysis_dir.join("vectors.csv")).unwrap();
    let pca = std::fs::read_to_string(analysis_dir.join("pca.csv")).unwrap();
    // D=8, D_ffn=16, N=4, M=4, D_B=2:
    // ffn keys 4*16, expert vectors 4, peft keys 4*2, peft expert vectors 4
    let expected = 4 * 16 + 4 + 4 * 2 + 4;
    assert_eq!(vectors.lines().count(), 1 + expected);
    assert_eq!(pca.lines().count(), 1 + expected);
    assert!(pca.lines().next().unwrap() == "kind,layer,index,c1,c2");
    for kind in ["ffn_key", "expert_vector", "peft_key", "peft_expert_vector"] {
        assert!(vectors.contains(kind), "missing {kind}");
    }

    // eval runs from the same checkpoint
    let eval = run(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert!(report["loss"].as_f64().unwrap().is_finite());
}

#[test]
fn analyze_without_manifest_is_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "analyze",
        "--checkpoint",
        tmp.path().to_str().unwrap(),
        "--layer",
        "0",
        "--out",
        tmp.path().join("a").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn one_cell_sweep_matches_train() {
    let tmp = tempfile::tempdir().unwrap();
    let base = fast_config();
    let sweep_cfg = serde_json::json!({
        "base": base,
        "grid": {
            "variants": ["perft_r"],
            "m": [4],
            "k_tilde": [2],
            "d_b": [2]
        }
    });
    let sweep_path = tmp.path().join("sweep.json");
    std::fs::write(&sweep_path, serde_json::to_string(&sweep_cfg).unwrap()).unwrap();
    let sweep_out = tmp.path().join("sweep_out");
    let out = run(&[
        "sweep",
        "--config",
        sweep_path.to_str().unwrap(),
        "--out",
        sweep_out.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let frontier = std::fs::read_to_string(sweep_out.join("frontier.csv")).unwrap();
    let lines: Vec<&str> = frontier.lines().collect();
    assert_eq!(
        lines[0],
        "variant,M,K_tilde,D_B,activated_params,efficiency,final_loss,accuracy"
    );
    assert_eq!(lines.len(), 2);

    // the single cell is byte-identical to a plain train run
    let cfg_path = write_config(tmp.path(), &base);
    let train_out = tmp.path().join("train_out");
    assert_eq!(
        run(&[
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            train_out.to_str().unwrap()
        ])
        .status
        .code(),
        Some(0)
    );
    let cell_dir = sweep_out.join("perft_r_m4_kt2_db2");
    for file in ["history.csv", "summary.json"] {
        let a = std::fs::read(cell_dir.join(file)).unwrap();
        let b = std::fs::read(train_out.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between sweep cell and train");
    }

    // frontier row agrees with cmd_count
    let count = run(&["count", "--config", cfg_path.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_slice(&count.stdout).unwrap();
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields[0], "perft_r");
    assert_eq!(
        fields[4],
        report["trainable_activated_per_token"].to_string()
    );
}

#[test]
fn sweep_records_cell_failures_and_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let mut base = fast_config();
    // a diverging base makes every cell fail
    base["train"]["lr"] = 1e200.into();
    base["train"]["warmup_steps"] = 0.into();
    base["train"]["epochs"] = 20.into();
    let sweep_cfg = serde_json::json!({
        "base": base,
        "grid": {"variants": ["perft_s"], "d_b": [2]}
    });
    let sweep_path = tmp.path().join("sweep.json");
    std::fs::write(&sweep_path, serde_json::to_string(&sweep_cfg).unwrap()).unwrap();
    let sweep_out = tmp.path().join("out");
    let out = run(&[
        "sweep",
        "--config",
        sweep_path.to_str().unwrap(),
        "--out",
        sweep_out.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let frontier = std::fs::read_to_string(sweep_out.join("frontier.csv")).unwrap();
    assert!(frontier.contains("failed"), "{frontier}");
}

#[test]
fn sweep_is_order_independent_and_parallelizable() {
    let tmp = tempfile::tempdir().unwrap();
    let base = fast_config();
    let sweep_cfg = serde_json::json!({
        "base": base,
        "grid": {
            "variants": ["perft_s", "perft_d", "baseline_attn_lora"],
            "m": [2],
            "d_b": [1, 2]
        }
    });
    let sweep_path = tmp.path().join("sweep.json");
    std::fs::write(&sweep_path, serde_json::to_string(&sweep_cfg).unwrap()).unwrap();
    let serial = tmp.path().join("serial");
    let parallel = tmp.path().join("parallel");
    let out = run(&[
        "sweep",
        "--config",
        sweep_path.to_str().unwrap(),
        "--out",
        serial.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = Command::new(bin())
        .args(["sweep", "--config", sweep_path.to_str().unwrap(), "--out"])
        .arg(&parallel)
        .env("PERFT_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let a = std::fs::read(serial.join("frontier.csv")).unwrap();
    let b = std::fs::read(parallel.join("frontier.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn seed_override_changes_the_model_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fast_config();
    let path = write_config(tmp.path(), &cfg);
    let dirs = [tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c")];
    for (dir, seed) in dirs.iter().zip(["5", "5", "6"]) {
        let out = run(&[
            "train",
            "--config",
            path.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert_eq!(out.status.code(), Some(0));
    }
    let a = std::fs::read(dirs[0].join("summary.json")).unwrap();
    let b = std::fs::read(dirs[1].join("summary.json")).unwrap();
    let c = std::fs::read(dirs[2].join("summary.json")).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
