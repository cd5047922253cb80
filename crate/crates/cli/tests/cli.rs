use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use accomp_core::embedding::Emb1;
use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_accomp");

fn tiny_config(out: &Path) -> Value {
    json!({
        "schema_version": 1,
        "model_variant": "c-dit",
        "seeds": [3],
        "output_dir": out,
        "data": {
            "train_sets": 32, "eval_sets": 24, "max_stems": 4, "window": 16,
            "tracks": {"latent_channels": 4, "length": 32, "components": 3, "amplitude": 1.0,
                       "num_genres": 4, "num_instruments": 4, "jitter": 0.15},
            "gap": {"embed_dim": 16, "offset_norm": 0.5, "cone_angle": 0.6, "noise_scale": 0.05, "seed": 0}
        },
        "dit": {"model_dim": 16, "mlp_multiplier": 2, "num_heads": 2, "num_layers": 1, "patch_size": 2,
                "noise_embed_dim": 16, "latent_channels": 4, "context_channels": 4, "style_embed_dim": 16,
                "max_len": 16, "dw_kernel": 3, "cond_dropout": 0.1},
        "training": {"steps": 20, "diffusion_batch": 8, "consistency_batch": 8, "checkpoint_every": 10, "warmup_steps": 2},
        "bridge": {"model": {"embed_dim": 16, "hidden_units": 16, "num_blocks": 1, "cond_dropout": 0.1},
                   "steps": 20, "batch": 16, "sample_steps": 4},
        "sampling": {"count": 8},
        "evaluation": {"batches": 2, "batch_size": 24, "reference_size": 32, "k": 3}
    })
}

struct Workspace {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        Self::with(|_| {})
    }

    fn with(edit: impl FnOnce(&mut Value)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(&dir.path().join("out"));
        edit(&mut cfg);
        let config = dir.path().join("config.json");
        std::fs::write(&config, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        Self { dir, config }
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut full = vec![args[0], "--config", self.config.to_str().unwrap()];
        full.extend_from_slice(&args[1..]);
        run(&full)
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn run_dir(&self) -> PathBuf {
        self.dir.path().join("out/seed-3")
    }
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn manifest(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_1_and_help_with_0() {
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&["train", "--variant", "nope"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    let ws = Workspace::with(|c| c["unexpected"] = json!(1));
    assert_eq!(code(&ws.run(&["gen-data"])), 1);
    let ws = Workspace::with(|c| c["schema_version"] = json!(99));
    assert_eq!(code(&ws.run(&["gen-data"])), 1);
}

#[test]
fn missing_files_exit_with_3() {
    let out = run(&["gen-data", "--config", "/nonexistent/config.json"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/config.json"));
    assert_eq!(code(&run(&["plot", "/nonexistent/report.csv"])), 3);
}

#[test]
fn divergence_exits_with_2() {
    let ws = Workspace::with(|c| c["training"]["base_lr"] = json!(1e30));
    let out = ws.run(&["train", "--variant", "dit-diffusion"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_data_writes_hashed_artifacts_deterministically() {
    let ws = Workspace::new();
    ws.ok(&["gen-data"]);
    let data = ws.dir.path().join("out/data");
    let first = std::fs::read(data.join("reference.emb")).unwrap();
    let m = manifest(&data.join("manifest.json"));
    assert_eq!(m["data_hash"].as_str().unwrap().len(), 64);
    ws.ok(&["gen-data"]);
    assert_eq!(std::fs::read(data.join("reference.emb")).unwrap(), first);
    let reference = Emb1::load(&data.join("reference.emb")).unwrap();
    assert_eq!(reference.dim, 16);
    assert_eq!(reference.count, 32);
}

#[test]
fn training_writes_a_loss_log_and_checkpoint() {
    let ws = Workspace::new();
    ws.ok(&["train", "--variant", "c-dit"]);
    let log = std::fs::read_to_string(ws.run_dir().join("c-dit-loss.csv")).unwrap();
    let mut lines = log.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert_eq!(lines.next().unwrap(), "step,loss,gap");
    assert_eq!(lines.count(), 20);
    assert!(ws.run_dir().join("c-dit.lcl").exists());
}

#[test]
fn sampling_reports_exact_network_calls() {
    let ws = Workspace::new();
    ws.ok(&["train", "--variant", "c-dit"]);
    ws.ok(&["train", "--variant", "dit-diffusion"]);
    ws.ok(&["sample", "--variant", "c-dit", "--conditioning", "ctx"]);
    ws.ok(&["sample", "--variant", "dit-diffusion", "--conditioning", "style+ctx"]);
    let c = manifest(&ws.run_dir().join("samples-c-dit-ctx.json"));
    assert_eq!(c["calls_per_sample"], 5);
    assert_eq!(c["steps"], 5);
    let d = manifest(&ws.run_dir().join("samples-dit-diffusion-style+ctx.json"));
    assert_eq!(d["calls_per_sample"], 99);
    let emb = Emb1::load(&ws.run_dir().join("samples-c-dit-ctx.emb")).unwrap();
    assert_eq!((emb.count, emb.dim), (8, 16));
    let norms: Vec<f32> = emb.data.chunks(16).map(|r| r.iter().map(|v| v * v).sum::<f32>().sqrt()).collect();
    assert!(norms.iter().all(|n| (n - 1.0).abs() < 1e-4), "{norms:?}");
}

#[test]
fn zero_count_writes_an_empty_file_with_a_valid_header() {
    let ws = Workspace::new();
    ws.ok(&["train", "--variant", "c-dit"]);
    ws.ok(&["sample", "--variant", "c-dit", "--count", "0"]);
    let emb = Emb1::load(&ws.run_dir().join("samples-c-dit-style+ctx.emb")).unwrap();
    assert_eq!((emb.count, emb.dim), (0, 16));
    assert!(emb.data.is_empty());
}

#[test]
fn unsupported_or_untrained_cells_are_usage_errors() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run(&["sample", "--variant", "bridge", "--conditioning", "ctx"])), 1);
    assert_eq!(code(&ws.run(&["sample", "--variant", "c-dit"])), 1);
    assert_eq!(code(&ws.run(&["sample", "--variant", "c-dit", "--conditioning", "loud"])), 1);
}

#[test]
fn checkpoints_from_other_data_are_refused() {
    let ws = Workspace::new();
    ws.ok(&["train", "--variant", "c-dit"]);
    let cfg_path = ws.config.clone();
    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
    cfg["data"]["seed"] = json!(99);
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = ws.run(&["sample", "--variant", "c-dit"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("data"));
}

#[test]
fn bridge_commands_round_trip() {
    let ws = Workspace::new();
    ws.ok(&["bridge-train"]);
    ws.ok(&["bridge-sample", "--count", "6"]);
    let emb = Emb1::load(&ws.run_dir().join("bridged-text-style.emb")).unwrap();
    assert_eq!((emb.count, emb.dim), (6, 16));
}

#[test]
fn ablation_marks_missing_models_absent_and_plots_deterministically() {
    let ws = Workspace::new();
    ws.ok(&["train", "--variant", "c-dit"]);
    let table = ws.ok(&["ablate"]);
    assert!(table.contains("noise"));
    let csv = std::fs::read_to_string(ws.run_dir().join("report.csv")).unwrap();
    let row = |v: &str, c: &str| csv.lines().find(|l| l.starts_with(&format!("{v},{c},"))).unwrap().to_string();
    assert!(row("dit-diffusion", "ctx").contains(",absent,"));
    assert!(row("c-dit", "ctx").contains(",ok,2,"));
    assert!(row("noise", "-").contains(",ok,"));
    assert!(!csv.lines().any(|l| l.starts_with("bridge,uncond,")));

    let report = ws.run_dir().join("report.csv");
    let plots = ws.dir.path().join("plots");
    let listed = ws_plot(&report, &plots);
    let first: Vec<Vec<u8>> = listed.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert!(listed.iter().any(|p| p.ends_with("Cov.svg")));
    let again = ws_plot(&report, &plots);
    assert_eq!(listed, again);
    for (p, bytes) in again.iter().zip(first) {
        assert_eq!(std::fs::read(p).unwrap(), bytes);
    }
}

fn ws_plot(report: &Path, out: &Path) -> Vec<PathBuf> {
    let o = run(&["plot", report.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap().lines().map(PathBuf::from).collect()
}
