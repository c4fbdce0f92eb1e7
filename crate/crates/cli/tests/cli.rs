use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
[generator]
n_users = 120
n_items = 40
test_items_per_user = 10
alpha = 0.5
[pipeline]
treatment_dim = 8
[pipeline.ivae]
max_epochs = 3
encoder_hidden = [8]
decoder_hidden = [8]
[pipeline.iv]
epochs = 1
n_max = 4
[pipeline.rec]
dim = 8
epochs = 2
grid = [[0.01, 1e-6]]
"#;

/// `top` holds top-level keys (seeds default to `[0, 1]`), `tables` extra
/// TOML tables appended after the tiny model settings.
fn setup_with(top: &str, tables: &str) -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    let seeds = if top.contains("seeds") { "" } else { "seeds = [0, 1]" };
    fs::write(&cfg, format!("{seeds}\n{top}\n{TINY}\n{tables}")).unwrap();
    (tmp, cfg)
}

fn setup(top: &str) -> (tempfile::TempDir, PathBuf) {
    setup_with(top, "")
}

fn ividr(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ividr"))
        .args(args)
        .env("IVIDR_OUT", out)
        .env("RUST_LOG", "info")
        .output()
        .unwrap()
}

fn only_run_dir(out: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn data_lines(p: &Path) -> Vec<String> {
    fs::read_to_string(p).unwrap().lines().filter(|l| !l.starts_with('#')).map(str::to_owned).collect()
}

#[test]
fn generate_is_reproducible_and_stamped() {
    let (tmp, cfg) = setup("");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = ividr(out, &["generate", "--config", cfg.to_str().unwrap(), "--seed", "3"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ba, bb) = (only_run_dir(&a).join("bundle"), only_run_dir(&b).join("bundle"));
    assert_eq!(fs::read(ba.join("meta.json")).unwrap(), fs::read(bb.join("meta.json")).unwrap());
    assert_eq!(fs::read(ba.join("interactions.tsv")).unwrap(), fs::read(bb.join("interactions.tsv")).unwrap());
    let meta = read_json(&ba.join("meta.json"));
    assert_eq!(meta["seed"], 3);
    assert_eq!(meta["n_users"], 120);
    assert!(meta["provenance"]["build"].as_str().unwrap().starts_with("0.1.0"));
    assert!(fs::read_to_string(ba.join("interactions.tsv")).unwrap().starts_with("# build="));
}

#[test]
fn run_writes_reports_and_checkpoints() {
    let (tmp, cfg) = setup("");
    let out = tmp.path().join("runs");
    let o = ividr(&out, &["run", "--config", cfg.to_str().unwrap(), "--variants", "MF,IViDR"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = only_run_dir(&out);
    assert!(run.file_name().unwrap().to_str().unwrap().starts_with("run-"));
    let rows = data_lines(&run.join("report.csv"));
    // header + (ndcg, recall) x 2 variants x 2 seeds + IViDR mcc x 2 seeds
    assert_eq!(rows.len(), 1 + 8 + 2);
    let report = read_json(&run.join("report.json"));
    assert_eq!(report["provenance"]["config"]["seeds"], serde_json::json!([0, 1]));
    assert_eq!(report["failures"].as_array().unwrap().len(), 0);
    for cell in ["seed0_MF", "seed1_IViDR"] {
        assert!(run.join("checkpoints").join(format!("{cell}.bin")).exists());
        let m = read_json(&run.join("checkpoints").join(format!("{cell}.json")));
        assert_eq!(m["details"]["rho"], 0.9);
    }
}

#[test]
fn resume_skips_completed_cells_and_matches() {
    let (tmp, cfg) = setup("");
    let out = tmp.path().join("runs");
    assert!(ividr(&out, &["run", "--config", cfg.to_str().unwrap(), "--variants", "MF,iDCF"]).status.success());
    let run = only_run_dir(&out);
    let before = data_lines(&run.join("report.csv"));
    fs::remove_file(run.join("cells/seed1_iDCF.json")).unwrap();
    fs::remove_file(run.join("report.csv")).unwrap();
    let o = ividr(&out, &["run", "--resume", run.to_str().unwrap()]);
    assert!(o.status.success());
    let log = String::from_utf8_lossy(&o.stderr);
    assert_eq!(log.matches("skipping completed cell").count(), 3, "{log}");
    assert!(log.contains("training seed1_iDCF"));
    assert_eq!(data_lines(&run.join("report.csv")), before);
    // A resume must come from the same command.
    assert!(!ividr(&out, &["ablate", "--resume", run.to_str().unwrap()]).status.success());
}

#[test]
fn run_sweep_emits_six_point_series() {
    let (tmp, cfg) = setup("seeds = [0]");
    let out = tmp.path().join("runs");
    let o = ividr(&out, &["run", "--config", cfg.to_str().unwrap(), "--variants", "IViDR", "--sweep", "rho=0:1:0.2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = data_lines(&only_run_dir(&out).join("sweep_rho.csv"));
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("IViDR,0,") && lines[6].starts_with("IViDR,1,"));
}

#[test]
fn sweep_command_checks_both_weights() {
    let (tmp, cfg) = setup("seeds = [0]\nsweep_points = [0.0, 0.5, 1.0]");
    let out = tmp.path().join("runs");
    assert!(ividr(&out, &["sweep", "--config", cfg.to_str().unwrap()]).status.success());
    let run = only_run_dir(&out);
    let check = read_json(&run.join("sweep_check.json"));
    for w in ["rho", "tau"] {
        assert!(check[w]["IViDR"]["interior_peak_by_seed"]["0"].is_boolean());
        assert_eq!(data_lines(&run.join(format!("sweep_{w}.csv"))).len(), 4);
    }
}

#[test]
fn mcc_study_reports_trend() {
    let (tmp, cfg) = setup("seeds = [0]");
    let out = tmp.path().join("runs");
    assert!(ividr(&out, &["mcc-study", "--config", cfg.to_str().unwrap(), "--gammas", "0,20"]).status.success());
    let run = only_run_dir(&out);
    let lines = data_lines(&run.join("mcc_vs_gamma.csv"));
    assert_eq!(lines.len(), 1 + 4);
    let trend = read_json(&run.join("mcc_trend.json"));
    assert!(trend["monotone_degradation"].is_boolean());
    assert_eq!(trend["gammas"], serde_json::json!([0.0, 20.0]));
}

#[test]
fn ablate_checks_ordering() {
    let (tmp, cfg) = setup("seeds = [0]");
    let out = tmp.path().join("runs");
    assert!(ividr(&out, &["ablate", "--config", cfg.to_str().unwrap()]).status.success());
    let check = read_json(&only_run_dir(&out).join("ablation_check.json"));
    assert!(check["ordering_holds"].is_boolean());
    assert_eq!(check["means"].as_array().unwrap().len(), 4);
}

#[test]
fn run_on_generated_bundle() {
    let (tmp, cfg) = setup("");
    let gen_out = tmp.path().join("gen");
    assert!(ividr(&gen_out, &["generate", "--config", cfg.to_str().unwrap()]).status.success());
    let bundle = only_run_dir(&gen_out).join("bundle");
    let (tmp2, cfg2) = setup_with("seeds = [5]", &format!("[data]\nkind = \"bundle\"\npath = {:?}", bundle.to_str().unwrap()));
    let out = tmp2.path().join("runs");
    let o = ividr(&out, &["run", "--config", cfg2.to_str().unwrap(), "--variants", "iDCF"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // Ground truth travels with the bundle, so MCC is reported.
    assert!(data_lines(&only_run_dir(&out).join("report.csv")).iter().any(|l| l.contains(",mcc,")));
}

#[test]
fn failed_cells_give_nonzero_exit() {
    let (tmp, cfg) = setup_with("seeds = [0]", "[data]\nkind = \"bundle\"\npath = \"/nonexistent/bundle\"");
    let out = tmp.path().join("runs");
    let o = ividr(&out, &["run", "--config", cfg.to_str().unwrap(), "--variants", "MF"]);
    assert_eq!(o.status.code(), Some(1));
    let report = read_json(&only_run_dir(&out).join("report.json"));
    assert_eq!(report["failures"][0]["cell"], "seed0_MF");
}

#[test]
fn bad_config_is_rejected() {
    let (tmp, cfg) = setup("variants = []");
    let o = ividr(&tmp.path().join("runs"), &["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = ividr(&tmp.path().join("runs"), &["run", "--config", "/nonexistent.toml"]);
    assert_eq!(o.status.code(), Some(2));
}
