//! End-to-end command-line tests: exit codes, fixed output names, and
//! determinism, driven through the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_imageqx");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("binary launches")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL_CONFIG: &str = r#"{
  "corpus": {
    "scene": { "resolution": 32 },
    "counts": { "lesion": 8, "no_skin": 4, "healthy_skin": 4, "poor_quality": 8 },
    "raters": { "raters": 3, "accuracy": 0.95, "explanation_miss_rate": 0.05, "explanation_false_alarm_rate": 0.02 }
  },
  "training": { "epochs": 1, "batch_size": 8, "runs": 1, "master_seed": 9 },
  "backbone": { "stage_widths": [4, 8], "strides": [2, 2], "hidden_units": 8 }
}"#;

/// Corpus + one trained model, built once and shared across tests.
struct Fixture {
    _dir: TempDir,
    config: PathBuf,
    manifest: PathBuf,
    model: PathBuf,
    image: PathBuf,
    root: PathBuf,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = write_config(&root, SMALL_CONFIG);
        let corpus = root.join("corpus");
        let out = run(&[
            "generate",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            corpus.to_str().unwrap(),
        ]);
        assert_exit(&out, 0);
        let manifest = corpus.join("manifest.jsonl");

        let train_out = root.join("train");
        let out = run(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            train_out.to_str().unwrap(),
        ]);
        assert_exit(&out, 0);

        let image = std::fs::read_dir(&corpus)
            .unwrap()
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .find(|p| p.extension().is_some_and(|e| e == "png"))
            .unwrap();

        Fixture {
            config,
            manifest,
            model: train_out.join("model-run0.qxm"),
            image,
            root,
            _dir: dir,
        }
    })
}

#[test]
fn every_subcommand_has_help() {
    for sub in [
        "generate",
        "fuse",
        "stats",
        "train",
        "evaluate",
        "explain",
        "calibrate",
        "export",
    ] {
        let out = run(&[sub, "--help"]);
        assert_exit(&out, 0);
    }
    assert_exit(&run(&["--help"]), 0);
}

#[test]
fn generate_writes_manifest_and_echoes_config() {
    let f = fixture();
    assert!(f.manifest.exists());
    let echo: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(f.manifest.parent().unwrap().join("config.json")).unwrap(),
    )
    .unwrap();
    // Defaults materialized even though the input config omitted them.
    assert_eq!(echo["training"]["loss_weights"]["explanations"], 5.0);
    assert_eq!(echo["schedule"]["eta_max"], 1e-3);
}

#[test]
fn generate_is_deterministic_per_seed() {
    let f = fixture();
    let again = f.root.join("corpus-again");
    let out = run(&[
        "generate",
        "--config",
        f.config.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let a = std::fs::read(&f.manifest).unwrap();
    let b = std::fs::read(again.join("manifest.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unknown_config_key_is_exit_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"corpus": {"countz": {}}}"#);
    let out = run(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("countz"));
}

#[test]
fn unwritable_output_is_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_CONFIG);
    // A file where the output directory should go.
    let blocker = dir.path().join("blocked");
    std::fs::write(&blocker, "not a dir").unwrap();
    let out = run(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        blocker.join("sub").to_str().unwrap(),
    ]);
    assert_exit(&out, 3);
}

#[test]
fn train_writes_model_files_and_report() {
    let f = fixture();
    assert!(f.model.exists());
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(f.model.parent().unwrap().join("report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 1);
    assert_eq!(report["config"]["loss_weights"]["quality"], 1.0);
    assert_eq!(report["config"]["loss_weights"]["explanations"], 5.0);
}

#[test]
fn stats_emits_agreement_tables() {
    let f = fixture();
    let out_dir = f.root.join("stats");
    let out = run(&[
        "stats",
        "--manifest",
        f.manifest.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("name,image_count,pairwise_f1_mean"));
    // 4 quality classes + 5 explanations + header.
    assert_eq!(csv.lines().count(), 10);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["rater_count"], 3);
    let counts: Vec<u64> = report["class_counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(counts.iter().sum::<u64>(), 24);
}

#[test]
fn stats_without_raters_is_exit_4() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{
          "corpus": {
            "scene": { "resolution": 32 },
            "counts": { "lesion": 2, "no_skin": 2, "healthy_skin": 2, "poor_quality": 2 }
          }
        }"#,
    );
    let corpus = dir.path().join("corpus");
    assert_exit(
        &run(&[
            "generate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            corpus.to_str().unwrap(),
        ]),
        0,
    );
    let out = run(&[
        "stats",
        "--manifest",
        corpus.join("manifest.jsonl").to_str().unwrap(),
        "--out",
        f.root.join("stats-none").to_str().unwrap(),
    ]);
    assert_exit(&out, 4);
}

#[test]
fn fuse_writes_one_line_per_record() {
    let f = fixture();
    let out_dir = f.root.join("fuse");
    let out = run(&[
        "fuse",
        "--manifest",
        f.manifest.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let fused = std::fs::read_to_string(out_dir.join("fused.jsonl")).unwrap();
    assert_eq!(fused.lines().count(), 24);
}

#[test]
fn evaluate_writes_metric_files() {
    let f = fixture();
    let out_dir = f.root.join("eval");
    let out = run(&[
        "evaluate",
        "--model",
        f.model.to_str().unwrap(),
        "--manifest",
        f.manifest.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("name,recall,specificity,f1,support"));
    assert!(csv.contains("macro_quality"));
}

#[test]
fn corrupted_model_is_exit_6() {
    let f = fixture();
    let bad = f.root.join("bad.qxm");
    let mut bytes = std::fs::read(&f.model).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&bad, bytes).unwrap();
    let out = run(&[
        "evaluate",
        "--model",
        bad.to_str().unwrap(),
        "--manifest",
        f.manifest.to_str().unwrap(),
        "--out",
        f.root.join("eval-bad").to_str().unwrap(),
    ]);
    assert_exit(&out, 6);
}

#[test]
fn explain_writes_two_pngs_and_rejects_unknown_targets() {
    let f = fixture();
    let out_dir = f.root.join("explain");
    let out = run(&[
        "explain",
        "--model",
        f.model.to_str().unwrap(),
        "--image",
        f.image.to_str().unwrap(),
        "--target",
        "blurry",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let pngs = std::fs::read_dir(&out_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 2);

    let out = run(&[
        "explain",
        "--model",
        f.model.to_str().unwrap(),
        "--image",
        f.image.to_str().unwrap(),
        "--target",
        "fuzzy",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("blurry") && stderr.contains("poor_quality"), "{stderr}");
}

#[test]
fn calibrate_grid_yields_eleven_rows_with_a_recommendation() {
    let f = fixture();
    let out_dir = f.root.join("calibrate");
    let out = run(&[
        "calibrate",
        "--model",
        f.model.to_str().unwrap(),
        "--manifest",
        f.manifest.to_str().unwrap(),
        "--grid",
        "0.0:1.0:0.1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let csv = std::fs::read_to_string(out_dir.join("thresholds.csv")).unwrap();
    assert_eq!(csv.lines().count(), 12, "{csv}"); // header + 11 rows
    assert_eq!(csv.matches(",true").count(), 1);
}

#[test]
fn export_reports_exact_size_and_round_trip() {
    let f = fixture();
    let out_dir = f.root.join("export");
    let out = run(&[
        "export",
        "--model",
        f.model.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["round_trip_identical"], true);
    let size = report["size"]["total_bytes"].as_u64().unwrap();
    assert_eq!(
        std::fs::metadata(out_dir.join("model.qxm")).unwrap().len(),
        size
    );
}

#[test]
fn train_seed_flag_overrides_config_deterministically() {
    let f = fixture();
    let a = f.root.join("train-a");
    let b = f.root.join("train-b");
    for out_dir in [&a, &b] {
        let out = run(&[
            "train",
            "--config",
            f.config.to_str().unwrap(),
            "--manifest",
            f.manifest.to_str().unwrap(),
            "--seed",
            "123",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_exit(&out, 0);
    }
    assert_eq!(
        std::fs::read(a.join("model-run0.qxm")).unwrap(),
        std::fs::read(b.join("model-run0.qxm")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("report.json")).unwrap(),
        std::fs::read(b.join("report.json")).unwrap()
    );
}
