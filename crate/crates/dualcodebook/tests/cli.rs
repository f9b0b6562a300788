//! End-to-end smoke tests for the `dualcodebook` binary: the full
//! generate / train / evaluate / complete / inspect flow on a small corpus,
//! plus the documented exit codes for the common failure modes.

use dualcodebook::model::{AblationConfig, ModelConfig};
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dualcodebook"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn dualcodebook binary")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed with {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        stdout(out),
        stderr(out)
    );
}

/// A one-epoch desk-scale configuration small enough for test runtime.
fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = AblationConfig::E.apply(&ModelConfig::tiny());
    cfg.epochs = 1;
    cfg.seed = 5;
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let config = small_config(tmp.path());

    // gen-data: two categories, five training pairs each plus one held-out
    // test pair per category (a fifth of the training count).
    let out = run(bin()
        .arg("gen-data")
        .args(["--out".as_ref(), data.as_os_str()])
        .args(["--seed", "11", "--categories", "sphere,torus", "--per-category", "5"]));
    assert_success(&out, "gen-data");
    assert!(data.join("manifest.json").is_file());
    let train_files = std::fs::read_dir(data.join("train")).unwrap().count();
    let test_files = std::fs::read_dir(data.join("test")).unwrap().count();
    assert_eq!(train_files, 2 * 5 * 2, "5 train pairs per category, two files each");
    assert_eq!(test_files, 2 * 1 * 2, "1 test pair per category, two files each");

    // train twice with the same seed: identical logs and checkpoint bytes.
    let ckpt = tmp.path().join("model.ckpt.json");
    let ckpt2 = tmp.path().join("model2.ckpt.json");
    let mut logs = Vec::new();
    for path in [&ckpt, &ckpt2] {
        let out = run(bin()
            .arg("train")
            .args(["--config".as_ref(), config.as_os_str()])
            .args(["--data".as_ref(), data.as_os_str()])
            .args(["--out".as_ref(), path.as_os_str()])
            .args(["--threads", "1"]));
        assert_success(&out, "train");
        let text = stdout(&out);
        assert!(text.contains("epoch   1 |"), "missing epoch log line:\n{text}");
        logs.push(text.lines().filter(|l| l.starts_with("epoch")).collect::<Vec<_>>().join("\n"));
    }
    assert_eq!(logs[0], logs[1], "training logs differ between identical runs");
    assert_eq!(
        std::fs::read(&ckpt).unwrap(),
        std::fs::read(&ckpt2).unwrap(),
        "checkpoints differ between identical runs"
    );

    // eval: table on stdout, full report as JSON.
    let eval_json = tmp.path().join("eval.json");
    let out = run(bin()
        .arg("eval")
        .args(["--ckpt".as_ref(), ckpt.as_os_str()])
        .args(["--data".as_ref(), data.as_os_str()])
        .args(["--out".as_ref(), eval_json.as_os_str()]));
    assert_success(&out, "eval");
    let table = stdout(&out);
    assert!(table.contains("sphere") && table.contains("torus") && table.contains("mean"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&eval_json).unwrap()).unwrap();
    assert!(report["mean"]["cd_l2"].is_f64(), "eval JSON missing mean.cd_l2");
    assert!(report["dataset_digest"].is_string(), "eval JSON missing dataset digest");

    // complete: one partial cloud in, the dense completion (and coarse) out.
    let partial = std::fs::read_dir(data.join("test"))
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .find(|p| p.to_string_lossy().ends_with("_partial.xyz"))
        .expect("a partial cloud in test/");
    let completed = tmp.path().join("completed.xyz");
    let coarse = tmp.path().join("coarse.xyz");
    let out = run(bin()
        .arg("complete")
        .args(["--ckpt".as_ref(), ckpt.as_os_str()])
        .args(["--in".as_ref(), partial.as_os_str()])
        .args(["--out".as_ref(), completed.as_os_str()])
        .args(["--coarse".as_ref(), coarse.as_os_str()]));
    assert_success(&out, "complete");
    let cfg = ModelConfig::load(&config).unwrap();
    let lines = |p: &Path| std::fs::read_to_string(p).unwrap().lines().count();
    assert_eq!(lines(&completed), cfg.complete_points());
    assert_eq!(lines(&coarse), cfg.coarse_points);

    // codebook-stats: histograms and summary for the trained codebooks.
    let stats_dir = tmp.path().join("stats");
    let out = run(bin()
        .arg("codebook-stats")
        .args(["--ckpt".as_ref(), ckpt.as_os_str()])
        .args(["--out".as_ref(), stats_dir.as_os_str()]));
    assert_success(&out, "codebook-stats");
    for name in ["histograms.csv", "histograms.svg", "stats.json"] {
        assert!(stats_dir.join(name).is_file(), "missing {name}");
    }

    // gradcheck on the same configuration.
    let out = run(bin()
        .arg("gradcheck")
        .args(["--config".as_ref(), config.as_os_str()])
        .args(["--samples", "2"]));
    assert_success(&out, "gradcheck");
    assert!(stdout(&out).contains("gradcheck passed"), "stdout:\n{}", stdout(&out));
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();

    // Unknown arguments are a usage error (clap's exit code 2).
    let out = run(bin().arg("no-such-subcommand"));
    assert_eq!(out.status.code(), Some(2));

    // A missing checkpoint file is an I/O error.
    let out = run(bin()
        .arg("eval")
        .args(["--ckpt", "/nonexistent/model.ckpt.json", "--data", "/nonexistent/data"]));
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("error:"));

    // A config with an unknown key is a configuration error.
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"epochs": 1, "definitely_not_a_field": true}"#).unwrap();
    let out = run(bin()
        .arg("gradcheck")
        .args(["--config".as_ref(), bad.as_os_str()]));
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));

    // A config that fails validation is also a configuration error.
    let invalid = tmp.path().join("invalid.json");
    std::fs::write(&invalid, r#"{"model_dim": 7, "heads": 4}"#).unwrap();
    let out = run(bin()
        .arg("gradcheck")
        .args(["--config".as_ref(), invalid.as_os_str()]));
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));

    // Completing from a missing input cloud is an I/O error.
    let out = run(bin().arg("complete").args([
        "--ckpt",
        "/nonexistent/model.ckpt.json",
        "--in",
        "/nonexistent/cloud.xyz",
        "--out",
        "/tmp/never-written.xyz",
    ]));
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = run(bin()
            .arg("gen-data")
            .args(["--out".as_ref(), dir.as_os_str()])
            .args(["--seed", "3", "--categories", "cylinder", "--per-category", "3"]));
        assert_success(&out, "gen-data");
    }
    assert_eq!(
        std::fs::read(a.join("manifest.json")).unwrap(),
        std::fs::read(b.join("manifest.json")).unwrap(),
        "manifests differ across identical gen-data runs"
    );
    let sample = "cylinder_train_0000_partial.xyz";
    assert_eq!(
        std::fs::read(a.join("train").join(sample)).unwrap(),
        std::fs::read(b.join("train").join(sample)).unwrap(),
        "point files differ across identical gen-data runs"
    );
}
