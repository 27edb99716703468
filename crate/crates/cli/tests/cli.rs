use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gradrep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradrep"))
        .args(args)
        .env("GRADREP_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path) -> PathBuf {
    let out = gradrep(&[
        "synth",
        "--out",
        path_str(dir),
        "--seed",
        "5",
        "--channels",
        "8",
        "--size",
        "12",
        "--train",
        "6",
        "--test-normal",
        "3",
        "--test-anomalous",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("manifest.json")
}

const SMALL_NET: [&str; 4] = ["--hidden", "16", "--cf", "8"];

fn run(manifest: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--manifest", path_str(manifest), "--out", path_str(out)];
    args.extend_from_slice(&SMALL_NET);
    args.extend_from_slice(extra);
    gradrep(&args)
}

fn read(path: PathBuf) -> Vec<u8> {
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn run_writes_identical_artifacts_twice() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(&dir.path().join("data"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&manifest, out, &["--seed", "7"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in [
        "report.json",
        "report.txt",
        "scores.csv",
        "repository/repository.npy",
        "repository/repository_provenance.csv",
        "model/model.json",
        "model/w1.npy",
        "model/adam_v_b2.npy",
        "attention/test_defect_000.npy",
        "attention/test_defect_000.png",
    ] {
        assert_eq!(read(a.join(file)), read(b.join(file)), "{file} differs");
    }

    let report: serde_json::Value = serde_json::from_slice(&read(a.join("report.json"))).unwrap();
    assert_eq!(report["seed"], 7);
    assert_eq!(report["test_samples"], 6);
    let scores = String::from_utf8(read(a.join("scores.csv"))).unwrap();
    assert!(scores.starts_with("id,label,image_score\n"));
    assert_eq!(scores.lines().count(), 7);
}

#[test]
fn different_seeds_change_the_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(&dir.path().join("data"));
    let mut prints = Vec::new();
    for seed in ["1", "2"] {
        let out = dir.path().join(seed);
        assert!(run(&manifest, &out, &["--seed", seed]).status.success());
        let report: serde_json::Value = serde_json::from_slice(&read(out.join("report.json"))).unwrap();
        prints.push(report["fingerprint"].as_str().unwrap().to_string());
    }
    assert_ne!(prints[0], prints[1]);
}

#[test]
fn invalid_manifest_exits_2_naming_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(&dir.path().join("data"));
    let text = std::fs::read_to_string(&manifest).unwrap();
    let broken = text.replacen("train/001.npy", "train/missing.npy", 1);
    assert_ne!(text, broken);
    std::fs::write(&manifest, broken).unwrap();

    let o = run(&manifest, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8(o.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error[ingest]: "), "{stderr}");
    assert!(stderr.contains("train/001"), "{stderr}");
}

#[test]
fn bad_flag_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(&dir.path().join("data"));
    let o = run(&manifest, &dir.path().join("out"), &["--eta", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&manifest, &dir.path().join("out"), &["--selection", "sideways"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(&dir.path().join("data"));
    let o = run(&manifest, &dir.path().join("out"), &["--lr", "1e38", "--eta", "0.01", "--max-epochs", "50"]);
    let stderr = String::from_utf8(o.stderr).unwrap();
    assert_eq!(o.status.code(), Some(3), "{stderr}");
    assert!(stderr.starts_with("error[learner]: "), "{stderr}");
}

#[test]
fn score_only_reproduces_run_scores() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(&dir.path().join("data"));
    let trained = dir.path().join("trained");
    assert!(run(&manifest, &trained, &[]).status.success());
    let scored = dir.path().join("scored");
    let o = gradrep(&[
        "score-only",
        "--manifest",
        path_str(&manifest),
        "--from",
        path_str(&trained),
        "--out",
        path_str(&scored),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(trained.join("scores.csv")), read(scored.join("scores.csv")));
    assert_eq!(
        read(trained.join("attention/test_good_000.npy")),
        read(scored.join("attention/test_good_000.npy"))
    );
    let metrics: serde_json::Value = serde_json::from_slice(&read(scored.join("metrics.json"))).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&read(trained.join("report.json"))).unwrap();
    assert_eq!(metrics["image_auroc"], report["image_auroc"]);
}

#[test]
fn protocol_subcommands_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(&dir.path().join("data"));
    let m = path_str(&manifest);
    let out = dir.path().join("protocols");
    let o = path_str(&out);

    let mut args = vec!["ablate", "--manifest", m, "--out", o];
    args.extend_from_slice(&SMALL_NET);
    assert!(gradrep(&args).status.success());
    let rows: serde_json::Value = serde_json::from_slice(&read(out.join("ablation.json"))).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);

    let mut args = vec!["fewshot", "--manifest", m, "--out", o, "--fewshot-k", "1", "--fewshot-k", "4", "--seeds", "2"];
    args.extend_from_slice(&SMALL_NET);
    assert!(gradrep(&args).status.success());
    let reports: serde_json::Value = serde_json::from_slice(&read(out.join("fewshot.json"))).unwrap();
    assert_eq!(reports[1]["k"], 4);
    assert_eq!(reports[1]["runs"][0]["train_samples"], 4);
    let curve = String::from_utf8(read(out.join("fewshot.csv"))).unwrap();
    assert_eq!(curve.lines().count(), 5);
    assert!(curve.starts_with("k,seed,image_auroc,pixel_auroc\n1,0,"));

    let mut args = vec!["kfold", "--manifest", m, "--out", o, "--folds", "3"];
    args.extend_from_slice(&SMALL_NET);
    assert!(gradrep(&args).status.success());
    let report: serde_json::Value = serde_json::from_slice(&read(out.join("kfold.json"))).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 3);
}
