use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const MICRO_CONFIG: &str = r#"
epochs = 1
batch_ssl = 8
ssl_extra_clips = 8

[architecture]
head_layers = 1
head_heads = 2
ff_mult = 2

[architecture.encoder]
channels = 8
stages = [{ temporal = 2, spatial = 4 }, { temporal = 1, spatial = 2 }, { temporal = 1, spatial = 1 }]

[augment]
out_frames = 4
"#;

fn actlumos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_actlumos")).args(args).env("ACTLUMOS_THREADS", "1").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join("run_manifest.json")).expect("manifest written")).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let config = root.join("micro.toml");
    std::fs::write(&config, MICRO_CONFIG).unwrap();
    let out = root.join("data");
    let o = actlumos(&["gen-data", "--classes", "4", "--per-class", "10", "--dims", "8x16x16", "--seed", "1", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    Fixture { data: out.join("dataset.json"), _tmp: tmp, root, config }
}

#[test]
fn gen_data_is_deterministic_and_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = actlumos(&["gen-data", "--classes", "10", "--per-class", "40", "--seed", "1", "--out", p(dir)]);
        assert_eq!(code(&o), 0);
    }
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma["outputs"]["dataset.json"], mb["outputs"]["dataset.json"]);
    assert_eq!(ma["command"], "gen-data");
    assert_eq!(ma["exit_code"], 0);
    let ds: Value = serde_json::from_slice(&std::fs::read(a.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(ds["clips"].as_array().unwrap().len(), 400);
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let o = actlumos(&["gen-data", "--per-class", "2", "--out", p(&out)]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(manifest(&out)["exit_code"], 2);
    assert_eq!(code(&actlumos(&["gen-data", "--bogus-flag"])), 2);
    assert_eq!(code(&actlumos(&["grad-check", "--loss", "nope", "--out", p(&out)])), 2);
}

#[test]
fn missing_artifacts_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let missing = tmp.path().join("missing.json");
    let o = actlumos(&["train", "--stage", "teacher", "--data", p(&missing), "--out", p(&out)]);
    assert_eq!(code(&o), 3);
    assert_eq!(manifest(&out)["exit_code"], 3);
    let o = actlumos(&["eval", "--ckpt", p(&missing), "--data", p(&missing), "--out", p(&out)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn three_stage_pipeline_and_fingerprints() {
    let f = fixture();
    let dir = |n: &str| f.root.join(n);
    let teacher = |fusion: &str| {
        let out = dir(&format!("teacher_{fusion}"));
        let o = actlumos(&["train", "--stage", "teacher", "--fusion", fusion, "--data", p(&f.data), "--config", p(&f.config), "--seed", "1", "--out", p(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
        assert!(stdout.contains("epoch=1 stage=teacher"), "{stdout}");
        let log = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 1);
        manifest(&out)
    };
    let dff = teacher("dff");
    let stat = teacher("static");
    let dff_again = teacher("dff");
    assert_ne!(dff["outputs"]["checkpoint.bin"], stat["outputs"]["checkpoint.bin"]);
    assert_eq!(dff["outputs"]["checkpoint.bin"], dff_again["outputs"]["checkpoint.bin"]);

    let no_teacher = actlumos(&["train", "--stage", "distill", "--data", p(&f.data), "--config", p(&f.config), "--out", p(&dir("bad"))]);
    assert_eq!(code(&no_teacher), 2);

    let ssl = dir("ssl");
    let o = actlumos(&["train", "--stage", "ssl", "--data", p(&f.data), "--config", p(&f.config), "--out", p(&ssl)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let student = dir("student");
    let tck = dir("teacher_dff").join("checkpoint.bin");
    let sck = ssl.join("checkpoint.bin");
    let o = actlumos(&[
        "train", "--stage", "distill", "--data", p(&f.data), "--config", p(&f.config), "--teacher-ckpt", p(&tck), "--ssl-ckpt", p(&sck), "--out", p(&student),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(manifest(&student)["inputs"].as_array().unwrap().len(), 3);

    // An SSL checkpoint passed as the teacher is a stage mismatch.
    let o = actlumos(&["train", "--stage", "distill", "--data", p(&f.data), "--config", p(&f.config), "--teacher-ckpt", p(&sck), "--out", p(&dir("swap"))]);
    assert_eq!(code(&o), 2);

    let eval = dir("eval");
    let o = actlumos(&["eval", "--ckpt", p(&student.join("checkpoint.bin")), "--data", p(&f.data), "--split", "test", "--out", p(&eval)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: Value = serde_json::from_slice(&std::fs::read(eval.join("metrics.json")).unwrap()).unwrap();
    assert!(m["top5"].as_f64().unwrap() >= m["top1"].as_f64().unwrap());
}

#[test]
fn ablate_tables_have_the_documented_rows() {
    let f = fixture();
    for (suite, rows) in [("fusion", 8), ("supcon", 2), ("ssl", 4), ("kd", 3)] {
        let out = f.root.join(format!("ablate_{suite}"));
        let o = actlumos(&["ablate", "--suite", suite, "--seeds", "1", "--data", p(&f.data), "--config", p(&f.config), "--out", p(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let csv = std::fs::read_to_string(out.join(format!("{suite}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), rows + 1, "{suite}:\n{csv}");
    }
}

#[test]
fn verify_passes_and_catches_the_supcon_mutation() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("good");
    let o = actlumos(&["verify", "--grad-instances", "2", "--out", p(&good)]);
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert_eq!(code(&o), 0, "{stdout}");
    let checks = stdout.lines().filter(|l| l.starts_with("PASS ") || l.starts_with("FAIL ")).count();
    assert!(checks >= 25, "{checks} checks");

    let bad = tmp.path().join("bad");
    let o = actlumos(&["verify", "--grad-instances", "2", "--mutate-supcon", "--out", p(&bad)]);
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert_eq!(code(&o), 1);
    assert!(stdout.lines().any(|l| l.starts_with("FAIL supcon.")), "{stdout}");
}

#[test]
fn enhance_writes_one_array_per_clip() {
    let f = fixture();
    let out = f.root.join("enhanced");
    let o = actlumos(&["enhance", "--in", p(&f.data), "--mode", "gamma", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(manifest(&out)["outputs"].as_object().unwrap().len(), 40);
}
