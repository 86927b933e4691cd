use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use memgen_cli::manifest::RunManifest;
use memgen_cli::Stage;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn memgen(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memgen"))
        .arg("--config")
        .arg(smoke_config())
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

#[test]
fn unknown_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = memgen(dir.path(), &["--set", "train.learning_rat=0.1", "datagen"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = memgen(dir.path(), &["--set", "capture.target_pairs=0", "datagen"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn stage_without_upstream_is_stale() {
    let dir = tempfile::tempdir().unwrap();
    let o = memgen(dir.path(), &["analyze"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("capture"));
}

#[test]
fn datagen_is_cached_and_tampering_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(code(&memgen(out, &["--stage", "datagen", "run-all"])), 0);
    let first = RunManifest::load_or_default(out).unwrap();
    let rec = &first.stages[&Stage::Datagen];
    assert!(rec.artifacts.keys().any(|k| k.ends_with(".monitor")));

    // unchanged inputs: the stage is skipped and its record kept verbatim
    assert_eq!(code(&memgen(out, &["--stage", "datagen", "run-all"])), 0);
    assert_eq!(RunManifest::load_or_default(out).unwrap(), first);

    let monitor = out.join("datagen/incontext/monitor.jsonl");
    let mut text = std::fs::read_to_string(&monitor).unwrap();
    text.push('\n');
    std::fs::write(&monitor, text).unwrap();
    assert_eq!(code(&memgen(out, &["train"])), 3);

    // run-all regenerates the stale stage
    assert_eq!(code(&memgen(out, &["--stage", "datagen", "run-all"])), 0);
    let again = RunManifest::load_or_default(out).unwrap();
    assert_eq!(again.without_timestamps(), first.without_timestamps());
}

#[test]
fn exhausted_step_budget_exits_with_budget_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = memgen(dir.path(), &["--set", "train.max_steps=20", "--stage", "train", "run-all"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".memgen.lock"), "1").unwrap();
    let o = memgen(dir.path(), &["datagen"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("locked"));
}
