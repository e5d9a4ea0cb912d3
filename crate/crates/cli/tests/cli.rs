use std::path::Path;
use std::process::{Command, Output};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coffee-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_small_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "concept_pairs": [{ "concept": "circle", "attribute": "frame" }],
        "seeds": [0],
        "finetune": { "steps": 5 },
        "pretrain": { "corpus_size": 320, "steps": 20, "batch_size": 8 },
        "paths": { "work_dir": dir.join("work") }
    });
    let path = dir.join("exp.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = lab(&["eval", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn help_exits_cleanly() {
    let out = lab(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("finetune"));
}

#[test]
fn finetune_without_a_pretrained_checkpoint_points_at_pretrain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let out = lab(&["--config", &cfg, "finetune", "--method", "coffee", "--concept", "circle", "--attribute", "frame"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("coffee-lab pretrain --config"), "{err}");
}

#[test]
fn bad_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"not_a_field": 1}"#).unwrap();
    let out = lab(&["--config", path.to_str().unwrap(), "datagen"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn datagen_pretrain_and_sample_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let work = dir.path().join("work");

    let out = lab(&["--config", &cfg, "datagen"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(work.join("data/finetune-circle-frame.pgm").exists());

    let out = lab(&["--config", &cfg, "pretrain"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = lab(&["--config", &cfg, "sample", "--prompt", "circle", "--n", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pgm = std::fs::read(work.join("samples-circle.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5"));
}
