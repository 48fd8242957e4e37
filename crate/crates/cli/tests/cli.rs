use std::path::Path;
use std::process::{Command, Output};

fn bmcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bmcl"))
        .args(args)
        .output()
        .expect("spawn bmcl")
}

const TINY: [&str; 12] = [
    "--set",
    "data.n_train=120",
    "--set",
    "data.n_val=40",
    "--set",
    "data.n_test=40",
    "--refresh-start",
    "1",
    "--refresh-period",
    "2",
    "--set",
    "meta.tasks_per_epoch=4",
];

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(TINY).collect()
}

#[test]
fn unknown_field_is_a_config_error() {
    let out = bmcl(&[
        "train",
        "--out",
        "/nonexistent/x",
        "--set",
        "no_such_field=1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_field"));
}

#[test]
fn invalid_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bmcl(&[
        "generate",
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "data.correlation=0.1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("missing.txt");
    let out = bmcl(&[
        "heatmaps",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn generate_writes_three_splits() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = bmcl(&with_tiny(&["generate", "--out", d]));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for role in ["train", "val", "test"] {
        assert!(Path::new(d).join(format!("{role}.txt")).exists());
    }
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "epochs = 2\nvariant = \"erm\"\n[data]\nseed = 7\n").unwrap();
    let run = dir.path().join("run");
    let args = with_tiny(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    let out = bmcl(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    let saved = &saved["config"];
    assert_eq!(saved["epochs"], 1);
    assert_eq!(saved["variant"], "erm");
    assert_eq!(saved["data"]["seed"], 7);
}

#[test]
fn train_eval_and_heatmaps_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = bmcl(&with_tiny(&[
        "train",
        "--out",
        run.to_str().unwrap(),
        "--seed",
        "3",
        "--epochs",
        "3",
    ]));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();

    let ckpt = run.join("checkpoint.txt");
    let out = bmcl(&with_tiny(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--seed",
        "3",
    ]));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(eval["test"]["top1"], report["final_test"]);
    assert_eq!(eval["val"]["top1"], report["final_val"]);

    // other data seed, other dataset hash
    let out = bmcl(&with_tiny(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--seed",
        "4",
    ]));
    assert_eq!(out.status.code(), Some(2));

    let maps = dir.path().join("maps");
    let out = bmcl(&with_tiny(&[
        "heatmaps",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        maps.to_str().unwrap(),
    ]));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(maps.join("gate_class_00.pgm").exists());
    assert!(maps.join("gate_summary.json").exists());
}
