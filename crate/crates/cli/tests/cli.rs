use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "seed": 1,
  "data": {
    "source": "synthetic",
    "suite": {
      "width": 32, "height": 32,
      "train_videos": 2, "train_frames": 9,
      "test_videos": 2, "test_frames": 16,
      "sprites_per_scene": 1, "sprite_size": 6.0, "speeds": [1.0],
      "anomaly_length": 4,
      "anomaly_kinds": [{ "type": "speed_up", "factor": 4.0 }, { "type": "teleport" }]
    }
  },
  "architecture": {
    "resolution": [32, 32],
    "encoder_channels": [4, 4, 8, 8, 8],
    "discriminator_channels": [4, 4, 4]
  },
  "memory": { "n_items": 6, "k_top": 3 },
  "schedule": { "batch_size": 4, "pretrain_epochs": 1, "main_epochs": 1 },
  "scoring": { "error_maps": 1 }
}"#;

fn stmae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stmae"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn validation_errors_exit_with_2() {
    let (dir, cfg) = setup();
    let out = dir.path().join("o");
    assert_eq!(code(&stmae(&[])), 2);
    assert_eq!(code(&stmae(&["train", "-c", s(&cfg), "-o", s(&out), "--set", "memory.n_items=1"])), 2);
    assert_eq!(code(&stmae(&["train", "-c", s(&cfg), "-o", s(&out), "--set", "memory.bogus=3"])), 2);
    assert_eq!(
        code(&stmae(&["train", "-c", s(&cfg), "-o", s(&out), "--set", "ablation.use_appearance_stream=false"])),
        2
    );
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&stmae(&["pretrain", "-c", s(&missing), "-o", s(&out)])), 2);
    assert!(!out.join("model.ckpt").exists());
}

#[test]
fn runtime_failures_exit_with_3() {
    let (dir, cfg) = setup();
    let ckpt = dir.path().join("missing.ckpt");
    let o = stmae(&["eval", "-c", s(&cfg), "-o", s(&dir.path().join("e")), "--checkpoint", s(&ckpt)]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn train_then_eval_is_deterministic_and_read_only() {
    let (dir, cfg) = setup();
    let run = dir.path().join("run");
    let o = stmae(&["train", "-c", s(&cfg), "-o", s(&run), "--seed", "9"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "pretrain.ckpt", "pretrain_metrics.csv", "model.ckpt", "metrics.csv"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let saved: serde_json::Value = serde_json::from_slice(&fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["seed"], 9);

    let ckpt = run.join("model.ckpt");
    let before = fs::read(&ckpt).unwrap();
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    for e in [&e1, &e2] {
        let o = stmae(&["eval", "-c", s(&cfg), "-o", s(e), "--seed", "9", "--checkpoint", s(&ckpt)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&ckpt).unwrap(), before);
    assert_eq!(dir_bytes(&e1.join("scores")), dir_bytes(&e2.join("scores")));
    assert!(e1.join("auc.json").is_file() && e1.join("timing.json").is_file());
    assert!(fs::read_dir(e1.join("maps")).unwrap().count() >= 3);
}

#[test]
fn synth_and_cache_flow_write_their_outputs() {
    let (dir, cfg) = setup();
    let data = dir.path().join("data");
    assert_eq!(code(&stmae(&["synth", "-c", s(&cfg), "-o", s(&data)])), 0);
    assert_eq!(fs::read_dir(data.join("training/frames")).unwrap().count(), 2);
    assert_eq!(fs::read_dir(data.join("training/frames/train00")).unwrap().count(), 9);
    let labels = fs::read_to_string(data.join("testing/labels/test00.txt")).unwrap();
    assert_eq!(labels.lines().count(), 16);

    // the written dataset trains through the directory loader
    let layout: serde_json::Value = serde_json::from_slice(&fs::read(data.join("data.json")).unwrap()).unwrap();
    let mut c: serde_json::Value = serde_json::from_str(TINY).unwrap();
    c["data"] = layout;
    let dcfg = dir.path().join("dir.json");
    fs::write(&dcfg, c.to_string()).unwrap();
    let flows = dir.path().join("flows");
    assert_eq!(code(&stmae(&["cache-flow", "-c", s(&dcfg), "-o", s(&flows)])), 0);
    let archives = fs::read_dir(&flows)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "flow"))
        .count();
    assert_eq!(archives, 4);
}

#[test]
fn sweep_and_ablate_tables() {
    let (dir, cfg) = setup();
    let sweep = dir.path().join("sweep");
    let o = stmae(&["sweep", "-c", s(&cfg), "-o", s(&sweep), "--n", "6", "--k", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "n_items,k_top,k_effective,auc");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("6,all,"));
    // one shared pretraining for both rows
    assert_eq!(
        fs::read_dir(sweep.join("pretrain")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ckpt")).count(),
        1
    );

    let ab = dir.path().join("ablate");
    let o = stmae(&["ablate", "-c", s(&cfg), "-o", s(&ab), "--rows", "3,4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let md = fs::read_to_string(ab.join("ablation.md")).unwrap();
    assert_eq!(md.lines().count(), 4);
    assert!(ab.join("ablation.csv").is_file());
}
