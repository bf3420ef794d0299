use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn geoalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoalign"))
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = geoalign(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the parsed JSON error body.
fn fails(args: &[&str]) -> (i32, Value) {
    let out = geoalign(args);
    assert!(!out.status.success(), "{args:?} succeeded");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .unwrap_or_else(|| panic!("no JSON error in {stderr}"));
    (
        out.status.code().unwrap(),
        serde_json::from_str(line).unwrap(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 14] = [
    "--classes",
    "4",
    "--height",
    "40",
    "--width",
    "40",
    "--bands",
    "6",
    "--train-pixels",
    "80",
    "--test-pixels",
    "160",
    "--embed-dim",
    "32",
];

/// A small synthetic scene; returns the run config path.
fn synth(dir: &Path, seed: &str) -> PathBuf {
    let mut args = vec!["synth", "--out", s(dir), "--seed", seed];
    args.extend(SMALL);
    ok(&args);
    dir.join("run.json")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Narrow network so a couple of epochs take well under a second.
fn narrow(config: &Path) {
    let mut cfg = read_json(config);
    cfg["train"]["hsi_channels"] = serde_json::json!([8, 8, 8]);
    cfg["train"]["lidar_plan"] = serde_json::json!([4, 4, 4]);
    cfg["train"]["batch_size"] = serde_json::json!(32);
    cfg["train"]["learning_rate"] = serde_json::json!(1e-3);
    std::fs::write(config, cfg.to_string()).unwrap();
}

#[test]
fn synth_train_eval_pipeline_writes_report_and_map() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path(), "3");
    narrow(&config);
    let summary: Value =
        serde_json::from_str(ok(&["train", "--config", s(&config), "--epochs", "3"]).trim())
            .unwrap();
    assert_eq!(summary["epochs"], 3);
    let run = dir.path().join("run");
    for file in ["best.mmck", "last.mmck", "history.json", "run_header.json"] {
        assert!(run.join(file).exists(), "{file}");
    }
    assert_eq!(
        read_json(&run.join("history.json"))
            .as_array()
            .unwrap()
            .len(),
        3
    );

    let map = dir.path().join("map.ppm");
    let table = ok(&["eval", "--config", s(&config), "--map", s(&map)]);
    assert!(table.contains("OA") && table.contains("kappa"));
    let report = read_json(&run.join("eval_test.json"));
    for key in ["oa", "aa", "kappa", "per_class", "confusion"] {
        assert!(!report[key].is_null(), "{key}");
    }
    assert_eq!(report["counts"]["total"], 160);
    let ppm = std::fs::read(&map).unwrap();
    let header = b"P6\n40 40\n255\n";
    assert_eq!(&ppm[..header.len()], header);
    assert_eq!(ppm.len(), header.len() + 40 * 40 * 3);

    ok(&["eval", "--config", s(&config), "--split", "train"]);
    assert_eq!(
        read_json(&run.join("eval_train.json"))["counts"]["total"],
        80
    );

    let masked = dir.path().join("masked.ppm");
    ok(&[
        "map",
        "--config",
        s(&config),
        "--out",
        s(&masked),
        "--mask-unlabeled",
    ]);
    assert_eq!(std::fs::read(&masked).unwrap().len(), ppm.len());
}

#[test]
fn resume_continues_to_the_same_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path(), "4");
    narrow(&config);
    let full = dir.path().join("full");
    let split = dir.path().join("split");
    ok(&[
        "train",
        "--config",
        s(&config),
        "--epochs",
        "3",
        "--output",
        s(&full),
    ]);
    ok(&[
        "train",
        "--config",
        s(&config),
        "--epochs",
        "1",
        "--output",
        s(&split),
    ]);
    ok(&[
        "train",
        "--config",
        s(&config),
        "--epochs",
        "3",
        "--output",
        s(&split),
        "--resume",
    ]);
    assert_eq!(
        std::fs::read(full.join("last.mmck")).unwrap(),
        std::fs::read(split.join("last.mmck")).unwrap()
    );
}

#[test]
fn loss_flag_selects_the_direction() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path(), "5");
    narrow(&config);
    let mut checkpoints = Vec::new();
    for loss in ["sym", "v2t", "t2v"] {
        let out = dir.path().join(loss);
        ok(&[
            "train",
            "--config",
            s(&config),
            "--epochs",
            "1",
            "--loss",
            loss,
            "--output",
            s(&out),
        ]);
        let header = read_json(&out.join("run_header.json"));
        assert!(header.to_string().contains("loss"));
        checkpoints.push(std::fs::read(out.join("last.mmck")).unwrap());
    }
    assert_ne!(checkpoints[0], checkpoints[1]);
    assert_ne!(checkpoints[1], checkpoints[2]);
    // rejected by the argument parser, before any JSON error
    let out = geoalign(&["train", "--config", s(&config), "--loss", "both"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn same_seed_gives_identical_synthetic_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), "9");
    synth(b.path(), "9");
    for file in [
        "cube.mmrs",
        "lidar.mmel",
        "labels.mmlb",
        "text.mmte",
        "scene.json",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(file)).unwrap(),
            std::fs::read(b.path().join(file)).unwrap(),
            "{file}"
        );
    }
    let c = tempfile::tempdir().unwrap();
    synth(c.path(), "10");
    assert_ne!(
        std::fs::read(a.path().join("cube.mmrs")).unwrap(),
        std::fs::read(c.path().join("cube.mmrs")).unwrap()
    );
}

#[test]
fn generated_text_rows_are_nearly_orthogonal() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "synth",
        "--out",
        s(dir.path()),
        "--classes",
        "10",
        "--height",
        "32",
        "--width",
        "32",
        "--train-pixels",
        "48",
        "--test-pixels",
        "48",
    ]);
    let table = read_table_rows(&dir.path().join("text.mmte"));
    for i in 0..table.len() {
        for j in 0..i {
            let dot: f64 = table[i].iter().zip(&table[j]).map(|(a, b)| a * b).sum();
            assert!(dot.abs() <= 0.3, "rows {i} and {j}: {dot}");
        }
    }
}

/// Rows of an MMTE file, normalized, read with a plain byte parser:
/// magic, version, C, D, template, then C times (name, D little-endian f32).
fn read_table_rows(path: &Path) -> Vec<Vec<f64>> {
    let bytes = std::fs::read(path).unwrap();
    let mut at = 4;
    let u32_at = |at: &mut usize| {
        let v = u32::from_le_bytes(bytes[*at..*at + 4].try_into().unwrap()) as usize;
        *at += 4;
        v
    };
    let _version = u32_at(&mut at);
    let classes = u32_at(&mut at);
    let dim = u32_at(&mut at);
    at += u32_at(&mut at);
    let mut rows = Vec::new();
    for _ in 0..classes {
        at += u32_at(&mut at);
        let v: Vec<f64> = bytes[at..at + dim * 4]
            .chunks(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        at += dim * 4;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        rows.push(v.iter().map(|x| x / norm).collect());
    }
    assert_eq!(at, bytes.len());
    rows
}

#[test]
fn inspect_prints_headers() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path(), "6");
    narrow(&config);
    let text = ok(&["inspect", s(&dir.path().join("text.mmte"))]);
    assert!(text.contains("format: MMTE"));
    assert!(text.contains("classes: 4"));
    assert!(text.contains("dim: 32"));
    assert!(text.contains("class 4: class 4"));
    let cube = ok(&["inspect", s(&dir.path().join("cube.mmrs"))]);
    assert!(cube.contains("bands: 6"));
    ok(&["train", "--config", s(&config), "--epochs", "1"]);
    let ckpt = ok(&["inspect", s(&dir.path().join("run/best.mmck"))]);
    assert!(ckpt.contains("format: MMCK"));
    assert!(ckpt.contains("epoch: 1"));
    assert!(ckpt.contains("tensor log_inv_tau"));
}

#[test]
fn missing_text_table_is_a_usage_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path(), "7");
    let mut cfg = read_json(&config);
    cfg["text_table"] = Value::from("absent.mmte");
    std::fs::write(&config, cfg.to_string()).unwrap();
    let (code, err) = fails(&["train", "--config", s(&config), "--epochs", "1"]);
    assert_eq!(code, 2);
    assert_eq!(err["exit_code"], 2);
    assert!(
        err["error"]["message"]
            .as_str()
            .unwrap()
            .contains("absent.mmte"),
        "{err}"
    );
}

#[test]
fn corrupted_magic_and_unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path(), "8");
    let text = dir.path().join("text.mmte");
    let mut bytes = std::fs::read(&text).unwrap();
    bytes[0] = b'X';
    std::fs::write(&text, bytes).unwrap();
    let (code, err) = fails(&["train", "--config", s(&config), "--epochs", "1"]);
    assert_eq!(code, 2);
    assert_eq!(err["error"]["kind"], "format");
    let (code, _) = fails(&["inspect", s(&text)]);
    assert_eq!(code, 2);
    let (code, _) = fails(&["inspect", s(&config)]);
    assert_eq!(code, 2);

    let mut cfg = read_json(&config);
    cfg["train"]["learnig_rate"] = Value::from(0.1);
    std::fs::write(&config, cfg.to_string()).unwrap();
    let (code, err) = fails(&["train", "--config", s(&config)]);
    assert_eq!(code, 2);
    assert!(
        err["error"]["message"]
            .as_str()
            .unwrap()
            .contains("learnig_rate"),
        "{err}"
    );
}

#[test]
fn run_header_reproduces_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path(), "11");
    narrow(&config);
    ok(&[
        "train",
        "--config",
        s(&config),
        "--epochs",
        "2",
        "--seed",
        "21",
    ]);
    let run = dir.path().join("run");
    let first = std::fs::read(run.join("last.mmck")).unwrap();
    let header = read_json(&run.join("run_header.json"));
    assert_eq!(header["config"]["train"]["seed"], 21);
    assert_eq!(header["config"]["train"]["max_epochs"], 2);
    assert_eq!(header["thread_mode"], "reference");
    let moved = dir.path().join("header.json");
    std::fs::rename(run.join("run_header.json"), &moved).unwrap();
    std::fs::remove_dir_all(&run).unwrap();
    ok(&["train", "--from-header", s(&moved)]);
    assert_eq!(std::fs::read(run.join("last.mmck")).unwrap(), first);
}
