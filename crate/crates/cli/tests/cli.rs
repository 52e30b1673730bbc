use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn excel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_excel"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn fixtures(root: &Path, images: &str, iterations: usize) {
    let out = excel(&["gen-fixtures", "--out", root.to_str().unwrap(), "--seed", "3", "--images", images]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = root.join("config.toml");
    let text = fs::read_to_string(&cfg).unwrap();
    fs::write(&cfg, text.replace("iterations = 500", &format!("iterations = {iterations}"))).unwrap();
}

#[test]
fn full_run_and_stage_commands() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fixtures(root, "4", 2);
    let cfg = root.join("config.toml");
    let cfg = cfg.to_str().unwrap();

    let out = excel(&["run", "--config", cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("dynamic CAM mIoU"), "{stdout}");
    let run = root.join("run");
    for p in [
        "attributes/bank.json",
        "static/labels/img_000.pgm",
        "static/cams/img_000.json",
        "train/ckpt_000002.json",
        "train/loss.csv",
        "dynamic/labels/img_003.pgm",
        "eval/dynamic.json",
        "eval/summary.json",
    ] {
        assert!(run.join(p).exists(), "missing {p}");
    }
    let csv = fs::read_to_string(run.join("train/loss.csv")).unwrap();
    assert!(csv.starts_with("# config_hash: "));
    assert!(csv.contains("iteration,seg,div,total"));
    let pgm = fs::read(run.join("static/labels/img_000.pgm")).unwrap();
    assert!(String::from_utf8_lossy(&pgm[..80]).contains("# stage: static"));

    let out = excel(&[
        "eval",
        "--pred-dir",
        run.join("static/labels").to_str().unwrap(),
        "--gt-dir",
        root.join("dataset/masks").to_str().unwrap(),
        "--out",
        root.join("rescore").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rescored: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("rescore/report.json")).unwrap()).unwrap();
    let saved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("eval/static.json")).unwrap()).unwrap();
    assert_eq!(rescored["miou"], saved["miou"]);

    let out = excel(&["cam", "dynamic", "--config", cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let out = excel(&[
        "attn-report",
        "--config",
        cfg,
        "--image",
        root.join("dataset/images/img_000.ppm").to_str().unwrap(),
        "--checkpoint",
        run.join("train/ckpt_000002.json").to_str().unwrap(),
        "--out",
        root.join("attn").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for p in ["qk", "vv", "ic", "icb"] {
        assert!(stdout.lines().any(|l| l.starts_with(p)), "{stdout}");
    }
    assert!(root.join("attn/attn_report.json").exists());
}

#[test]
fn static_only_mode_skips_training() {
    let dir = tempfile::tempdir().unwrap();
    fixtures(dir.path(), "3", 2);
    let cfg = dir.path().join("config.toml");
    let out = excel(&["run", "--mode", "static-only", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    assert!(run.join("eval/static.json").exists());
    assert!(!run.join("train").exists());
    assert!(!run.join("dynamic").exists());
}

#[test]
fn exit_codes() {
    assert_eq!(code(&excel(&["no-such-command"])), 1);
    assert_eq!(code(&excel(&["run"])), 1);
    assert_eq!(code(&excel(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fixtures(root, "2", 1);
    let cfg = root.join("config.toml");
    let text = fs::read_to_string(&cfg).unwrap();

    fs::write(&cfg, text.replace("lambda = 0.5", "lambda = 0.5\nlamda = 1.0")).unwrap();
    assert_eq!(code(&excel(&["build-attrs", "--config", cfg.to_str().unwrap()])), 1);

    fs::write(&cfg, text.replace("dataset = \"dataset\"", "dataset = \"missing\"")).unwrap();
    assert_eq!(code(&excel(&["run", "--config", cfg.to_str().unwrap()])), 2);

    fs::write(&cfg, text.replace("lr = 0.0001", "lr = 1000000000.0")).unwrap();
    let out = excel(&["train", "--config", cfg.to_str().unwrap(), "--out", root.join("big").to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(&cfg, text.replace("lr = 0.0001", "lr = 1000000000.0").replace("iterations = 1", "iterations = 3"))
        .unwrap();
    let out = excel(&["train", "--config", cfg.to_str().unwrap(), "--out", root.join("diverge").to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));

    fs::write(&cfg, &text).unwrap();
    let out_dir = root.join("shared");
    let out = excel(&["build-attrs", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let out = excel(&[
        "build-attrs",
        "--seed",
        "99",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("refusing"));
}
