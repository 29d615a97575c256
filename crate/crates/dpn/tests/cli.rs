use std::path::Path;
use std::process::{Command, Output};

use dpn_core::data::{encode_cifar, CifarVariant, ImageSample, PIXELS, SIDE};

fn dpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpn"))
        .args(args)
        .env("DPN_DETERMINISTIC", "1")
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn error_lines(o: &Output) -> Vec<String> {
    stderr(o).lines().filter(|l| l.starts_with("error[")).map(str::to_string).collect()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.json");
    let text = format!(
        r#"{{
  "model.preset": "plain-cnn",
  "model.width": 4,
  "data.synthetic_train": 96,
  "data.synthetic_test": 32,
  "train.epochs": 2,
  "train.batch_size": 32,
  "train.lr_milestones": [1],
  {extra}
  "output_dir": "{}"
}}"#,
        dir.join("run").display()
    );
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn unknown_config_key_is_a_one_line_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#""train.epoch": 3,"#);
    let o = dpn(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let errs = error_lines(&o);
    assert_eq!(errs.len(), 1, "{}", stderr(&o));
    assert!(errs[0].starts_with("error[config]: ") && errs[0].contains("train.epoch"), "{}", errs[0]);
}

#[test]
fn bad_override_value_names_the_key() {
    let o = dpn(&["dataset-stats", "--set", "data.synthetic_train=lots"]);
    assert_eq!(o.status.code(), Some(2));
    let errs = error_lines(&o);
    assert!(errs.len() == 1 && errs[0].contains("data.synthetic_train"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let o = dpn(&["train", "--config", "/nonexistent/run.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_lines(&o)[0].starts_with("error[io]: "));
}

#[test]
fn unknown_suite_and_bad_usage_exit_2() {
    let o = dpn(&["check", "everything"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_lines(&o)[0].starts_with("error[config]: "));
    let o = dpn(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_lines(&o)[0].starts_with("error[usage]: "));
}

#[test]
fn check_suites_pass() {
    for suite in ["oracle", "sampler"] {
        let o = dpn(&["check", suite]);
        assert!(o.status.success(), "{suite}: {}", stdout(&o));
        assert!(stdout(&o).contains(" 0 failed"), "{}", stdout(&o));
    }
}

#[test]
fn dataset_stats_prints_json() {
    let o = dpn(&["dataset-stats", "--set", "data.synthetic_train=16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["mean"].as_array().unwrap().len(), 3);
    assert_eq!(v["std"].as_array().unwrap().len(), 3);
}

#[test]
fn train_eval_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = dpn(&["train", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.starts_with("epoch,lr,ce,l_explicit,l_consistent,l_balance,top1,top5"));
    for f in ["config.json", "dataset_stats.json", "checkpoints/latest/manifest.json", "checkpoints/best/manifest.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let o = dpn(&["eval", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("top1 "));

    let out = dir.path().join("d.csv");
    let o = dpn(&["dump-decisions", "--config", &cfg, "--limit", "10", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    // plain-cnn has three DPM sites
    assert_eq!(text.lines().count(), 1 + 10 * 3);

    let o = dpn(&["dump-decisions", "--config", &cfg, "--set", "model.width=8", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_lines(&o)[0].starts_with("error[mismatch]: "), "{}", stderr(&o));
}

#[test]
fn baseline_override_has_nothing_to_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#""train.epochs": 1, "train.lr_milestones": [],"#);
    let o = dpn(&["train", "--config", &cfg, "--set", "model.with_dpm=false"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("d.csv");
    let o = dpn(&["dump-decisions", "--config", &cfg, "--set", "model.with_dpm=false", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

fn fake_cifar100(dir: &Path, n: usize) {
    let samples: Vec<ImageSample> = (0..n)
        .map(|i| ImageSample {
            pixels: (0..PIXELS).map(|p| ((i * 31 + p * 7) % 256) as u8).collect(),
            height: SIDE,
            width: SIDE,
            label: i % 100,
            coarse_label: Some((i % 100) / 5),
        })
        .collect();
    std::fs::create_dir_all(dir).unwrap();
    let bytes = encode_cifar(&samples, CifarVariant::Cifar100).unwrap();
    std::fs::write(dir.join("train.bin"), &bytes).unwrap();
    std::fs::write(dir.join("test.bin"), &bytes[..CifarVariant::Cifar100.record_len() * 50]).unwrap();
}

#[test]
fn load_shuffle_split_on_cifar100_layout_uses_four_batches_per_plan() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cifar-100-binary");
    fake_cifar100(&data, 256);
    let run = dir.path().join("run");
    let o = dpn(&[
        "train",
        "--set", "data.dataset=cifar100",
        "--set", &format!("data.dir={}", data.display()),
        "--set", "model.preset=plain-cnn",
        "--set", "model.width=4",
        "--set", "sampler=load_shuffle_split",
        "--set", "sampler.c=25",
        "--set", "train.epochs=1",
        "--set", "train.lr_milestones=[]",
        "--set", "train.batch_size=16",
        "--set", &format!("output_dir={}", run.display()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("load_shuffle_split m=4 batches per plan"), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 2);
}
