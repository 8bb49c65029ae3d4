use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mixres_core::data::{self, synthetic_dataset_with_noise, SplitName, IMAGE_BYTES, TRAIN_FILES};

fn mixres(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixres"))
        .args(args)
        .env_remove(data::DATA_DIR_ENV)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn fixture(dir: &Path) {
    let train = synthetic_dataset_with_noise(60, 10, 1, 0.2, SplitName::Train);
    let test = synthetic_dataset_with_noise(20, 10, 2, 0.2, SplitName::Test);
    data::write_cifar10_dir(dir, &train, &test).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 8] = ["--arch", "tiny", "--width", "4", "--batch-size", "20", "--threads", "1"];

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&mixres(&["train", "--bogus"])), 2);
    assert_eq!(code(&mixres(&["train", "--lr", "-1", "--dry-run"])), 2);
    assert_eq!(code(&mixres(&["train", "--arch", "vgg", "--dry-run"])), 2);
    assert_eq!(code(&mixres(&["--threads", "0", "train", "--dry-run"])), 2);
    assert_eq!(code(&mixres(&["gradcheck", "--op", "nope"])), 2);
    assert_eq!(code(&mixres(&[])), 2);
}

#[test]
fn missing_data_exits_with_three() {
    let empty = tempfile::tempdir().unwrap();
    let out = mixres(&[
        "train",
        "--epochs",
        "1",
        "--data-dir",
        s(empty.path()),
        "--out",
        s(&empty.path().join("o")),
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains(TRAIN_FILES[0]));
    assert_eq!(code(&mixres(&["train", "--epochs", "1"])), 3);
}

#[test]
fn dry_run_echoes_the_defaults() {
    let out = mixres(&["train", "--dry-run"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let first = text.lines().next().unwrap();
    assert!(
        first.starts_with("lr 0.05, batch 128, epochs 200, cosine T=200, eta_min 0, momentum 0.9, weight decay 0.0005, mixup on (alpha 1)"),
        "{first}"
    );
    assert!(text.contains("lr = 0.05"));
    assert!(text.contains("stage_blocks = [3, 4, 6, 3]"));

    let out = mixres(&["train", "--dry-run", "--epochs", "30", "--no-mixup"]);
    let first = stdout(&out).lines().next().unwrap().to_string();
    assert!(
        first.contains("epochs 30, cosine T=30") && first.contains("mixup off"),
        "{first}"
    );
}

#[test]
fn config_file_is_layered_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, "lr = 0.2\nepochs = 10\n[mixup]\nalpha = 0.4\n").unwrap();
    let out = mixres(&["train", "--dry-run", "--config", s(&path), "--lr", "0.3"]);
    assert_eq!(code(&out), 0);
    let first = stdout(&out).lines().next().unwrap().to_string();
    assert!(
        first.starts_with("lr 0.3, batch 128, epochs 10, cosine T=10"),
        "{first}"
    );
    assert!(first.contains("alpha 0.4"));
    fs::write(&path, "learning_rate = 1\n").unwrap();
    assert_eq!(code(&mixres(&["train", "--dry-run", "--config", s(&path)])), 2);
}

#[test]
fn eval_matches_the_run_and_checks_architecture() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let run = dir.path().join("run");
    let mut args = vec![
        "train",
        "--epochs",
        "2",
        "--data-dir",
        s(dir.path()),
        "--out",
        s(&run),
        "--json",
    ];
    args.extend(SMALL);
    let out = mixres(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    for f in [
        "run.jsonl",
        "summary.csv",
        "timing.csv",
        "last.ckpt",
        "best.ckpt",
        "config.toml",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("summary.csv")).unwrap().lines().count(), 3);

    let ckpt = run.join("last.ckpt");
    let config = run.join("config.toml");
    let out = mixres(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--config",
        s(&config),
        "--data-dir",
        s(dir.path()),
        "--json",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let (a, b) = (
        eval["test_loss"].as_f64().unwrap(),
        summary["final_test_loss"].as_f64().unwrap(),
    );
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    assert_eq!(eval["error_pct"], summary["final_test_error_pct"]);
    assert_eq!(eval["total"], 20);

    let out = mixres(&["eval", "--checkpoint", s(&ckpt), "--data-dir", s(dir.path())]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).starts_with("test_loss "));

    let mismatch = mixres(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--arch",
        "resnet50",
        "--data-dir",
        s(dir.path()),
    ]);
    assert_eq!(code(&mismatch), 4);
    fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    let junk = mixres(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("junk.ckpt")),
        "--data-dir",
        s(dir.path()),
    ]);
    assert_eq!(code(&junk), 4);

    // resuming a finished run trains nothing more and keeps the log
    let before = fs::read_to_string(run.join("run.jsonl")).unwrap();
    let mut again = args.clone();
    again.push("--resume");
    assert_eq!(code(&mixres(&again)), 0);
    assert_eq!(fs::read_to_string(run.join("run.jsonl")).unwrap(), before);
}

#[test]
fn preview_mixes_pixels_by_the_rounding_rule() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let out_dir = dir.path().join("p");
    let out = mixres(&[
        "mixup-preview",
        "3",
        "17",
        "--lambda",
        "0.3",
        "--data-dir",
        s(dir.path()),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let pixels: Vec<u8> = TRAIN_FILES
        .iter()
        .flat_map(|f| data::read_batch_file(&dir.path().join(f)).unwrap().1)
        .collect();
    let (a, b) = (
        &pixels[3 * IMAGE_BYTES..4 * IMAGE_BYTES],
        &pixels[17 * IMAGE_BYTES..18 * IMAGE_BYTES],
    );
    let mixed = fs::read(out_dir.join("mixed.ppm")).unwrap();
    let header = b"P6\n32 32\n255\n";
    assert_eq!(&mixed[..header.len()], header);
    let body = &mixed[header.len()..];
    assert_eq!(body.len(), IMAGE_BYTES);
    for p in 0..1024 {
        for c in 0..3 {
            let want = (0.3 * a[c * 1024 + p] as f64 + 0.7 * b[c * 1024 + p] as f64).round() as u8;
            assert_eq!(body[3 * p + c], want);
        }
    }
    assert!(out_dir.join("preview.toml").exists());

    let out = mixres(&[
        "mixup-preview",
        "3",
        "17",
        "--lambda",
        "1",
        "--data-dir",
        s(dir.path()),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(
        fs::read(out_dir.join("mixed.ppm")).unwrap(),
        fs::read(out_dir.join("A.ppm")).unwrap()
    );
    let bad = [
        "mixup-preview",
        "3",
        "17",
        "--lambda",
        "1.5",
        "--data-dir",
        s(dir.path()),
    ];
    assert_eq!(code(&mixres(&bad)), 2);
    let far = [
        "mixup-preview",
        "3",
        "9999",
        "--data-dir",
        s(dir.path()),
        "--out",
        s(&out_dir),
    ];
    assert_eq!(code(&mixres(&far)), 3);
}

#[test]
fn compare_writes_curves_for_both_arms() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let out_dir = dir.path().join("cmp");
    let mut args = vec![
        "compare-mixup",
        "--epochs",
        "2",
        "--data-dir",
        s(dir.path()),
        "--out",
        s(&out_dir),
        "--json",
    ];
    args.extend(SMALL);
    let out = mixres(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let d: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(d["test_loss_ratio"].as_f64().unwrap() > 0.0);
    for name in ["curves_mixup.csv", "curves_no_mixup.csv"] {
        assert_eq!(fs::read_to_string(out_dir.join(name)).unwrap().lines().count(), 3);
    }
    assert!(out_dir.join("comparison.json").exists());
    assert!(out_dir.join("config.toml").exists());
}

#[test]
fn sweep_runs_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let spec = dir.path().join("sweep.toml");
    fs::write(
        &spec,
        r#"R = 3
eta = 3
seed = 4
validation_size = 20

[base]
batch_size = 20
[base.model]
stage_blocks = [1, 1, 1, 1]
base_width = 4

[params.lr]
type = "continuous"
scale = "log"
lo = 0.001
hi = 0.1

[params.mixup_alpha]
type = "continuous"
scale = "linear"
lo = 0.1
hi = 1.0
"#,
    )
    .unwrap();
    let out_dir = dir.path().join("sw");
    let out = mixres(&[
        "sweep",
        "--spec",
        s(&spec),
        "--data-dir",
        s(dir.path()),
        "--out",
        s(&out_dir),
        "--threads",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.starts_with("hyperband R=3 eta=3"));
    assert!(text.contains("best trial"));
    let trials = fs::read_to_string(out_dir.join("trials.csv")).unwrap();
    assert!(trials.starts_with("trial,lr,mixup_alpha,resource,metric\n"));
    assert_eq!(trials.lines().count(), 1 + 3 + 2);
    assert!(out_dir.join("correlation.csv").exists());
    assert!(out_dir.join("sweep.toml").exists());
    assert!(out_dir.join("runs").join("trial_0.jsonl").exists());

    let dry = mixres(&["sweep", "--spec", s(&spec), "--dry-run"]);
    assert_eq!(code(&dry), 0);
    assert!(stdout(&dry).contains("bracket,rung,n_configs,resource\n1,0,3,1\n1,1,1,3\n0,0,2,3\n"));

    let too_big = mixres(&[
        "sweep",
        "--spec",
        s(&spec),
        "--data-dir",
        s(dir.path()),
        "--validation-size",
        "60",
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&too_big), 2);
    fs::write(
        &spec,
        "R = 3\n[params.lr]\ntype = \"continuous\"\nlo = 0.1\nhi = 0.01\n",
    )
    .unwrap();
    let bad = mixres(&["sweep", "--spec", s(&spec), "--dry-run"]);
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("params.lr"));
}

#[test]
fn gradcheck_passes_and_catches_a_broken_backward() {
    let out = mixres(&["gradcheck", "--op", "gelu", "--op", "conv2d", "--trials", "10"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.ends_with(" ok")).count(), 4, "{text}");
    let broken = mixres(&[
        "gradcheck",
        "--op",
        "gelu",
        "--trials",
        "3",
        "--corrupt-backward",
        "gelu",
    ]);
    assert_eq!(code(&broken), 1);
    assert!(String::from_utf8_lossy(&broken.stderr).contains("gelu"));
}
