use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn stillbox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stillbox")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = stillbox(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    stillbox(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().display().to_string(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn end_to_end_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data32");
    ok(&["generate", "--scenes", "6", "--size", "32", "--seed", "1", "--out", p(&data)]);
    assert!(data.join("index.json").exists());

    let ckpt = tmp.path().join("net.ckpt");
    let args = ["train", "--data", p(&data), "--epochs", "1", "--seed", "2", "--samples-per-scene", "2", "--out", p(&ckpt)];
    ok(&args);
    let log = fs::read_to_string(ckpt.with_extension("csv")).unwrap();
    assert!(log.starts_with("epoch,train_L1,test_L1,train_RMSE,test_RMSE\n"));
    assert_eq!(log.lines().count(), 2);
    let first = fs::read(&ckpt).unwrap();
    ok(&args);
    assert_eq!(fs::read(&ckpt).unwrap(), first, "training is not reproducible");

    let report = tmp.path().join("eval.csv");
    ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--report", p(&report)]);
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("split,L1,RMSE,pixels\n"));
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (l1, rmse): (f64, f64) = (f[1].parse().unwrap(), f[2].parse().unwrap());
        assert!(rmse >= l1 - 1e-9, "{line}");
    }

    let index: String = fs::read_to_string(data.join("index.json")).unwrap();
    let scene = index.split("\"scene_").nth(1).unwrap().split('"').next().unwrap();
    let split = if fs::metadata(data.join("train").join(format!("scene_{scene}"))).is_ok() { "train" } else { "test" };
    let frames = data.join(split).join(format!("scene_{scene}"));
    let out = tmp.path().join("infer");
    let stdout = ok(&["infer", "--ckpt", p(&ckpt), "--frames", p(&frames), "--speed", "9", "--shifts", "1,3", "--out", p(&out)]);
    assert!(stdout.contains("next shift"));
    for f in ["fused.pfm", "fused.png", "shift_1.pfm", "shift_3.png", "report.csv", "error.png"] {
        assert!(out.join(f).exists(), "missing {f}");
    }

    let base = tmp.path().join("baseline.csv");
    ok(&["baseline", "--data", p(&data), "--report", p(&base), "--split", "train", "--limit", "2"]);
    let csv = fs::read_to_string(&base).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("scene,valid_fraction,l1_m"));
}

#[test]
fn generation_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["generate", "--scenes", "3", "--size", "32", "--seed", "9", "--out", p(&a)]);
    ok(&["generate", "--scenes", "3", "--size", "32", "--seed", "9", "--out", p(&b)]);
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
}

#[test]
fn finetune_runs_a_two_stage_schedule() {
    let tmp = tempfile::tempdir().unwrap();
    let (d32, d64) = (tmp.path().join("d32"), tmp.path().join("d64"));
    ok(&["generate", "--scenes", "3", "--size", "32", "--seed", "1", "--out", p(&d32)]);
    ok(&["generate", "--scenes", "3", "--size", "64", "--seed", "2", "--out", p(&d64)]);
    let ckpt = tmp.path().join("ft.ckpt");
    let data = format!("{},{}", p(&d32), p(&d64));
    let stdout = ok(&[
        "finetune", "--schedule", "32,64", "--data", &data, "--epochs", "1", "--samples-per-scene", "1", "--out", p(&ckpt),
    ]);
    assert!(stdout.contains("stage 64 px"));
    assert_eq!(fs::read_to_string(ckpt.with_extension("csv")).unwrap().lines().count(), 3);
    assert_eq!(code(&["finetune", "--schedule", "64,32", "--data", &format!("{},{}", p(&d64), p(&d32)), "--out", p(&ckpt)]), 1);
    assert_eq!(code(&["finetune", "--schedule", "32,64", "--data", &format!("{},{}", p(&d64), p(&d32)), "--out", p(&ckpt)]), 1);
}

#[test]
fn gradient_check_passes() {
    let stdout = ok(&["check", "--gradients"]);
    assert!(stdout.contains("PASS mini network"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(code(&["generate", "--scenes", "2", "--size", "48", "--out", p(&out)]), 1);
    assert_eq!(code(&["generate", "--scenes", "2"]), 1);
    assert_eq!(code(&["bogus"]), 1);
    assert_eq!(code(&["check"]), 1);
    assert_eq!(code(&["train", "--data", p(&tmp.path().join("missing")), "--out", p(&out)]), 2);
    assert_eq!(code(&["eval", "--ckpt", p(&out), "--data", p(&out), "--report", p(&out)]), 2);
    assert_eq!(code(&["--help"]), 0);
}
