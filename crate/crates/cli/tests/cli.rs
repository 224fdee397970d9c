use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_linearconv"))
        .args(args)
        .env_remove("DATA_DIR")
        .output()
        .expect("spawn linearconv")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_idx(dir: &Path, prefix: &str, count: usize, seed: u32) {
    let mut images = vec![0, 0, 8, 3];
    for v in [count as u32, 28, 28] {
        images.extend(v.to_be_bytes());
    }
    let mut labels = vec![0, 0, 8, 1];
    labels.extend((count as u32).to_be_bytes());
    let mut state = seed;
    for i in 0..count {
        let label = (i % 10) as u8;
        labels.push(label);
        for p in 0..28 * 28 {
            state = state.wrapping_mul(1_103_515_245).wrapping_add(12_345);
            // a class-dependent bright column plus noise
            let bright = p % 28 == 2 + 2 * label as usize;
            images.push(if bright { 200 } else { (state >> 24) as u8 / 4 });
        }
    }
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
}

fn synthetic_mnist() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_idx(dir.path(), "train", 60, 1);
    write_idx(dir.path(), "t10k", 20, 2);
    dir
}

fn train(data: &Path, out: &Path, variant: &str) -> Output {
    run(&[
        "train",
        "--arch",
        "base",
        "--variant",
        variant,
        "--dataset",
        "mnist",
        "--data-dir",
        data.to_str().unwrap(),
        "--epochs",
        "2",
        "--batch-size",
        "16",
        "--seed",
        "4",
        "--deterministic",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn infeasible_alpha_is_a_usage_error_naming_the_layer() {
    let o = run(&["report", "--arch", "base", "--variant", "linear", "--alpha", "0.3"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("conv layer 1"), "{}", stderr(&o));
}

#[test]
fn rank_beyond_the_split_is_a_usage_error() {
    let o = run(&["report", "--arch", "base", "--variant", "linear-lowrank", "--rank", "20"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn report_prints_published_totals() {
    let base = run(&["report", "--arch", "base", "--variant", "conv"]);
    assert!(base.status.success());
    assert!(stdout(&base).contains("0.40"), "{}", stdout(&base));

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("vgg.csv");
    let vgg = run(&["report", "--arch", "vgg11", "--variant", "linear", "--csv", csv.to_str().unwrap()]);
    assert!(vgg.status.success());
    assert!(stdout(&vgg).contains("4.92"), "{}", stdout(&vgg));
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("layer,kind,params,inf_flops,train_flops\n"));
}

#[test]
fn sweep_lists_one_row_per_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let o = run(&["sweep-alpha", "--arch", "vgg11", "--csv", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(stdout(&o).contains("4.92") && stdout(&o).contains("8.21"), "{}", stdout(&o));
}

#[test]
fn unreadable_data_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("train-images-idx3-ubyte"), b"not idx").unwrap();
    std::fs::write(dir.path().join("train-labels-idx1-ubyte"), b"junk").unwrap();
    let out = tempfile::tempdir().unwrap();
    let o = train(dir.path(), out.path(), "linear");
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let missing = tempfile::tempdir().unwrap();
    let o = train(missing.path(), out.path(), "linear");
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn train_eval_fold_and_inspect() {
    let data = synthetic_mnist();
    let out = tempfile::tempdir().unwrap();
    let o = train(data.path(), out.path(), "linear");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("final test accuracy"));
    for f in ["config.json", "metrics.csv", "timing.csv", "last.ckpt", "best.ckpt"] {
        assert!(out.path().join(f).exists(), "{f} missing");
    }
    let metrics = std::fs::read_to_string(out.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let ckpt = out.path().join("last.ckpt");
    let folded = out.path().join("folded.ckpt");
    let d = data.path().to_str().unwrap();
    let before = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data-dir", d]);
    assert!(before.status.success(), "{}", stderr(&before));
    let f = run(&["fold", "--checkpoint", ckpt.to_str().unwrap(), "--out", folded.to_str().unwrap()]);
    assert!(f.status.success(), "{}", stderr(&f));
    let after = run(&["eval", "--checkpoint", folded.to_str().unwrap(), "--data-dir", d]);
    assert!(after.status.success(), "{}", stderr(&after));
    let acc = |o: &Output| stdout(o).split_whitespace().nth(1).unwrap().to_string();
    assert_eq!(acc(&before), acc(&after));

    let pgm = out.path().join("corr.pgm");
    let o = run(&["inspect-corr", "--checkpoint", ckpt.to_str().unwrap(), "--layer", "2", "--out", pgm.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read(&pgm).unwrap().starts_with(b"P5"));

    let o = run(&["inspect-corr", "--checkpoint", ckpt.to_str().unwrap(), "--layer", "99", "--out", pgm.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("out of range"), "{}", stderr(&o));
}

#[test]
fn folding_a_plain_conv_checkpoint_only_warns() {
    let data = synthetic_mnist();
    let out = tempfile::tempdir().unwrap();
    assert!(train(data.path(), out.path(), "conv").status.success());
    let target = out.path().join("folded.ckpt");
    let o = run(&[
        "fold",
        "--checkpoint",
        out.path().join("last.ckpt").to_str().unwrap(),
        "--out",
        target.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("warning"));
    assert!(!target.exists());
}

#[test]
fn deterministic_runs_write_identical_metrics() {
    let data = synthetic_mnist();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(train(data.path(), a.path(), "linear").status.success());
    assert!(train(data.path(), b.path(), "linear").status.success());
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}
