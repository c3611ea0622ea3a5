use std::path::Path;
use std::process::{Command, Output};

use morphnet::data::{write_idx, Dataset};
use morphnet::Tensor;

fn morphnet(args: &[&str], data: Option<&Path>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_morphnet"));
    c.args(args);
    if let Some(d) = data {
        c.env("MORPHNET_DATA_DIR", d);
    }
    c.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// 60 tiny 4x4 "digits" of 3 classes written as IDX files.
fn fake_mnist(root: &Path) {
    let dir = root.join("mnist");
    std::fs::create_dir_all(&dir).unwrap();
    let n = 60;
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let px: Vec<f64> = (0..n * 16)
        .map(|k| {
            let (i, p) = (k / 16, k % 16);
            if p % 3 == labels[i] { 1.0 } else { ((k * 7) % 5) as f64 / 20.0 }
        })
        .collect();
    let ds = Dataset::new(Tensor::new(vec![n, 1, 4, 4], px).unwrap(), labels, "fake").unwrap();
    write_idx(&ds, &dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte")).unwrap();
    write_idx(&ds, &dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte")).unwrap();
}

fn config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let o = morphnet(&["verify", "--suite", "thm9"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("thm9"));
}

#[test]
fn verify_collapse_and_repr_pass() {
    for suite in ["collapse", "reprthm", "thm4"] {
        let o = morphnet(&["verify", "--suite", suite, "--seed", "3"], None);
        assert!(o.status.success(), "{}", stdout(&o));
        assert!(stdout(&o).contains("PASS"));
    }
}

#[test]
fn train_zero_epochs_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    fake_mnist(dir.path());
    let cfg = config(dir.path(), "run.cfg", "dataset = mnist\npreset = mpm\nepochs = 0\n");
    let out = dir.path().join("run");
    let o = morphnet(&["train", "--config", &cfg, "--out", out.to_str().unwrap()], Some(dir.path()));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics, "epoch,train_acc,val_acc,train_loss,val_loss\n");
    assert!(out.join("checkpoint").join("spec.json").exists());
}

#[test]
fn training_is_byte_deterministic_and_eval_repeats() {
    let dir = tempfile::tempdir().unwrap();
    fake_mnist(dir.path());
    let cfg = config(
        dir.path(),
        "run.cfg",
        "dataset = mnist\npreset = mpm\nepochs = 2\nbatch_size = 8\nsplit = train\n",
    );
    let mut csvs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let o = morphnet(&["train", "--config", &cfg, "--seed", "5", "--out", out.to_str().unwrap()], Some(dir.path()));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(String::from_utf8_lossy(&csvs[0]).lines().count(), 3);

    let ckpt = dir.path().join("run0").join("checkpoint");
    let eval = |k: usize| {
        let out = dir.path().join(format!("eval{k}"));
        let o = morphnet(
            &["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap()],
            Some(dir.path()),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    assert_eq!(eval(0), eval(1));
}

#[test]
fn zero_ratio_l1_prune_keeps_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    fake_mnist(dir.path());
    let cfg = config(dir.path(), "run.cfg", "dataset = mnist\npreset = mpm\nepochs = 1\nbatch_size = 8\n");
    let run = dir.path().join("run");
    assert!(morphnet(&["train", "--config", &cfg, "--out", run.to_str().unwrap()], Some(dir.path()))
        .status
        .success());
    let prune_cfg = config(
        dir.path(),
        "prune.cfg",
        &format!(
            "dataset = mnist\npreset = mpm\nprune_method = l1\nprune_ratio = 0\ncheckpoint = {}\n",
            run.join("checkpoint").display()
        ),
    );
    let out = dir.path().join("pruned");
    let o = morphnet(&["prune", "--config", &prune_cfg, "--out", out.to_str().unwrap()], Some(dir.path()));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("prune.json")).unwrap()).unwrap();
    assert_eq!(report["acc_before"], report["acc_after"]);
    assert!(out.join("sparsity.csv").exists());
}

#[test]
fn missing_data_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "run.cfg", "dataset = mnist\npreset = mpm\nepochs = 1\n");
    let o = morphnet(&["train", "--config", &cfg], Some(dir.path()));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing data file"));
}

#[test]
fn landscape_and_mean_shift_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let l = config(dir.path(), "l.cfg", "example = hybrid\npoints = 41\n");
    let o = morphnet(&["landscape", "--config", &l, "--out", dir.path().to_str().unwrap()], None);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(dir.path().join("landscape_hybrid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 42);

    let m = config(dir.path(), "m.cfg", "model = linear\nbatch_size = 10\nepochs = 5\n");
    let o = morphnet(&["mean-shift", "--config", &m, "--out", dir.path().to_str().unwrap()], None);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(dir.path().join("mean_shift.csv")).unwrap();
    assert!(csv.starts_with("epoch,w1,"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn regress_reports_mse() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "r.cfg",
        "dataset = synth:sin6\npreset = reg-mpm\nepochs = 2\nreg_train = 64\nreg_test = 32\n",
    );
    let o = morphnet(&["regress", "--config", &cfg, "--out", dir.path().to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert!(s["test_mse"].as_f64().unwrap().is_finite());
}
