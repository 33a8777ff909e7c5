use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 5
[dataset.spec]
n_samples = 20
n_positive = 11
seed = 5
[dataset.spec.widths]
vision = 8
radiomics = 6
clinical = 4
[model]
d_uniform = 8
n_heads = 2
n_tokens = 2
encoder_hidden = 4
head_hidden = 4
[train]
epochs = 2
batch_size = 4
folds = 2
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trimodal"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn generate_train_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().to_str().unwrap();

    let first = run(&["generate", "--config", &cfg, "--out", out]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let second = run(&["generate", "--config", &cfg, "--out", out]);
    assert_eq!(stdout(&first), stdout(&second));
    assert!(stdout(&first).contains("sha256"));

    let train = run(&["train", "--config", &cfg, "--out", out, "--epochs", "3"]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    assert!(stdout(&train).contains("accuracy"));
    for f in [
        "dataset.tmds",
        "manifest.json",
        "folds.json",
        "metrics.jsonl",
        "metrics.csv",
        "checkpoint_fold0.ckpt",
        "checkpoint_fold1.ckpt",
        "trace_fold0.csv",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("\"epochs\": 3"), "{manifest}");

    let eval = run(&["evaluate", "--config", &cfg, "--out", out]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert_eq!(stdout(&eval).lines().filter(|l| l.starts_with("fold")).count(), 2);
    assert!(dir.path().join("eval_metrics.csv").exists());
}

#[test]
fn missing_output_directory_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let missing = dir.path().join("nope");
    let o = run(&["generate", "--config", &cfg, "--out", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
}

#[test]
fn bad_configuration_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[loss]\nlambda = 2.0\n");
    let o = run(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda"));

    let cfg = write_config(dir.path(), "[train]\nbatch = 4\n");
    let o = run(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["train", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let ok = run(&["gradcheck", "--out", out]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(stdout(&ok).contains("loss.tmff"));

    let cfg = write_config(dir.path(), "[gradcheck]\ninject_fault = \"matmul\"\n");
    let bad = run(&["gradcheck", "--config", &cfg, "--out", out]);
    assert_eq!(bad.status.code(), Some(7));
    assert!(dir.path().join("gradcheck.json").exists());
}
