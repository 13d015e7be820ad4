use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
# tiny model and cohort for fast runs
epochs = 2
batch_size = 8
d_model = 8
d_time = 4
d_fused = 8
d_contrast = 4
window = 4
synthetic.n_patients = 50
synthetic.mean_seq_len = 10
synthetic.embed_dim = 6
";

fn medfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medfuse"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = medfuse(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup(dir: &Path) -> (String, String) {
    let config = dir.join("small.cfg");
    fs::write(&config, SMALL).unwrap();
    let cohort = dir.join("cohort.jsonl");
    ok(&["generate", "--config", config.to_str().unwrap(), "--out", cohort.to_str().unwrap()]);
    (config.to_str().unwrap().into(), cohort.to_str().unwrap().into())
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (config, cohort) = setup(dir.path());
    let again = dir.path().join("again.jsonl");
    ok(&["generate", "--config", &config, "--out", again.to_str().unwrap()]);
    let a = fs::read(&cohort).unwrap();
    assert_eq!(a, fs::read(&again).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 50);
}

#[test]
fn tokenize_prints_globals_first() {
    let dir = tempfile::tempdir().unwrap();
    let (config, cohort) = setup(dir.path());
    let text = ok(&["tokenize", "--cohort", &cohort, "--record", "P000003", "--config", &config]);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "patient_id = P000003");
    assert_eq!(lines[1], "n_global = 3");
    assert!(lines[4].starts_with("0,global,"));
    assert!(lines[7].starts_with("3,event,"));
    let missing = medfuse(&["tokenize", "--cohort", &cohort, "--record", "nobody"]);
    assert!(!missing.status.success());
}

#[test]
fn train_then_evaluate_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (config, cohort) = setup(dir.path());
    let out = dir.path().join("run");
    let printed = ok(&["train", "--config", &config, "--cohort", &cohort, "--out", out.to_str().unwrap()]);
    for f in ["best.ckpt", "config.txt", "history.csv", "test_report.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(out.join("history.csv")).unwrap().lines().count(), 3);
    let ckpt = out.join("best.ckpt");
    let evaluated = ok(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--cohort", &cohort, "--split", "test"]);
    assert_eq!(evaluated, printed);
    assert_eq!(evaluated, fs::read_to_string(out.join("test_report.csv")).unwrap());
}

#[test]
fn experiment_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _) = setup(dir.path());
    let out = dir.path().join("exp");
    let printed = ok(&[
        "experiment", "--config", &config, "--regimes", "ce,global", "--seeds", "2", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(printed.lines().count(), 2);
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().filter(|l| l.starts_with("run,")).count(), 4);
    let verdicts = fs::read_to_string(out.join("verdicts.csv")).unwrap();
    assert!(verdicts.starts_with("regime_a,regime_b,difference,verdict\nce,global,"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "epochs = 2\nlearning_rate = 0.1\n").unwrap();
    let out = medfuse(&["generate", "--config", bad.to_str().unwrap(), "--out", "x.jsonl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let (config, cohort) = setup(dir.path());
    let out = medfuse(&[
        "experiment", "--config", &config, "--regimes", "ce,bogus", "--seeds", "1", "--out", "unused",
    ]);
    assert!(!out.status.success());
    let out = medfuse(&["evaluate", "--checkpoint", &cohort, "--cohort", &cohort]);
    assert!(!out.status.success());
}
