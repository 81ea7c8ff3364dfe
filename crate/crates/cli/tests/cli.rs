use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nesyarith(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nesyarith")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &[&str] = &[
    "--set", "model.d_model=16", "--set", "model.n_heads=2", "--set", "model.d_ff=32",
    "--set", "train.batch_size=4", "--set", "train.log_every=2", "--set", "train.val_every=5",
    "--set", "train.val_batch_size=4", "--set", "train.checkpoint_every=3", "--set", "data.pool_roots=50",
];

fn with_tiny<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(TINY).chain(tail).copied().collect()
}

#[test]
fn gen_data_writes_requested_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.tsv");
    let run = dir.path().join("run");
    let o = nesyarith(&[
        "gen-data", "--run-dir", run.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--set", "data.dump_rows=1000", "--set", "data.pool_roots=100",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1000);
    assert!(run.join("config.json").exists());
    assert!(stdout(&o).contains("nesting 2"));

    let o = nesyarith(&[
        "gen-data", "--run-dir", run.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--set", "data.dump_rows=300", "--set", "data.ratios=[100,0,0]",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.lines().all(|l| l.ends_with("\ttrain")));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let o = nesyarith(&["gen-data", "--config", bad.to_str().unwrap(), "--run-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("invalid JSON"));

    fs::write(&bad, r#"{"train": {"stesp": 3}}"#).unwrap();
    let o = nesyarith(&["train", "--config", bad.to_str().unwrap(), "--run-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stesp"));

    let o = nesyarith(&["eval", "--condition", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = nesyarith(&["eval", "--condition", "e2e", "--run-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}

fn train_into(run: &Path, steps: &str) -> Output {
    let steps = format!("train.steps={steps}");
    nesyarith(&with_tiny(&["train", "--run-dir", run.to_str().unwrap()], &["--set", &steps]))
}

#[test]
fn training_is_reproducible_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for run in [&a, &b] {
        let o = train_into(run, "10");
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());
    let loss = fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(loss, fs::read_to_string(b.join("loss.csv")).unwrap());
    let steps: Vec<&str> = loss.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["2", "4", "6", "8", "10"]);
    let val = fs::read_to_string(a.join("validation.csv")).unwrap();
    assert_eq!(val.lines().count(), 3);
}

#[test]
fn zero_steps_saves_initial_model_and_eval_reads_it() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("r");
    let o = train_into(&run, "0");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.exists());
    assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap(), "step,loss\n");

    let eval_dir = dir.path().join("e");
    let set_ckpt = format!("eval.checkpoint=\"{}\"", ckpt.display());
    let o = nesyarith(&with_tiny(
        &["eval", "--condition", "solver", "--condition", "hybrid", "--run-dir", eval_dir.to_str().unwrap()],
        &[
            "--set", &set_ckpt, "--set", "eval.nesting_list=[1,3]", "--set", "eval.n_batches=2",
            "--set", "eval.batch_size=3", "--set", "eval.n_outputs=[1,2]",
        ],
    ));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    let conditions: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(conditions, ["solver", "solver", "hybrid-N1", "hybrid-N1", "hybrid-N2", "hybrid-N2"]);
    assert!(eval_dir.join("report.md").exists());
}

#[test]
fn oracle_hybrid_report_is_all_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let o = nesyarith(&[
        "eval", "--condition", "oracle-hybrid", "--run-dir", dir.path().to_str().unwrap(),
        "--set", "eval.n_batches=3", "--set", "eval.batch_size=20", "--set", "eval.n_outputs=[1]",
        "--set", "data.pool_roots=10", "--set", "eval.dump_sequences=true",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(&f[2..], ["100.0", "0.0", "100.0", "0.0", "0.0", "0.0"], "{line}");
    }
    assert_eq!(fs::read_to_string(dir.path().join("sequences.jsonl")).unwrap().lines().count(), 600);
}

#[test]
fn gradcheck_passes_and_corruption_fails() {
    let o = nesyarith(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let line = stdout(&o);
    assert!(line.starts_with("PASS: max relative error "), "{line}");
    let value = line.split_whitespace().nth(4).unwrap();
    assert!(value.contains('e') && value.split('e').next().unwrap().len() == 3, "two significant digits: {value}");

    let o = nesyarith(&["gradcheck", "--corrupt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).starts_with("FAIL"));
}
