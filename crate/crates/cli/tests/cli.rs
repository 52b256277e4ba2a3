use std::path::Path;
use std::process::{Command, Output};

fn memreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memreg"))
        .args(args)
        .env("MEMREG_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = "stage1_iters = 4\nstage2_iters = 2\neval_every = 2\ntrain_pool = 4\nval_count = 2\neval_count = 3\ncrop = 32\n";

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(code(&memreg(&["train-stage1", "--bogus"])), 2);
    assert_eq!(code(&memreg(&["no-such-command"])), 2);
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = memreg(&["train-stage1", "--config", "/nonexistent/base.cfg", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bad_config_value_names_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 3\nlambda_mr = banana\n").unwrap();
    let o = memreg(&["train-stage1", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("lambda_mr") && err.contains("line 2"), "{err}");
}

#[test]
fn gen_data_round_trips_through_the_container() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.ds");
    let o = memreg(&["gen-data", "--domain", "target", "--count", "3", "--seed", "4", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let data = memreg::data::import_dataset(&out).unwrap();
    assert_eq!(data.len(), 3);
    assert_eq!(data.spec, memreg::data::DomainSpec::target(4));
    assert_eq!(code(&memreg(&["gen-data", "--domain", "moon", "--out", s(&out)])), 2);
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("base.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let st1 = dir.path().join("st1");
    let o = memreg(&["train-stage1", "--config", s(&cfg), "--seed", "7", "--out", s(&st1)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["checkpoint.bin", "trace.csv", "config.cfg"] {
        assert!(st1.join(f).exists(), "{f}");
    }
    let trace = std::fs::read_to_string(st1.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 5);

    let ck = st1.join("checkpoint.bin");
    let pl = dir.path().join("pl");
    let o = memreg(&["pseudo-label", "--config", s(&cfg), "--checkpoint", s(&ck), "--count", "3", "--out", s(&pl)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let pseudo = memreg::pipeline::PseudoDataset::load(&pl).unwrap();
    assert_eq!(pseudo.maps.len(), 3);

    let st2 = dir.path().join("st2");
    let o = memreg(&[
        "train-stage2", "--config", s(&cfg), "--checkpoint", s(&ck), "--pseudo", s(&pl), "--out", s(&st2),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = memreg(&["eval", "--config", s(&cfg), "--checkpoint", s(&st2.join("checkpoint.bin")), "--domain", "target"]);
    assert_eq!(code(&o), 0);
    let table = String::from_utf8_lossy(&o.stdout);
    for name in memreg::data::CLASS_NAMES {
        assert!(table.contains(name), "{table}");
    }
    assert!(table.contains("disagreement_rate"));
}

#[test]
fn identical_seeds_give_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("base.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        assert_eq!(code(&memreg(&["train-stage1", "--config", s(&cfg), "--seed", "2", "--out", s(&out)])), 0);
        std::fs::read(out.join("trace.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn eval_of_a_corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("c.bin");
    std::fs::write(&ck, b"not a checkpoint").unwrap();
    assert_eq!(code(&memreg(&["eval", "--checkpoint", s(&ck)])), 1);
}

#[test]
fn ablate_then_report_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.cfg");
    std::fs::write(&plan, format!("{TINY}seeds = 0\narms = source_only, full_stage2\n")).unwrap();
    let out = dir.path().join("runs");
    let o = memreg(&["ablate", "--plan", s(&plan), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.contains("full_stage2,0,ok"));
    let first = std::fs::read(out.join("report.txt")).unwrap();

    // A run that vanished is reported as FAILED; report still succeeds.
    std::fs::remove_file(out.join("source_only/seed0/metrics.txt")).unwrap();
    let o = memreg(&["report", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAILED"));
    let again = std::fs::read(out.join("report.txt")).unwrap();
    assert_ne!(first, again);
    assert_eq!(code(&memreg(&["report", "--out", s(&out)])), 0);
    assert_eq!(std::fs::read(out.join("report.txt")).unwrap(), again);
}
