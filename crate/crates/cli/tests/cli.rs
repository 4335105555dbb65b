use std::path::Path;
use std::process::{Command, Output};

use are_core::data::{load_trialset, SynthSpec};
use are_core::eval::{read_reports, DataSource, EvalGrid, Method, Scenario, ScenarioConfig};
use are_core::model::load_checkpoint;

fn are(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_are")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = are(args);
    assert!(
        out.status.success(),
        "are {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn failure_json(args: &[&str]) -> serde_json::Value {
    let out = are(args);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    serde_json::from_str(err.lines().last().unwrap()).unwrap_or_else(|e| panic!("{e}: {err}"))
}

fn tiny_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        n_users: 3,
        trials_per_class_per_user: 4,
        n_timepoints: 128,
        ..SynthSpec::desk(seed)
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> String {
    std::fs::write(path, serde_json::to_string(v).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn datagen_splits_out_the_target_user() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_json(&dir.path().join("spec.json"), &tiny_spec(1));
    let (src, tgt) = (dir.path().join("src.eegt"), dir.path().join("tgt.eegt"));
    ok(&["datagen", "--spec", &spec, "--out", s(&src), "--target-user", "3", "--target-out", s(&tgt)]);
    let (a, b) = (load_trialset(&src).unwrap(), load_trialset(&tgt).unwrap());
    assert_eq!(a.users(), vec![1, 2]);
    assert_eq!(b.users(), vec![3]);
    assert_eq!(b.len(), 16);
    assert_eq!(a.n_timepoints(), 128);
}

#[test]
fn datagen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_json(&dir.path().join("spec.json"), &tiny_spec(2));
    let (a, b) = (dir.path().join("a.eegt"), dir.path().join("b.eegt"));
    ok(&["datagen", "--spec", &spec, "--out", s(&a)]);
    ok(&["datagen", "--spec", &spec, "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn perturb_and_pretrain_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_json(&dir.path().join("spec.json"), &tiny_spec(3));
    let src = dir.path().join("src.eegt");
    ok(&["datagen", "--spec", &spec, "--out", s(&src)]);

    let pert = dir.path().join("pert.eegt");
    ok(&["perturb", "--source", s(&src), "--out", s(&pert), "--rho", "0.2", "--seed", "4"]);
    let (clean, noisy) = (load_trialset(&src).unwrap(), load_trialset(&pert).unwrap());
    assert_eq!(clean.len(), noisy.len());
    assert_ne!(clean.trials()[0].signal, noisy.trials()[0].signal);

    let ckpt = dir.path().join("model.ckpt");
    ok(&["pretrain", "--source", s(&src), "--out", s(&ckpt), "--epochs", "1"]);
    let c = load_checkpoint(&ckpt).unwrap();
    assert_eq!(c.config.n_channels, 8);
    assert!(dir.path().join("model.log.json").exists());

    let fed = dir.path().join("fed.ckpt");
    ok(&["pretrain", "--source", s(&src), "--out", s(&fed), "--federated", "--rounds", "1", "--epochs", "1"]);
    assert!(load_checkpoint(&fed).is_ok());
}

fn tiny_run_config(dir: &Path) -> String {
    let mut cfg = ScenarioConfig::desk(Scenario::NoPrivacy, Method::Ce, 5);
    cfg.data = DataSource::Synthetic {
        spec: tiny_spec(5),
        target_user: None,
    };
    cfg.calibration_fractions = vec![0.5];
    cfg.repeats = 1;
    cfg.pretrain.epochs = 1;
    cfg.target_train.epochs = 1;
    cfg.grid = EvalGrid {
        epsilons: vec![0.03],
        etas: vec![1.0],
        noise_draws: 1,
        attack_steps: 2,
        attack_alpha: None,
    };
    write_json(&dir.join("run.json"), &cfg)
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run_config(dir.path());
    let out = dir.path().join("out");
    let stdout = ok(&["run", "--config", &cfg, "--method", "ce,abat", "--out", s(&out)]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("no_privacy ")).count(), 2);
    for ext in ["json", "csv", "md"] {
        assert!(out.join(format!("no_privacy_ce.{ext}")).exists(), "{ext}");
    }
    let json = out.join("no_privacy_abat.json");
    let reports = read_reports(&json).unwrap();
    assert_eq!(reports[0].cells.len(), 1);

    let csv = dir.path().join("merged.csv");
    ok(&["report", "--in", s(&out.join("no_privacy_ce.json")), s(&json), "--format", "csv", "--out", s(&csv)]);
    // Two reports, each a header, one cell and two summary rows.
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().filter(|l| !l.is_empty()).count(), 8);
    let md = ok(&["report", "--in", s(&json)]);
    assert!(md.contains("### no_privacy / abat"));
}

#[test]
fn failures_print_a_json_error_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.eegt");
    assert_eq!(failure_json(&["perturb", "--source", s(&missing), "--out", "x"])["error"], "io");

    let junk = dir.path().join("junk.eegt");
    std::fs::write(&junk, b"not a trial file at all").unwrap();
    let v = failure_json(&["pretrain", "--source", s(&junk), "--out", "x"]);
    assert_eq!(v["error"], "format");
    assert!(v["message"].as_str().unwrap().contains("EEGT"));

    let v = failure_json(&["run", "--scenario", "nope", "--out", s(dir.path())]);
    assert_eq!(v["error"], "cli");

    let spec = write_json(&dir.path().join("bad.json"), &SynthSpec { n_users: 0, ..tiny_spec(1) });
    let v = failure_json(&["datagen", "--spec", &spec, "--out", s(&dir.path().join("o.eegt"))]);
    assert_eq!(v["error"], "validation");
}
