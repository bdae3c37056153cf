use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use missfuse::checkpoint;
use missfuse::training::parse_history;

const SMALL: &[&str] = &[
    "--set", "model.dim=8",
    "--set", "model.latent_dim=4",
    "--set", "model.hidden=8",
    "--set", "model.heads=2",
    "--set", "train.warmup_epochs=1",
    "--max_epochs", "3",
    "--L", "2",
];

fn missfuse(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_missfuse"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("MISSFUSE_SEED")
        .output()
        .expect("spawn missfuse")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = missfuse(out, args);
    assert!(
        o.status.success(),
        "missfuse {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn generate_small(dir: &Path) {
    ok(dir, &["generate", "--n-samples", "114", "--seed", "4"]);
}

fn train_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["train"];
    v.extend_from_slice(extra);
    v.extend_from_slice(SMALL);
    v
}

#[test]
fn generate_writes_a_reproducible_cohort() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let stdout = ok(a.path(), &["generate", "--n-samples", "114", "--split", "40:7:10"]);
    assert!(stdout.contains("availability"));
    ok(b.path(), &["generate", "--n-samples", "114", "--split", "40:7:10"]);
    for f in ["cohort.manifest", "cohort.csv"] {
        let x = fs::read(a.path().join("cohort").join(f)).unwrap();
        assert_eq!(x, fs::read(b.path().join("cohort").join(f)).unwrap(), "{f}");
    }
    let table = fs::read_to_string(a.path().join("cohort/cohort.csv")).unwrap();
    assert_eq!(table.lines().count(), 115);
}

#[test]
fn invalid_arguments_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let o = missfuse(dir.path(), &["generate", "--split", "1:2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("split"));
    assert!(!dir.path().join("cohort").exists());
    let o = missfuse(dir.path(), &["--set", "gen.noise_std=-1", "generate"]);
    assert!(!o.status.success());
    let o = missfuse(dir.path(), &["--set", "no.such.key=1", "generate"]);
    assert!(!o.status.success());
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate_small(d);
    ok(d, &train_args(&["--seed", "4"]));
    let (params, _) = checkpoint::load(&d.join("model.ckpt")).unwrap();
    assert_eq!(params.config.dim, 8);
    let history = parse_history(&fs::read_to_string(d.join("history.tsv")).unwrap()).unwrap();
    assert_eq!(history.len(), 3);
    assert!(d.join("run.cfg").exists());

    ok(d, &["eval", "--seed", "4", "--eval_seeds", "1,2", "--L", "2"]);
    let report = fs::read_to_string(d.join("report.tsv")).unwrap();
    for seed in ["1", "2"] {
        let rows = report.lines().filter(|l| l.split('\t').next() == Some(seed)).count();
        assert_eq!(rows, 15, "seed {seed}");
    }
    assert!(fs::read_to_string(d.join("report.txt")).unwrap().contains("average"));
}

#[test]
fn ablation_switches_change_the_parameter_census() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate_small(d);
    ok(d, &train_args(&[]));
    let (full, _) = checkpoint::load(&d.join("model.ckpt")).unwrap();
    ok(d, &train_args(&["--disable_pra"]));
    let (ablated, _) = checkpoint::load(&d.join("model.ckpt")).unwrap();
    let has_pra = |p: &missfuse::ModelParams| p.store.names().iter().any(|n| n.starts_with("pra."));
    assert!(has_pra(&full));
    assert!(!has_pra(&ablated));
    assert!(ablated.store.scalar_count() < full.store.scalar_count());
}

#[test]
fn zero_beta_drops_the_kl_term() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate_small(d);
    ok(d, &train_args(&["--beta", "0"]));
    let history = parse_history(&fs::read_to_string(d.join("history.tsv")).unwrap()).unwrap();
    assert!(history.iter().all(|r| r.kl_term == 0.0 && r.loss == r.ce));
}

#[test]
fn reruns_are_byte_identical() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        generate_small(d.path());
        ok(d.path(), &train_args(&["--seed", "9"]));
        ok(d.path(), &["eval", "--seed", "9", "--L", "2"]);
    }
    // run.cfg records the output directory, so only the artifacts are compared.
    for f in ["model.ckpt", "history.tsv", "report.tsv", "report.txt"] {
        let a = fs::read(dirs[0].path().join(f)).unwrap();
        assert_eq!(a, fs::read(dirs[1].path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_checkpoint_is_reported_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate_small(d);
    let o = missfuse(d, &["eval", "--checkpoint", "nowhere.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.ckpt"));
    assert!(!d.join("report.tsv").exists());
}

#[test]
fn seed_environment_variable_sets_the_root_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, args: &[&str]| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_missfuse"));
        c.arg("--out").arg(dir.path()).args(args).env_remove("MISSFUSE_SEED");
        if let Some(s) = env {
            c.env("MISSFUSE_SEED", s);
        }
        assert!(c.output().unwrap().status.success());
        fs::read(dir.path().join("cohort/cohort.csv")).unwrap()
    };
    let by_env = run(Some("31"), &["generate", "--n-samples", "40"]);
    let by_flag = run(None, &["generate", "--n-samples", "40", "--seed", "31"]);
    let default = run(None, &["generate", "--n-samples", "40"]);
    assert_eq!(by_env, by_flag);
    assert_ne!(by_env, default);
    // The flag wins over the environment.
    assert_eq!(run(Some("31"), &["generate", "--n-samples", "40", "--seed", "0"]), default);
}

#[test]
fn verify_passes_and_catches_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = missfuse(dir.path(), &["verify"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{stdout}");
    assert!(!stdout.contains("FAIL"));
    let o = missfuse(dir.path(), &["verify", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}
