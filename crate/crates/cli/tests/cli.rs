use std::path::Path;

use spide_cli::{run_from_args, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};

fn cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = run_from_args(std::iter::once("spide").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8_lossy(&out).into_owned())
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

#[test]
fn unknown_subcommand_and_suite_are_usage_errors() {
    assert_eq!(cli(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(cli(&["verify", "nonsense"]).0, EXIT_USAGE);
}

#[test]
fn missing_config_file_is_a_usage_error() {
    assert_eq!(cli(&["train", "--config", "/nonexistent/run.conf"]).0, EXIT_USAGE);
}

#[test]
fn bad_override_is_a_usage_error() {
    let cfg = config("mnist.conf");
    assert_eq!(cli(&["train", "--config", &cfg, "--set", "lr=abc"]).0, EXIT_USAGE);
    assert_eq!(cli(&["train", "--config", &cfg, "--set", "no_such_key=1"]).0, EXIT_USAGE);
}

#[test]
fn energy_prints_reductions() {
    let (code, out) = cli(&["energy", "--paper-values"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("backward reduction: 102×"), "{out}");
    assert!(out.contains("forward reduction: 73×"), "{out}");
    let (_, out) = cli(&["energy", "--paper-values", "--pair-factor", "2"]);
    assert!(out.contains("backward reduction: 51×"), "{out}");
}

#[test]
fn energy_without_rates_is_a_usage_error() {
    assert_eq!(cli(&["energy"]).0, EXIT_USAGE);
}

#[test]
fn oracle_on_scalar_toy() {
    let (code, out) = cli(&["oracle", "--config", &config("scalar_toy.conf")]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.contains("0.6667"), "{out}");
    assert!(out.contains("0.4000"), "{out}");
    assert!(out.contains("0.1333"), "{out}");
}

#[test]
fn small_verify_suites_pass() {
    let (code, out) = cli(&["verify", "coupled-pair", "--sequences", "50"]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.lines().last().unwrap().ends_with("result=pass"));
    let (code, out) = cli(&["verify", "forward", "--instances", "5"]);
    assert_eq!(code, EXIT_OK, "{out}");
}

#[test]
fn corrupt_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"SPIDECK1 not really").unwrap();
    let (code, _) = cli(&["energy", "--checkpoint", bad.to_str().unwrap()]);
    assert!(code == EXIT_FAILURE || code == EXIT_USAGE);
}
