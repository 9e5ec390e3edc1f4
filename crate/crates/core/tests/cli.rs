//! End-to-end runs of the `uaplab` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use uaplab::attacks::PerturbationFile;
use uaplab::gridnav::{GridNavEnv, Suite};
use uaplab::mdp::{Environment, NormOrder, Perturbation, Shape};
use uaplab::policy::PolicyNet;

fn uaplab(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_uaplab"));
    cmd.args(args).env_remove("UAPLAB_SEED").env_remove("UAPLAB_JOBS");
    cmd
}

fn run(args: &[&str]) -> Output {
    uaplab(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Untrained network with the grid observation size, saved as a checkpoint.
fn random_victim(dir: &Path) -> PathBuf {
    let env = GridNavEnv::heldout(Suite::Rooms);
    let net = PolicyNet::new(env.observation_dim(), &[16], 4, 3).unwrap();
    let path = dir.join("victim.json");
    net.save(&path).unwrap();
    path
}

fn footer(csv: &str) -> serde_json::Value {
    let line = csv.lines().find_map(|l| l.strip_prefix("# ")).unwrap();
    serde_json::from_str(line).unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["bogus"])), 1);
    assert_eq!(code(&run(&["eval", "--suite", "rooms"])), 1);
    assert_eq!(code(&run(&["attack", "--method", "nope", "--victim", "v", "--suite", "rooms", "--out", "o"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = run(&["eval", "--victim", s(&missing), "--suite", "rooms"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let out = run(&["table1", "--victims", s(dir.path()), "--suites", "maze", "--out", s(&dir.path().join("t.csv"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("maze.json"));
    assert_eq!(code(&run(&["--jobs", "0", "gradcheck", "--fixtures", "1"])), 2);
}

#[test]
fn gradcheck_passes_and_flags_impossible_tolerance() {
    let out = run(&["gradcheck", "--fixtures", "4", "--seed", "3"]);
    assert_eq!(code(&out), 0);
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 5);
    assert_eq!(code(&run(&["gradcheck", "--fixtures", "4", "--tol", "1e-30"])), 2);
}

#[test]
fn config_precedence_is_flags_then_env_then_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    std::fs::write(&config, "[gradcheck]\nfixtures = 2\nseed = 11\n").unwrap();
    let seed_of = |cmd: &mut Command| -> u64 {
        let out = cmd.output().unwrap();
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        footer(&String::from_utf8(out.stdout).unwrap())["config"]["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(&mut uaplab(&["gradcheck", "--fixtures", "1"])), 0);
    assert_eq!(seed_of(&mut uaplab(&["--config", s(&config), "gradcheck"])), 11);
    assert_eq!(seed_of(uaplab(&["--config", s(&config), "gradcheck"]).env("UAPLAB_SEED", "5")), 5);
    assert_eq!(seed_of(uaplab(&["--config", s(&config), "gradcheck", "--seed", "9"]).env("UAPLAB_SEED", "5")), 9);

    std::fs::write(&config, "[gradcheck]\nfixturez = 2\n").unwrap();
    assert_eq!(code(&run(&["--config", s(&config), "gradcheck"])), 2);
}

#[test]
fn zero_perturbation_file_matches_clean_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let victim = random_victim(dir.path());
    let dim = GridNavEnv::heldout(Suite::Rooms).observation_dim();
    let zero = Perturbation::zeros(dim, 0.5 * (dim as f64).sqrt(), NormOrder::L2);
    let zero_path = dir.path().join("zero.json");
    PerturbationFile::new(&zero, 0.5, Shape { rows: 7, cols: 7, channels: 3 }, &"zero")
        .unwrap()
        .save(&zero_path)
        .unwrap();
    let clean = run(&["eval", "--victim", s(&victim), "--suite", "rooms", "--seed", "4"]);
    let zeroed =
        run(&["eval", "--victim", s(&victim), "--suite", "rooms", "--seed", "4", "--perturbation", s(&zero_path)]);
    assert_eq!(code(&clean), 0);
    assert_eq!(clean.stdout, zeroed.stdout);
}

#[test]
fn pipeline_outputs_are_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let victim = random_victim(dir.path());
    // paths end up in the recorded configs, so every run writes to the same place
    let outputs = |jobs: &str| -> Vec<Vec<u8>> {
        let p = |name: &str| dir.path().join(name);
        let attack = run(&[
            "--jobs", jobs, "attack", "--method", "reward-rtg", "--victim", s(&victim), "--suite", "rooms",
            "--outer-steps", "2", "--traj-per-step", "3", "--seed", "1", "--out", s(&p("delta.json")),
            "--trajectories", s(&p("sampled.json")),
        ]);
        assert_eq!(code(&attack), 0, "{}", String::from_utf8_lossy(&attack.stderr));
        let eval = run(&[
            "--jobs", jobs, "eval", "--victim", s(&victim), "--suite", "rooms", "--perturbation",
            s(&p("delta.json")), "--out", s(&p("eval.csv")), "--trajectories", s(&p("eval-traj.json")),
        ]);
        assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
        let render = run(&[
            "--jobs", jobs, "render", "--victim", s(&victim), "--suite", "rooms", "--episode", "3",
            "--ascii", s(&p("ep.txt")), "--ppm", s(&p("ep.ppm")),
        ]);
        assert_eq!(code(&render), 0);
        ["delta.json", "sampled.json", "eval.csv", "eval-traj.json", "ep.txt", "ep.ppm"]
            .iter()
            .map(|n| {
                let bytes = std::fs::read(p(n)).unwrap();
                std::fs::remove_file(p(n)).unwrap();
                bytes
            })
            .collect()
    };
    let first = outputs("1");
    assert_eq!(first, outputs("1"));
    assert_eq!(first, outputs("3"));
}

#[test]
fn train_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let go = |jobs: &str| -> (Vec<u8>, Vec<u8>) {
        let ckpt = dir.path().join("victim.json");
        let log = dir.path().join("log.csv");
        let out = run(&[
            "--jobs", jobs, "train", "--iterations", "2", "--batch-episodes", "4", "--gate", "0", "--out",
            s(&ckpt), "--log", s(&log),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        (std::fs::read(ckpt).unwrap(), std::fs::read(log).unwrap())
    };
    let a = go("1");
    assert_eq!(a, go("1"));
    assert_eq!(a, go("2"));
}

#[test]
fn render_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let victim = random_victim(dir.path());
    let out = run(&["render", "--victim", s(&victim), "--suite", "rooms", "--episode", "0", "--seed", "2"]);
    assert_eq!(code(&out), 0);
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/render_rooms_ep0_seed2.txt");
    if std::env::var_os("UAPLAB_BLESS").is_some() {
        std::fs::write(&golden, &out.stdout).unwrap();
    }
    assert_eq!(String::from_utf8(out.stdout).unwrap(), std::fs::read_to_string(golden).unwrap());
}
