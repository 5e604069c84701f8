use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "prior.steps=1200",
    "model.max_epochs=3",
    "filter.rollouts=16",
    "filter.steps_per_round=120",
    "filter.warmup=256",
    "filter.eval_rollouts=16",
    "filter.max_rounds=2",
    "filter.pass_fraction=0",
    "filter.plateau_tolerance=1e9",
    "control.env_steps=400",
    "control.warmup=150",
    "control.rollout_every=200",
    "control.rollouts=4",
    "control.eval_episodes=3",
];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dynasaur"));
    c.env("RUST_LOG", "warn");
    c
}

fn train(out: &Path, env: &str, extra: &[&str]) -> Output {
    let mut c = bin();
    c.args(["train", "--env", env, "--seed", "0", "--iters", "1", "--name", "run"]).arg("--out").arg(out);
    for kv in TINY {
        c.args(["--set", kv]);
    }
    c.args(extra).output().unwrap()
}

fn trained(env: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), env, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    (dir, run)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_a_complete_run_directory() {
    let (_tmp, run) = trained("cartpole");
    for f in ["config.toml", "seeds.json", "metrics.csv", "training.csv", "summary.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert!(run.join("checkpoint/manifest.json").exists());
    assert!(run.join("checkpoint/arrays.bin").exists());
    assert!(run.join("checkpoints/iter_001/manifest.json").exists());
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("dynasaur.metrics.v1,j,"));
    assert_eq!(metrics.lines().filter(|l| l.starts_with("iteration,")).count(), 1);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["completed"], true);
    assert_eq!(summary["iterations"], 1);
    assert!(summary["failures_cum"].is_u64());
    assert!(summary["final_return_mean"].is_number());
}

#[test]
fn rerunning_from_the_config_snapshot_is_bit_identical() {
    let (_tmp, run) = trained("slopecar");
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["train", "--name", "again", "--config"])
        .arg(run.join("config.toml"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let a = std::fs::read(run.join("checkpoint/arrays.bin")).unwrap();
    let b = std::fs::read(dir.path().join("again/checkpoint/arrays.bin")).unwrap();
    assert!(a == b, "checkpoints differ");
}

#[test]
fn default_config_echo_matches_published_values() {
    let out = bin().args(["train", "--env", "cartpole", "--profile", "paper", "--print-config"]).output().unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    let cfg: toml::Table = toml::from_str(&text).unwrap();
    assert_eq!(cfg["filter"]["gamma_sf"].as_float(), Some(0.99));
    assert_eq!(cfg["filter"]["c"].as_float(), Some(0.1));
}

#[test]
fn ablation_flag_is_recorded() {
    let out = bin()
        .args(["train", "--env", "cartpole", "--ablate", "no-regularization", "--print-config"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg: toml::Table = toml::from_str(&stdout(&out)).unwrap();
    assert_eq!(cfg["filter"]["c"].as_float(), Some(0.0));
    assert_eq!(cfg["ablation"]["no_regularization"].as_bool(), Some(true));
}

#[test]
fn unknown_config_key_fails_with_its_name() {
    let out = bin()
        .args(["train", "--env", "cartpole", "--set", "filter.not_a_key=3", "--print-config"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("filter.not_a_key"), "{}", stderr(&out));
}

#[test]
fn failed_runs_keep_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "slopecar", &["--set", "filter.pass_fraction=2"]);
    assert!(!out.status.success());
    let run = dir.path().join("run");
    assert!(run.join("config.toml").exists());
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["completed"], false);
    assert!(summary["error"].as_str().unwrap().contains("filter"));
}

#[test]
fn eval_contract() {
    let (_tmp, run) = trained("cartpole");
    let eval = |episodes: &str, extra: &[&str]| {
        bin()
            .args(["eval", "--episodes", episodes, "--checkpoint"])
            .arg(&run)
            .args(extra)
            .output()
            .unwrap()
    };
    let empty = eval("0", &[]);
    assert!(empty.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&empty)).unwrap();
    assert_eq!(v["episodes"], 0);

    let a = eval("4", &["--seed", "9"]);
    let b = eval("4", &["--seed", "9"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);

    // same seed and episode count as the in-training evaluation
    let same = eval("3", &[]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&same)).unwrap();
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let last = metrics.lines().last().unwrap();
    let logged: f64 = last.split(',').nth(3).unwrap().parse().unwrap();
    assert_eq!(v["return_mean"].as_f64().unwrap(), logged);

    let wrong = eval("1", &["--env", "slopecar"]);
    assert!(!wrong.status.success());
    assert!(stderr(&wrong).contains("cartpole"));
}

#[test]
fn filter_map_export() {
    let (tmp, run) = trained("cartpole");
    let csv = tmp.path().join("map.csv");
    let out = bin()
        .args(["export-filter-map", "--grid", "50x50", "--checkpoint"])
        .arg(&run)
        .arg("--out")
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "dynasaur.filter_map.v1,x,theta,x_dot,theta_dot,a_lo,a_hi");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').skip(1).map(|c| c.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2500);
    assert!(rows.iter().all(|r| r.len() == 6 && -1.0 <= r[4] && r[4] <= r[5] && r[5] <= 1.0));
}

#[test]
fn filter_map_needs_a_cartpole_checkpoint() {
    let (tmp, run) = trained("slopecar");
    let out = bin()
        .args(["export-filter-map", "--checkpoint"])
        .arg(&run)
        .arg("--out")
        .arg(tmp.path().join("map.csv"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("CartPole"), "{}", stderr(&out));
}

#[test]
fn oracle_dump() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("kernel.csv");
    let out = bin()
        .args(["oracle", "--pos-cells", "21", "--vel-cells", "31", "--horizon", "50", "--out"])
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("dynasaur.viability.v1,pos,vel,viable,exact_pos_bound\n"));
    assert_eq!(text.lines().count(), 1 + 21 * 31);
    assert!(stdout(&out).contains("viable fraction"));
}

#[test]
fn sweep_launches_one_run_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = bin();
    c.args(["sweep", "--env", "slopecar", "--iters", "1", "--seeds", "3,4"]).arg("--out").arg(dir.path());
    for kv in TINY {
        c.args(["--set", kv]);
    }
    let out = c.output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    for s in [3, 4] {
        assert!(dir.path().join(format!("slopecar-desk-s{s}/metrics.csv")).exists());
    }
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = bin();
    c.env("DYNASAUR_OUT", dir.path());
    c.args(["train", "--env", "slopecar", "--iters", "0", "--set", "prior.steps=300"]);
    let out = c.output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("slopecar-desk-s0/config.toml").exists());
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, iters: &str, resume: bool| {
        let mut c = bin();
        c.args(["train", "--env", "slopecar", "--seed", "5", "--iters", iters, "--name", name]).arg("--out").arg(dir.path());
        for kv in TINY {
            c.args(["--set", kv]);
        }
        if resume {
            c.arg("--resume");
        }
        let out = c.output().unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
    };
    run("straight", "2", false);
    run("split", "1", false);
    run("split", "2", true);
    let a = std::fs::read(dir.path().join("straight/checkpoint/arrays.bin")).unwrap();
    let b = std::fs::read(dir.path().join("split/checkpoint/arrays.bin")).unwrap();
    assert!(a == b, "resumed checkpoint differs");
    let rows = |n: &str| std::fs::read_to_string(dir.path().join(n).join("metrics.csv")).unwrap();
    let strip = |t: String| t.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>();
    // identical up to the wall-clock column
    assert_eq!(strip(rows("straight")), strip(rows("split")));
}
