use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "episodes=1",
    "train_tracks=[\"circle_small\", \"figure8\"]",
    "test_tracks=[\"oval\"]",
    "collect.steps_per_episode=80",
    "collect.sim.max_steps=80",
    "gvf.warmup=20",
    "gvf.batch=16",
    "bcq.batch=16",
    "budget.steps=20",
    "budget.ddpg_steps=60",
    "ddpg.warmup=20",
    "ddpg.batch=16",
    "eval.seconds=2.0",
];

fn lanegvf(run_dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lanegvf"));
    cmd.env_remove("LANEGVF_RUN_ROOT").arg("--run-dir").arg(run_dir);
    for s in TINY {
        cmd.arg("--set").arg(s);
    }
    cmd.args(args).output().unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn pipeline(dir: &Path) {
    for step in [
        &["collect"][..],
        &["train-gvf"],
        &["train-bcq", "--method", "gvf"],
        &["train-bcq", "--method", "e2e"],
        &["train-ddpg"],
        &["eval", "--damaged"],
    ] {
        ok(lanegvf(dir, step));
    }
}

#[test]
fn pipeline_is_deterministic_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in ["dataset.bin", "gvf.ckpt", "gvf_bcq.ckpt", "e2e_bcq.ckpt", "gvf_ddpg.ckpt", "report/episodes.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }
    let episodes = std::fs::read_to_string(a.path().join("report/episodes.csv")).unwrap();
    // 4 methods x 1 track x 2 directions x {clean, damaged}, plus the header.
    assert_eq!(episodes.lines().count(), 1 + 16);
    for m in ["gvf_bcq", "e2e_bcq", "gvf_ddpg", "pursuit"] {
        assert!(episodes.contains(m), "missing {m}");
    }
    assert!(a.path().join("report/summary.csv").exists());
    assert!(a.path().join("config.toml").exists());

    let merged = tempfile::tempdir().unwrap();
    let o = ok(Command::new(env!("CARGO_BIN_EXE_lanegvf"))
        .arg("report")
        .arg("--out")
        .arg(merged.path())
        .arg(a.path())
        .arg(b.path())
        .output()
        .unwrap());
    assert!(o.status.success());
    let all = std::fs::read_to_string(merged.path().join("episodes.csv")).unwrap();
    assert_eq!(all.lines().count(), 1 + 32);
}

#[test]
fn different_seeds_give_different_data() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(lanegvf(a.path(), &["--seed", "1", "collect"]));
    ok(lanegvf(b.path(), &["--seed", "2", "collect"]));
    assert_ne!(std::fs::read(a.path().join("dataset.bin")).unwrap(), std::fs::read(b.path().join("dataset.bin")).unwrap());
}

#[test]
fn usage_errors_exit_with_2() {
    let d = tempfile::tempdir().unwrap();
    let o = lanegvf(d.path(), &["--set", "gvf.no_such_key=1", "config"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));

    let o = lanegvf(d.path(), &["--set", "gvf.lr=-1", "config"]);
    assert_eq!(o.status.code(), Some(2));

    // Missing inputs name the command that produces them.
    let o = lanegvf(d.path(), &["train-gvf"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("collect"));

    let o = lanegvf(d.path(), &["eval", "--methods", "gvf-bcq"]);
    assert_eq!(o.status.code(), Some(2));

    let o = lanegvf(d.path(), &["--set", "train_tracks=[\"nope\"]", "collect"]);
    assert_eq!(o.status.code(), Some(2));

    // Nothing was written by the failed commands.
    assert!(!d.path().join("dataset.bin").exists());
}

#[test]
fn corrupt_checkpoint_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    ok(lanegvf(d.path(), &["collect"]));
    std::fs::write(d.path().join("gvf.ckpt"), b"not a checkpoint").unwrap();
    let o = lanegvf(d.path(), &["train-bcq", "--method", "gvf"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_round_trips_through_run_dir() {
    let d = tempfile::tempdir().unwrap();
    let o = ok(lanegvf(d.path(), &["--seed", "7", "config"]));
    let printed = String::from_utf8(o.stdout).unwrap();
    assert!(printed.contains("seed = 7"));
    assert!(printed.contains("episodes = 1"));

    let cfg = d.path().join("given.toml");
    std::fs::write(&cfg, "seed = 3\nepisodes = 2\n").unwrap();
    let o = ok(Command::new(env!("CARGO_BIN_EXE_lanegvf"))
        .arg("--config")
        .arg(&cfg)
        .arg("config")
        .output()
        .unwrap());
    let printed = String::from_utf8(o.stdout).unwrap();
    assert!(printed.contains("seed = 3") && printed.contains("episodes = 2"));
}

#[test]
fn tracks_command_writes_every_layout() {
    let d = tempfile::tempdir().unwrap();
    ok(lanegvf(d.path(), &["tracks"]));
    let dir = d.path().join("tracks");
    for name in lanegvf::catalog::all_names() {
        assert!(dir.join(format!("{name}.csv")).exists(), "missing {name}");
    }
    let index = std::fs::read_to_string(dir.join("index.csv")).unwrap();
    assert_eq!(index.lines().count(), 1 + 9);
}
