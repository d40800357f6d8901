//! Run configuration and the run-directory layout shared by the CLI and tests.
//!
//! A run is configured by one TOML file whose sections mirror the module
//! configs. Values resolve as defaults, then file, then `key.path=value`
//! overrides. The top-level `seed` is copied into every module seed.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog;
use crate::datagen::CollectConfig;
use crate::eval::{ReportRow, Trajectory};
use crate::gvf::GvfConfig;
use crate::policy::{evaluate_policy, BcqConfig, Controller, DdpgConfig, EvalConfig, PolicyError};
use crate::sim::{SimConfig, Track};

/// Environment variable naming the directory that relative run dirs live under.
pub const RUN_ROOT_ENV: &str = "LANEGVF_RUN_ROOT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse: {0}")]
    Parse(String),
    #[error("override {0:?}: {1}")]
    Override(String, String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budget {
    /// Offline updates shared by the two GVF-BCQ phases; E2E-BCQ gets all of them.
    pub steps: usize,
    pub gvf_fraction: f64,
    /// Environment steps of online GVF-DDPG.
    pub ddpg_steps: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            steps: 4000,
            gvf_fraction: 0.5,
            ddpg_steps: 5000,
        }
    }
}

impl Budget {
    pub fn gvf_steps(&self) -> usize {
        (self.steps as f64 * self.gvf_fraction).round() as usize
    }

    pub fn bcq_steps(&self) -> usize {
        self.steps - self.gvf_steps()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub train_tracks: Vec<String>,
    pub test_tracks: Vec<String>,
    /// Collected episodes, round-robin over the training tracks.
    pub episodes: usize,
    pub collect: CollectConfig,
    pub gvf: GvfConfig,
    pub bcq: BcqConfig,
    pub ddpg: DdpgConfig,
    pub eval: EvalConfig,
    pub budget: Budget,
}

impl Default for RunConfig {
    /// Desk-scale run: about 48k transitions and a few thousand updates.
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("run"),
            train_tracks: catalog::TRAIN_TRACKS.iter().map(|s| s.to_string()).collect(),
            test_tracks: catalog::TEST_TRACKS.iter().map(|s| s.to_string()).collect(),
            episodes: 20,
            collect: CollectConfig::default(),
            gvf: GvfConfig {
                batch: 64,
                warmup: 2000,
                lr: 3e-4,
                behavior_lr: 3e-4,
                ..GvfConfig::default()
            },
            bcq: BcqConfig {
                batch: 64,
                hidden: vec![64, 64],
                lr: 3e-4,
                ..BcqConfig::default()
            },
            ddpg: DdpgConfig::default(),
            eval: EvalConfig {
                seconds: 120.0,
                ..EvalConfig::default()
            },
            budget: Budget::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML document on top of the defaults.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `a.b.c=value` overrides. Values parse as TOML, falling back to
    /// a bare string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut root = toml::Table::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::Override(o.clone(), "expected key=value".into()))?;
            let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
                Ok(mut t) => t.remove("v").unwrap(),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            let parts: Vec<&str> = key.trim().split('.').collect();
            let mut table = &mut root;
            for p in &parts[..parts.len() - 1] {
                table = table
                    .get_mut(*p)
                    .and_then(|v| v.as_table_mut())
                    .ok_or_else(|| ConfigError::Override(o.clone(), format!("no section {p:?}")))?;
            }
            let last = parts[parts.len() - 1];
            if !table.contains_key(last) {
                return Err(ConfigError::Override(o.clone(), format!("unknown key {last:?}")));
            }
            table.insert(last.to_string(), value);
        }
        root.try_into().map_err(|e: toml::de::Error| ConfigError::Override(overrides.join(" "), e.to_string()))
    }

    /// Copies the global seed into every module.
    pub fn seeded(mut self) -> Self {
        self.gvf.seed = self.seed;
        self.bcq.seed = self.seed;
        self.ddpg.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        self.collect.validate().map_err(|e| inv(e.to_string()))?;
        self.gvf.validate().map_err(|e| inv(e.to_string()))?;
        self.bcq.validate().map_err(|e| inv(e.to_string()))?;
        self.ddpg.validate().map_err(|e| inv(e.to_string()))?;
        for name in self.train_tracks.iter().chain(&self.test_tracks) {
            if catalog::track_spec(name).is_none() {
                return Err(inv(format!("unknown track {name:?}")));
            }
        }
        if self.train_tracks.is_empty() || self.test_tracks.is_empty() {
            return Err(inv("train_tracks and test_tracks must be nonempty".into()));
        }
        if self.episodes == 0 {
            return Err(inv("episodes must be > 0".into()));
        }
        if !(self.budget.gvf_fraction > 0.0 && self.budget.gvf_fraction < 1.0) {
            return Err(inv("budget.gvf_fraction must be in (0, 1)".into()));
        }
        if self.budget.steps < 2 {
            return Err(inv("budget.steps must be >= 2".into()));
        }
        if !(self.eval.seconds >= 3.0 * self.collect.sim.dt) || !(self.eval.max_speed > 0.0) {
            return Err(inv("eval.seconds must cover 3 steps and eval.max_speed must be > 0".into()));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(inv("out_dir is empty".into()));
        }
        Ok(())
    }

    /// Simulator settings for evaluation rollouts.
    pub fn eval_sim(&self) -> SimConfig {
        self.collect.sim
    }
}

/// Joins a relative run dir onto `root` when one is given.
pub fn resolve_run_dir(out_dir: &Path, root: Option<&Path>) -> PathBuf {
    match root {
        Some(r) if out_dir.is_relative() => r.join(out_dir),
        _ => out_dir.to_path_buf(),
    }
}

/// File names inside a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn tracks(&self) -> PathBuf {
        self.root.join("tracks")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.bin")
    }
    pub fn gvf(&self) -> PathBuf {
        self.root.join("gvf.ckpt")
    }
    pub fn gvf_log(&self) -> PathBuf {
        self.root.join("gvf_train.csv")
    }
    pub fn bcq(&self, method: &str) -> PathBuf {
        self.root.join(format!("{method}.ckpt"))
    }
    pub fn bcq_log(&self, method: &str) -> PathBuf {
        self.root.join(format!("{method}_train.csv"))
    }
    pub fn ddpg(&self) -> PathBuf {
        self.root.join("gvf_ddpg.ckpt")
    }
    pub fn ddpg_gvf(&self) -> PathBuf {
        self.root.join("gvf_ddpg_predictor.ckpt")
    }
    pub fn ddpg_log(&self) -> PathBuf {
        self.root.join("gvf_ddpg_train.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Builds named catalog tracks, optionally with damaged markings.
pub fn build_tracks(names: &[String], damage_seed: Option<u64>) -> Result<Vec<(String, Arc<Track>)>, ConfigError> {
    names
        .iter()
        .map(|n| {
            let mut spec = catalog::track_spec(n).ok_or_else(|| ConfigError::Invalid(format!("unknown track {n:?}")))?;
            if let Some(seed) = damage_seed {
                spec.damage = Some(catalog::default_damage(seed));
            }
            let t = Track::from_spec(n.as_str(), &spec).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            Ok((n.clone(), Arc::new(t)))
        })
        .collect()
}

/// Rolls `ctrl` out on every track in both directions.
pub fn evaluate_on_tracks(
    ctrl: &mut dyn Controller,
    tracks: &[(String, Arc<Track>)],
    sim: &SimConfig,
    ecfg: &EvalConfig,
    seed: u64,
    damaged: bool,
) -> Result<Vec<(ReportRow, Trajectory)>, PolicyError> {
    let mut rows = Vec::with_capacity(2 * tracks.len());
    for (name, t) in tracks {
        for (dir, tr) in [("ccw", t.clone()), ("cw", Arc::new(t.reversed()))] {
            let (m, traj) = evaluate_policy(ctrl, tr, sim, ecfg)?;
            let method = ctrl.name().to_string();
            rows.push((ReportRow::new(&method, name, dir, damaged, seed, &m), traj));
        }
    }
    Ok(rows)
}
