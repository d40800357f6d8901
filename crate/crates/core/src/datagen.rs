//! Offline data collection with a noisy pure-pursuit controller.
//!
//! The controller chases a sequence of target waypoints. Each new target gets a
//! clipped random-walk position offset and a random-walk speed, which keeps the
//! vehicle wandering inside the lane. An Ornstein-Uhlenbeck steering perturbation
//! is available as an alternative exploration mode.

use std::f64::consts::FRAC_PI_2;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Vec2, WaypointPath};
use crate::sim::{Action, GridSpec, LaneEnv, MarkerGrid, Observation, SimConfig, TerminationReason, Track};

/// Distance at which the pursuit target counts as reached.
pub const ARRIVAL_RADIUS: f64 = 0.025;
pub const PURSUIT_MIN_SPEED: f64 = 0.2;
pub const PURSUIT_MAX_SPEED: f64 = 0.5;
pub const INITIAL_TARGET_SPEED: f64 = 0.35;

const DATASET_MAGIC: &[u8; 8] = b"LGVFDATA";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("dataset header: {0}")]
    Header(String),
    #[error("dataset truncated inside record {0}")]
    Truncated(usize),
    #[error("invalid collection config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One stored step. Frames are `[previous, current, next]`, so the observation
/// is frames 0..2 and the next observation is frames 1..3.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub frames: [Arc<MarkerGrid>; 3],
    pub speed: f64,
    pub prev_action: Action,
    pub action: Action,
    /// `(alpha, beta)` after the step.
    pub cumulant: [f64; 2],
    pub next_speed: f64,
    pub reward: f64,
    /// True only for out-of-lane termination; time limits do not cut bootstrapping.
    pub done: bool,
    pub rho: f64,
    pub episode: u32,
    pub track: u16,
    pub flipped: bool,
}

impl Transition {
    pub fn obs(&self) -> Observation {
        Observation {
            frames: [self.frames[0].clone(), self.frames[1].clone()],
            speed: self.speed,
            prev_action: self.prev_action,
        }
    }

    pub fn next_obs(&self) -> Observation {
        Observation {
            frames: [self.frames[1].clone(), self.frames[2].clone()],
            speed: self.next_speed,
            prev_action: self.action,
        }
    }

    /// Per-head continuation `gamma * (1 - done)`.
    pub fn continuation(&self, gammas: &[f64]) -> Vec<f64> {
        gammas.iter().map(|&g| if self.done { 0.0 } else { g }).collect()
    }
}

/// Mirror image of a transition: grids flipped, signed quantities negated.
pub fn flip_augment(t: &Transition) -> Transition {
    Transition {
        frames: [
            Arc::new(t.frames[0].flipped()),
            Arc::new(t.frames[1].flipped()),
            Arc::new(t.frames[2].flipped()),
        ],
        prev_action: t.prev_action.mirror(),
        action: t.action.mirror(),
        cumulant: [-t.cumulant[0], -t.cumulant[1]],
        flipped: !t.flipped,
        ..t.clone()
    }
}

/// Steers toward `target`, speed clipped to the pursuit range.
pub fn pure_pursuit_action(pose: &Pose, target: Vec2, target_speed: f64) -> Action {
    let d = target - pose.position;
    let steer = if d.x == 0.0 && d.y == 0.0 {
        0.0
    } else {
        let h = Vec2::from_heading(pose.yaw);
        // Signed angle from heading to the target bearing.
        h.cross(d).atan2(h.dot(d))
    };
    Action::new(
        steer.clamp(-FRAC_PI_2, FRAC_PI_2),
        target_speed.clamp(PURSUIT_MIN_SPEED, PURSUIT_MAX_SPEED),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PursuitState {
    /// Index into the target waypoint sequence.
    pub k: usize,
    pub pos_noise: Vec2,
    pub target_speed: f64,
    /// Number of targets issued so far.
    pub issued: u64,
}

impl PursuitState {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            pos_noise: Vec2::ZERO,
            target_speed: INITIAL_TARGET_SPEED,
            issued: 0,
        }
    }
}

/// Moves to the next target (wrapping) once the vehicle is within [`ARRIVAL_RADIUS`].
pub fn advance_target(pose: &Pose, target: Vec2, state: &PursuitState, n_targets: usize) -> PursuitState {
    if pose.position.distance(target) < ARRIVAL_RADIUS {
        PursuitState {
            k: (state.k + 1) % n_targets,
            ..*state
        }
    } else {
        *state
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetNoise {
    /// Per-component standard deviation of the position random walk.
    pub pos_std: f64,
    pub pos_clip: f64,
    /// Standard deviation of the speed random walk.
    pub speed_std: f64,
}

impl Default for TargetNoise {
    fn default() -> Self {
        Self {
            pos_std: 0.02,
            pos_clip: 0.3,
            speed_std: 0.02,
        }
    }
}

/// Issues the target for the current waypoint. The first call returns the bare
/// waypoint at the initial speed; later calls step both random walks.
pub fn perturb_target<R: Rng + ?Sized>(
    waypoint: Vec2,
    state: &PursuitState,
    noise: &TargetNoise,
    rng: &mut R,
) -> (Vec2, f64, PursuitState) {
    let mut next = *state;
    if state.issued > 0 {
        let nx: f64 = StandardNormal.sample(rng);
        let ny: f64 = StandardNormal.sample(rng);
        let nv: f64 = StandardNormal.sample(rng);
        next.pos_noise = Vec2::new(
            (state.pos_noise.x + noise.pos_std * nx).clamp(-noise.pos_clip, noise.pos_clip),
            (state.pos_noise.y + noise.pos_std * ny).clamp(-noise.pos_clip, noise.pos_clip),
        );
        next.target_speed = (state.target_speed + noise.speed_std * nv).clamp(PURSUIT_MIN_SPEED, PURSUIT_MAX_SPEED);
    }
    next.issued = state.issued + 1;
    (waypoint + next.pos_noise, next.target_speed, next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuParams {
    pub theta: f64,
    pub sigma: f64,
    pub dt: f64,
}

impl Default for OuParams {
    fn default() -> Self {
        Self {
            theta: 1.0,
            sigma: 0.1,
            dt: 0.01,
        }
    }
}

/// One Euler-Maruyama step toward zero mean, elementwise.
pub fn ou_step<R: Rng + ?Sized>(x: &[f64], p: &OuParams, rng: &mut R) -> Vec<f64> {
    x.iter()
        .map(|&xi| {
            let n: f64 = StandardNormal.sample(rng);
            xi - p.theta * xi * p.dt + p.sigma * p.dt.sqrt() * n
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exploration {
    /// Random-walk targets around the center waypoints.
    TargetWalk,
    /// Noiseless targets with OU noise added to steering.
    OuSteer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    pub sim: SimConfig,
    pub exploration: Exploration,
    pub noise: TargetNoise,
    pub ou: OuParams,
    /// Spacing between consecutive pursuit targets along the center line.
    pub target_spacing: f64,
    /// Also advance when the target falls behind the vehicle along the path.
    pub advance_when_passed: bool,
    pub steps_per_episode: usize,
    pub flip: bool,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            exploration: Exploration::TargetWalk,
            noise: TargetNoise::default(),
            ou: OuParams::default(),
            target_spacing: 0.5,
            advance_when_passed: true,
            steps_per_episode: 1200,
            flip: true,
        }
    }
}

impl CollectConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate().map_err(DatasetError::Config)?;
        if !(self.target_spacing > 0.0) {
            return Err(DatasetError::Config("target_spacing must be > 0".into()));
        }
        if self.steps_per_episode == 0 {
            return Err(DatasetError::Config("steps_per_episode must be > 0".into()));
        }
        if !(self.noise.pos_std >= 0.0 && self.noise.speed_std >= 0.0 && self.noise.pos_clip >= 0.0) {
            return Err(DatasetError::Config("noise parameters must be >= 0".into()));
        }
        Ok(())
    }
}

/// Pursuit target indices spaced roughly `spacing` apart along the path.
pub fn target_indices(path: &WaypointPath, spacing: f64) -> Vec<usize> {
    let count = ((path.length() / spacing).round() as usize).max(3);
    let n = path.len();
    let mut out = Vec::with_capacity(count);
    let mut i = 0;
    for j in 0..count {
        let s = path.length() * j as f64 / count as f64;
        while i + 1 < n && path.arclength(i + 1) <= s {
            i += 1;
        }
        out.push(i);
    }
    out
}

/// Pure pursuit over spaced center-line targets with optional random-walk noise.
#[derive(Debug, Clone, PartialEq)]
pub struct PursuitDriver {
    targets: Vec<usize>,
    state: PursuitState,
    target: Vec2,
    target_speed: f64,
    noise: TargetNoise,
    advance_when_passed: bool,
}

impl PursuitDriver {
    /// Starts at the first target strictly ahead of waypoint `start`.
    pub fn new<R: Rng + ?Sized>(
        path: &WaypointPath,
        start: usize,
        spacing: f64,
        noise: TargetNoise,
        advance_when_passed: bool,
        rng: &mut R,
    ) -> Self {
        let targets = target_indices(path, spacing);
        let first = targets.iter().position(|&i| i > start % path.len()).unwrap_or(0);
        let ps = PursuitState::new(first);
        let (target, target_speed, state) = perturb_target(path.point(targets[ps.k]), &ps, &noise, rng);
        Self {
            targets,
            state,
            target,
            target_speed,
            noise,
            advance_when_passed,
        }
    }

    pub fn target(&self) -> Vec2 {
        self.target
    }

    pub fn action(&self, pose: &Pose) -> Action {
        pure_pursuit_action(pose, self.target, self.target_speed)
    }

    /// Moves through as many targets as `pose` has reached or passed.
    pub fn advance<R: Rng + ?Sized>(&mut self, pose: &Pose, path: &WaypointPath, rng: &mut R) {
        let n = self.targets.len();
        for _ in 0..n {
            let ps = self.state;
            let mut moved = advance_target(pose, self.target, &ps, n);
            if moved.k == ps.k && self.advance_when_passed {
                let along = path.tangent(self.targets[ps.k]);
                if along.dot(self.target - pose.position) < 0.0 {
                    moved.k = (ps.k + 1) % n;
                }
            }
            if moved.k == ps.k {
                break;
            }
            let (t, v, next) = perturb_target(path.point(self.targets[moved.k]), &moved, &self.noise, rng);
            self.target = t;
            self.target_speed = v;
            self.state = next;
        }
    }
}

/// Statistics of one collected episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub steps: usize,
    pub reason: TerminationReason,
}

/// Runs one pursuit episode on `track` starting at waypoint `start`.
pub fn collect_episode<R: Rng + ?Sized>(
    track: &Arc<Track>,
    start: usize,
    cfg: &CollectConfig,
    episode: u32,
    track_id: u16,
    rng: &mut R,
) -> (Vec<Transition>, EpisodeSummary) {
    let sim = SimConfig {
        max_steps: cfg.steps_per_episode,
        ..cfg.sim
    };
    let mut env = LaneEnv::new(track.clone(), sim);
    let mut obs = env.reset(start, 0.0);
    let mut noise_cfg = cfg.noise;
    if cfg.exploration == Exploration::OuSteer {
        noise_cfg.pos_std = 0.0;
        noise_cfg.pos_clip = 0.0;
    }
    let mut driver = PursuitDriver::new(&track.path, start, cfg.target_spacing, noise_cfg, cfg.advance_when_passed, rng);
    let mut ou = [0.0];
    let mut out = Vec::with_capacity(cfg.steps_per_episode);
    let mut reason = TerminationReason::None;
    for _ in 0..cfg.steps_per_episode {
        let mut action = driver.action(&env.state().pose);
        if cfg.exploration == Exploration::OuSteer {
            ou = [ou_step(&ou, &cfg.ou, rng)[0]];
            action.steer = (action.steer + ou[0]).clamp(-FRAC_PI_2, FRAC_PI_2);
        }
        let (next_obs, res) = env.step(action);
        out.push(Transition {
            frames: [obs.frames[0].clone(), obs.frames[1].clone(), next_obs.frames[1].clone()],
            speed: obs.speed,
            prev_action: obs.prev_action,
            action: res.next_state.last_action,
            cumulant: [res.alpha, res.beta],
            next_speed: next_obs.speed,
            reward: res.reward,
            done: res.reason == TerminationReason::OutOfLane,
            rho: 1.0,
            episode,
            track: track_id,
            flipped: false,
        });
        obs = next_obs;
        if res.terminated {
            reason = res.reason;
            break;
        }
        driver.advance(&env.state().pose, &track.path, rng);
    }
    let steps = out.len();
    (out, EpisodeSummary { steps, reason })
}

/// JSON header of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub grid: GridSpec,
    pub dt: f64,
    pub tracks: Vec<String>,
    pub seed: u64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub transitions: Vec<Transition>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Transition counts per track id.
    pub fn per_track_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.header.tracks.len()];
        for t in &self.transitions {
            counts[t.track as usize] += 1;
        }
        counts
    }
}

/// Collects `episodes` episodes round-robin over `tracks`, alternating direction.
/// Flipped copies of every transition are appended after the originals.
pub fn collect_dataset(tracks: &[(String, Arc<Track>)], episodes: usize, seed: u64, cfg: &CollectConfig) -> Result<Dataset> {
    cfg.validate()?;
    if tracks.is_empty() {
        return Err(DatasetError::Config("no tracks given".into()));
    }
    let reversed: Vec<Arc<Track>> = tracks.iter().map(|(_, t)| Arc::new(t.reversed())).collect();
    let mut transitions = Vec::new();
    for e in 0..episodes {
        let tid = e % tracks.len();
        let backwards = (e / tracks.len()) % 2 == 1;
        let track = if backwards { &reversed[tid] } else { &tracks[tid].1 };
        let mut rng = episode_rng(seed, e as u64);
        let start = rng.random_range(0..track.path.len());
        let (ts, _) = collect_episode(track, start, cfg, e as u32, tid as u16, &mut rng);
        transitions.extend(ts);
    }
    if cfg.flip {
        let flipped: Vec<Transition> = transitions.iter().map(flip_augment).collect();
        transitions.extend(flipped);
    }
    Ok(Dataset {
        header: DatasetHeader {
            version: DATASET_VERSION,
            grid: cfg.sim.grid,
            dt: cfg.sim.dt,
            tracks: tracks.iter().map(|(n, _)| n.clone()).collect(),
            seed,
            episodes,
        },
        transitions,
    })
}

/// Independent reproducible stream for one episode.
pub fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

const FLAG_DONE: u8 = 1;
const FLAG_FLIPPED: u8 = 2;

/// Writes the dataset: magic `LGVFDATA`, `u32` header length, JSON header, then
/// fixed-size little-endian records until end of file.
pub fn write_dataset<W: Write>(w: W, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(w);
    let header = serde_json::to_vec(&ds.header).map_err(|e| DatasetError::Header(e.to_string()))?;
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    let cells = ds.header.grid.cells();
    for t in &ds.transitions {
        for f in &t.frames {
            if f.cells.len() != cells {
                return Err(DatasetError::Header(format!(
                    "frame has {} cells, header says {cells}",
                    f.cells.len()
                )));
            }
        }
        w.write_all(&t.episode.to_le_bytes())?;
        w.write_all(&t.track.to_le_bytes())?;
        let flags = (t.done as u8 * FLAG_DONE) | (t.flipped as u8 * FLAG_FLIPPED);
        w.write_all(&[flags])?;
        for v in [
            t.speed,
            t.prev_action.steer,
            t.prev_action.target_speed,
            t.action.steer,
            t.action.target_speed,
            t.cumulant[0],
            t.cumulant[1],
            t.next_speed,
            t.reward,
            t.rho,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for f in &t.frames {
            w.write_all(&f.cells)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<Dataset> {
    let mut r = BufReader::new(r);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(DatasetError::Header("bad magic".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut hbuf = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut hbuf)?;
    let header: DatasetHeader = serde_json::from_slice(&hbuf).map_err(|e| DatasetError::Header(e.to_string()))?;
    if header.version != DATASET_VERSION {
        return Err(DatasetError::Header(format!("unsupported version {}", header.version)));
    }
    let grid = header.grid;
    let cells = grid.cells();
    let rec_len = 4 + 2 + 1 + 10 * 8 + 3 * cells;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.len() % rec_len != 0 {
        return Err(DatasetError::Truncated(rest.len() / rec_len));
    }
    let mut transitions = Vec::with_capacity(rest.len() / rec_len);
    // Consecutive records share frames; reuse the previous Arc when bytes match.
    let mut last: Option<Arc<MarkerGrid>> = None;
    let mut intern = |bytes: &[u8]| -> Arc<MarkerGrid> {
        if let Some(g) = &last {
            if g.cells == bytes {
                return g.clone();
            }
        }
        let g = Arc::new(MarkerGrid {
            cols: grid.cols,
            rows: grid.rows,
            cells: bytes.to_vec(),
        });
        last = Some(g.clone());
        g
    };
    for rec in rest.chunks_exact(rec_len) {
        let episode = u32::from_le_bytes(rec[0..4].try_into().unwrap());
        let track = u16::from_le_bytes(rec[4..6].try_into().unwrap());
        let flags = rec[6];
        let f = |i: usize| f64::from_le_bytes(rec[7 + 8 * i..15 + 8 * i].try_into().unwrap());
        let fo = 7 + 80;
        let f0 = intern(&rec[fo..fo + cells]);
        let f1 = intern(&rec[fo + cells..fo + 2 * cells]);
        let f2 = intern(&rec[fo + 2 * cells..fo + 3 * cells]);
        transitions.push(Transition {
            frames: [f0, f1, f2],
            speed: f(0),
            prev_action: Action::new(f(1), f(2)),
            action: Action::new(f(3), f(4)),
            cumulant: [f(5), f(6)],
            next_speed: f(7),
            reward: f(8),
            done: flags & FLAG_DONE != 0,
            rho: f(9),
            episode,
            track,
            flipped: flags & FLAG_FLIPPED != 0,
        });
    }
    Ok(Dataset { header, transitions })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_dataset(std::fs::File::create(path)?, ds)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{TrackShape, TrackSpec};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_4;

    fn circle() -> Arc<Track> {
        Arc::new(Track::from_spec("circle", &TrackSpec::new(TrackShape::Circle { radius: 2.0 })).unwrap())
    }

    #[test]
    fn pursuit_examples() {
        let pose = Pose::new(Vec2::ZERO, 0.0, 0.3);
        let a = pure_pursuit_action(&pose, Vec2::new(1.0, 1.0), 0.3);
        assert_abs_diff_eq!(a.steer, FRAC_PI_4, epsilon = 1e-15);
        assert_eq!(pure_pursuit_action(&pose, Vec2::new(1.0, 0.0), 0.7).target_speed, 0.5);
        assert_eq!(pure_pursuit_action(&pose, Vec2::new(-1.0, 0.0), 0.3).steer, FRAC_PI_2);
        assert_eq!(pure_pursuit_action(&pose, Vec2::ZERO, 0.3).steer, 0.0);
    }

    #[test]
    fn advance_examples() {
        let pose = Pose::new(Vec2::ZERO, 0.0, 0.3);
        let st = PursuitState::new(3);
        assert_eq!(advance_target(&pose, Vec2::new(0.02, 0.0), &st, 10).k, 4);
        assert_eq!(advance_target(&pose, Vec2::new(0.03, 0.0), &st, 10).k, 3);
        let last = PursuitState::new(9);
        assert_eq!(advance_target(&pose, Vec2::new(0.0, 0.01), &last, 10).k, 0);
    }

    #[test]
    fn perturb_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let st = PursuitState::new(0);
        let wp = Vec2::new(1.0, 2.0);
        let (t, v, st) = perturb_target(wp, &st, &TargetNoise::default(), &mut rng);
        assert_eq!((t, v), (wp, 0.35));
        let quiet = TargetNoise {
            pos_std: 0.0,
            speed_std: 0.0,
            pos_clip: 0.3,
        };
        let st = PursuitState {
            pos_noise: Vec2::new(0.1, -0.2),
            ..st
        };
        let (t, _, _) = perturb_target(wp, &st, &quiet, &mut rng);
        assert_eq!(t, wp + Vec2::new(0.1, -0.2));

        let loud = TargetNoise {
            pos_std: 0.5,
            ..TargetNoise::default()
        };
        let mut s = PursuitState::new(0);
        for _ in 0..100_000 {
            let (_, _, n) = perturb_target(wp, &s, &loud, &mut rng);
            assert!(n.pos_noise.x.abs() <= 0.3 && n.pos_noise.y.abs() <= 0.3);
            s = n;
        }
    }

    #[test]
    fn ou_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let quiet = OuParams {
            sigma: 0.0,
            ..OuParams::default()
        };
        assert_eq!(ou_step(&[1.0], &quiet, &mut rng), vec![0.99]);
        assert_eq!(ou_step(&[0.0], &quiet, &mut rng), vec![0.0]);
    }

    #[test]
    fn flip_involution() {
        let track = circle();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = CollectConfig {
            steps_per_episode: 30,
            ..CollectConfig::default()
        };
        let (ts, _) = collect_episode(&track, 0, &cfg, 0, 0, &mut rng);
        for t in &ts {
            let f = flip_augment(t);
            assert_eq!(f.cumulant[0], -t.cumulant[0]);
            assert_eq!(f.action.steer, -t.action.steer);
            assert_eq!(f.speed, t.speed);
            assert_eq!(&flip_augment(&f), t);
        }
    }

    #[test]
    fn dataset_round_trip_and_counts() {
        let tracks = vec![("circle".to_string(), circle())];
        let cfg = CollectConfig {
            steps_per_episode: 100,
            ..CollectConfig::default()
        };
        let ds = collect_dataset(&tracks, 1, 9, &cfg).unwrap();
        assert_eq!(ds.len(), 200);
        let again = collect_dataset(&tracks, 1, 9, &cfg).unwrap();
        assert_eq!(ds, again);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let back = read_dataset(&buf[..]).unwrap();
        assert_eq!(back, ds);
        let mut buf2 = Vec::new();
        write_dataset(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
        assert!(matches!(read_dataset(&buf[..buf.len() - 3]), Err(DatasetError::Truncated(_))));
    }
}
