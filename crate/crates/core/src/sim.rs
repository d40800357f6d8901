//! 10 Hz kinematic vehicle on a track with a synthetic marker-grid camera.
//!
//! The vehicle is a unicycle: yaw rate `k_steer * steer * v`, speed relaxing
//! toward the commanded target speed with a first-order lag. Observations are
//! ego-frame occupancy grids of lane-marking points ahead of the vehicle.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    self, build_track, lane_state, DamageSpec, LaneState, Pose, TrackSpec, Vec2, WaypointPath, WindowState,
};

pub const STEER_LIMIT: f64 = FRAC_PI_2;
pub const MIN_TARGET_SPEED: f64 = 0.1;
pub const MAX_TARGET_SPEED: f64 = 0.6;
/// Length of a marker segment that damage deletes as a unit.
pub const DAMAGE_SEGMENT: f64 = 0.2;
/// Length of one spurious distractor segment.
pub const DISTRACTOR_LENGTH: f64 = 0.15;
const MARKER_SPACING: f64 = 0.0125;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub steer: f64,
    pub target_speed: f64,
}

impl Action {
    pub const fn new(steer: f64, target_speed: f64) -> Self {
        Self { steer, target_speed }
    }

    pub fn clipped(self) -> Self {
        Self {
            steer: self.steer.clamp(-STEER_LIMIT, STEER_LIMIT),
            target_speed: self.target_speed.clamp(MIN_TARGET_SPEED, MAX_TARGET_SPEED),
        }
    }

    pub fn mirror(self) -> Self {
        Self {
            steer: -self.steer,
            target_speed: self.target_speed,
        }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.steer, self.target_speed]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Lateral cells.
    pub cols: usize,
    /// Forward cells.
    pub rows: usize,
    /// Forward extent in meters, starting at the vehicle.
    pub forward: f64,
    /// Lateral extent in meters, centered on the vehicle.
    pub lateral: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            cols: 32,
            rows: 16,
            forward: 2.0,
            lateral: 1.2,
        }
    }
}

impl GridSpec {
    pub fn cells(&self) -> usize {
        self.cols * self.rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub substeps: usize,
    /// Speed lag time constant in seconds.
    pub speed_tau: f64,
    pub k_steer: f64,
    pub max_steps: usize,
    pub grid: GridSpec,
    pub reward_scale: f64,
    /// `-1` penalizes distance from center; `+1` reproduces the literal formula.
    pub reward_alpha_sign: f64,
    pub initial_speed: f64,
    /// Target speed treated as the command issued before the first step.
    pub initial_command: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            substeps: 5,
            speed_tau: 0.3,
            k_steer: 4.0,
            max_steps: 1200,
            grid: GridSpec::default(),
            reward_scale: 1.0,
            reward_alpha_sign: -1.0,
            initial_speed: 0.0,
            initial_command: 0.35,
        }
    }
}

impl SimConfig {
    pub fn evaluation() -> Self {
        Self {
            max_steps: 3000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.dt > 0.0) || self.substeps == 0 || !(self.speed_tau > 0.0) {
            return Err("dt, substeps, and speed_tau must be positive".into());
        }
        if self.grid.cols == 0 || self.grid.rows == 0 || self.grid.cols % 2 != 0 {
            return Err("grid needs a positive row count and an even column count".into());
        }
        if !(self.grid.forward > 0.0 && self.grid.lateral > 0.0) {
            return Err("grid extents must be positive".into());
        }
        if self.reward_alpha_sign != 1.0 && self.reward_alpha_sign != -1.0 {
            return Err("reward_alpha_sign must be +1 or -1".into());
        }
        if self.max_steps == 0 {
            return Err("max_steps must be positive".into());
        }
        Ok(())
    }
}

/// Marker points of a track, after damage.
#[derive(Debug, Clone, PartialEq)]
pub struct Markings {
    pub points: Vec<Vec2>,
}

impl Markings {
    /// Lane boundaries at `+-half_width` from the center line, with damage applied.
    pub fn generate(path: &WaypointPath, half_width: f64, damage: Option<&DamageSpec>) -> Markings {
        let n = path.len();
        let mut rng = damage.map(|d| ChaCha8Rng::seed_from_u64(d.rng_seed));
        let nseg = (path.length() / DAMAGE_SEGMENT).ceil() as usize;
        // One deletion draw per boundary segment, left then right.
        let deleted: Vec<[bool; 2]> = (0..nseg)
            .map(|_| match (&mut rng, damage) {
                (Some(r), Some(d)) => [r.random::<f64>() < d.deletion_fraction, r.random::<f64>() < d.deletion_fraction],
                _ => [false, false],
            })
            .collect();
        let mut points = Vec::new();
        for i in 0..n {
            let a = path.point(i);
            let b = path.point(i + 1);
            let gap = a.distance(b);
            let pieces = (gap / MARKER_SPACING).ceil().max(1.0) as usize;
            let ta = path.tangent(i);
            let tb = path.tangent(i + 1);
            for k in 0..pieces {
                let t = k as f64 / pieces as f64;
                let s = path.arclength(i) + gap * t;
                let c = a + (b - a) * t;
                let tan = ta * (1.0 - t) + tb * t;
                let normal = Vec2::new(-tan.y, tan.x) * (1.0 / tan.norm());
                let seg = ((s / DAMAGE_SEGMENT) as usize).min(nseg - 1);
                if !deleted[seg][0] {
                    points.push(c + normal * half_width);
                }
                if !deleted[seg][1] {
                    points.push(c - normal * half_width);
                }
            }
        }
        if let (Some(r), Some(d)) = (&mut rng, damage) {
            let count = (d.distractor_density * path.length()).round() as usize;
            for _ in 0..count {
                let i = r.random_range(0..n);
                let tan = path.tangent(i);
                let normal = Vec2::new(-tan.y, tan.x);
                let off = r.random_range(-(half_width + 0.3)..(half_width + 0.3));
                let start = path.point(i) + normal * off;
                let dir = Vec2::from_heading(r.random_range(-std::f64::consts::PI..std::f64::consts::PI));
                let pieces = (DISTRACTOR_LENGTH / MARKER_SPACING).ceil() as usize;
                for k in 0..=pieces {
                    points.push(start + dir * (DISTRACTOR_LENGTH * k as f64 / pieces as f64));
                }
            }
        }
        Markings { points }
    }

    pub fn mirrored(&self) -> Markings {
        Markings {
            points: self.points.iter().map(|p| p.mirror()).collect(),
        }
    }
}

/// A built track: center line, lane half width, and rendered markings.
#[derive(Debug, Clone)]
pub struct Track {
    pub name: String,
    pub path: WaypointPath,
    pub half_width: f64,
    pub markings: Markings,
}

impl Track {
    pub fn from_spec(name: impl Into<String>, spec: &TrackSpec) -> geometry::Result<Track> {
        let path = build_track(spec)?;
        let markings = Markings::generate(&path, spec.half_width, spec.damage.as_ref());
        Ok(Track {
            name: name.into(),
            path,
            half_width: spec.half_width,
            markings,
        })
    }

    pub fn from_path(name: impl Into<String>, path: WaypointPath, half_width: f64, damage: Option<&DamageSpec>) -> Track {
        let markings = Markings::generate(&path, half_width, damage);
        Track {
            name: name.into(),
            path,
            half_width,
            markings,
        }
    }

    /// Same geometry driven in the opposite direction.
    pub fn reversed(&self) -> Track {
        Track {
            name: format!("{}-rev", self.name),
            path: self.path.reversed(),
            half_width: self.half_width,
            markings: self.markings.clone(),
        }
    }

    pub fn mirrored(&self) -> Track {
        Track {
            name: format!("{}-mirror", self.name),
            path: self.path.mirrored(),
            half_width: self.half_width,
            markings: self.markings.mirrored(),
        }
    }

    pub fn window(&self, prev_index: usize) -> Option<WindowState> {
        self.path.needs_window().then(|| WindowState::new(prev_index))
    }
}

/// One ego-frame occupancy grid, row-major with row 0 nearest the vehicle.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MarkerGrid {
    pub cols: usize,
    pub rows: usize,
    pub cells: Vec<u8>,
}

impl MarkerGrid {
    pub fn zeros(spec: &GridSpec) -> Self {
        Self {
            cols: spec.cols,
            rows: spec.rows,
            cells: vec![0; spec.cells()],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.cols + col]
    }

    pub fn flipped(&self) -> MarkerGrid {
        let mut cells = self.cells.clone();
        for row in cells.chunks_mut(self.cols) {
            row.reverse();
        }
        MarkerGrid {
            cols: self.cols,
            rows: self.rows,
            cells,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.cells.iter().all(|&c| c == 0)
    }
}

/// Rasterizes the markings visible from `pose`.
///
/// Points are splatted bilinearly and cells keep the maximum weight, so the
/// result does not depend on point order. Lateral placement uses `|l|` plus the
/// sign of `l`, which makes a mirrored scene render to the exactly flipped grid.
pub fn render_observation(pose: &Pose, markings: &Markings, grid: &GridSpec) -> MarkerGrid {
    let mut acc = vec![0.0f64; grid.cells()];
    let heading = Vec2::from_heading(pose.yaw);
    let half_cols = grid.cols / 2;
    let cw = grid.lateral / grid.cols as f64;
    let rh = grid.forward / grid.rows as f64;
    let half_lat = grid.lateral / 2.0;
    for &q in &markings.points {
        let d = q - pose.position;
        let f = heading.dot(d);
        if !(0.0..grid.forward).contains(&f) {
            continue;
        }
        let l = heading.cross(d);
        let al = l.abs();
        if al >= half_lat {
            continue;
        }
        let left = !l.is_sign_negative();
        // Column on the point's own side, counted outward from the center.
        let side_col = |k: usize| if left { half_cols + k } else { half_cols - 1 - k };
        let other_col = |k: usize| if left { half_cols - 1 - k } else { half_cols + k };
        let u = al / cw - 0.5;
        let mut lat: [(usize, f64); 2] = [(0, 0.0); 2];
        if u < 0.0 {
            lat[0] = (side_col(0), 1.0 + u);
            lat[1] = (other_col(0), -u);
        } else {
            let k = u.floor();
            let frac = u - k;
            let k = k as usize;
            lat[0] = (side_col(k), 1.0 - frac);
            lat[1] = if k + 1 < half_cols { (side_col(k + 1), frac) } else { (side_col(k), 0.0) };
        }
        let v = (f / rh - 0.5).max(0.0);
        let r0 = (v.floor() as usize).min(grid.rows - 1);
        let fr = v - r0 as f64;
        let rows = [(r0, 1.0 - fr), ((r0 + 1).min(grid.rows - 1), fr)];
        for &(r, wr) in &rows {
            for &(c, wc) in &lat {
                let cell = &mut acc[r * grid.cols + c];
                *cell = cell.max(wr * wc);
            }
        }
    }
    MarkerGrid {
        cols: grid.cols,
        rows: grid.rows,
        cells: acc.iter().map(|&w| (w.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub pose: Pose,
    pub last_action: Action,
    pub step_count: usize,
    /// Nearest waypoint index at this pose; seeds the sliding window.
    pub lane_index: usize,
}

impl VehicleState {
    pub fn mirror(&self) -> VehicleState {
        VehicleState {
            pose: self.pose.mirror(),
            last_action: self.last_action.mirror(),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    None,
    OutOfLane,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: VehicleState,
    pub observation: MarkerGrid,
    pub reward: f64,
    pub alpha: f64,
    pub beta: f64,
    pub terminated: bool,
    pub reason: TerminationReason,
}

/// `scale * v * (cos(beta) + sign * |alpha|)`.
pub fn reward(v: f64, alpha: f64, beta: f64, cfg: &SimConfig) -> f64 {
    cfg.reward_scale * v * (beta.cos() + cfg.reward_alpha_sign * alpha.abs())
}

/// Integrates the vehicle for one control period. Deterministic and mirror-equivariant.
pub fn integrate(pose: &Pose, action: Action, cfg: &SimConfig) -> Pose {
    let a = action.clipped();
    let h = cfg.dt / cfg.substeps as f64;
    let decay = (-h / cfg.speed_tau).exp();
    let mut p = pose.position;
    let mut yaw = pose.yaw;
    let mut v = pose.speed;
    for _ in 0..cfg.substeps {
        let v1 = a.target_speed + (v - a.target_speed) * decay;
        let vm = 0.5 * (v + v1);
        let dyaw = cfg.k_steer * a.steer * vm * h;
        let mid = yaw + 0.5 * dyaw;
        p += Vec2::new(mid.cos(), mid.sin()) * (vm * h);
        yaw += dyaw;
        v = v1;
    }
    Pose::new(p, yaw, v)
}

pub fn lane_state_at(pose: &Pose, track: &Track, prev_index: usize) -> LaneState {
    lane_state(pose, &track.path, track.half_width, track.window(prev_index))
}

pub fn step(state: &VehicleState, action: Action, track: &Track, cfg: &SimConfig) -> StepResult {
    let action = action.clipped();
    let pose = integrate(&state.pose, action, cfg);
    let ls = lane_state_at(&pose, track, state.lane_index);
    let next_state = VehicleState {
        pose,
        last_action: action,
        step_count: state.step_count + 1,
        lane_index: ls.index,
    };
    let reason = if ls.out_of_lane() {
        TerminationReason::OutOfLane
    } else if next_state.step_count >= cfg.max_steps {
        TerminationReason::MaxSteps
    } else {
        TerminationReason::None
    };
    StepResult {
        next_state,
        observation: render_observation(&pose, &track.markings, &cfg.grid),
        reward: reward(pose.speed, ls.alpha, ls.beta, cfg),
        alpha: ls.alpha,
        beta: ls.beta,
        terminated: reason != TerminationReason::None,
        reason,
    }
}

/// What the agent sees: two stacked grids plus speed and the previous action.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// `[previous, current]`.
    pub frames: [Arc<MarkerGrid>; 2],
    pub speed: f64,
    pub prev_action: Action,
}

impl Observation {
    /// Grid cells of both frames scaled to `[0, 1]`, previous frame first.
    pub fn grid_features(&self) -> Vec<f64> {
        self.frames
            .iter()
            .flat_map(|f| f.cells.iter().map(|&c| c as f64 / 255.0))
            .collect()
    }

    pub fn low_dim(&self) -> [f64; 3] {
        [self.speed, self.prev_action.steer, self.prev_action.target_speed]
    }

    pub fn flipped(&self) -> Observation {
        Observation {
            frames: [Arc::new(self.frames[0].flipped()), Arc::new(self.frames[1].flipped())],
            speed: self.speed,
            prev_action: self.prev_action.mirror(),
        }
    }
}

/// Stateful episode wrapper around [`step`] with frame stacking.
#[derive(Debug, Clone)]
pub struct LaneEnv {
    pub track: Arc<Track>,
    pub cfg: SimConfig,
    state: VehicleState,
    frames: [Arc<MarkerGrid>; 2],
    lane: LaneState,
    done: bool,
}

impl LaneEnv {
    pub fn new(track: Arc<Track>, cfg: SimConfig) -> Self {
        let mut env = Self {
            track,
            cfg,
            state: VehicleState {
                pose: Pose::new(Vec2::ZERO, 0.0, 0.0),
                last_action: Action::default(),
                step_count: 0,
                lane_index: 0,
            },
            frames: [Arc::new(MarkerGrid::zeros(&cfg.grid)), Arc::new(MarkerGrid::zeros(&cfg.grid))],
            lane: LaneState {
                index: 0,
                raw_alpha: 0.0,
                alpha: 0.0,
                beta: 0.0,
            },
            done: false,
        };
        env.reset(0, 0.0);
        env
    }

    /// Places the vehicle on the center line at waypoint `start`, facing along the path,
    /// shifted `lateral_offset` meters to the left.
    pub fn reset(&mut self, start: usize, lateral_offset: f64) -> Observation {
        let path = &self.track.path;
        let i = start % path.len();
        let t = path.tangent(i);
        let normal = Vec2::new(-t.y, t.x);
        let pose = Pose::new(path.point(i) + normal * lateral_offset, t.heading(), self.cfg.initial_speed);
        let state = VehicleState {
            pose,
            last_action: Action::new(0.0, self.cfg.initial_command).clipped(),
            step_count: 0,
            lane_index: i,
        };
        self.reset_to(state)
    }

    pub fn reset_to(&mut self, state: VehicleState) -> Observation {
        self.lane = lane_state_at(&state.pose, &self.track, state.lane_index);
        self.state = VehicleState {
            lane_index: self.lane.index,
            ..state
        };
        let g = Arc::new(render_observation(&state.pose, &self.track.markings, &self.cfg.grid));
        self.frames = [g.clone(), g];
        self.done = false;
        self.observation()
    }

    pub fn observation(&self) -> Observation {
        Observation {
            frames: self.frames.clone(),
            speed: self.state.pose.speed,
            prev_action: self.state.last_action,
        }
    }

    pub fn state(&self) -> &VehicleState {
        &self.state
    }

    pub fn lane(&self) -> &LaneState {
        &self.lane
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn step(&mut self, action: Action) -> (Observation, StepResult) {
        let res = step(&self.state, action, &self.track, &self.cfg);
        self.state = res.next_state;
        self.lane = lane_state_at(&self.state.pose, &self.track, self.state.lane_index);
        let g = Arc::new(res.observation.clone());
        self.frames = [self.frames[1].clone(), g];
        self.done = res.terminated;
        (self.observation(), res)
    }
}
