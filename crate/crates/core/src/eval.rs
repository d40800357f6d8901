//! Episode metrics, track-priority sampling and CSV reports.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::Action;

pub const NEAR_OUT_OF_LANE: f64 = 0.75;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("episode has {0} steps; metrics need at least 3")]
    TooShort(usize),
    #[error("trajectory columns have different lengths")]
    Ragged,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Per-step log of one rollout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub rewards: Vec<f64>,
    pub speeds: Vec<f64>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub actions: Vec<Action>,
    pub out_of_lane: bool,
}

impl Trajectory {
    pub fn new(dt: f64) -> Self {
        Self { dt, ..Default::default() }
    }

    pub fn push(&mut self, reward: f64, speed: f64, alpha: f64, beta: f64, action: Action) {
        self.rewards.push(reward);
        self.speeds.push(speed);
        self.alphas.push(alpha);
        self.betas.push(beta);
        self.actions.push(action);
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub steps: usize,
    pub reward_per_sec: f64,
    pub avg_speed: f64,
    pub avg_abs_alpha: f64,
    pub avg_abs_beta: f64,
    pub near_out_of_lane_frac: f64,
    pub jerk1_steer: f64,
    pub jerk1_speed: f64,
    pub jerk2_steer: f64,
    pub jerk2_speed: f64,
    pub out_of_lane: bool,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// `(1/(N-1)) sum |a_{t+1} - a_t|`.
pub fn jerk1(a: &[f64]) -> Result<f64> {
    if a.len() < 3 {
        return Err(EvalError::TooShort(a.len()));
    }
    Ok(mean(a.windows(2).map(|w| (w[1] - w[0]).abs())))
}

/// `(1/(N-2)) sum |(a_{t+2} - a_{t+1}) - (a_{t+1} - a_t)|`.
pub fn jerk2(a: &[f64]) -> Result<f64> {
    if a.len() < 3 {
        return Err(EvalError::TooShort(a.len()));
    }
    Ok(mean(a.windows(3).map(|w| ((w[2] - w[1]) - (w[1] - w[0])).abs())))
}

/// Share of steps with `|alpha| > 0.75`.
pub fn near_out_of_lane_frac(alphas: &[f64]) -> f64 {
    mean(alphas.iter().map(|a| if a.abs() > NEAR_OUT_OF_LANE { 1.0 } else { 0.0 }))
}

pub fn episode_metrics(t: &Trajectory) -> Result<EpisodeMetrics> {
    let n = t.len();
    if [t.speeds.len(), t.alphas.len(), t.betas.len(), t.actions.len()].iter().any(|&l| l != n) {
        return Err(EvalError::Ragged);
    }
    if n < 3 {
        return Err(EvalError::TooShort(n));
    }
    let steer: Vec<f64> = t.actions.iter().map(|a| a.steer).collect();
    let speed: Vec<f64> = t.actions.iter().map(|a| a.target_speed).collect();
    Ok(EpisodeMetrics {
        steps: n,
        reward_per_sec: mean(t.rewards.iter().copied()) / t.dt,
        avg_speed: mean(t.speeds.iter().copied()),
        avg_abs_alpha: mean(t.alphas.iter().map(|a| a.abs())),
        avg_abs_beta: mean(t.betas.iter().map(|b| b.abs())),
        near_out_of_lane_frac: near_out_of_lane_frac(&t.alphas),
        jerk1_steer: jerk1(&steer)?,
        jerk1_speed: jerk1(&speed)?,
        jerk2_steer: jerk2(&steer)?,
        jerk2_speed: jerk2(&speed)?,
        out_of_lane: t.out_of_lane,
    })
}

/// `p_i = exp(-n_i / kappa) / sum_j exp(-n_j / kappa)`, `kappa` defaulting to the
/// mean of `n`. Roads never sampled count as `n = 0`; with no history at all the
/// distribution is uniform.
pub fn track_sampling_probs(last: &[Option<f64>], kappa: Option<f64>) -> Vec<f64> {
    let k = last.len();
    if k == 0 {
        return Vec::new();
    }
    let uniform = vec![1.0 / k as f64; k];
    if last.iter().all(|n| n.is_none()) {
        return uniform;
    }
    let n: Vec<f64> = last.iter().map(|x| x.unwrap_or(0.0).max(0.0)).collect();
    let kappa = kappa.unwrap_or_else(|| n.iter().sum::<f64>() / k as f64);
    if !(kappa > 0.0) || kappa.is_infinite() {
        return uniform;
    }
    let lo = n.iter().cloned().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = n.iter().map(|x| (-(x - lo) / kappa).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|x| x / z).collect()
}

/// Curriculum over roads driven by the last episode length on each.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSampler {
    pub last: Vec<Option<f64>>,
    pub kappa: Option<f64>,
}

impl TrackSampler {
    pub fn new(tracks: usize) -> Self {
        Self {
            last: vec![None; tracks],
            kappa: None,
        }
    }

    pub fn probs(&self) -> Vec<f64> {
        track_sampling_probs(&self.last, self.kappa)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let p = self.probs();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i;
            }
        }
        p.len() - 1
    }

    pub fn record(&mut self, track: usize, steps: usize) {
        self.last[track] = Some(steps as f64);
    }
}

/// One evaluated rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub track: String,
    pub direction: String,
    pub damaged: bool,
    pub seed: u64,
    pub steps: usize,
    pub reward_per_sec: f64,
    pub avg_speed: f64,
    pub avg_abs_alpha: f64,
    pub avg_abs_beta: f64,
    pub near_out_of_lane_frac: f64,
    pub jerk1_steer: f64,
    pub jerk1_speed: f64,
    pub jerk2_steer: f64,
    pub jerk2_speed: f64,
    pub out_of_lane: bool,
}

impl ReportRow {
    pub fn new(method: &str, track: &str, direction: &str, damaged: bool, seed: u64, m: &EpisodeMetrics) -> Self {
        Self {
            method: method.into(),
            track: track.into(),
            direction: direction.into(),
            damaged,
            seed,
            steps: m.steps,
            reward_per_sec: m.reward_per_sec,
            avg_speed: m.avg_speed,
            avg_abs_alpha: m.avg_abs_alpha,
            avg_abs_beta: m.avg_abs_beta,
            near_out_of_lane_frac: m.near_out_of_lane_frac,
            jerk1_steer: m.jerk1_steer,
            jerk1_speed: m.jerk1_speed,
            jerk2_steer: m.jerk2_steer,
            jerk2_speed: m.jerk2_speed,
            out_of_lane: m.out_of_lane,
        }
    }
}

const ROW_HEADER: [&str; 16] = [
    "method",
    "track",
    "direction",
    "damaged",
    "seed",
    "steps",
    "reward_per_sec",
    "avg_speed",
    "avg_abs_alpha",
    "avg_abs_beta",
    "near_out_of_lane_frac",
    "jerk1_steer",
    "jerk1_speed",
    "jerk2_steer",
    "jerk2_speed",
    "out_of_lane",
];

fn sort_rows(rows: &mut [ReportRow]) {
    rows.sort_by(|a, b| {
        (&a.track, &a.method, &a.direction, a.damaged, a.seed).cmp(&(&b.track, &b.method, &b.direction, b.damaged, b.seed))
    });
}

/// Writes rows sorted by (track, method, direction, damaged, seed).
pub fn write_rows<W: Write>(w: W, rows: &[ReportRow]) -> Result<()> {
    let mut rows = rows.to_vec();
    sort_rows(&mut rows);
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(ROW_HEADER)?;
    for r in &rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(r: R) -> Result<Vec<ReportRow>> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Means over seeds and directions for one (method, track, damaged) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub track: String,
    pub damaged: bool,
    pub episodes: usize,
    pub reward_per_sec: f64,
    pub avg_speed: f64,
    pub avg_abs_alpha: f64,
    pub avg_abs_beta: f64,
    pub near_out_of_lane_frac: f64,
    pub out_of_lane_frac: f64,
    pub jerk1_steer: f64,
    pub jerk1_speed: f64,
    pub jerk2_steer: f64,
    pub jerk2_speed: f64,
}

pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, bool), Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.track.clone(), r.method.clone(), r.damaged)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((track, method, damaged), g)| {
            let m = |f: fn(&ReportRow) -> f64| mean(g.iter().map(|r| f(r)));
            SummaryRow {
                method,
                track,
                damaged,
                episodes: g.len(),
                reward_per_sec: m(|r| r.reward_per_sec),
                avg_speed: m(|r| r.avg_speed),
                avg_abs_alpha: m(|r| r.avg_abs_alpha),
                avg_abs_beta: m(|r| r.avg_abs_beta),
                near_out_of_lane_frac: m(|r| r.near_out_of_lane_frac),
                out_of_lane_frac: m(|r| if r.out_of_lane { 1.0 } else { 0.0 }),
                jerk1_steer: m(|r| r.jerk1_steer),
                jerk1_speed: m(|r| r.jerk1_speed),
                jerk2_steer: m(|r| r.jerk2_steer),
                jerk2_speed: m(|r| r.jerk2_speed),
            }
        })
        .collect()
}

/// Mean of a column over rows matching `pred`; NaN when nothing matches.
pub fn mean_where(rows: &[ReportRow], pred: impl Fn(&ReportRow) -> bool, f: impl Fn(&ReportRow) -> f64) -> f64 {
    mean(rows.iter().filter(|r| pred(r)).map(f))
}

pub fn write_summary<W: Write>(w: W, rows: &[SummaryRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Per-step columns of a rollout, for histograms and time plots.
pub fn write_trajectory<W: Write>(w: W, t: &Trajectory) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["step", "reward", "speed", "alpha", "beta", "steer", "target_speed"])?;
    for i in 0..t.len() {
        let a = t.actions[i];
        wr.write_record([
            i.to_string(),
            t.rewards[i].to_string(),
            t.speeds[i].to_string(),
            t.alphas[i].to_string(),
            t.betas[i].to_string(),
            a.steer.to_string(),
            a.target_speed.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Writes `episodes.csv` and `summary.csv` into `dir`.
pub fn write_report(dir: &Path, rows: &[ReportRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_rows(std::fs::File::create(dir.join("episodes.csv"))?, rows)?;
    write_summary(std::fs::File::create(dir.join("summary.csv"))?, &summarize(rows))?;
    Ok(())
}
