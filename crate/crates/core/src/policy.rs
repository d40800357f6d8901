//! Offline batch-constrained Q-learning over predictive or raw states, online DDPG,
//! and greedy evaluation rollouts.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{ou_step, Dataset, OuParams, PursuitDriver, TargetNoise, Transition};
use crate::eval::{episode_metrics, EpisodeMetrics, EvalError, TrackSampler, Trajectory};
use crate::gvf::{self, Experience, GvfConfig, GvfError, GvfLearner, GvfNet, PSI_LEN};
use crate::nn::{concat_cols, grid_trunk, mlp, Activation, Checkpoint, Network, NnError, Optimizer, OptimizerKind};
use crate::replay::{ReplayBuffer, ReplayError};
use crate::sim::{Action, GridSpec, LaneEnv, Observation, SimConfig, TerminationReason, Track};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Gvf(#[from] GvfError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("critic diverged at step {step}: |Q| = {value:.3e} exceeds {limit:.0e}")]
    Diverged { step: u64, value: f64, limit: f64 },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

/// Affine map between physical actions and `[-1, 1]` per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionScale {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ActionScale {
    /// Steering in `[-pi/2, pi/2]`, target speed in `[0.1, 0.6]`.
    pub fn lane() -> Self {
        Self {
            lo: vec![-FRAC_PI_2, crate::sim::MIN_TARGET_SPEED],
            hi: vec![FRAC_PI_2, crate::sim::MAX_TARGET_SPEED],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn to_norm(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(x, (l, h))| (2.0 * (x - l) / (h - l) - 1.0).clamp(-1.0, 1.0))
            .collect()
    }

    pub fn from_norm(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(x, (l, h))| l + (x.clamp(-1.0, 1.0) + 1.0) * 0.5 * (h - l))
            .collect()
    }

    pub fn action(&self, u: &[f64]) -> Action {
        let a = self.from_norm(u);
        Action::new(a[0], a[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcqConfig {
    pub latent: usize,
    pub kl_weight: f64,
    /// Perturbation bound as a fraction of each action's full range.
    pub perturbation: f64,
    pub lambda: f64,
    pub candidates: usize,
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch: usize,
    pub hidden: Vec<usize>,
    pub trunk_features: usize,
    pub q_limit: f64,
    pub seed: u64,
}

impl Default for BcqConfig {
    fn default() -> Self {
        Self {
            latent: 4,
            kl_weight: 0.5,
            perturbation: 0.05,
            lambda: 0.75,
            candidates: 10,
            gamma: 0.99,
            tau: 0.005,
            lr: 1e-4,
            optimizer: OptimizerKind::adam(),
            batch: 128,
            hidden: vec![256, 256],
            trunk_features: 64,
            q_limit: 1e3,
            seed: 0,
        }
    }
}

impl BcqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.candidates == 0 || self.batch == 0 {
            return Err(PolicyError::Config("latent, candidates and batch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) || !(0.0..1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.tau) {
            return Err(PolicyError::Config("lambda, tau in [0, 1]; gamma in [0, 1)".into()));
        }
        if !(self.lr > 0.0) || !(self.perturbation >= 0.0) || !(self.q_limit > 0.0) {
            return Err(PolicyError::Config("lr > 0, perturbation >= 0, q_limit > 0".into()));
        }
        Ok(())
    }

    /// Perturbation bound in normalized units (the full range spans 2).
    pub fn phi(&self) -> f64 {
        2.0 * self.perturbation
    }
}

/// What a policy sees: an optional grid (through a trunk) plus a flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateInput {
    pub grid: Option<(usize, usize, usize)>,
    pub low_dim: usize,
}

impl StateInput {
    pub fn psi() -> Self {
        Self {
            grid: None,
            low_dim: PSI_LEN,
        }
    }

    pub fn raw(grid: &GridSpec) -> Self {
        Self {
            grid: Some((2, grid.rows, grid.cols)),
            low_dim: 3,
        }
    }

    pub fn grid_len(&self) -> usize {
        self.grid.map_or(0, |(c, r, k)| c * r * k)
    }
}

/// Offline minibatch. Actions are normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct BcqBatch {
    pub grid: Option<Array2<f64>>,
    pub low: Array2<f64>,
    pub action: Array2<f64>,
    pub reward: Vec<f64>,
    pub next_grid: Option<Array2<f64>>,
    pub next_low: Array2<f64>,
    pub done: Vec<bool>,
}

impl BcqBatch {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcqStats {
    pub step: u64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub vae_loss: f64,
    pub mean_q: f64,
}

/// `KL(N(mu, sigma) || N(0, 1))` for one latent dimension.
pub fn kl_normal(mu: f64, log_sigma: f64) -> f64 {
    -0.5 * (1.0 + 2.0 * log_sigma - mu * mu - (2.0 * log_sigma).exp())
}

const LOG_SIGMA_MIN: f64 = -4.0;
const LOG_SIGMA_MAX: f64 = 15.0;
const LATENT_CLIP: f64 = 0.5;

fn repeat_rows(x: ArrayView2<f64>, n: usize) -> Array2<f64> {
    let (b, d) = x.dim();
    let mut out = Array2::zeros((b * n, d));
    for i in 0..b {
        for j in 0..n {
            out.row_mut(i * n + j).assign(&x.row(i));
        }
    }
    out
}

fn clip_unit(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.clamp(-1.0, 1.0));
}

fn check_q(values: impl Iterator<Item = f64>, step: u64, limit: f64) -> Result<()> {
    for v in values {
        if !v.is_finite() {
            return Err(PolicyError::NonFinite("critic value"));
        }
        if v.abs() > limit {
            return Err(PolicyError::Diverged { step, value: v, limit });
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct BcqOpts {
    trunk: Optimizer,
    encoder: Optimizer,
    decoder: Optimizer,
    actor: Optimizer,
    q1: Optimizer,
    q2: Optimizer,
}

/// Batch-constrained Q-learning with a state VAE, perturbation actor and twin critics.
#[derive(Debug, Clone)]
pub struct Bcq {
    pub cfg: BcqConfig,
    pub scale: ActionScale,
    pub input: StateInput,
    pub trunk: Option<Network>,
    pub trunk_target: Option<Network>,
    pub encoder: Network,
    pub decoder: Network,
    pub actor: Network,
    pub actor_target: Network,
    pub q1: Network,
    pub q2: Network,
    pub q1_target: Network,
    pub q2_target: Network,
    opts: BcqOpts,
    rng: ChaCha8Rng,
    steps: u64,
}

impl Bcq {
    pub fn new(cfg: BcqConfig, scale: ActionScale, input: StateInput) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let trunk = match input.grid {
            Some((c, r, k)) => Some(Network::new(grid_trunk(c, r, k, cfg.trunk_features), seed)?),
            None => None,
        };
        let fd = trunk.as_ref().map_or(0, |t| t.output_size()) + input.low_dim;
        let ad = scale.dim();
        let h = &cfg.hidden;
        let encoder = Network::new(mlp(fd + ad, h, 2 * cfg.latent, Activation::Relu, Activation::Linear), seed + 1)?;
        let decoder = Network::new(mlp(fd + cfg.latent, h, ad, Activation::Relu, Activation::Linear), seed + 2)?;
        let actor = Network::new(mlp(fd + ad, h, ad, Activation::Relu, Activation::Tanh), seed + 3)?;
        let q1 = Network::new(mlp(fd + ad, h, 1, Activation::Relu, Activation::Linear), seed + 4)?;
        let q2 = Network::new(mlp(fd + ad, h, 1, Activation::Relu, Activation::Linear), seed + 5)?;
        let opt = |n: &Network| Optimizer::new(cfg.optimizer, cfg.lr, n.num_params());
        let opts = BcqOpts {
            trunk: Optimizer::new(cfg.optimizer, cfg.lr, trunk.as_ref().map_or(0, |t| t.num_params())),
            encoder: opt(&encoder),
            decoder: opt(&decoder),
            actor: opt(&actor),
            q1: opt(&q1),
            q2: opt(&q2),
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xbc9),
            trunk_target: trunk.clone(),
            trunk,
            actor_target: actor.clone(),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            encoder,
            decoder,
            actor,
            q1,
            q2,
            opts,
            cfg,
            scale,
            input,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk.as_ref().map_or(0, |t| t.output_size()) + self.input.low_dim
    }

    fn features(&self, trunk: Option<&Network>, grid: Option<&Array2<f64>>, low: &Array2<f64>) -> Result<Array2<f64>> {
        match (trunk, grid) {
            (Some(t), Some(g)) => Ok(concat_cols(&[t.forward(g.view())?.view(), low.view()])),
            (None, _) => Ok(low.clone()),
            (Some(_), None) => Err(PolicyError::Config("policy expects a grid input".into())),
        }
    }

    fn latent_sample(&mut self, rows: usize, clip: bool) -> Array2<f64> {
        let l = self.cfg.latent;
        Array2::from_shape_fn((rows, l), |_| {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if clip {
                z.clamp(-LATENT_CLIP, LATENT_CLIP)
            } else {
                z
            }
        })
    }

    /// Decodes with the current decoder; result clipped to `[-1, 1]`.
    fn decode(&self, f: ArrayView2<f64>, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut a = self.decoder.forward(concat_cols(&[f, z]).view())?;
        clip_unit(&mut a);
        Ok(a)
    }

    fn perturb(&self, actor: &Network, f: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
        let xi = actor.forward(concat_cols(&[f, a]).view())?;
        let mut out = &a + &(xi * self.cfg.phi());
        clip_unit(&mut out);
        Ok(out)
    }

    /// Normalized candidates for one state: `(decoded, perturbed)`.
    pub fn candidates(&mut self, grid: Option<&[f64]>, low: &[f64], n: usize) -> Result<(Array2<f64>, Array2<f64>)> {
        let g = grid
            .map(|g| Array2::from_shape_vec((1, g.len()), g.to_vec()))
            .transpose()
            .map_err(|e| PolicyError::Config(e.to_string()))?;
        let l = Array2::from_shape_vec((1, low.len()), low.to_vec()).map_err(|e| PolicyError::Config(e.to_string()))?;
        let f = self.features(self.trunk.as_ref(), g.as_ref(), &l)?;
        let rep = repeat_rows(f.view(), n);
        let z = self.latent_sample(n, true);
        let dec = self.decode(rep.view(), z.view())?;
        let per = self.perturb(&self.actor, rep.view(), dec.view())?;
        Ok((dec, per))
    }

    /// Greedy BCQ action in normalized units. Ties go to the lowest index.
    pub fn select_normalized(&mut self, grid: Option<&[f64]>, low: &[f64], n: usize) -> Result<Vec<f64>> {
        let (_, per) = self.candidates(grid, low, n)?;
        let g = grid.map(|g| Array2::from_shape_vec((1, g.len()), g.to_vec()).unwrap());
        let l = Array2::from_shape_vec((1, low.len()), low.to_vec()).unwrap();
        let f = self.features(self.trunk.as_ref(), g.as_ref(), &l)?;
        let rep = repeat_rows(f.view(), n);
        let q = self.q1.forward(concat_cols(&[rep.view(), per.view()]).view())?;
        let mut best = 0;
        for i in 1..n {
            if q[[i, 0]] > q[[best, 0]] {
                best = i;
            }
        }
        Ok(per.row(best).to_vec())
    }

    pub fn select_action(&mut self, grid: Option<&[f64]>, low: &[f64]) -> Result<Action> {
        let u = self.select_normalized(grid, low, self.cfg.candidates)?;
        Ok(self.scale.action(&u))
    }

    /// One VAE, critic and actor step, then soft target updates.
    pub fn update(&mut self, b: &BcqBatch) -> Result<BcqStats> {
        let n = b.len();
        if n == 0 {
            return Err(PolicyError::EmptyDataset);
        }
        let cfg = self.cfg.clone();
        let ad = self.scale.dim();
        let lat = cfg.latent;
        let fd = self.feature_dim();

        // Shared features with a tape when a trunk is trained.
        let trunk_tape = match (&self.trunk, &b.grid) {
            (Some(t), Some(g)) => Some(t.forward_tape(g.view())?),
            (Some(_), None) => return Err(PolicyError::Config("policy expects a grid input".into())),
            _ => None,
        };
        let f = match &trunk_tape {
            Some(tp) => concat_cols(&[tp.output().view(), b.low.view()]),
            None => b.low.clone(),
        };
        let mut df = Array2::<f64>::zeros((n, fd));

        // VAE.
        let enc_tape = self.encoder.forward_tape(concat_cols(&[f.view(), b.action.view()]).view())?;
        let enc_out = enc_tape.output();
        let mu = enc_out.slice(s![.., ..lat]).to_owned();
        let ls_raw = enc_out.slice(s![.., lat..]).to_owned();
        let ls = ls_raw.mapv(|v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX));
        let sigma = ls.mapv(f64::exp);
        let eps = self.latent_sample(n, false);
        let z = &mu + &(&sigma * &eps);
        let dec_tape = self.decoder.forward_tape(concat_cols(&[f.view(), z.view()]).view())?;
        let recon = dec_tape.output();
        let diff = recon - &b.action;
        let recon_loss = diff.mapv(|d| d * d).mean().unwrap();
        let kl = ndarray::Zip::from(&mu).and(&ls).map_collect(|&m, &l| kl_normal(m, l)).mean().unwrap();
        let vae_loss = recon_loss + cfg.kl_weight * kl;
        if !vae_loss.is_finite() {
            return Err(PolicyError::NonFinite("vae loss"));
        }
        let g_recon = diff * (2.0 / (n * ad) as f64);
        let (dec_grads, dec_in) = self.decoder.backward(&dec_tape, g_recon.view())?;
        let dz = dec_in.slice(s![.., fd..]);
        df += &dec_in.slice(s![.., ..fd]);
        let kn = cfg.kl_weight / (n * lat) as f64;
        let mut g_enc = Array2::zeros((n, 2 * lat));
        for i in 0..n {
            for j in 0..lat {
                g_enc[[i, j]] = dz[[i, j]] + kn * mu[[i, j]];
                let inside = ls_raw[[i, j]] > LOG_SIGMA_MIN && ls_raw[[i, j]] < LOG_SIGMA_MAX;
                g_enc[[i, lat + j]] = if inside {
                    dz[[i, j]] * eps[[i, j]] * sigma[[i, j]] + kn * ((2.0 * ls[[i, j]]).exp() - 1.0)
                } else {
                    0.0
                };
            }
        }
        let (enc_grads, enc_in) = self.encoder.backward(&enc_tape, g_enc.view())?;
        df += &enc_in.slice(s![.., ..fd]);
        self.opts.encoder.step(self.encoder.params_mut(), &enc_grads)?;
        self.opts.decoder.step(self.decoder.params_mut(), &dec_grads)?;

        // Critics.
        let nf = self.features(self.trunk_target.as_ref(), b.next_grid.as_ref(), &b.next_low)?;
        let m = cfg.candidates;
        let rep = repeat_rows(nf.view(), m);
        let zc = self.latent_sample(n * m, true);
        let a_dec = self.decode(rep.view(), zc.view())?;
        let a_next = self.perturb(&self.actor_target, rep.view(), a_dec.view())?;
        let sa_next = concat_cols(&[rep.view(), a_next.view()]);
        let q1n = self.q1_target.forward(sa_next.view())?;
        let q2n = self.q2_target.forward(sa_next.view())?;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut best = f64::NEG_INFINITY;
            for j in 0..m {
                let (a, c) = (q1n[[i * m + j, 0]], q2n[[i * m + j, 0]]);
                let v = cfg.lambda * a.min(c) + (1.0 - cfg.lambda) * a.max(c);
                best = best.max(v);
            }
            y[i] = b.reward[i] + if b.done[i] { 0.0 } else { cfg.gamma * best };
        }
        check_q(y.iter().copied(), self.steps, cfg.q_limit)?;
        let sa = concat_cols(&[f.view(), b.action.view()]);
        let t1 = self.q1.forward_tape(sa.view())?;
        let t2 = self.q2.forward_tape(sa.view())?;
        check_q(t1.output().iter().chain(t2.output().iter()).copied(), self.steps, cfg.q_limit)?;
        let mut critic_loss = 0.0;
        let mut mean_q = 0.0;
        let mut g1 = Array2::zeros((n, 1));
        let mut g2 = Array2::zeros((n, 1));
        for i in 0..n {
            let (d1, d2) = (t1.output()[[i, 0]] - y[i], t2.output()[[i, 0]] - y[i]);
            critic_loss += (d1 * d1 + d2 * d2) / n as f64;
            mean_q += t1.output()[[i, 0]] / n as f64;
            g1[[i, 0]] = 2.0 * d1 / n as f64;
            g2[[i, 0]] = 2.0 * d2 / n as f64;
        }
        let (q1g, q1in) = self.q1.backward(&t1, g1.view())?;
        let (q2g, q2in) = self.q2.backward(&t2, g2.view())?;
        df += &q1in.slice(s![.., ..fd]);
        df += &q2in.slice(s![.., ..fd]);
        self.opts.q1.step(self.q1.params_mut(), &q1g)?;
        self.opts.q2.step(self.q2.params_mut(), &q2g)?;

        // Trunk, from the VAE and critic losses.
        if let (Some(t), Some(tp)) = (self.trunk.as_mut(), trunk_tape.as_ref()) {
            let tf = t.output_size();
            let tg = t.backward_params(tp, df.slice(s![.., ..tf]))?;
            self.opts.trunk.step(t.params_mut(), &tg)?;
        }

        // Actor on detached features.
        let za = self.latent_sample(n, true);
        let a_s = self.decode(f.view(), za.view())?;
        let at = self.actor.forward_tape(concat_cols(&[f.view(), a_s.view()]).view())?;
        let raw = &a_s + &(at.output() * cfg.phi());
        let mut a_p = raw.clone();
        clip_unit(&mut a_p);
        let qt = self.q1.forward_tape(concat_cols(&[f.view(), a_p.view()]).view())?;
        let actor_loss = -qt.output().mean().unwrap();
        let (_, qin) = self.q1.backward(&qt, Array2::from_elem((n, 1), -1.0 / n as f64).view())?;
        let mut g_act = qin.slice(s![.., fd..]).to_owned();
        ndarray::Zip::from(&mut g_act).and(&raw).for_each(|g, &r| {
            *g = if r.abs() < 1.0 { *g * cfg.phi() } else { 0.0 };
        });
        let ag = self.actor.backward_params(&at, g_act.view())?;
        self.opts.actor.step(self.actor.params_mut(), &ag)?;

        self.q1_target.soft_update_from(&self.q1, cfg.tau)?;
        self.q2_target.soft_update_from(&self.q2, cfg.tau)?;
        self.actor_target.soft_update_from(&self.actor, cfg.tau)?;
        if let (Some(tt), Some(t)) = (self.trunk_target.as_mut(), self.trunk.as_ref()) {
            tt.soft_update_from(t, cfg.tau)?;
        }
        self.steps += 1;
        Ok(BcqStats {
            step: self.steps,
            critic_loss,
            actor_loss,
            vae_loss,
            mean_q,
        })
    }

    pub fn checkpoint(&self, kind: &str, extra: serde_json::Value) -> Checkpoint {
        let meta = serde_json::json!({
            "bcq": self.cfg,
            "scale": self.scale,
            "input": self.input,
            "steps": self.steps,
            "extra": extra,
        });
        let mut ck = Checkpoint::new(kind, meta);
        if let (Some(t), Some(tt)) = (&self.trunk, &self.trunk_target) {
            ck.push("trunk", t);
            ck.push("trunk_target", tt);
        }
        for (name, net) in [
            ("encoder", &self.encoder),
            ("decoder", &self.decoder),
            ("actor", &self.actor),
            ("actor_target", &self.actor_target),
            ("q1", &self.q1),
            ("q2", &self.q2),
            ("q1_target", &self.q1_target),
            ("q2_target", &self.q2_target),
        ] {
            ck.push(name, net);
        }
        ck
    }

    /// Restores networks; optimizer state starts fresh.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let parse = |k: &str| ck.meta.get(k).cloned().ok_or_else(|| PolicyError::Checkpoint(format!("missing {k}")));
        let cfg: BcqConfig = serde_json::from_value(parse("bcq")?).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        let scale: ActionScale = serde_json::from_value(parse("scale")?).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        let input: StateInput = serde_json::from_value(parse("input")?).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        let mut b = Bcq::new(cfg, scale, input)?;
        if b.trunk.is_some() {
            b.trunk = Some(ck.get("trunk")?.clone());
            b.trunk_target = Some(ck.get("trunk_target")?.clone());
        }
        b.encoder = ck.get("encoder")?.clone();
        b.decoder = ck.get("decoder")?.clone();
        b.actor = ck.get("actor")?.clone();
        b.actor_target = ck.get("actor_target")?.clone();
        b.q1 = ck.get("q1")?.clone();
        b.q2 = ck.get("q2")?.clone();
        b.q1_target = ck.get("q1_target")?.clone();
        b.q2_target = ck.get("q2_target")?.clone();
        b.steps = ck.meta["steps"].as_u64().unwrap_or(0);
        Ok(b)
    }
}

/// Predictive states of every transition under a frozen predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiTable {
    pub cur: Array2<f64>,
    pub next: Array2<f64>,
}

impl PsiTable {
    pub fn build(gvf: &GvfNet, data: &[Transition]) -> Result<Self> {
        let mut cur = Array2::zeros((data.len(), PSI_LEN));
        let mut next = Array2::zeros((data.len(), PSI_LEN));
        for (c, chunk) in data.chunks(512).enumerate() {
            let items: Vec<&Transition> = chunk.iter().collect();
            let lo = c * 512;
            cur.slice_mut(s![lo..lo + chunk.len(), ..]).assign(&gvf.psi_batch(&items, false)?);
            next.slice_mut(s![lo..lo + chunk.len(), ..]).assign(&gvf.psi_batch(&items, true)?);
        }
        Ok(Self { cur, next })
    }
}

fn uniform_indices<R: Rng + ?Sized>(n: usize, b: usize, rng: &mut R) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..n)).collect()
}

fn action_rows(data: &[Transition], idx: &[usize], scale: &ActionScale) -> Array2<f64> {
    let mut a = Array2::zeros((idx.len(), scale.dim()));
    for (r, &i) in idx.iter().enumerate() {
        let u = scale.to_norm(&data[i].action.to_array());
        for (j, v) in u.iter().enumerate() {
            a[[r, j]] = *v;
        }
    }
    a
}

/// Minibatch over predictive states.
pub fn psi_batch(data: &[Transition], table: &PsiTable, idx: &[usize], scale: &ActionScale) -> BcqBatch {
    BcqBatch {
        grid: None,
        low: table.cur.select(Axis(0), idx),
        action: action_rows(data, idx, scale),
        reward: idx.iter().map(|&i| data[i].reward).collect(),
        next_grid: None,
        next_low: table.next.select(Axis(0), idx),
        done: idx.iter().map(|&i| data[i].done).collect(),
    }
}

/// Minibatch over raw grid and low-dimensional observations.
pub fn raw_batch(data: &[Transition], idx: &[usize], scale: &ActionScale) -> BcqBatch {
    let gl = data[0].frames[0].cells.len() * 2;
    let mut g = Vec::with_capacity(idx.len() * gl);
    let mut gn = Vec::with_capacity(idx.len() * gl);
    let mut l = Vec::with_capacity(idx.len() * 3);
    let mut ln = Vec::with_capacity(idx.len() * 3);
    for &i in idx {
        data[i].grid(false, &mut g);
        data[i].grid(true, &mut gn);
        data[i].low_dim(false, &mut l);
        data[i].low_dim(true, &mut ln);
    }
    let b = idx.len();
    BcqBatch {
        grid: Some(Array2::from_shape_vec((b, gl), g).unwrap()),
        low: Array2::from_shape_vec((b, 3), l).unwrap(),
        action: action_rows(data, idx, scale),
        reward: idx.iter().map(|&i| data[i].reward).collect(),
        next_grid: Some(Array2::from_shape_vec((b, gl), gn).unwrap()),
        next_low: Array2::from_shape_vec((b, 3), ln).unwrap(),
        done: idx.iter().map(|&i| data[i].done).collect(),
    }
}

/// Training curve row for policy learners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyLog {
    pub step: u64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub vae_loss: f64,
    pub mean_q: f64,
}

impl From<BcqStats> for PolicyLog {
    fn from(s: BcqStats) -> Self {
        Self {
            step: s.step,
            critic_loss: s.critic_loss,
            actor_loss: s.actor_loss,
            vae_loss: s.vae_loss,
            mean_q: s.mean_q,
        }
    }
}

/// Phase two: BCQ over the predictive states of a frozen predictor.
pub fn train_bcq_on_psi(ds: &Dataset, gvf: &GvfNet, cfg: BcqConfig, steps: usize, log_every: usize) -> Result<(Bcq, Vec<PolicyLog>)> {
    if ds.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let table = PsiTable::build(gvf, &ds.transitions)?;
    let mut bcq = Bcq::new(cfg, ActionScale::lane(), StateInput::psi())?;
    let mut rng = ChaCha8Rng::seed_from_u64(bcq.cfg.seed ^ 0xba7c);
    let mut log = Vec::new();
    for _ in 0..steps {
        let idx = uniform_indices(ds.len(), bcq.cfg.batch, &mut rng);
        let st = bcq.update(&psi_batch(&ds.transitions, &table, &idx, &bcq.scale))?;
        if log_every > 0 && st.step % log_every as u64 == 0 {
            log.push(st.into());
        }
    }
    Ok((bcq, log))
}

/// End-to-end BCQ baseline over raw observations with a shared trunk.
pub fn train_e2e_bcq(ds: &Dataset, cfg: BcqConfig, steps: usize, log_every: usize) -> Result<(Bcq, Vec<PolicyLog>)> {
    if ds.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let mut bcq = Bcq::new(cfg, ActionScale::lane(), StateInput::raw(&ds.header.grid))?;
    let mut rng = ChaCha8Rng::seed_from_u64(bcq.cfg.seed ^ 0xba7c);
    let mut log = Vec::new();
    for _ in 0..steps {
        let idx = uniform_indices(ds.len(), bcq.cfg.batch, &mut rng);
        let st = bcq.update(&raw_batch(&ds.transitions, &idx, &bcq.scale))?;
        if log_every > 0 && st.step % log_every as u64 == 0 {
            log.push(st.into());
        }
    }
    Ok((bcq, log))
}

/// Both phases of GVF-BCQ on one dataset. `gvf_fraction` of `steps` go to the
/// predictions, the rest to the policy.
pub struct TwoPhase {
    pub gvf: GvfLearner<Transition>,
    pub bcq: Bcq,
    pub bcq_log: Vec<PolicyLog>,
}

pub fn train_gvf_bcq(ds: &Dataset, gvf_cfg: GvfConfig, bcq_cfg: BcqConfig, steps: usize, gvf_fraction: f64) -> Result<TwoPhase> {
    let g_steps = (steps as f64 * gvf_fraction).round() as usize;
    let mut learner = GvfLearner::for_lane(gvf_cfg, &ds.header.grid)?;
    learner.log_every = (g_steps / 100).max(1) as u64;
    gvf::train_offline_dataset(&mut learner, ds, g_steps)?;
    let (bcq, bcq_log) = train_bcq_on_psi(ds, &learner.gvf, bcq_cfg, steps - g_steps, ((steps - g_steps) / 100).max(1))?;
    Ok(TwoPhase {
        gvf: learner,
        bcq,
        bcq_log,
    })
}

/// Anything that can drive the simulated vehicle.
pub trait Controller {
    fn name(&self) -> &str;
    /// Called once per rollout, before the first action.
    fn reset(&mut self, _env: &LaneEnv) {}
    fn act(&mut self, env: &LaneEnv, obs: &Observation) -> Result<Action>;
}

/// BCQ over predictive states from a frozen predictor.
pub struct GvfBcqController {
    pub gvf: GvfNet,
    pub bcq: Bcq,
}

impl Controller for GvfBcqController {
    fn name(&self) -> &str {
        "gvf_bcq"
    }

    fn act(&mut self, _env: &LaneEnv, obs: &Observation) -> Result<Action> {
        let psi = self.gvf.psi(obs)?;
        self.bcq.select_action(None, &psi)
    }
}

/// BCQ over raw observations.
pub struct E2eBcqController {
    pub bcq: Bcq,
}

impl Controller for E2eBcqController {
    fn name(&self) -> &str {
        "e2e_bcq"
    }

    fn act(&mut self, _env: &LaneEnv, obs: &Observation) -> Result<Action> {
        let g = obs.grid_features();
        self.bcq.select_action(Some(&g), &obs.low_dim())
    }
}

/// Noiseless pure pursuit with privileged access to the center line.
pub struct PursuitController {
    pub spacing: f64,
    pub speed: f64,
    driver: Option<PursuitDriver>,
    rng: ChaCha8Rng,
}

impl PursuitController {
    pub fn new(spacing: f64, speed: f64) -> Self {
        Self {
            spacing,
            speed,
            driver: None,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl Controller for PursuitController {
    fn name(&self) -> &str {
        "pursuit"
    }

    fn reset(&mut self, env: &LaneEnv) {
        let quiet = TargetNoise {
            pos_std: 0.0,
            pos_clip: 0.0,
            speed_std: 0.0,
        };
        let start = env.state().lane_index;
        self.driver = Some(PursuitDriver::new(&env.track.path, start, self.spacing, quiet, true, &mut self.rng));
    }

    fn act(&mut self, env: &LaneEnv, _obs: &Observation) -> Result<Action> {
        if self.driver.is_none() {
            self.reset(env);
        }
        let d = self.driver.as_mut().unwrap();
        d.advance(&env.state().pose, &env.track.path, &mut self.rng);
        let mut a = d.action(&env.state().pose);
        a.target_speed = self.speed;
        Ok(a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub seconds: f64,
    /// Commanded speed is clipped to this value.
    pub max_speed: f64,
    pub start: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seconds: 300.0,
            max_speed: 0.4,
            start: 0,
        }
    }
}

/// Greedy rollout for a fixed time budget; leaving the lane ends it early.
pub fn evaluate_policy(ctrl: &mut dyn Controller, track: Arc<Track>, sim: &SimConfig, ecfg: &EvalConfig) -> Result<(EpisodeMetrics, Trajectory)> {
    let steps = (ecfg.seconds / sim.dt).round() as usize;
    if steps == 0 {
        return Err(EvalError::TooShort(0).into());
    }
    let cfg = SimConfig { max_steps: steps, ..*sim };
    let mut env = LaneEnv::new(track, cfg);
    let mut obs = env.reset(ecfg.start, 0.0);
    ctrl.reset(&env);
    let mut traj = Trajectory::new(sim.dt);
    loop {
        let mut a = ctrl.act(&env, &obs)?.clipped();
        a.target_speed = a.target_speed.min(ecfg.max_speed);
        let (next, res) = env.step(a);
        traj.push(res.reward, res.next_state.pose.speed, res.alpha, res.beta, res.next_state.last_action);
        if res.terminated {
            traj.out_of_lane = res.reason == TerminationReason::OutOfLane;
            break;
        }
        obs = next;
    }
    Ok((episode_metrics(&traj)?, traj))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdpgConfig {
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch: usize,
    pub hidden: Vec<usize>,
    pub capacity: usize,
    pub warmup: usize,
    /// Target speed range as fractions of the maximum target speed.
    pub speed_range: [f64; 2],
    pub ou: OuParams,
    pub seed: u64,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.001,
            actor_lr: 1e-6,
            critic_lr: 1e-4,
            batch: 128,
            hidden: vec![256, 256],
            capacity: 100_000,
            warmup: 1_000,
            speed_range: [0.5, 1.0],
            ou: OuParams::default(),
            seed: 0,
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.tau) {
            return Err(PolicyError::Config("gamma in [0, 1), tau in [0, 1]".into()));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) || self.batch == 0 || self.capacity == 0 {
            return Err(PolicyError::Config("positive learning rates, batch and capacity".into()));
        }
        if !(0.0 <= self.speed_range[0] && self.speed_range[0] < self.speed_range[1]) {
            return Err(PolicyError::Config("speed_range must be increasing and >= 0".into()));
        }
        Ok(())
    }

    /// Physical action scale of the actor's `[-1, 1]` outputs.
    pub fn scale(&self) -> ActionScale {
        let vmax = crate::sim::MAX_TARGET_SPEED;
        ActionScale {
            lo: vec![-FRAC_PI_2, self.speed_range[0] * vmax],
            hi: vec![FRAC_PI_2, self.speed_range[1] * vmax],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ddpg {
    pub cfg: DdpgConfig,
    pub actor: Network,
    pub actor_target: Network,
    pub critic: Network,
    pub critic_target: Network,
    actor_opt: Optimizer,
    critic_opt: Optimizer,
    steps: u64,
}

impl Ddpg {
    pub fn new(cfg: DdpgConfig, state_dim: usize, action_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut actor = Network::new(mlp(state_dim, &cfg.hidden, action_dim, Activation::Relu, Activation::Tanh), cfg.seed)?;
        actor.init_last_layer_uniform(1e-3, cfg.seed + 7);
        let critic = Network::new(mlp(state_dim + action_dim, &cfg.hidden, 1, Activation::Relu, Activation::Linear), cfg.seed + 1)?;
        Ok(Self {
            actor_opt: Optimizer::adam(cfg.actor_lr, actor.num_params()),
            critic_opt: Optimizer::adam(cfg.critic_lr, critic.num_params()),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            cfg,
            steps: 0,
        })
    }

    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, state.len()), state.to_vec()).map_err(|e| PolicyError::Config(e.to_string()))?;
        Ok(self.actor.forward(x.view())?.row(0).to_vec())
    }

    /// Critic TD step then deterministic policy-gradient actor step. Actions are
    /// normalized. Returns `(critic_loss, actor_loss)`.
    pub fn update(&mut self, s: ArrayView2<f64>, a: ArrayView2<f64>, r: &[f64], s2: ArrayView2<f64>, done: &[bool]) -> Result<(f64, f64)> {
        let n = r.len();
        if n == 0 {
            return Err(PolicyError::EmptyDataset);
        }
        let sd = s.ncols();
        let a2 = self.actor_target.forward(s2)?;
        let q2 = self.critic_target.forward(concat_cols(&[s2, a2.view()]).view())?;
        let tape = self.critic.forward_tape(concat_cols(&[s, a]).view())?;
        let mut g = Array2::zeros((n, 1));
        let mut critic_loss = 0.0;
        for i in 0..n {
            let y = r[i] + if done[i] { 0.0 } else { self.cfg.gamma * q2[[i, 0]] };
            let d = tape.output()[[i, 0]] - y;
            critic_loss += d * d / n as f64;
            g[[i, 0]] = 2.0 * d / n as f64;
        }
        if !critic_loss.is_finite() {
            return Err(PolicyError::NonFinite("critic loss"));
        }
        let cg = self.critic.backward_params(&tape, g.view())?;
        self.critic_opt.step(self.critic.params_mut(), &cg)?;

        let at = self.actor.forward_tape(s)?;
        let qt = self.critic.forward_tape(concat_cols(&[s, at.output().view()]).view())?;
        let actor_loss = -qt.output().mean().unwrap();
        let (_, qin) = self.critic.backward(&qt, Array2::from_elem((n, 1), -1.0 / n as f64).view())?;
        let ag = self.actor.backward_params(&at, qin.slice(s![.., sd..]))?;
        self.actor_opt.step(self.actor.params_mut(), &ag)?;
        self.actor_target.soft_update_from(&self.actor, self.cfg.tau)?;
        self.critic_target.soft_update_from(&self.critic, self.cfg.tau)?;
        self.steps += 1;
        Ok((critic_loss, actor_loss))
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("ddpg", serde_json::json!({ "ddpg": self.cfg, "steps": self.steps }));
        ck.push("actor", &self.actor);
        ck.push("actor_target", &self.actor_target);
        ck.push("critic", &self.critic);
        ck.push("critic_target", &self.critic_target);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: DdpgConfig =
            serde_json::from_value(ck.meta["ddpg"].clone()).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        let actor = ck.get("actor")?.clone();
        let critic = ck.get("critic")?.clone();
        let mut d = Ddpg::new(cfg, actor.input_size(), actor.output_size())?;
        d.actor = actor;
        d.critic = critic;
        d.actor_target = ck.get("actor_target")?.clone();
        d.critic_target = ck.get("critic_target")?.clone();
        d.steps = ck.meta["steps"].as_u64().unwrap_or(0);
        Ok(d)
    }
}

/// DDPG actor over predictive states.
pub struct GvfDdpgController {
    pub gvf: GvfNet,
    pub ddpg: Ddpg,
}

impl Controller for GvfDdpgController {
    fn name(&self) -> &str {
        "gvf_ddpg"
    }

    fn act(&mut self, _env: &LaneEnv, obs: &Observation) -> Result<Action> {
        let psi = self.gvf.psi(obs)?;
        let u = self.ddpg.act(&psi)?;
        Ok(self.ddpg.cfg.scale().action(&u))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdpgLog {
    pub step: u64,
    pub episode: u64,
    pub track: usize,
    pub episode_steps: usize,
    pub episode_return: f64,
}

/// Online GVF-DDPG: predictions and policy learn together from one stream.
/// Roads are drawn by the track-priority curriculum on every reset.
pub fn train_gvf_ddpg(
    tracks: &[Arc<Track>],
    sim: &SimConfig,
    gvf_cfg: GvfConfig,
    cfg: DdpgConfig,
    steps: usize,
) -> Result<(GvfLearner<Transition>, Ddpg, Vec<DdpgLog>)> {
    if tracks.is_empty() {
        return Err(PolicyError::Config("no tracks".into()));
    }
    let mut learner = GvfLearner::for_lane(gvf_cfg, &sim.grid)?;
    let mut ddpg = Ddpg::new(cfg.clone(), PSI_LEN, 2)?;
    let scale = cfg.scale();
    let mut replay: ReplayBuffer<(Transition, [f64; 2])> = ReplayBuffer::new(cfg.capacity, cfg.warmup.max(cfg.batch))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xdd96);
    let mut sampler = TrackSampler::new(tracks.len());
    let mut log = Vec::new();

    let mut episode = 0u64;
    let mut ti = sampler.sample(&mut rng);
    let mut env = LaneEnv::new(tracks[ti].clone(), *sim);
    let mut obs = env.reset(rng.random_range(0..tracks[ti].path.len()), 0.0);
    let mut noise = vec![0.0; 2];
    let mut ep_steps = 0usize;
    let mut ep_return = 0.0;
    for _ in 0..steps {
        let psi = learner.gvf.psi(&obs)?;
        noise = ou_step(&noise, &cfg.ou, &mut rng);
        let u: Vec<f64> = ddpg.act(&psi)?.iter().zip(&noise).map(|(a, n)| (a + n).clamp(-1.0, 1.0)).collect();
        let (next, res) = env.step(scale.action(&u));
        let t = Transition {
            frames: [obs.frames[0].clone(), obs.frames[1].clone(), next.frames[1].clone()],
            speed: obs.speed,
            prev_action: obs.prev_action,
            action: res.next_state.last_action,
            cumulant: [res.alpha, res.beta],
            next_speed: next.speed,
            reward: res.reward,
            done: res.reason == TerminationReason::OutOfLane,
            rho: 1.0,
            episode: episode as u32,
            track: ti as u16,
            flipped: false,
        };
        learner.observe(t.clone())?;
        replay.insert((t, [u[0], u[1]]), 1.0)?;
        learner.update()?;
        if replay.is_ready() {
            let idx = replay.sample_uniform(cfg.batch, &mut rng)?;
            let items: Vec<&Transition> = idx.iter().map(|&i| &replay.get(i).unwrap().0).collect();
            let s_psi = learner.gvf.psi_batch(&items, false)?;
            let s2_psi = learner.gvf.psi_batch(&items, true)?;
            let mut a = Array2::zeros((idx.len(), 2));
            for (r, &i) in idx.iter().enumerate() {
                let uu = replay.get(i).unwrap().1;
                a[[r, 0]] = uu[0];
                a[[r, 1]] = uu[1];
            }
            let rewards: Vec<f64> = items.iter().map(|t| t.reward).collect();
            let dones: Vec<bool> = items.iter().map(|t| t.done).collect();
            ddpg.update(s_psi.view(), a.view(), &rewards, s2_psi.view(), &dones)?;
        }
        ep_steps += 1;
        ep_return += res.reward;
        obs = next;
        if res.terminated {
            sampler.record(ti, ep_steps);
            log.push(DdpgLog {
                step: ddpg.steps(),
                episode,
                track: ti,
                episode_steps: ep_steps,
                episode_return: ep_return,
            });
            episode += 1;
            ep_steps = 0;
            ep_return = 0.0;
            noise = vec![0.0; 2];
            ti = sampler.sample(&mut rng);
            env = LaneEnv::new(tracks[ti].clone(), *sim);
            obs = env.reset(rng.random_range(0..tracks[ti].path.len()), 0.0);
        }
    }
    Ok((learner, ddpg, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_examples() {
        assert_eq!(kl_normal(0.0, 0.0), 0.0);
        assert!((kl_normal(1.0, 0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scale_round_trip() {
        let s = ActionScale::lane();
        let a = [0.3, 0.25];
        let back = s.from_norm(&s.to_norm(&a));
        assert!((back[0] - a[0]).abs() < 1e-12 && (back[1] - a[1]).abs() < 1e-12);
        assert_eq!(s.from_norm(&[-1.0, -1.0]), vec![-FRAC_PI_2, 0.1]);
        assert_eq!(s.from_norm(&[5.0, 5.0]), vec![FRAC_PI_2, 0.6]);
    }

    #[test]
    fn ddpg_speed_range() {
        let s = DdpgConfig::default().scale();
        let a = s.from_norm(&[0.0, -1.0]);
        assert!((a[1] - 0.3).abs() < 1e-12);
        assert!((s.from_norm(&[0.0, 1.0])[1] - 0.6).abs() < 1e-12);
    }
}
