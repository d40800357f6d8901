//! Counterfactual GVF predictions learned off-policy with importance resampling.
//!
//! Each head predicts the discounted sum of one cumulant under the target policy
//! `tau(a | a_prev) = N(a_prev, 0.0025 I)`. The behavior policy is unknown; its
//! density is recovered from a discriminator `g` that separates logged actions
//! from actions drawn from a known box density `eta`, `mu_hat = g / (1 - g) * eta`.
//! Transitions enter a replay buffer with priority `rho = tau / mu_hat`; minibatches
//! drawn proportionally to `rho` get a TD step scaled by the mean priority.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{Dataset, Transition};
use crate::nn::{self, grid_trunk, mlp, Activation, Checkpoint, Model, Network, NnError, Optimizer, OptimizerKind};
use crate::replay::{ReplayBuffer, ReplayError};
use crate::sim::{Action, GridSpec, LaneEnv, Observation};

/// Diagonal variance of the target policy.
pub const TARGET_VARIANCE: f64 = 0.0025;
pub const DEFAULT_GAMMAS: [f64; 4] = [0.5, 0.9, 0.95, 0.97];
pub const PSI_LEN: usize = 11;

#[derive(Debug, Error)]
pub enum GvfError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid gvf config: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, GvfError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cumulant {
    LaneCenteredness,
    RoadAngle,
}

/// One prediction head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GvfSpec {
    pub cumulant: Cumulant,
    pub gamma: f64,
    pub scale_by_one_minus_gamma: bool,
}

/// Heads ordered cumulant-major: all lane-centeredness heads, then all road-angle heads.
pub fn default_heads(gammas: &[f64]) -> Vec<GvfSpec> {
    [Cumulant::LaneCenteredness, Cumulant::RoadAngle]
        .iter()
        .flat_map(|&c| {
            gammas.iter().map(move |&g| GvfSpec {
                cumulant: c,
                gamma: g,
                scale_by_one_minus_gamma: true,
            })
        })
        .collect()
}

/// Density of `N(a_prev, var * I)` at `a`.
pub fn tau_density_var(a: &[f64], a_prev: &[f64], var: f64) -> f64 {
    let d2: f64 = a.iter().zip(a_prev).map(|(x, y)| (x - y) * (x - y)).sum();
    let k = a.len() as i32;
    (-0.5 * d2 / var).exp() / (2.0 * PI * var).powf(k as f64 / 2.0)
}

pub fn tau_density(a: Action, a_prev: Action) -> f64 {
    tau_density_var(&a.to_array(), &a_prev.to_array(), TARGET_VARIANCE)
}

/// Axis-aligned uniform density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl UniformBox {
    /// Steering in `[-pi/2, pi/2]`, speed in `[0, 1]`.
    pub fn action_reference() -> Self {
        Self {
            lo: vec![-PI / 2.0, 0.0],
            hi: vec![PI / 2.0, 1.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product()
    }

    pub fn density(&self, a: &[f64]) -> f64 {
        let inside = a
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(x, (l, h))| *l <= *x && *x <= *h);
        if inside {
            1.0 / self.volume()
        } else {
            0.0
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| rng.random_range(*l..*h)).collect()
    }
}

pub fn eta_density(a: Action) -> f64 {
    UniformBox::action_reference().density(&a.to_array())
}

/// `mu_hat = g / (1 - g) * eta` with `g` clamped to `[eps, 1 - eps]`.
pub fn estimate_mu(g: f64, eta: f64, eps: f64) -> f64 {
    let g = g.clamp(eps, 1.0 - eps);
    g / (1.0 - g) * eta
}

/// `tau / mu_hat` clipped to `[0, rho_max]`.
pub fn importance_ratio(tau: f64, mu_hat: f64, rho_max: f64) -> f64 {
    if mu_hat <= 0.0 {
        return rho_max;
    }
    (tau / mu_hat).clamp(0.0, rho_max)
}

/// Bootstrapped targets `c_k + gamma_k * phi_k(s')`. `c` is already scaled and
/// `gamma` already zeroed at episode end.
pub fn td_target(c: &[f64], gamma: &[f64], phi_next: &[f64]) -> Result<Vec<f64>> {
    if c.len() != gamma.len() || c.len() != phi_next.len() {
        return Err(GvfError::Shape(format!(
            "cumulant {}, continuation {}, prediction {}",
            c.len(),
            gamma.len(),
            phi_next.len()
        )));
    }
    Ok(c.iter().zip(gamma).zip(phi_next).map(|((c, g), p)| c + g * p).collect())
}

/// `[phi (8), prev steer, prev target speed, speed]`.
pub fn predictive_state(phi: &[f64], v: f64, prev: Action) -> Result<[f64; PSI_LEN]> {
    if phi.len() != PSI_LEN - 3 {
        return Err(GvfError::Shape(format!("{} predictions, expected {}", phi.len(), PSI_LEN - 3)));
    }
    let mut psi = [0.0; PSI_LEN];
    psi[..8].copy_from_slice(phi);
    psi[8] = prev.steer;
    psi[9] = prev.target_speed;
    psi[10] = v;
    if psi.iter().any(|x| !x.is_finite()) {
        return Err(GvfError::NonFinite("predictive state"));
    }
    Ok(psi)
}

/// A replayable experience the learner can featurize.
pub trait Experience: Clone {
    /// Appends grid features of the state (or next state). Nothing when gridless.
    fn grid(&self, next: bool, out: &mut Vec<f64>);
    /// Appends low-dimensional features of the state (or next state).
    fn low_dim(&self, next: bool, out: &mut Vec<f64>);
    fn action(&self) -> Vec<f64>;
    /// Cumulant value per cumulant index.
    fn cumulant(&self, which: Cumulant) -> f64;
    fn done(&self) -> bool;
    /// Target-policy density of the logged action.
    fn target_density(&self, target_variance: f64) -> f64;
    /// Known importance ratio, when the behavior policy is given rather than estimated.
    fn known_rho(&self) -> Option<f64> {
        None
    }
}

impl Experience for Transition {
    fn grid(&self, next: bool, out: &mut Vec<f64>) {
        let frames = if next { &self.frames[1..3] } else { &self.frames[0..2] };
        for f in frames {
            out.extend(f.cells.iter().map(|&c| c as f64 / 255.0));
        }
    }

    fn low_dim(&self, next: bool, out: &mut Vec<f64>) {
        if next {
            out.extend([self.next_speed, self.action.steer, self.action.target_speed]);
        } else {
            out.extend([self.speed, self.prev_action.steer, self.prev_action.target_speed]);
        }
    }

    fn action(&self) -> Vec<f64> {
        self.action.to_array().to_vec()
    }

    fn cumulant(&self, which: Cumulant) -> f64 {
        match which {
            Cumulant::LaneCenteredness => self.cumulant[0],
            Cumulant::RoadAngle => self.cumulant[1],
        }
    }

    fn done(&self) -> bool {
        self.done
    }

    fn target_density(&self, var: f64) -> f64 {
        tau_density_var(&self.action.to_array(), &self.prev_action.to_array(), var)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GvfConfig {
    pub gammas: Vec<f64>,
    pub scale_cumulants: bool,
    pub lr: f64,
    pub behavior_lr: f64,
    pub optimizer: OptimizerKind,
    pub batch: usize,
    pub capacity: usize,
    pub warmup: usize,
    pub target_variance: f64,
    pub g_clamp: f64,
    pub rho_max: f64,
    /// Refresh a sampled priority when it is off by more than this factor.
    pub refresh_factor: f64,
    pub trunk_features: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for GvfConfig {
    fn default() -> Self {
        Self {
            gammas: DEFAULT_GAMMAS.to_vec(),
            scale_cumulants: true,
            lr: 1e-4,
            behavior_lr: 1e-4,
            optimizer: OptimizerKind::adam(),
            batch: 128,
            capacity: 500_000,
            warmup: 10_000,
            target_variance: TARGET_VARIANCE,
            g_clamp: 1e-4,
            rho_max: 100.0,
            refresh_factor: 2.0,
            trunk_features: 64,
            hidden: vec![128],
            seed: 0,
        }
    }
}

impl GvfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gammas.is_empty() || self.gammas.iter().any(|g| !(0.0..1.0).contains(g)) {
            return Err(GvfError::Config("every gamma must lie in [0, 1)".into()));
        }
        if !(self.lr > 0.0 && self.behavior_lr > 0.0) {
            return Err(GvfError::Config("learning rates must be positive".into()));
        }
        if self.batch == 0 || self.capacity == 0 {
            return Err(GvfError::Config("batch and capacity must be positive".into()));
        }
        if !(self.g_clamp > 0.0 && self.g_clamp < 0.5) || !(self.rho_max > 0.0) || !(self.refresh_factor >= 1.0) {
            return Err(GvfError::Config("g_clamp in (0, 0.5), rho_max > 0, refresh_factor >= 1".into()));
        }
        Ok(())
    }

    pub fn heads(&self) -> Vec<GvfSpec> {
        [Cumulant::LaneCenteredness, Cumulant::RoadAngle]
            .iter()
            .flat_map(|&c| {
                self.gammas.iter().map(move |&g| GvfSpec {
                    cumulant: c,
                    gamma: g,
                    scale_by_one_minus_gamma: self.scale_cumulants,
                })
            })
            .collect()
    }
}

/// Shapes of the learner inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    /// `(channels, rows, cols)` of the grid input, if any.
    pub grid: Option<(usize, usize, usize)>,
    pub low_dim: usize,
    pub action_dim: usize,
}

impl InputShape {
    pub fn lane(grid: &GridSpec) -> Self {
        Self {
            grid: Some((2, grid.rows, grid.cols)),
            low_dim: 3,
            action_dim: 2,
        }
    }

    pub fn grid_len(&self) -> usize {
        self.grid.map_or(0, |(c, r, k)| c * r * k)
    }
}

fn build_model(shape: &InputShape, extra: usize, hidden: &[usize], outputs: usize, features: usize, out: Activation, seed: u64) -> Result<Model> {
    let trunk = match shape.grid {
        Some((c, r, k)) => Some(Network::new(grid_trunk(c, r, k, features), seed)?),
        None => None,
    };
    let head_in = trunk.as_ref().map_or(0, |t| t.output_size()) + extra;
    let head = Network::new(mlp(head_in, hidden, outputs, Activation::Relu, out), seed.wrapping_add(1))?;
    Ok(Model::new(trunk, head)?)
}

/// Batched inputs of a set of experiences.
struct Batch {
    grid: Option<Array2<f64>>,
    low: Array2<f64>,
}

fn gather<E: Experience>(items: &[&E], shape: &InputShape, next: bool) -> Batch {
    let b = items.len();
    let grid = shape.grid.map(|_| {
        let mut g = Vec::with_capacity(b * shape.grid_len());
        for it in items {
            it.grid(next, &mut g);
        }
        Array2::from_shape_vec((b, shape.grid_len()), g).expect("grid feature length")
    });
    let mut low = Vec::with_capacity(b * shape.low_dim);
    for it in items {
        it.low_dim(next, &mut low);
    }
    Batch {
        grid,
        low: Array2::from_shape_vec((b, shape.low_dim), low).expect("low-dim feature length"),
    }
}

/// The prediction network `phi(s)` with one output per head.
#[derive(Debug, Clone, PartialEq)]
pub struct GvfNet {
    pub model: Model,
    pub heads: Vec<GvfSpec>,
    pub shape: InputShape,
}

impl GvfNet {
    pub fn new(shape: InputShape, heads: Vec<GvfSpec>, cfg: &GvfConfig) -> Result<Self> {
        let model = build_model(&shape, shape.low_dim, &cfg.hidden, heads.len(), cfg.trunk_features, Activation::Linear, cfg.seed)?;
        Ok(Self { model, heads, shape })
    }

    /// Linear predictor over the low-dimensional features only.
    pub fn linear(low_dim: usize, heads: Vec<GvfSpec>, action_dim: usize) -> Result<Self> {
        let head = Network::zeros(vec![nn::LayerSpec::dense(low_dim, heads.len(), Activation::Linear)])?;
        Ok(Self {
            model: Model::new(None, head)?,
            heads,
            shape: InputShape {
                grid: None,
                low_dim,
                action_dim,
            },
        })
    }

    fn predict_batch(&self, b: &Batch) -> Result<Array2<f64>> {
        Ok(self.model.forward(b.grid.as_ref().map(|g| g.view()), b.low.view())?)
    }

    pub fn predict<E: Experience>(&self, items: &[&E], next: bool) -> Result<Array2<f64>> {
        self.predict_batch(&gather(items, &self.shape, next))
    }

    pub fn predict_observation(&self, obs: &Observation) -> Result<Vec<f64>> {
        let grid = Array2::from_shape_vec((1, self.shape.grid_len()), obs.grid_features())
            .map_err(|e| GvfError::Shape(e.to_string()))?;
        let low = Array2::from_shape_vec((1, 3), obs.low_dim().to_vec()).unwrap();
        let g = self.shape.grid.map(|_| grid.view());
        Ok(self.model.forward(g, low.view())?.row(0).to_vec())
    }

    /// Predictive state for a live observation.
    pub fn psi(&self, obs: &Observation) -> Result<[f64; PSI_LEN]> {
        let phi = self.predict_observation(obs)?;
        predictive_state(&phi, obs.speed, obs.prev_action)
    }

    pub fn psi_batch(&self, items: &[&Transition], next: bool) -> Result<Array2<f64>> {
        let phi = self.predict(items, next)?;
        let mut out = Array2::zeros((items.len(), PSI_LEN));
        for (i, t) in items.iter().enumerate() {
            let (v, prev) = if next { (t.next_speed, t.action) } else { (t.speed, t.prev_action) };
            let psi = predictive_state(phi.row(i).as_slice().unwrap(), v, prev)?;
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&psi[..]));
        }
        Ok(out)
    }

    /// `(1/B) sum_i sum_k delta_ik grad phi_k(s_i)` and the mean squared TD error.
    pub fn td_gradient<E: Experience>(&self, items: &[&E]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let b = items.len();
        let cur = gather(items, &self.shape, false);
        let nxt = gather(items, &self.shape, true);
        let phi_next = self.predict_batch(&nxt)?;
        let tape = self.model.forward_tape(cur.grid.as_ref().map(|g| g.view()), cur.low.view())?;
        let phi = tape.output();
        let k = self.heads.len();
        let mut delta = Array2::zeros((b, k));
        let mut sq = 0.0;
        for (i, it) in items.iter().enumerate() {
            for (h, spec) in self.heads.iter().enumerate() {
                let c = it.cumulant(spec.cumulant);
                let c = if spec.scale_by_one_minus_gamma { (1.0 - spec.gamma) * c } else { c };
                let g = if it.done() { 0.0 } else { spec.gamma };
                let y = c + g * phi_next[[i, h]];
                let d = phi[[i, h]] - y;
                delta[[i, h]] = d / b as f64;
                sq += d * d;
            }
        }
        let loss = sq / (b * k) as f64;
        if !loss.is_finite() {
            return Err(GvfError::NonFinite("td loss"));
        }
        let grads = self.model.backward(&tape, delta.view())?;
        Ok((grads.trunk, grads.head, loss))
    }
}

/// Discriminator `g(a, s)`: probability that `a` came from the behavior policy.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorNet {
    pub model: Model,
    pub eta: UniformBox,
    pub shape: InputShape,
    pub g_clamp: f64,
}

impl BehaviorNet {
    pub fn new(shape: InputShape, eta: UniformBox, cfg: &GvfConfig) -> Result<Self> {
        let model = build_model(
            &shape,
            shape.low_dim + shape.action_dim,
            &cfg.hidden,
            1,
            cfg.trunk_features,
            Activation::Linear,
            cfg.seed.wrapping_add(1000),
        )?;
        Ok(Self {
            model,
            eta,
            shape,
            g_clamp: cfg.g_clamp,
        })
    }

    fn inputs(&self, b: &Batch, actions: &[Vec<f64>]) -> Array2<f64> {
        let mut low = Array2::zeros((actions.len(), self.shape.low_dim + self.shape.action_dim));
        for (i, a) in actions.iter().enumerate() {
            for j in 0..self.shape.low_dim {
                low[[i, j]] = b.low[[i, j]];
            }
            for (j, v) in a.iter().enumerate() {
                low[[i, self.shape.low_dim + j]] = *v;
            }
        }
        low
    }

    fn logits(&self, b: &Batch, actions: &[Vec<f64>]) -> Result<Array2<f64>> {
        let low = self.inputs(b, actions);
        Ok(self.model.forward(b.grid.as_ref().map(|g| g.view()), low.view())?)
    }

    /// Discriminator probabilities for the given state/action pairs.
    pub fn g_values<E: Experience>(&self, items: &[&E], actions: &[Vec<f64>]) -> Result<Vec<f64>> {
        let b = gather(items, &self.shape, false);
        Ok(self.logits(&b, actions)?.iter().map(|&z| sigmoid(z)).collect())
    }

    /// Estimated behavior density of each item's logged action.
    pub fn mu_hat<E: Experience>(&self, items: &[&E]) -> Result<Vec<f64>> {
        let actions: Vec<Vec<f64>> = items.iter().map(|it| it.action()).collect();
        let g = self.g_values(items, &actions)?;
        Ok(g
            .iter()
            .zip(&actions)
            .map(|(&g, a)| estimate_mu(g, self.eta.density(a), self.g_clamp))
            .collect())
    }

    /// One binary cross-entropy step: the first half of `items` keeps logged actions
    /// (label 1), the second half gets actions from `eta` (label 0).
    fn update<E: Experience, R: Rng + ?Sized>(&mut self, items: &[&E], opt: &mut [Optimizer; 2], rng: &mut R) -> Result<f64> {
        let n = items.len();
        let half = n.div_ceil(2);
        let actions: Vec<Vec<f64>> = items
            .iter()
            .enumerate()
            .map(|(i, it)| if i < half { it.action() } else { self.eta.sample(rng) })
            .collect();
        let b = gather(items, &self.shape, false);
        let low = self.inputs(&b, &actions);
        let tape = self.model.forward_tape(b.grid.as_ref().map(|g| g.view()), low.view())?;
        let z = tape.output();
        let mut grad = Array2::zeros((n, 1));
        let mut loss = 0.0;
        for i in 0..n {
            let label = if i < half { 1.0 } else { 0.0 };
            let logit = z[[i, 0]];
            // Stable BCE on logits.
            loss += logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
            grad[[i, 0]] = (sigmoid(logit) - label) / n as f64;
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(GvfError::NonFinite("behavior loss"));
        }
        let grads = self.model.backward(&tape, grad.view())?;
        if let Some(t) = self.model.trunk.as_mut() {
            opt[0].step(t.params_mut(), &grads.trunk)?;
        }
        opt[1].step(self.model.head.params_mut(), &grads.head)?;
        Ok(loss)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub step: u64,
    pub td_loss: f64,
    pub behavior_loss: f64,
    pub mean_rho: f64,
}

pub fn write_training_csv<W: Write, T: Serialize>(w: W, rows: &[T]) -> std::result::Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Replay-buffer learner shared by the online and offline training loops.
#[derive(Debug, Clone)]
pub struct GvfLearner<E: Experience> {
    pub cfg: GvfConfig,
    pub gvf: GvfNet,
    pub behavior: Option<BehaviorNet>,
    gvf_opt: [Optimizer; 2],
    beh_opt: [Optimizer; 2],
    pub buffer: ReplayBuffer<E>,
    rng: ChaCha8Rng,
    steps: u64,
    pub log: Vec<TrainLog>,
    pub log_every: u64,
}

fn optimizers(kind: OptimizerKind, lr: f64, model: &Model) -> [Optimizer; 2] {
    [
        Optimizer::new(kind, lr, model.trunk.as_ref().map_or(0, |t| t.num_params())),
        Optimizer::new(kind, lr, model.head.num_params()),
    ]
}

impl<E: Experience> GvfLearner<E> {
    /// `behavior = None` means experiences carry a known importance ratio.
    pub fn new(cfg: GvfConfig, gvf: GvfNet, behavior: Option<BehaviorNet>) -> Result<Self> {
        cfg.validate()?;
        let gvf_opt = optimizers(cfg.optimizer, cfg.lr, &gvf.model);
        let beh_opt = match &behavior {
            Some(b) => optimizers(cfg.optimizer, cfg.behavior_lr, &b.model),
            None => [Optimizer::sgd(cfg.behavior_lr), Optimizer::sgd(cfg.behavior_lr)],
        };
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.capacity, cfg.warmup.max(1))?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed),
            cfg,
            gvf,
            behavior,
            gvf_opt,
            beh_opt,
            steps: 0,
            log: Vec::new(),
            log_every: 100,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_lr(&mut self, lr: f64) {
        for o in &mut self.gvf_opt {
            o.lr = lr;
        }
    }

    fn rho_for(&self, items: &[&E]) -> Result<Vec<f64>> {
        match &self.behavior {
            Some(b) => {
                let mu = b.mu_hat(items)?;
                Ok(items
                    .iter()
                    .zip(mu)
                    .map(|(it, m)| importance_ratio(it.target_density(self.cfg.target_variance), m, self.cfg.rho_max))
                    .collect())
            }
            None => Ok(items
                .iter()
                .map(|it| it.known_rho().unwrap_or(1.0).clamp(0.0, self.cfg.rho_max))
                .collect()),
        }
    }

    /// Stores one transition with its current importance ratio.
    pub fn observe(&mut self, item: E) -> Result<usize> {
        let rho = self.rho_for(&[&item])?[0];
        Ok(self.buffer.insert(item, rho)?)
    }

    /// Stores several transitions; ratios come from one discriminator pass.
    pub fn observe_many(&mut self, items: &[E]) -> Result<()> {
        for chunk in items.chunks(512) {
            let refs: Vec<&E> = chunk.iter().collect();
            let rhos = self.rho_for(&refs)?;
            for (it, r) in chunk.iter().zip(rhos) {
                self.buffer.insert(it.clone(), r)?;
            }
        }
        Ok(())
    }

    pub fn is_ready(&self) -> bool {
        self.buffer.is_ready()
    }

    /// One training step: proportional minibatch for TD, uniform minibatch for the
    /// discriminator. Returns `None` below warmup.
    pub fn update(&mut self) -> Result<Option<TrainLog>> {
        if !self.buffer.is_ready() {
            return Ok(None);
        }
        let batch = self.cfg.batch;
        let slots = self.buffer.sample_proportional(batch, &mut self.rng)?;
        if self.behavior.is_some() {
            let items: Vec<&E> = slots.iter().map(|&s| self.buffer.get(s).unwrap()).collect();
            let fresh = self.rho_for(&items)?;
            let f = self.cfg.refresh_factor;
            let mut stale = Vec::new();
            for (&s, &r) in slots.iter().zip(&fresh) {
                let old = self.buffer.priority(s)?;
                if r > f * old || old > f * r {
                    stale.push((s, r));
                }
            }
            for (s, r) in stale {
                self.buffer.update_priority(s, r)?;
            }
        }
        let rho_bar = self.buffer.mean_priority()?;
        let items: Vec<&E> = slots.iter().map(|&s| self.buffer.get(s).unwrap()).collect();
        let (mut gt, mut gh, td_loss) = self.gvf.td_gradient(&items)?;
        gt.iter_mut().chain(gh.iter_mut()).for_each(|g| *g *= rho_bar);
        if let Some(t) = self.gvf.model.trunk.as_mut() {
            self.gvf_opt[0].step(t.params_mut(), &gt)?;
        }
        self.gvf_opt[1].step(self.gvf.model.head.params_mut(), &gh)?;

        let mut behavior_loss = f64::NAN;
        if let Some(beh) = self.behavior.as_mut() {
            let uniform = self.buffer.sample_uniform(batch, &mut self.rng)?;
            let items: Vec<&E> = uniform.iter().map(|&s| self.buffer.get(s).unwrap()).collect();
            behavior_loss = beh.update(&items, &mut self.beh_opt, &mut self.rng)?;
        }
        self.steps += 1;
        let row = TrainLog {
            step: self.steps,
            td_loss,
            behavior_loss,
            mean_rho: rho_bar,
        };
        if self.log_every > 0 && self.steps % self.log_every == 0 {
            self.log.push(row);
        }
        Ok(Some(row))
    }
}

impl GvfLearner<Transition> {
    pub fn for_lane(cfg: GvfConfig, grid: &GridSpec) -> Result<Self> {
        let shape = InputShape::lane(grid);
        let gvf = GvfNet::new(shape, cfg.heads(), &cfg)?;
        let beh = BehaviorNet::new(shape, UniformBox::action_reference(), &cfg)?;
        Self::new(cfg, gvf, Some(beh))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "heads": self.gvf.heads,
            "shape": self.gvf.shape,
            "eta": self.behavior.as_ref().map(|b| &b.eta),
            "g_clamp": self.cfg.g_clamp,
            "steps": self.steps,
        });
        let mut ck = Checkpoint::new("gvf", meta);
        if let Some(t) = &self.gvf.model.trunk {
            ck.push("gvf_trunk", t);
        }
        ck.push("gvf_head", &self.gvf.model.head);
        if let Some(b) = &self.behavior {
            if let Some(t) = &b.model.trunk {
                ck.push("behavior_trunk", t);
            }
            ck.push("behavior_head", &b.model.head);
        }
        ck
    }
}

/// Restores the prediction network (and discriminator, if stored) from a checkpoint.
pub fn gvf_from_checkpoint(ck: &Checkpoint) -> Result<(GvfNet, Option<BehaviorNet>)> {
    if ck.kind != "gvf" {
        return Err(GvfError::Config(format!("checkpoint kind {:?} is not gvf", ck.kind)));
    }
    let heads: Vec<GvfSpec> =
        serde_json::from_value(ck.meta["heads"].clone()).map_err(|e| GvfError::Config(e.to_string()))?;
    let shape: InputShape =
        serde_json::from_value(ck.meta["shape"].clone()).map_err(|e| GvfError::Config(e.to_string()))?;
    let trunk = ck.get("gvf_trunk").ok().cloned();
    let gvf = GvfNet {
        model: Model::new(trunk, ck.get("gvf_head")?.clone())?,
        heads,
        shape,
    };
    let behavior = match ck.get("behavior_head") {
        Ok(h) => {
            let eta: UniformBox =
                serde_json::from_value(ck.meta["eta"].clone()).map_err(|e| GvfError::Config(e.to_string()))?;
            Some(BehaviorNet {
                model: Model::new(ck.get("behavior_trunk").ok().cloned(), h.clone())?,
                eta,
                shape,
                g_clamp: ck.meta["g_clamp"].as_f64().unwrap_or(1e-4),
            })
        }
        Err(_) => None,
    };
    Ok((gvf, behavior))
}

/// Offline training over a recorded stream: the first `warmup` items are stored,
/// then the rest are interleaved evenly with `steps` updates, in recorded order.
/// With `steps == len - warmup` this is exactly one insertion per update.
pub fn train_offline<E: Experience>(learner: &mut GvfLearner<E>, data: &[E], steps: usize) -> Result<()> {
    if data.is_empty() {
        return Err(GvfError::EmptyDataset);
    }
    let n = data.len();
    let w = learner.buffer.warmup().min(n);
    learner.observe_many(&data[..w])?;
    let mut next = w;
    for u in 0..steps {
        let upto = w + ((u + 1) as u128 * (n - w) as u128 / steps as u128) as usize;
        learner.observe_many(&data[next..upto])?;
        next = upto;
        learner.update()?;
    }
    Ok(())
}

/// Offline training on a lane dataset.
pub fn train_offline_dataset(learner: &mut GvfLearner<Transition>, ds: &Dataset, steps: usize) -> Result<()> {
    train_offline(learner, &ds.transitions, steps)
}

/// Online training: actions from `behavior` drive `env`; every step is stored and
/// followed by one update once the buffer is warm.
pub fn train_online<F>(learner: &mut GvfLearner<Transition>, env: &mut LaneEnv, steps: usize, mut behavior: F, seed: u64) -> Result<Vec<Transition>>
where
    F: FnMut(&LaneEnv, &Observation) -> Action,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = env.reset(rng.random_range(0..env.track.path.len()), 0.0);
    let mut stream = Vec::with_capacity(steps);
    let mut episode = 0u32;
    for _ in 0..steps {
        let action = behavior(env, &obs);
        let (next, res) = env.step(action);
        let t = Transition {
            frames: [obs.frames[0].clone(), obs.frames[1].clone(), next.frames[1].clone()],
            speed: obs.speed,
            prev_action: obs.prev_action,
            action: res.next_state.last_action,
            cumulant: [res.alpha, res.beta],
            next_speed: next.speed,
            reward: res.reward,
            done: res.reason == crate::sim::TerminationReason::OutOfLane,
            rho: 1.0,
            episode,
            track: 0,
            flipped: false,
        };
        learner.observe(t.clone())?;
        stream.push(t);
        learner.update()?;
        obs = if res.terminated {
            episode += 1;
            env.reset(rng.random_range(0..env.track.path.len()), 0.0)
        } else {
            next
        };
    }
    Ok(stream)
}

/// Fills each transition's `rho` from the current discriminator.
pub fn annotate_rho(ds: &mut Dataset, beh: &BehaviorNet, cfg: &GvfConfig) -> Result<()> {
    for chunk in ds.transitions.chunks_mut(512) {
        let items: Vec<&Transition> = chunk.iter().collect();
        let mu = beh.mu_hat(&items)?;
        let rhos: Vec<f64> = items
            .iter()
            .zip(mu)
            .map(|(t, m)| importance_ratio(t.target_density(cfg.target_variance), m, cfg.rho_max))
            .collect();
        for (t, r) in chunk.iter_mut().zip(rhos) {
            t.rho = r;
        }
    }
    Ok(())
}

/// Shared handle for a frozen predictor used by policies.
pub type SharedGvf = Arc<GvfNet>;
