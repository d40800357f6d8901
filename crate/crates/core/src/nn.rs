//! Small feed-forward networks with hand-written reverse-mode gradients.
//!
//! A [`Network`] is a stack of dense and valid-padding 2D convolution layers over
//! one flat `f64` parameter vector. Inputs are row-major batches (`batch x features`);
//! convolution inputs are channel-major `(channels, rows, cols)` per row.

use std::io::{Read, Write};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    /// Valid convolution with square kernel and equal stride in both directions.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        in_rows: usize,
        in_cols: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
    },
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize, activation: Activation) -> Self {
        LayerSpec::Dense {
            inputs,
            outputs,
            activation,
        }
    }

    pub fn input_size(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d {
                in_channels,
                in_rows,
                in_cols,
                ..
            } => in_channels * in_rows * in_cols,
        }
    }

    pub fn output_size(&self) -> usize {
        match *self {
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Conv2d { out_channels, .. } => {
                let (r, c) = self.conv_out_dims();
                out_channels * r * c
            }
        }
    }

    fn conv_out_dims(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv2d {
                in_rows,
                in_cols,
                kernel,
                stride,
                ..
            } => ((in_rows - kernel) / stride + 1, (in_cols - kernel) / stride + 1),
            LayerSpec::Dense { .. } => (1, 1),
        }
    }

    /// Weight matrix shape `(fan_in, outputs)`; bias follows the weights.
    fn weight_shape(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } => (inputs, outputs),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (in_channels * kernel * kernel, out_channels),
        }
    }

    pub fn param_count(&self) -> usize {
        let (i, o) = self.weight_shape();
        i * o + o
    }

    pub fn activation(&self) -> Activation {
        match *self {
            LayerSpec::Dense { activation, .. } | LayerSpec::Conv2d { activation, .. } => activation,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } => {
                if inputs == 0 || outputs == 0 {
                    return Err(NnError::Architecture("dense layer with zero width".into()));
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                in_rows,
                in_cols,
                kernel,
                stride,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(NnError::Architecture("conv layer with zero dimension".into()));
                }
                if kernel > in_rows || kernel > in_cols {
                    return Err(NnError::Architecture("conv kernel larger than input".into()));
                }
            }
        }
        Ok(())
    }
}

/// Activations recorded by [`Network::forward_tape`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    acts: Vec<Array2<f64>>,
    /// im2col matrices for convolution layers.
    cols: Vec<Option<Array2<f64>>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("tape has at least the input")
    }

    pub fn batch(&self) -> usize {
        self.acts[0].nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

impl Network {
    /// Builds a network with Glorot-uniform weights (He-uniform before ReLU) and zero biases.
    pub fn new(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, layer) in net.layers.clone().iter().enumerate() {
            let (fan_in, fan_out) = match *layer {
                LayerSpec::Dense { inputs, outputs, .. } => (inputs, outputs),
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (in_channels * kernel * kernel, out_channels * kernel * kernel),
            };
            let limit = match layer.activation() {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let (wi, wo) = layer.weight_shape();
            let off = net.offsets[i];
            for p in &mut net.params[off..off + wi * wo] {
                *p = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn zeros(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NnError::Architecture("network needs at least one layer".into()));
        }
        for l in &layers {
            l.validate()?;
        }
        for pair in layers.windows(2) {
            if pair[0].output_size() != pair[1].input_size() {
                return Err(NnError::Architecture(format!(
                    "layer output {} does not feed next layer input {}",
                    pair[0].output_size(),
                    pair[1].input_size()
                )));
            }
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.param_count();
        }
        Ok(Self {
            layers,
            offsets,
            params: vec![0.0; total],
        })
    }

    pub fn from_params(layers: Vec<LayerSpec>, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(layers)?;
        if params.len() != net.params.len() {
            return Err(NnError::Architecture(format!(
                "{} parameters given, architecture needs {}",
                params.len(),
                net.params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    /// Re-initializes the last layer: weights uniform in `[-limit, limit]`, bias zero.
    pub fn init_last_layer_uniform(&mut self, limit: f64, seed: u64) {
        let last = self.layers.len() - 1;
        let off = self.offsets[last];
        let (wi, wo) = self.layers[last].weight_shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params[off..off + wi * wo] {
            *p = rng.random_range(-limit..=limit);
        }
        for p in &mut self.params[off + wi * wo..off + wi * wo + wo] {
            *p = 0.0;
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().unwrap().output_size()
    }

    fn weights(&self, i: usize) -> (ArrayView2<'_, f64>, &[f64]) {
        let (wi, wo) = self.layers[i].weight_shape();
        let off = self.offsets[i];
        let w = ArrayView2::from_shape((wi, wo), &self.params[off..off + wi * wo]).unwrap();
        (w, &self.params[off + wi * wo..off + wi * wo + wo])
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_size() {
            return Err(NnError::Shape(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.input_size()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut a = x.to_owned();
        for i in 0..self.layers.len() {
            a = self.layer_forward(i, a.view()).0;
        }
        Ok(a)
    }

    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Result<Tape> {
        self.check_input(&x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut cols = Vec::with_capacity(self.layers.len());
        acts.push(x.to_owned());
        for i in 0..self.layers.len() {
            let (a, c) = self.layer_forward(i, acts[i].view());
            acts.push(a);
            cols.push(c);
        }
        Ok(Tape { acts, cols })
    }

    fn layer_forward(&self, i: usize, x: ArrayView2<f64>) -> (Array2<f64>, Option<Array2<f64>>) {
        let layer = self.layers[i];
        let act = layer.activation();
        let (w, b) = self.weights(i);
        match layer {
            LayerSpec::Dense { .. } => {
                let mut y = x.dot(&w);
                for mut row in y.rows_mut() {
                    for (v, bj) in row.iter_mut().zip(b) {
                        *v = act.apply(*v + bj);
                    }
                }
                (y, None)
            }
            LayerSpec::Conv2d { out_channels, .. } => {
                let cols = im2col(&layer, x);
                let m = cols.dot(&w);
                let m = m.as_standard_layout();
                let (orows, ocols) = layer.conv_out_dims();
                let positions = orows * ocols;
                let batch = x.nrows();
                let ms = m.as_slice().unwrap();
                let mut y = vec![0.0; batch * out_channels * positions];
                for (bi, yb) in y.chunks_exact_mut(out_channels * positions).enumerate() {
                    for p in 0..positions {
                        let row = &ms[(bi * positions + p) * out_channels..(bi * positions + p + 1) * out_channels];
                        for o in 0..out_channels {
                            yb[o * positions + p] = act.apply(row[o] + b[o]);
                        }
                    }
                }
                (Array2::from_shape_vec((batch, out_channels * positions), y).unwrap(), Some(cols))
            }
        }
    }

    /// Parameter gradient and input gradient for `grad_out = dL/d(output)`.
    pub fn backward(&self, tape: &Tape, grad_out: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        self.backward_impl(tape, grad_out, true)
    }

    /// Parameter gradient only; skips propagating into the input.
    pub fn backward_params(&self, tape: &Tape, grad_out: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.backward_impl(tape, grad_out, false)?.0)
    }

    fn backward_impl(&self, tape: &Tape, grad_out: ArrayView2<f64>, need_input: bool) -> Result<(Vec<f64>, Array2<f64>)> {
        if tape.acts.len() != self.layers.len() + 1 || tape.acts[0].ncols() != self.input_size() {
            return Err(NnError::Shape("tape was recorded by a different architecture".into()));
        }
        let out = tape.output();
        if grad_out.dim() != out.dim() {
            return Err(NnError::Shape(format!(
                "output gradient {:?} does not match output {:?}",
                grad_out.dim(),
                out.dim()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut g = grad_out.to_owned();
        for i in (0..self.layers.len()).rev() {
            let layer = self.layers[i];
            let act = layer.activation();
            let y = &tape.acts[i + 1];
            // Through the activation.
            g.zip_mut_with(y, |gv, &yv| *gv *= act.grad_from_output(yv));
            let (w, _) = self.weights(i);
            let (wi, wo) = layer.weight_shape();
            let off = self.offsets[i];
            match layer {
                LayerSpec::Dense { .. } => {
                    let x = &tape.acts[i];
                    let dw = x.t().dot(&g);
                    grads[off..off + wi * wo].copy_from_slice(dw.as_standard_layout().as_slice().unwrap());
                    let db = g.sum_axis(Axis(0));
                    grads[off + wi * wo..off + wi * wo + wo].copy_from_slice(db.as_slice().unwrap());
                    if i > 0 || need_input {
                        g = g.dot(&w.t());
                    }
                }
                LayerSpec::Conv2d { out_channels, .. } => {
                    let cols = tape.cols[i].as_ref().expect("conv layer records im2col");
                    let (orows, ocols) = layer.conv_out_dims();
                    let positions = orows * ocols;
                    let batch = g.nrows();
                    let gs = g.as_standard_layout();
                    let gs = gs.as_slice().unwrap();
                    let mut gm = vec![0.0; batch * positions * out_channels];
                    for bi in 0..batch {
                        let gb = &gs[bi * out_channels * positions..(bi + 1) * out_channels * positions];
                        for o in 0..out_channels {
                            for p in 0..positions {
                                gm[(bi * positions + p) * out_channels + o] = gb[o * positions + p];
                            }
                        }
                    }
                    let gm = Array2::from_shape_vec((batch * positions, out_channels), gm).unwrap();
                    let dw = cols.t().dot(&gm);
                    grads[off..off + wi * wo].copy_from_slice(dw.as_standard_layout().as_slice().unwrap());
                    let db = gm.sum_axis(Axis(0));
                    grads[off + wi * wo..off + wi * wo + wo].copy_from_slice(db.as_slice().unwrap());
                    if i > 0 || need_input {
                        let dcols = gm.dot(&w.t());
                        g = col2im(&layer, dcols.view(), batch);
                    }
                }
            }
        }
        if !need_input {
            g = Array2::zeros((0, 0));
        }
        Ok((grads, g))
    }

    /// `target <- tau * source + (1 - tau) * target`.
    pub fn soft_update_from(&mut self, source: &Network, tau: f64) -> Result<()> {
        if self.layers != source.layers {
            return Err(NnError::Architecture("soft update between different architectures".into()));
        }
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            *t = tau * s + (1.0 - tau) * *t;
        }
        Ok(())
    }
}

pub fn soft_update(target: &mut Network, source: &Network, tau: f64) -> Result<()> {
    target.soft_update_from(source, tau)
}

fn conv_dims(layer: &LayerSpec) -> (usize, usize, usize, usize, usize) {
    match *layer {
        LayerSpec::Conv2d {
            in_channels,
            in_rows,
            in_cols,
            kernel,
            stride,
            ..
        } => (in_channels, in_rows, in_cols, kernel, stride),
        LayerSpec::Dense { .. } => unreachable!("not a conv layer"),
    }
}

/// Rows are `(sample, output position)`, columns `(channel, ki, kj)`.
fn im2col(layer: &LayerSpec, x: ArrayView2<f64>) -> Array2<f64> {
    let (ch, rows, cols, k, st) = conv_dims(layer);
    let (orows, ocols) = layer.conv_out_dims();
    let batch = x.nrows();
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let width = ch * k * k;
    let mut out = vec![0.0; batch * orows * ocols * width];
    let in_len = ch * rows * cols;
    for (bi, xb) in xs.chunks_exact(in_len).enumerate() {
        for orow in 0..orows {
            for ocol in 0..ocols {
                let r = bi * orows * ocols + orow * ocols + ocol;
                let dst = &mut out[r * width..(r + 1) * width];
                let mut j = 0;
                for c in 0..ch {
                    for ki in 0..k {
                        let base = c * rows * cols + (orow * st + ki) * cols + ocol * st;
                        dst[j..j + k].copy_from_slice(&xb[base..base + k]);
                        j += k;
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((batch * orows * ocols, width), out).unwrap()
}

fn col2im(layer: &LayerSpec, dcols: ArrayView2<f64>, batch: usize) -> Array2<f64> {
    let (ch, rows, cols, k, st) = conv_dims(layer);
    let (orows, ocols) = layer.conv_out_dims();
    let dcols = dcols.as_standard_layout();
    let src_all = dcols.as_slice().unwrap();
    let width = ch * k * k;
    let in_len = ch * rows * cols;
    let mut dx = vec![0.0; batch * in_len];
    for (bi, dxb) in dx.chunks_exact_mut(in_len).enumerate() {
        for orow in 0..orows {
            for ocol in 0..ocols {
                let r = bi * orows * ocols + orow * ocols + ocol;
                let src = &src_all[r * width..(r + 1) * width];
                let mut j = 0;
                for c in 0..ch {
                    for ki in 0..k {
                        let base = c * rows * cols + (orow * st + ki) * cols + ocol * st;
                        for (d, s) in dxb[base..base + k].iter_mut().zip(&src[j..j + k]) {
                            *d += s;
                        }
                        j += k;
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((batch, in_len), dx).unwrap()
}

/// Dense MLP spec: `inputs -> hidden... -> outputs`.
pub fn mlp(inputs: usize, hidden: &[usize], outputs: usize, hidden_act: Activation, out_act: Activation) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut prev = inputs;
    for &h in hidden {
        layers.push(LayerSpec::dense(prev, h, hidden_act));
        prev = h;
    }
    layers.push(LayerSpec::dense(prev, outputs, out_act));
    layers
}

/// Two stride-2 convolutions and one dense layer over a `channels x rows x cols` grid.
pub fn grid_trunk(channels: usize, rows: usize, cols: usize, features: usize) -> Vec<LayerSpec> {
    let c1 = LayerSpec::Conv2d {
        in_channels: channels,
        out_channels: 8,
        in_rows: rows,
        in_cols: cols,
        kernel: 3,
        stride: 2,
        activation: Activation::Relu,
    };
    let (r1, k1) = c1.conv_out_dims();
    let c2 = LayerSpec::Conv2d {
        in_channels: 8,
        out_channels: 16,
        in_rows: r1,
        in_cols: k1,
        kernel: 3,
        stride: 2,
        activation: Activation::Relu,
    };
    let d = LayerSpec::dense(c2.output_size(), features, Activation::Relu);
    vec![c1, c2, d]
}

/// Horizontal concatenation of row batches.
pub fn concat_cols(parts: &[ArrayView2<f64>]) -> Array2<f64> {
    ndarray::concatenate(Axis(1), parts).expect("row counts agree")
}

/// A network over `[trunk(grid) ++ extra]`, or over `extra` alone without a trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub trunk: Option<Network>,
    pub head: Network,
}

#[derive(Debug, Clone)]
pub struct ModelTape {
    trunk: Option<Tape>,
    head: Tape,
}

impl ModelTape {
    pub fn output(&self) -> &Array2<f64> {
        self.head.output()
    }
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub trunk: Vec<f64>,
    pub head: Vec<f64>,
    /// Gradient with respect to the `extra` input.
    pub extra: Array2<f64>,
}

impl Model {
    pub fn new(trunk: Option<Network>, head: Network) -> Result<Self> {
        if let Some(t) = &trunk {
            if t.output_size() > head.input_size() {
                return Err(NnError::Architecture("trunk output wider than head input".into()));
            }
        }
        Ok(Self { trunk, head })
    }

    fn head_input(&self, grid: Option<ArrayView2<f64>>, extra: ArrayView2<f64>, trunk_tape: &mut Option<Tape>, record: bool) -> Result<Array2<f64>> {
        match (&self.trunk, grid) {
            (Some(t), Some(g)) => {
                let feats = if record {
                    let tape = t.forward_tape(g)?;
                    let f = tape.output().clone();
                    *trunk_tape = Some(tape);
                    f
                } else {
                    t.forward(g)?
                };
                if feats.nrows() != extra.nrows() {
                    return Err(NnError::Shape("grid and extra batch sizes differ".into()));
                }
                Ok(concat_cols(&[feats.view(), extra]))
            }
            (None, _) => Ok(extra.to_owned()),
            (Some(_), None) => Err(NnError::Shape("model has a trunk but no grid input was given".into())),
        }
    }

    pub fn forward(&self, grid: Option<ArrayView2<f64>>, extra: ArrayView2<f64>) -> Result<Array2<f64>> {
        let x = self.head_input(grid, extra, &mut None, false)?;
        self.head.forward(x.view())
    }

    pub fn forward_tape(&self, grid: Option<ArrayView2<f64>>, extra: ArrayView2<f64>) -> Result<ModelTape> {
        let mut trunk = None;
        let x = self.head_input(grid, extra, &mut trunk, true)?;
        Ok(ModelTape {
            trunk,
            head: self.head.forward_tape(x.view())?,
        })
    }

    pub fn backward(&self, tape: &ModelTape, grad_out: ArrayView2<f64>) -> Result<ModelGrads> {
        let (head, gin) = self.head.backward(&tape.head, grad_out)?;
        match (&self.trunk, &tape.trunk) {
            (Some(t), Some(tt)) => {
                let f = t.output_size();
                let trunk = t.backward_params(tt, gin.slice(s![.., ..f]))?;
                Ok(ModelGrads {
                    trunk,
                    head,
                    extra: gin.slice(s![.., f..]).to_owned(),
                })
            }
            _ => Ok(ModelGrads {
                trunk: Vec::new(),
                head,
                extra: gin,
            }),
        }
    }

    pub fn num_params(&self) -> usize {
        self.head.num_params() + self.trunk.as_ref().map_or(0, |t| t.num_params())
    }

    pub fn soft_update_from(&mut self, source: &Model, tau: f64) -> Result<()> {
        match (&mut self.trunk, &source.trunk) {
            (Some(a), Some(b)) => a.soft_update_from(b, tau)?,
            (None, None) => {}
            _ => return Err(NnError::Architecture("trunk presence differs".into())),
        }
        self.head.soft_update_from(&source.head, tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let moments = if matches!(kind, OptimizerKind::Adam { .. }) { n_params } else { 0 };
        Self {
            kind,
            lr,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            steps: 0,
        }
    }

    pub fn adam(lr: f64, n_params: usize) -> Self {
        Self::new(OptimizerKind::adam(), lr, n_params)
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr, 0)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Descends along `grads`. Rejects non-finite gradients without touching parameters.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(NnError::Shape(format!("{} params vs {} grads", params.len(), grads.len())));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(NnError::NonFinite("gradient"));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.m.len() != params.len() {
                    return Err(NnError::Shape("optimizer built for a different parameter count".into()));
                }
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= self.lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LGVFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: String,
    /// Free-form settings of the model that owns these networks.
    pub meta: serde_json::Value,
    pub networks: Vec<NetworkEntry>,
}

/// Named networks plus metadata, stored as magic, `u32` header length, JSON header,
/// then all parameters as little-endian `f64` in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub networks: Vec<(String, Network)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            networks: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, net: &Network) {
        self.networks.push((name.into(), net.clone()));
    }

    pub fn get(&self, name: &str) -> Result<&Network> {
        self.networks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, net)| net)
            .ok_or_else(|| NnError::Checkpoint(format!("missing network {name:?}")))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            networks: self
                .networks
                .iter()
                .map(|(name, net)| NetworkEntry {
                    name: name.clone(),
                    layers: net.layers.clone(),
                    len: net.num_params(),
                })
                .collect(),
        };
        let hb = serde_json::to_vec(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let mut buf = Vec::with_capacity(12 + hb.len() + 8 * self.networks.iter().map(|(_, n)| n.num_params()).sum::<usize>());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(hb.len() as u32).to_le_bytes());
        buf.extend_from_slice(&hb);
        for (_, net) in &self.networks {
            for p in &net.params {
                buf.extend_from_slice(&p.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let hend = 12 + hlen;
        if bytes.len() < hend {
            return Err(NnError::Checkpoint("truncated header".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[12..hend]).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {}", header.version)));
        }
        let total: usize = header.networks.iter().map(|e| e.len).sum();
        if bytes.len() != hend + 8 * total {
            return Err(NnError::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                8 * total,
                bytes.len() - hend
            )));
        }
        let mut pos = hend;
        let mut networks = Vec::with_capacity(header.networks.len());
        for e in header.networks {
            let params = bytes[pos..pos + 8 * e.len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += 8 * e.len;
            networks.push((e.name, Network::from_params(e.layers, params)?));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            networks,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read(std::fs::File::open(path)?)
    }
}

/// Max relative error between analytic and central-difference gradients of
/// `sum(output * weights)` at `x`, over all parameters and inputs.
pub fn gradient_check(net: &Network, x: ArrayView2<f64>, out_weights: ArrayView2<f64>, h: f64) -> Result<f64> {
    let tape = net.forward_tape(x)?;
    let (pg, ig) = net.backward(&tape, out_weights)?;
    let loss = |n: &Network, xx: ArrayView2<f64>| -> Result<f64> { Ok((n.forward(xx)? * &out_weights).sum()) };
    let rel = |a: f64, b: f64| (a - b).abs() / (a.abs() + b.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for i in 0..net.num_params() {
        let p0 = probe.params[i];
        probe.params[i] = p0 + h;
        let up = loss(&probe, x)?;
        probe.params[i] = p0 - h;
        let dn = loss(&probe, x)?;
        probe.params[i] = p0;
        worst = worst.max(rel(pg[i], (up - dn) / (2.0 * h)));
    }
    let mut xp = x.to_owned();
    for idx in 0..xp.len() {
        let (r, c) = (idx / xp.ncols(), idx % xp.ncols());
        let x0 = xp[[r, c]];
        xp[[r, c]] = x0 + h;
        let up = loss(net, xp.view())?;
        xp[[r, c]] = x0 - h;
        let dn = loss(net, xp.view())?;
        xp[[r, c]] = x0;
        worst = worst.max(rel(ig[[r, c]], (up - dn) / (2.0 * h)));
    }
    Ok(worst)
}
