//! Minimal differentiable MLP used as the Q-network.
//!
//! The network maps a state vector to one Q-value per action. Hidden layers
//! use relu or tanh; the output layer is linear. Backpropagation provides
//! gradients with respect to both parameters (for TD learning) and the input
//! (for saliency attribution). Everything is double precision so gradient
//! checks against central finite differences stay tight.
//!
//! ## Checkpoint format
//!
//! Parameters serialize to a line-oriented text file, stable across versions:
//!
//! ```text
//! mlp v1
//! activation relu
//! dims 4 64 64 2
//! weights 0        # then out_dim lines, each with in_dim values (row-major)
//! ...
//! biases 0         # one line with out_dim values
//! weights 1
//! ...
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! save/load cycle reproduces the parameters bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::State;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed in terms of the post-activation value.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_layers: Vec<usize>, output_dim: usize) -> Self {
        Self { input_dim, hidden_layers, output_dim, activation: Activation::Relu, init_seed: 0 }
    }

    /// The conventional CartPole DQN shape: two hidden layers of 64.
    pub fn cartpole_default(init_seed: u64) -> Self {
        Self {
            input_dim: 4,
            hidden_layers: vec![64, 64],
            output_dim: 2,
            activation: Activation::Relu,
            init_seed,
        }
    }
}

/// Dense layer, weights stored row-major: `weights[o * in_dim + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self, QnetError> {
        if weights.len() != in_dim * out_dim || biases.len() != out_dim {
            return Err(QnetError::BadShape {
                expected: format!("{}x{} weights and {} biases", out_dim, in_dim, out_dim),
                got: format!("{} weights and {} biases", weights.len(), biases.len()),
            });
        }
        Ok(Self { in_dim, out_dim, weights, biases })
    }

    fn zeros_like(&self) -> Layer {
        Layer {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weights: vec![0.0; self.weights.len()],
            biases: vec![0.0; self.biases.len()],
        }
    }
}

/// Full parameter set of the network. `clone()` yields an independent deep
/// copy, which is how the target network is derived from the online one.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

/// Parameter-shaped gradient, produced by [`backward_params`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
}

/// Per-action Q-values for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct QValues {
    values: Vec<f64>,
}

impl QValues {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Greedy action; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate().skip(1) {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl std::ops::Index<usize> for QValues {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

#[derive(Debug, thiserror::Error)]
pub enum QnetError {
    #[error("input has dimension {got}, network expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("invalid action index {action}: network has {output_dim} outputs")]
    InvalidAction { action: usize, output_dim: usize },
    #[error("layer shape mismatch: expected {expected}, got {got}")]
    BadShape { expected: String, got: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MlpParams {
    /// Seeded initialization: He-uniform (`sqrt(6/fan_in)`) for relu,
    /// Glorot-uniform for tanh; biases start at zero.
    pub fn init(config: &MlpConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut dims = Vec::with_capacity(config.hidden_layers.len() + 2);
        dims.push(config.input_dim);
        dims.extend_from_slice(&config.hidden_layers);
        dims.push(config.output_dim);

        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = match config.activation {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                Activation::Tanh => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let weights = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            layers.push(Layer { in_dim: fan_in, out_dim: fan_out, weights, biases: vec![0.0; fan_out] });
        }
        Self { activation: config.activation, layers }
    }

    pub fn from_layers(activation: Activation, layers: Vec<Layer>) -> Result<Self, QnetError> {
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(QnetError::BadShape {
                    expected: format!("layer input of {}", pair[0].out_dim),
                    got: format!("{}", pair[1].in_dim),
                });
            }
        }
        Ok(Self { activation, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    fn zero_grads(&self) -> MlpGrads {
        MlpGrads { layers: self.layers.iter().map(Layer::zeros_like).collect() }
    }
}

fn affine(layer: &Layer, input: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for o in 0..layer.out_dim {
        let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
        let dot: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum();
        out.push(dot + layer.biases[o]);
    }
}

/// Post-activation outputs of every layer; the final entry is the Q-vector.
fn forward_trace(params: &MlpParams, input: &[f64], acts: &mut Vec<Vec<f64>>) {
    acts.resize_with(params.layers.len(), Vec::new);
    let last = params.layers.len() - 1;
    for (l, layer) in params.layers.iter().enumerate() {
        let (prev, rest) = acts.split_at_mut(l);
        let x: &[f64] = if l == 0 { input } else { &prev[l - 1] };
        affine(layer, x, &mut rest[0]);
        if l != last {
            for v in rest[0].iter_mut() {
                *v = params.activation.apply(*v);
            }
        }
    }
}

/// Deterministic feed-forward evaluation of the Q-values at `s`.
pub fn forward(params: &MlpParams, s: &State) -> Result<QValues, QnetError> {
    if s.dim() != params.input_dim() {
        return Err(QnetError::DimensionMismatch { got: s.dim(), expected: params.input_dim() });
    }
    let mut acts = Vec::new();
    forward_trace(params, s.values(), &mut acts);
    Ok(QValues { values: acts.pop().unwrap_or_default() })
}

/// Gradient of the mean squared TD error over the selected-action outputs.
///
/// The loss is `(1/B) * sum_i (Q(s_i, a_i) - y_i)^2`; only the chosen action
/// of each sample contributes.
pub fn backward_params(
    params: &MlpParams,
    batch: &[(&State, usize, f64)],
) -> Result<MlpGrads, QnetError> {
    if batch.is_empty() {
        return Err(QnetError::EmptyBatch);
    }
    let mut grads = params.zero_grads();
    let mut acts: Vec<Vec<f64>> = Vec::new();
    let mut delta: Vec<f64> = Vec::new();
    let mut delta_prev: Vec<f64> = Vec::new();
    let scale = 1.0 / batch.len() as f64;
    let last = params.layers.len() - 1;

    for &(s, action, target) in batch {
        if s.dim() != params.input_dim() {
            return Err(QnetError::DimensionMismatch { got: s.dim(), expected: params.input_dim() });
        }
        if action >= params.output_dim() {
            return Err(QnetError::InvalidAction { action, output_dim: params.output_dim() });
        }
        forward_trace(params, s.values(), &mut acts);

        delta.clear();
        delta.resize(params.layers[last].out_dim, 0.0);
        delta[action] = 2.0 * (acts[last][action] - target) * scale;

        for l in (0..params.layers.len()).rev() {
            let layer = &params.layers[l];
            let input: &[f64] = if l == 0 { s.values() } else { &acts[l - 1] };
            let g = &mut grads.layers[l];
            for o in 0..layer.out_dim {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let grow = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (gw, x) in grow.iter_mut().zip(input) {
                    *gw += d * x;
                }
                g.biases[o] += d;
            }
            if l > 0 {
                delta_prev.clear();
                delta_prev.resize(layer.in_dim, 0.0);
                for o in 0..layer.out_dim {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (dp, w) in delta_prev.iter_mut().zip(row) {
                        *dp += d * w;
                    }
                }
                for (dp, y) in delta_prev.iter_mut().zip(&acts[l - 1]) {
                    *dp *= params.activation.derivative_from_output(*y);
                }
                std::mem::swap(&mut delta, &mut delta_prev);
            }
        }
    }
    Ok(grads)
}

/// Exact gradient of the scalar `Q(s, action)` with respect to the input.
pub fn grad_input(params: &MlpParams, s: &State, action: usize) -> Result<Vec<f64>, QnetError> {
    if s.dim() != params.input_dim() {
        return Err(QnetError::DimensionMismatch { got: s.dim(), expected: params.input_dim() });
    }
    if action >= params.output_dim() {
        return Err(QnetError::InvalidAction { action, output_dim: params.output_dim() });
    }
    let mut acts = Vec::new();
    forward_trace(params, s.values(), &mut acts);

    let last = params.layers.len() - 1;
    let mut delta = vec![0.0; params.layers[last].out_dim];
    delta[action] = 1.0;

    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let mut delta_prev = vec![0.0; layer.in_dim];
        for o in 0..layer.out_dim {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (dp, w) in delta_prev.iter_mut().zip(row) {
                *dp += d * w;
            }
        }
        if l > 0 {
            for (dp, y) in delta_prev.iter_mut().zip(&acts[l - 1]) {
                *dp *= params.activation.derivative_from_output(*y);
            }
        }
        delta = delta_prev;
    }
    Ok(delta)
}

/// Elementwise `params <- params - lr * grads`.
pub fn sgd_update(params: &mut MlpParams, grads: &MlpGrads, learning_rate: f64) {
    assert!(learning_rate > 0.0, "learning rate must be positive");
    for (layer, g) in params.layers.iter_mut().zip(&grads.layers) {
        for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
            *w -= learning_rate * gw;
        }
        for (b, gb) in layer.biases.iter_mut().zip(&g.biases) {
            *b -= learning_rate * gb;
        }
    }
}

fn fmt_row(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&format!("{v}"));
    }
    s
}

/// Write parameters to the text checkpoint format described in the module docs.
pub fn save_checkpoint(params: &MlpParams, path: &Path) -> Result<(), QnetError> {
    let mut out = String::from("mlp v1\n");
    out.push_str(&format!("activation {}\n", params.activation.name()));
    out.push_str("dims");
    out.push_str(&format!(" {}", params.input_dim()));
    for layer in &params.layers {
        out.push_str(&format!(" {}", layer.out_dim));
    }
    out.push('\n');
    for (l, layer) in params.layers.iter().enumerate() {
        out.push_str(&format!("weights {l}\n"));
        for o in 0..layer.out_dim {
            out.push_str(&fmt_row(&layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim]));
            out.push('\n');
        }
        out.push_str(&format!("biases {l}\n"));
        out.push_str(&fmt_row(&layer.biases));
        out.push('\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MlpParams, QnetError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let bad = |msg: &str| QnetError::Checkpoint(msg.to_string());

    if lines.next() != Some("mlp v1") {
        return Err(bad("missing 'mlp v1' header"));
    }
    let activation = match lines.next().and_then(|l| l.strip_prefix("activation ")) {
        Some("relu") => Activation::Relu,
        Some("tanh") => Activation::Tanh,
        other => return Err(bad(&format!("unknown activation line {other:?}"))),
    };
    let dims: Vec<usize> = lines
        .next()
        .and_then(|l| l.strip_prefix("dims "))
        .ok_or_else(|| bad("missing dims line"))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad(&format!("bad dimension {t:?}"))))
        .collect::<Result<_, _>>()?;
    if dims.len() < 2 {
        return Err(bad("dims must list at least input and output"));
    }

    let parse_row = |line: Option<&str>, n: usize| -> Result<Vec<f64>, QnetError> {
        let line = line.ok_or_else(|| bad("unexpected end of file"))?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(&format!("bad float {t:?}"))))
            .collect::<Result<_, _>>()?;
        if row.len() != n {
            return Err(bad(&format!("expected {} values per row, got {}", n, row.len())));
        }
        Ok(row)
    };

    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (l, w) in dims.windows(2).enumerate() {
        let (in_dim, out_dim) = (w[0], w[1]);
        if lines.next() != Some(format!("weights {l}").as_str()) {
            return Err(bad(&format!("missing 'weights {l}' marker")));
        }
        let mut weights = Vec::with_capacity(in_dim * out_dim);
        for _ in 0..out_dim {
            weights.extend(parse_row(lines.next(), in_dim)?);
        }
        if lines.next() != Some(format!("biases {l}").as_str()) {
            return Err(bad(&format!("missing 'biases {l}' marker")));
        }
        let biases = parse_row(lines.next(), out_dim)?;
        layers.push(Layer { in_dim, out_dim, weights, biases });
    }
    MlpParams::from_layers(activation, layers)
}
