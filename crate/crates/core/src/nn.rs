//! Small fully connected networks with hand-written backpropagation, and a
//! tabular stand-in exposing the same action-value interface.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::NUM_ACTIONS;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite input at feature {0}")]
    NonFiniteInput(usize),
    #[error("input has {got} features, network expects {expected}")]
    InputSize { expected: usize, got: usize },
    #[error("network specs differ")]
    SpecMismatch,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    /// Input size, hidden sizes, output size.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            layer_sizes: vec![6, 64, 64, NUM_ACTIONS],
            activation: Activation::Relu,
            init_seed: 0,
        }
    }
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], activation: Activation, init_seed: u64) -> Self {
        let mut layer_sizes = vec![input];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(NUM_ACTIONS);
        Self {
            layer_sizes,
            activation,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layer_sizes.len() < 3 {
            return Err(NnError::InvalidSpec("need at least one hidden layer".into()));
        }
        if self.layer_sizes.iter().any(|&n| n == 0) {
            return Err(NnError::InvalidSpec("layer of width zero".into()));
        }
        if *self.layer_sizes.last().unwrap() != NUM_ACTIONS {
            return Err(NnError::InvalidSpec(format!("output size must be {NUM_ACTIONS}")));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Same architecture, ignoring the init seed.
    pub fn same_shape(&self, other: &MlpSpec) -> bool {
        self.layer_sizes == other.layer_sizes && self.activation == other.activation
    }
}

/// Dense layer; `weights` is row-major `[outputs][inputs]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn xavier(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            inputs,
            outputs,
            weights,
            biases: vec![0.0; outputs],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            inputs: self.inputs,
            outputs: self.outputs,
            weights: vec![0.0; self.weights.len()],
            biases: vec![0.0; self.biases.len()],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.inputs).zip(&self.biases) {
            let mut z = *b;
            for (w, xi) in row.iter().zip(x) {
                z += w * xi;
            }
            out.push(z);
        }
    }
}

/// Per-layer activations from one forward pass; `activations[0]` is the input.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    pub activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Parameter gradients with the same layout as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.weights.fill(0.0);
            l.biases.fill(0.0);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|g| *g *= k);
            l.biases.iter_mut().for_each(|g| *g *= k);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn max_abs(&self) -> f64 {
        self.flat().iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(&l.weights);
        out.extend_from_slice(&l.biases);
    }
    out
}

/// Multi-layer perceptron with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| Layer::xavier(w[0], w[1], &mut rng))
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.num_params() {
            return Err(NnError::SpecMismatch);
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.biases.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().unwrap();
        last.weights.fill(0.0);
        last.biases.fill(0.0);
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NnError> {
        if x.len() != self.spec.input_size() {
            return Err(NnError::InputSize {
                expected: self.spec.input_size(),
                got: x.len(),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteInput(i));
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: &[f64], cache: &mut ForwardCache) -> Result<(), NnError> {
        self.check_input(x)?;
        let n = self.layers.len();
        cache.activations.resize_with(n + 1, Vec::new);
        cache.activations[0].clear();
        cache.activations[0].extend_from_slice(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let (done, rest) = cache.activations.split_at_mut(i + 1);
            let out = &mut rest[0];
            layer.affine(&done[i], out);
            if i + 1 < n {
                out.iter_mut().for_each(|z| *z = self.spec.activation.apply(*z));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<[f64; NUM_ACTIONS], NnError> {
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache)?;
        let out = cache.output();
        Ok([out[0], out[1], out[2]])
    }

    pub fn forward_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<[f64; NUM_ACTIONS]>, NnError> {
        let mut cache = ForwardCache::default();
        xs.iter()
            .map(|x| {
                self.forward_cached(x, &mut cache)?;
                let out = cache.output();
                Ok([out[0], out[1], out[2]])
            })
            .collect()
    }

    /// Accumulates into `grads` the parameter gradients of a loss whose
    /// gradient with respect to the outputs is `grad_out`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut Gradients) {
        let n = self.layers.len();
        let mut delta = grad_out.to_vec();
        let mut prev = Vec::new();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let input = &cache.activations[i];
            let g = &mut grads.layers[i];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, xi) in row.iter_mut().zip(input) {
                    *gw += d * xi;
                }
            }
            if i == 0 {
                break;
            }
            prev.clear();
            prev.resize(layer.inputs, 0.0);
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= self.spec.activation.derivative(*a);
            }
            std::mem::swap(&mut delta, &mut prev);
        }
    }

    /// θ ← θ − lr·∇
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in l.weights.iter_mut().zip(&g.weights) {
                *w -= lr * gw;
            }
            for (b, gb) in l.biases.iter_mut().zip(&g.biases) {
                *b -= lr * gb;
            }
        }
    }

    /// Copies this network's parameters into `target`.
    pub fn sync_target(&self, target: &mut Mlp) -> Result<(), NnError> {
        if !self.spec.same_shape(&target.spec) {
            return Err(NnError::SpecMismatch);
        }
        target.layers.clone_from(&self.layers);
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            params: self.params(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, NnError> {
        if c.version != CHECKPOINT_VERSION {
            return Err(NnError::Version(c.version));
        }
        let mut net = Mlp::new(c.spec.clone())?;
        net.set_params(&c.params)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, serde_json::to_vec(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let c: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        Mlp::from_checkpoint(&c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: MlpSpec,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
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

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        match self.kind {
            OptimizerKind::Sgd => net.sgd_step(grads, self.lr),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.lr == 0.0 {
                    return;
                }
                let n = net.num_params();
                if self.m.len() != n {
                    self.m = vec![0.0; n];
                    self.v = vec![0.0; n];
                    self.t = 0;
                }
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                let step = self.lr * c2.sqrt() / c1;
                let mut k = 0;
                for (l, g) in net.layers.iter_mut().zip(&grads.layers) {
                    for (p, gp) in l.weights.iter_mut().chain(l.biases.iter_mut()).zip(g.weights.iter().chain(&g.biases)) {
                        let m = &mut self.m[k];
                        let v = &mut self.v[k];
                        *m = beta1 * *m + (1.0 - beta1) * gp;
                        *v = beta2 * *v + (1.0 - beta2) * gp * gp;
                        *p -= step * *m / (v.sqrt() + eps);
                        k += 1;
                    }
                }
            }
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Shared read interface of network and tabular Q-functions.
pub trait ActionValues {
    fn action_values(&self, obs: &[f64]) -> Result<[f64; NUM_ACTIONS], NnError>;

    fn greedy_action(&self, obs: &[f64]) -> Result<usize, NnError> {
        Ok(argmax(&self.action_values(obs)?))
    }
}

impl ActionValues for Mlp {
    fn action_values(&self, obs: &[f64]) -> Result<[f64; NUM_ACTIONS], NnError> {
        self.forward(obs)
    }
}

/// Worst relative disagreement between backprop and central finite
/// differences (step `h`) for the loss `½‖net(x) − target‖²`. Pairs whose
/// absolute difference is below 1e-9 count as agreeing.
pub fn gradient_check(net: &Mlp, x: &[f64], target: &[f64], h: f64) -> Result<f64, NnError> {
    let mut probe = net.clone();
    let loss = |n: &Mlp| -> Result<f64, NnError> {
        let y = n.forward(x)?;
        Ok(0.5 * y.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
    };
    let mut cache = ForwardCache::default();
    net.forward_cached(x, &mut cache)?;
    let gout: Vec<f64> = cache.output().iter().zip(target).map(|(a, b)| a - b).collect();
    let mut g = net.zero_gradients();
    net.backward(&cache, &gout, &mut g);
    let analytic = g.flat();
    let p = net.params();
    let mut worst = 0.0f64;
    let mut q = p.clone();
    for i in 0..p.len() {
        q[i] = p[i] + h;
        probe.set_params(&q)?;
        let up = loss(&probe)?;
        q[i] = p[i] - h;
        probe.set_params(&q)?;
        let down = loss(&probe)?;
        q[i] = p[i];
        let numeric = (up - down) / (2.0 * h);
        let diff = (numeric - analytic[i]).abs();
        if diff >= 1e-9 {
            worst = worst.max(diff / numeric.abs().max(analytic[i].abs()).max(1e-8));
        }
    }
    Ok(worst)
}

/// Uniform bins over `[-1, 1]` for each normalized feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TabularSpec {
    pub bins: Vec<usize>,
}

impl TabularSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.bins.is_empty() || self.bins.iter().any(|&b| b < 2) {
            return Err(NnError::InvalidSpec("each feature needs at least 2 bins".into()));
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.bins.iter().product()
    }

    pub fn state_index(&self, obs: &[f64]) -> Result<usize, NnError> {
        if obs.len() != self.bins.len() {
            return Err(NnError::InputSize {
                expected: self.bins.len(),
                got: obs.len(),
            });
        }
        let mut idx = 0;
        for (i, (&v, &n)) in obs.iter().zip(&self.bins).enumerate() {
            if !v.is_finite() {
                return Err(NnError::NonFiniteInput(i));
            }
            let b = (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * n as f64).floor() as usize;
            idx = idx * n + b.min(n - 1);
        }
        Ok(idx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularQ {
    pub spec: TabularSpec,
    pub table: Vec<[f64; NUM_ACTIONS]>,
}

impl TabularQ {
    pub fn new(spec: TabularSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let table = vec![[0.0; NUM_ACTIONS]; spec.num_states()];
        Ok(Self { spec, table })
    }

    pub fn values_mut(&mut self, obs: &[f64]) -> Result<&mut [f64; NUM_ACTIONS], NnError> {
        let i = self.spec.state_index(obs)?;
        Ok(&mut self.table[i])
    }
}

impl ActionValues for TabularQ {
    fn action_values(&self, obs: &[f64]) -> Result<[f64; NUM_ACTIONS], NnError> {
        Ok(self.table[self.spec.state_index(obs)?])
    }
}
