//! Dense networks with hand-written forward and backward passes.
//!
//! [`Mlp`] backs both the backbone `f` (rectifier on hidden layers, identity
//! output) and the two-layer projection head `g`. Parameters are updated by
//! SGD with momentum; weight decay touches weights only.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("input has dimension {got}, network expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("activation cache is from parameter version {cache}, network is at {net}")]
    StaleCache { cache: u64, net: u64 },
    #[error("snapshot layout does not match the network")]
    SnapshotMismatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Weights are row-major `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    fn uniform<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut layer = Self::zeros(inputs, outputs);
        layer.weights.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-bound..bound));
        layer
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

fn forward_layers(layers: &[Dense], x: &[f64]) -> Vec<f64> {
    let last = layers.len() - 1;
    layers.iter().enumerate().fold(x.to_vec(), |h, (i, layer)| {
        let mut z = layer.apply(&h);
        if i < last {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        z
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.1, momentum: 0.9, weight_decay: 5e-4 }
    }
}

/// Cosine annealing from `lr0` at epoch 0 to `lr_min` at epoch `total`.
pub fn cosine_annealing(lr0: f64, lr_min: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let phase = std::f64::consts::PI * epoch as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos())
}

/// Activations kept by [`Mlp::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    /// `inputs[l][b]` is the input of layer `l` for batch row `b`.
    inputs: Vec<Vec<Vec<f64>>>,
    outputs: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn outputs(&self) -> &[Vec<f64>] {
        &self.outputs
    }

    pub fn into_outputs(self) -> Vec<Vec<f64>> {
        self.outputs
    }
}

/// Parameter gradients, laid out like the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    velocity: Vec<Dense>,
    frozen: bool,
    version: u64,
}

pub type MlpBackbone = Mlp;
pub type ProjectionHead = Mlp;

/// Immutable copy of an [`Mlp`]'s parameters; also usable as a frozen teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    layers: Vec<Dense>,
}

impl Snapshot {
    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        forward_layers(&self.layers, x)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    /// Bit-for-bit parameter equality (NaN-safe, unlike `==`).
    pub fn bitwise_eq(&self, other: &Snapshot) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.inputs == b.inputs
                    && a.outputs == b.outputs
                    && bits(&a.weights) == bits(&b.weights)
                    && bits(&a.bias) == bits(&b.bias)
            })
    }
}

impl Mlp {
    /// Seeded uniform init in `±1/√fan_in` for every layer in `dims[0] → … → dims[n]`.
    pub fn new(dims: &[usize], seed: u64) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let mut rng = seed::rng(seed, "mlp-init", &[dims.len() as u64]);
        let layers: Vec<Dense> = dims.windows(2).map(|w| Dense::uniform(w[0], w[1], &mut rng)).collect();
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<Dense>) -> Self {
        let velocity = layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect();
        Self { layers, velocity, frozen: false, version: 0 }
    }

    /// Backbone `input → hidden… → feature`.
    pub fn backbone(input_dim: usize, hidden: &[usize], feature_dim: usize, seed: u64) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(feature_dim);
        Self::new(&dims, seed)
    }

    /// Two dense layers with one rectifier between them.
    pub fn projection_head(input_dim: usize, width: usize, output_dim: usize, seed: u64) -> Self {
        Self::new(&[input_dim, width, output_dim], seed ^ 0x9e37_79b9)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flat parameter accessor (weights then bias, layer by layer).
    pub fn param(&self, index: usize) -> f64 {
        *self.param_slot(index)
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        *self.param_slot_mut(index) = value;
        self.version += 1;
    }

    fn param_slot(&self, mut index: usize) -> &f64 {
        for l in &self.layers {
            if index < l.weights.len() {
                return &l.weights[index];
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return &l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    fn param_slot_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            if index < l.weights.len() {
                return &mut l.weights[index];
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        self.check_input(x)?;
        Ok(forward_layers(&self.layers, x))
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NetError> {
        if x.len() != self.input_dim() {
            return Err(NetError::ShapeMismatch { expected: self.input_dim(), got: x.len() });
        }
        Ok(())
    }

    pub fn forward(&self, batch: &[Vec<f64>]) -> Result<ForwardCache, NetError> {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h: Vec<Vec<f64>> = Vec::with_capacity(batch.len());
        for x in batch {
            self.check_input(x)?;
            h.push(x.clone());
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let next: Vec<Vec<f64>> = h
                .iter()
                .map(|row| {
                    let mut z = layer.apply(row);
                    if i < last {
                        z.iter_mut().for_each(|v| *v = v.max(0.0));
                    }
                    z
                })
                .collect();
            inputs.push(h);
            h = next;
        }
        Ok(ForwardCache { version: self.version, inputs, outputs: h })
    }

    /// Gradients of `Σ_b grad_out[b]ᵀ · out[b]` w.r.t. parameters and inputs.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[Vec<f64>]) -> Result<(Gradients, Vec<Vec<f64>>), NetError> {
        if cache.version != self.version {
            return Err(NetError::StaleCache { cache: cache.version, net: self.version });
        }
        let mut grads: Vec<Dense> = self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect();
        let mut delta: Vec<Vec<f64>> = grad_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let g = &mut grads[i];
            let layer_inputs = &cache.inputs[i];
            for (x, d) in layer_inputs.iter().zip(&delta) {
                for o in 0..layer.outputs {
                    if d[o] == 0.0 {
                        continue;
                    }
                    g.bias[o] += d[o];
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (w, xi) in row.iter_mut().zip(x) {
                        *w += d[o] * xi;
                    }
                }
            }
            // Back through the linear map, then through the rectifier that
            // produced this layer's input (all layers but the first).
            delta = layer_inputs
                .iter()
                .zip(&delta)
                .map(|(x, d)| {
                    let mut back = vec![0.0; layer.inputs];
                    for o in 0..layer.outputs {
                        if d[o] == 0.0 {
                            continue;
                        }
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (b, w) in back.iter_mut().zip(row) {
                            *b += d[o] * w;
                        }
                    }
                    if i > 0 {
                        for (b, xi) in back.iter_mut().zip(x) {
                            if *xi <= 0.0 {
                                *b = 0.0;
                            }
                        }
                    }
                    back
                })
                .collect();
        }
        Ok((Gradients { layers: grads }, delta))
    }

    /// One SGD-with-momentum step. A no-op on parameters when frozen.
    pub fn apply_step(&mut self, grads: &Gradients, opt: &SgdConfig) {
        if self.frozen {
            return;
        }
        for ((layer, vel), g) in self.layers.iter_mut().zip(&mut self.velocity).zip(&grads.layers) {
            for ((w, v), gw) in layer.weights.iter_mut().zip(&mut vel.weights).zip(&g.weights) {
                *v = opt.momentum * *v + gw + opt.weight_decay * *w;
                *w -= opt.lr * *v;
            }
            for ((b, v), gb) in layer.bias.iter_mut().zip(&mut vel.bias).zip(&g.bias) {
                *v = opt.momentum * *v + gb;
                *b -= opt.lr * *v;
            }
        }
        self.version += 1;
    }

    /// Backward pass followed by a step; returns the gradient w.r.t. the inputs
    /// (computed with the pre-step parameters). Frozen networks still
    /// propagate input gradients.
    pub fn backward_and_step(
        &mut self,
        cache: &ForwardCache,
        grad_out: &[Vec<f64>],
        opt: &SgdConfig,
    ) -> Result<Vec<Vec<f64>>, NetError> {
        let (grads, input_grads) = self.backward(cache, grad_out)?;
        self.apply_step(&grads, opt);
        Ok(input_grads)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { layers: self.layers.clone() }
    }

    /// Restores parameters; momentum buffers are cleared.
    pub fn restore(&mut self, snap: &Snapshot) -> Result<(), NetError> {
        let same_shape = snap.layers.len() == self.layers.len()
            && snap.layers.iter().zip(&self.layers).all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs);
        if !same_shape {
            return Err(NetError::SnapshotMismatch);
        }
        self.layers = snap.layers.clone();
        self.velocity = self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect();
        self.version += 1;
        Ok(())
    }

    pub fn from_snapshot(snap: &Snapshot) -> Self {
        Self::from_layers(snap.layers.clone())
    }
}

/// Unconstrained linear classifier `z_k = w_kᵀμ + b_k` for the learnable
/// baseline. Rows are added as classes arrive.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    dim: usize,
    classes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    vel_w: Vec<Vec<f64>>,
    vel_b: Vec<f64>,
    seed: u64,
}

impl LinearClassifier {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, classes: Vec::new(), weights: Vec::new(), bias: Vec::new(), vel_w: Vec::new(), vel_b: Vec::new(), seed }
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn weight_row(&self, index: usize) -> &[f64] {
        &self.weights[index]
    }

    pub fn add_class(&mut self, class: usize) {
        if self.classes.contains(&class) {
            return;
        }
        let mut rng = seed::rng(self.seed, "linear-classifier", &[class as u64]);
        let bound = 1.0 / (self.dim as f64).sqrt();
        self.classes.push(class);
        self.weights.push((0..self.dim).map(|_| rng.random_range(-bound..bound)).collect());
        self.bias.push(0.0);
        self.vel_w.push(vec![0.0; self.dim]);
        self.vel_b.push(0.0);
    }

    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(feature).map(|(x, y)| x * y).sum::<f64>())
            .collect()
    }

    /// Highest-scoring class; ties go to the lowest class id.
    pub fn predict(&self, feature: &[f64]) -> Option<usize> {
        let logits = self.logits(feature);
        let mut best: Option<(usize, f64)> = None;
        for (&c, &z) in self.classes.iter().zip(&logits) {
            match best {
                Some((bc, bz)) if z < bz || (z == bz && c > bc) => {}
                _ => best = Some((c, z)),
            }
        }
        best.map(|(c, _)| c)
    }

    /// Cross-entropy over all rows for one sample. Returns the loss, the
    /// gradient w.r.t. the feature and the per-row logit gradient.
    pub fn cross_entropy(&self, feature: &[f64], label: usize) -> Option<(f64, Vec<f64>, Vec<f64>)> {
        let pos = self.classes.iter().position(|&c| c == label)?;
        let (value, dz) = crate::losses::softmax_xent(&self.logits(feature), pos);
        let mut grad = vec![0.0; self.dim];
        for (w, d) in self.weights.iter().zip(&dz) {
            crate::linalg::axpy(*d, w, &mut grad);
        }
        Some((value, grad, dz))
    }

    /// SGD step given accumulated `Σ dz_k · μ` (weights) and `Σ dz_k` (bias).
    pub fn step(&mut self, grad_w: &[Vec<f64>], grad_b: &[f64], opt: &SgdConfig) {
        for k in 0..self.classes.len() {
            for j in 0..self.dim {
                let v = &mut self.vel_w[k][j];
                *v = opt.momentum * *v + grad_w[k][j] + opt.weight_decay * self.weights[k][j];
                self.weights[k][j] -= opt.lr * *v;
            }
            let v = &mut self.vel_b[k];
            *v = opt.momentum * *v + grad_b[k];
            self.bias[k] -= opt.lr * *v;
        }
    }
}

/// Versioned parameter checkpoint: layer dims followed by row-major values.
/// Serialized as JSON; floats round-trip exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub version: u32,
    pub layers: Vec<Dense>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Mlp {
    pub fn to_checkpoint(&self) -> NetCheckpoint {
        NetCheckpoint { version: CHECKPOINT_VERSION, layers: self.layers.clone() }
    }

    pub fn from_checkpoint(ck: NetCheckpoint) -> Result<Self, NetError> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(NetError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        if ck.layers.is_empty() {
            return Err(NetError::Checkpoint("no layers".into()));
        }
        for pair in ck.layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(NetError::Checkpoint("layer dimensions do not chain".into()));
            }
        }
        for l in &ck.layers {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(NetError::Checkpoint("parameter count does not match layer dims".into()));
            }
        }
        Ok(Self::from_layers(ck.layers))
    }
}
