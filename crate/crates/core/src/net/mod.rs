//! Toy layered acoustic model: conv → bidirectional LSTM → FC stack with a
//! 28-unit CTC output head, exact reverse-mode gradients restricted to a
//! trainable suffix of the layers, and Adam updates.
//!
//! The model deliberately runs at toy scale so training stays desk-sized;
//! the full-scale layer manifest in `topology` carries the real parameter
//! counts for selection math. Everything is 64-bit and deterministic: a
//! fixed config seed reproduces initialisation bit-for-bit.

pub mod conv;
pub mod dense;
pub mod lstm;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::seeding;
use crate::topology::{LayerKind, LayerSpec, ModelTopology, SubModelSpec};

use conv::{ConvCache, ConvLayer};
use dense::{FcCache, FcLayer};
use lstm::{BlstmCache, BlstmLayer, LstmDirection};

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("feature frames are {found} wide, model expects {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("forward cache does not match this model/input: {0}")]
    NoForwardCache(String),
    #[error("gradient tensor '{tensor}' has a non-finite value at index {index}")]
    NonFiniteGradient { tensor: String, index: usize },
    #[error("no tensor named '{0}' in this model")]
    UnknownTensor(String),
    #[error("gradient provided for frozen tensor '{0}'")]
    GradientForFrozenTensor(String),
    #[error("tensor '{name}' has {found} values, expected {expected}")]
    TensorSizeMismatch {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("first trainable layer {0} out of range (model has {1} layers)")]
    TrainableIndexOutOfRange(usize, usize),
}

/// One time-convolution layer: `out_channels` filters of width `kernel`
/// (odd, for same-padding) over the input channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
}

/// Architecture description. Layer order is always conv layers, then
/// bidirectional recurrent layers, then hidden FC layers, then the linear
/// output layer of `output_units`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub n_mels: usize,
    pub conv_layers: Vec<ConvSpec>,
    /// Hidden size per direction for each bidirectional layer.
    pub birnn_layers: Vec<usize>,
    /// Widths of hidden FC layers (ReLU); the output layer is separate.
    pub fc_layers: Vec<usize>,
    pub output_units: usize,
    pub seed: u64,
}

impl NetConfig {
    /// Default desk-scale shape: one conv (16 ch, kernel 5), two
    /// bidirectional layers (hidden 48 per direction), one hidden FC (64),
    /// 28-unit output. ≈95 k parameters.
    pub fn toy_default(seed: u64) -> Self {
        NetConfig {
            n_mels: crate::features::N_MELS,
            conv_layers: vec![ConvSpec {
                out_channels: 16,
                kernel: 5,
            }],
            birnn_layers: vec![48, 48],
            fc_layers: vec![64],
            output_units: crate::ctc_eval::ALPHABET_SIZE,
            seed,
        }
    }

    /// Tiny shape (≈0.9 k parameters) used by gradient-exactness tests,
    /// where every parameter is finite-difference checked.
    pub fn grad_check(seed: u64) -> Self {
        NetConfig {
            n_mels: crate::features::N_MELS,
            conv_layers: vec![ConvSpec {
                out_channels: 2,
                kernel: 3,
            }],
            birnn_layers: vec![4],
            fc_layers: vec![5],
            output_units: crate::ctc_eval::ALPHABET_SIZE,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.n_mels == 0 {
            return Err(NetError::InvalidConfig("n_mels must be positive".into()));
        }
        if self.conv_layers.is_empty() || self.birnn_layers.is_empty() || self.fc_layers.is_empty()
        {
            return Err(NetError::InvalidConfig(
                "need at least one conv, one bidirectional, and one hidden FC layer".into(),
            ));
        }
        for spec in &self.conv_layers {
            if spec.out_channels == 0 {
                return Err(NetError::InvalidConfig("conv with zero channels".into()));
            }
            if spec.kernel == 0 || spec.kernel % 2 == 0 {
                return Err(NetError::InvalidConfig(format!(
                    "conv kernel must be odd and positive, got {}",
                    spec.kernel
                )));
            }
        }
        if self.birnn_layers.iter().any(|&h| h == 0) {
            return Err(NetError::InvalidConfig("zero-width recurrent layer".into()));
        }
        if self.fc_layers.iter().any(|&w| w == 0) {
            return Err(NetError::InvalidConfig("zero-width FC layer".into()));
        }
        if self.output_units < 2 {
            return Err(NetError::InvalidConfig(
                "output needs at least blank + one symbol".into(),
            ));
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.conv_layers.len() + self.birnn_layers.len() + self.fc_layers.len() + 1
    }
}

/// Either kind of concrete layer, in stack order.
#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv(ConvLayer),
    Blstm(BlstmLayer),
    Fc(FcLayer),
}

impl Layer {
    fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(_) => LayerKind::Conv,
            Layer::Blstm(_) => LayerKind::Birnn,
            Layer::Fc(_) => LayerKind::Fc,
        }
    }

    fn param_count(&self) -> usize {
        match self {
            Layer::Conv(l) => l.param_count(),
            Layer::Blstm(l) => l.param_count(),
            Layer::Fc(l) => l.param_count(),
        }
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Conv(ConvCache),
    Blstm(BlstmCache),
    Fc(FcCache),
}

/// Activations retained from one forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ModelCache {
    per_layer: Vec<LayerCache>,
    n_frames: usize,
    output_units: usize,
}

impl ModelCache {
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }
}

/// Named parameter gradients for the trainable suffix. Keys are tensor
/// names (`"BLSTM1.fwd.weight"`, …); values are flat, in the tensor's own
/// layout.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub tensors: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Elementwise sum; missing keys are inserted.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, values) in &other.tensors {
            match self.tensors.get_mut(name) {
                Some(mine) => {
                    for (a, b) in mine.iter_mut().zip(values) {
                        *a += b;
                    }
                }
                None => {
                    self.tensors.insert(name.clone(), values.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for values in self.tensors.values_mut() {
            for v in values.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// L2 norm over all entries of all tensors.
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|v| v.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Scales down so the global norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_to_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Adam hyper-parameters. `eps` sits outside the square root, the common
/// framework convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimiser state: per-tensor first/second moments plus the shared step
/// counter. Lives only for the duration of a session — it is never
/// serialised into checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    step: u64,
    moments: BTreeMap<String, Moments>,
}

/// The concrete model: parameter tensors in stack order, the index of the
/// first trainable layer (everything below is frozen), and optimiser state.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyAcousticModel {
    cfg: NetConfig,
    layers: Vec<Layer>,
    names: Vec<String>,
    first_trainable_layer: usize,
    adam: AdamState,
}

impl ToyAcousticModel {
    /// Deterministic initialisation: weights uniform in ±sqrt(1/fan_in)
    /// drawn from one seeded stream in fixed tensor order, biases zero.
    pub fn init(cfg: NetConfig) -> Result<Self, NetError> {
        cfg.validate()?;
        let mut rng = seeding::rng_from(cfg.seed, "net-init");
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let s = (1.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-s..s)).collect()
        };

        let mut layers = Vec::new();
        let mut names = Vec::new();
        let mut width = cfg.n_mels;
        for (i, spec) in cfg.conv_layers.iter().enumerate() {
            let fan_in = width * spec.kernel;
            layers.push(Layer::Conv(ConvLayer {
                in_ch: width,
                out_ch: spec.out_channels,
                kernel: spec.kernel,
                weight: draw(spec.out_channels * width * spec.kernel, fan_in),
                bias: vec![0.0; spec.out_channels],
            }));
            names.push(format!("CONV{}", i + 1));
            width = spec.out_channels;
        }
        for (i, &hidden) in cfg.birnn_layers.iter().enumerate() {
            let mut direction = |_: &str| LstmDirection {
                input: width,
                hidden,
                weight: draw(4 * hidden * (width + hidden), width + hidden),
                bias: vec![0.0; 4 * hidden],
            };
            let fwd = direction("fwd");
            let bwd = direction("bwd");
            layers.push(Layer::Blstm(BlstmLayer { fwd, bwd }));
            names.push(format!("BLSTM{}", i + 1));
            width = 2 * hidden;
        }
        let fc_widths: Vec<(usize, bool)> = cfg
            .fc_layers
            .iter()
            .map(|&w| (w, true))
            .chain(std::iter::once((cfg.output_units, false)))
            .collect();
        for (i, &(out, relu)) in fc_widths.iter().enumerate() {
            layers.push(Layer::Fc(FcLayer {
                input: width,
                output: out,
                relu,
                weight: draw(out * width, width),
                bias: vec![0.0; out],
            }));
            names.push(format!("FC{}", i + 1));
            width = out;
        }
        Ok(ToyAcousticModel {
            cfg,
            layers,
            names,
            first_trainable_layer: 0,
            adam: AdamState::default(),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Layer-level view of this model for sub-model selection.
    pub fn topology(&self) -> ModelTopology {
        let specs = self
            .layers
            .iter()
            .zip(&self.names)
            .map(|(layer, name)| LayerSpec {
                name: name.clone(),
                kind: layer.kind(),
                param_count: layer.param_count() as u64,
            })
            .collect();
        ModelTopology::new(specs).expect("a valid model always maps to a valid topology")
    }

    pub fn first_trainable_layer(&self) -> usize {
        self.first_trainable_layer
    }

    /// Marks layers `index..` trainable and everything below frozen.
    pub fn set_first_trainable_layer(&mut self, index: usize) -> Result<(), NetError> {
        if index >= self.layers.len() {
            return Err(NetError::TrainableIndexOutOfRange(index, self.layers.len()));
        }
        self.first_trainable_layer = index;
        Ok(())
    }

    /// Applies a sub-model chosen against this model's own topology.
    pub fn apply_submodel(&mut self, spec: &SubModelSpec) -> Result<(), NetError> {
        self.set_first_trainable_layer(spec.first_trainable_index)
    }

    fn tensor_names_of(&self, index: usize) -> Vec<String> {
        let base = &self.names[index];
        match &self.layers[index] {
            Layer::Conv(_) | Layer::Fc(_) => {
                vec![format!("{base}.weight"), format!("{base}.bias")]
            }
            Layer::Blstm(_) => vec![
                format!("{base}.fwd.weight"),
                format!("{base}.fwd.bias"),
                format!("{base}.bwd.weight"),
                format!("{base}.bwd.bias"),
            ],
        }
    }

    fn trainable_tensor_names(&self) -> Vec<String> {
        (self.first_trainable_layer..self.layers.len())
            .flat_map(|i| self.tensor_names_of(i))
            .collect()
    }

    /// All tensors in fixed stack order: (name, dims, values).
    pub fn export_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (layer, base) in self.layers.iter().zip(&self.names) {
            match layer {
                Layer::Conv(l) => {
                    out.push((
                        format!("{base}.weight"),
                        vec![l.out_ch, l.in_ch, l.kernel],
                        l.weight.clone(),
                    ));
                    out.push((format!("{base}.bias"), vec![l.out_ch], l.bias.clone()));
                }
                Layer::Blstm(l) => {
                    for (dir, d) in [("fwd", &l.fwd), ("bwd", &l.bwd)] {
                        out.push((
                            format!("{base}.{dir}.weight"),
                            vec![4 * d.hidden, d.input + d.hidden],
                            d.weight.clone(),
                        ));
                        out.push((format!("{base}.{dir}.bias"), vec![4 * d.hidden], d.bias.clone()));
                    }
                }
                Layer::Fc(l) => {
                    out.push((
                        format!("{base}.weight"),
                        vec![l.output, l.input],
                        l.weight.clone(),
                    ));
                    out.push((format!("{base}.bias"), vec![l.output], l.bias.clone()));
                }
            }
        }
        out
    }

    fn tensor_slots(&mut self) -> BTreeMap<String, &mut Vec<f64>> {
        let mut map: BTreeMap<String, &mut Vec<f64>> = BTreeMap::new();
        for (layer, base) in self.layers.iter_mut().zip(&self.names) {
            match layer {
                Layer::Conv(l) => {
                    map.insert(format!("{base}.weight"), &mut l.weight);
                    map.insert(format!("{base}.bias"), &mut l.bias);
                }
                Layer::Blstm(l) => {
                    map.insert(format!("{base}.fwd.weight"), &mut l.fwd.weight);
                    map.insert(format!("{base}.fwd.bias"), &mut l.fwd.bias);
                    map.insert(format!("{base}.bwd.weight"), &mut l.bwd.weight);
                    map.insert(format!("{base}.bwd.bias"), &mut l.bwd.bias);
                }
                Layer::Fc(l) => {
                    map.insert(format!("{base}.weight"), &mut l.weight);
                    map.insert(format!("{base}.bias"), &mut l.bias);
                }
            }
        }
        map
    }

    /// Replaces parameter values by tensor name; shapes must match what the
    /// model already has. Unknown names and size mismatches are errors.
    pub fn import_tensors(
        &mut self,
        tensors: &[(String, Vec<usize>, Vec<f64>)],
    ) -> Result<(), NetError> {
        // Validate against the current export before mutating anything.
        let current: BTreeMap<String, usize> = self
            .export_tensors()
            .into_iter()
            .map(|(name, _, values)| (name, values.len()))
            .collect();
        for (name, dims, values) in tensors {
            let expected = *current
                .get(name)
                .ok_or_else(|| NetError::UnknownTensor(name.clone()))?;
            let dim_product: usize = dims.iter().product();
            if values.len() != expected || dim_product != expected {
                return Err(NetError::TensorSizeMismatch {
                    name: name.clone(),
                    expected,
                    found: values.len().max(dim_product),
                });
            }
        }
        let mut slots = self.tensor_slots();
        for (name, _, values) in tensors {
            let slot = slots.get_mut(name).expect("validated above");
            slot.copy_from_slice(values);
        }
        Ok(())
    }

    /// Test/diagnostic access to one tensor's values.
    pub fn tensor_values(&self, name: &str) -> Option<Vec<f64>> {
        self.export_tensors()
            .into_iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, v)| v)
    }

    /// Overwrites one tensor's values (sizes must match).
    pub fn set_tensor_values(&mut self, name: &str, values: &[f64]) -> Result<(), NetError> {
        let mut slots = self.tensor_slots();
        let slot = slots
            .get_mut(name)
            .ok_or_else(|| NetError::UnknownTensor(name.to_string()))?;
        if slot.len() != values.len() {
            return Err(NetError::TensorSizeMismatch {
                name: name.to_string(),
                expected: slot.len(),
                found: values.len(),
            });
        }
        slot.copy_from_slice(values);
        Ok(())
    }

    /// Full forward pass; logits have one row per input frame.
    pub fn forward(&self, feats: &FeatureMatrix) -> Result<(Vec<Vec<f64>>, ModelCache), NetError> {
        if feats.n_mels() != self.cfg.n_mels {
            return Err(NetError::ShapeMismatch {
                expected: self.cfg.n_mels,
                found: feats.n_mels(),
            });
        }
        let mut x: Vec<Vec<f64>> = feats.frames().to_vec();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(l) => {
                    let (y, cache) = l.forward(&x);
                    per_layer.push(LayerCache::Conv(cache));
                    y
                }
                Layer::Blstm(l) => {
                    let (y, cache) = l.forward(&x);
                    per_layer.push(LayerCache::Blstm(cache));
                    y
                }
                Layer::Fc(l) => {
                    let (y, cache) = l.forward(&x);
                    per_layer.push(LayerCache::Fc(cache));
                    y
                }
            };
        }
        let cache = ModelCache {
            per_layer,
            n_frames: feats.n_frames(),
            output_units: self.cfg.output_units,
        };
        Ok((x, cache))
    }

    /// Reverse-mode gradients of the trainable suffix given ∂loss/∂logits.
    /// Backpropagation stops below the earliest trainable layer; frozen
    /// layers contribute no gradient tensors at all.
    pub fn backward(
        &self,
        cache: &ModelCache,
        grad_logits: &[Vec<f64>],
    ) -> Result<Gradients, NetError> {
        if cache.per_layer.len() != self.layers.len() {
            return Err(NetError::NoForwardCache(format!(
                "cache has {} layers, model has {}",
                cache.per_layer.len(),
                self.layers.len()
            )));
        }
        if grad_logits.len() != cache.n_frames
            || grad_logits.iter().any(|r| r.len() != cache.output_units)
        {
            return Err(NetError::NoForwardCache(format!(
                "upstream gradient is {}×{}, cache expects {}×{}",
                grad_logits.len(),
                grad_logits.first().map_or(0, |r| r.len()),
                cache.n_frames,
                cache.output_units
            )));
        }
        let mut grads = Gradients::default();
        let mut dy: Vec<Vec<f64>> = grad_logits.to_vec();
        for index in (self.first_trainable_layer..self.layers.len()).rev() {
            let need_dx = index > self.first_trainable_layer;
            let base = &self.names[index];
            dy = match (&self.layers[index], &cache.per_layer[index]) {
                (Layer::Conv(l), LayerCache::Conv(c)) => {
                    let (g, dx) = l.backward(c, &dy, need_dx);
                    grads.tensors.insert(format!("{base}.weight"), g.dweight);
                    grads.tensors.insert(format!("{base}.bias"), g.dbias);
                    dx.unwrap_or_default()
                }
                (Layer::Blstm(l), LayerCache::Blstm(c)) => {
                    let (g, dx) = l.backward(c, &dy);
                    grads.tensors.insert(format!("{base}.fwd.weight"), g.fwd.dweight);
                    grads.tensors.insert(format!("{base}.fwd.bias"), g.fwd.dbias);
                    grads.tensors.insert(format!("{base}.bwd.weight"), g.bwd.dweight);
                    grads.tensors.insert(format!("{base}.bwd.bias"), g.bwd.dbias);
                    dx
                }
                (Layer::Fc(l), LayerCache::Fc(c)) => {
                    let (g, dx) = l.backward(c, &dy, need_dx);
                    grads.tensors.insert(format!("{base}.weight"), g.dweight);
                    grads.tensors.insert(format!("{base}.bias"), g.dbias);
                    dx.unwrap_or_default()
                }
                _ => {
                    return Err(NetError::NoForwardCache(
                        "cache layer kinds do not match the model".into(),
                    ))
                }
            };
        }
        Ok(grads)
    }

    /// One Adam update over the trainable tensors named in `grads`.
    /// Validates every gradient before touching any parameter, so a
    /// non-finite gradient leaves the model and optimiser state untouched.
    pub fn adam_step(&mut self, grads: &Gradients, hyper: &AdamHyper) -> Result<(), NetError> {
        let trainable: Vec<String> = self.trainable_tensor_names();
        let sizes: BTreeMap<String, usize> = self
            .export_tensors()
            .into_iter()
            .map(|(name, _, values)| (name, values.len()))
            .collect();
        for (name, values) in &grads.tensors {
            let expected = *sizes
                .get(name)
                .ok_or_else(|| NetError::UnknownTensor(name.clone()))?;
            if !trainable.iter().any(|t| t == name) {
                return Err(NetError::GradientForFrozenTensor(name.clone()));
            }
            if values.len() != expected {
                return Err(NetError::TensorSizeMismatch {
                    name: name.clone(),
                    expected,
                    found: values.len(),
                });
            }
            if let Some(index) = values.iter().position(|v| !v.is_finite()) {
                return Err(NetError::NonFiniteGradient {
                    tensor: name.clone(),
                    index,
                });
            }
        }

        // Take the optimiser state out to sidestep aliasing with the
        // parameter borrows below.
        let mut adam = std::mem::take(&mut self.adam);
        adam.step += 1;
        let t = adam.step;
        let bc1 = 1.0 - hyper.beta1.powi(t as i32);
        let bc2 = 1.0 - hyper.beta2.powi(t as i32);
        let mut slots = self.tensor_slots();
        for (name, grad) in &grads.tensors {
            let params = slots.get_mut(name).expect("validated above");
            let moments = adam.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            for (i, &g) in grad.iter().enumerate() {
                moments.m[i] = hyper.beta1 * moments.m[i] + (1.0 - hyper.beta1) * g;
                moments.v[i] = hyper.beta2 * moments.v[i] + (1.0 - hyper.beta2) * g * g;
                let m_hat = moments.m[i] / bc1;
                let v_hat = moments.v[i] / bc2;
                params[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            }
        }
        self.adam = adam;
        Ok(())
    }

    /// Drops optimiser moments and the step counter (used between rounds:
    /// checkpoints carry parameters only, never optimiser state).
    pub fn reset_adam(&mut self) {
        self.adam = AdamState::default();
    }

    pub fn adam_step_count(&self) -> u64 {
        self.adam.step
    }
}
