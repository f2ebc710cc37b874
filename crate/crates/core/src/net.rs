//! Dense feed-forward classifier with a softmax head and exact backpropagation.
//!
//! Parameters live in one flat buffer so the optimizer, gradient checks and
//! checksums can treat them uniformly. Layer `l` owns a row-major
//! `out_dim x in_dim` weight block followed by its `out_dim` biases.

use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("backward called without cached forward state")]
    NoForwardState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                // Comparison form keeps NaN visible to divergence checks.
                if x < 0.0 {
                    0.0
                } else {
                    x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_dim == 0 {
            return Err(NetError::Config("input_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(NetError::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if let Some(pos) = self.hidden_dims.iter().position(|&d| d == 0) {
            return Err(NetError::Config(format!("hidden layer {pos} has width 0")));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.num_classes)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerShape {
    in_dim: usize,
    out_dim: usize,
    weight_offset: usize,
    bias_offset: usize,
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Intermediate values recorded by [`Network::forward_cached`].
///
/// `inputs[l]` is the input to layer `l`; `pre[l]` its affine output.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.pre.is_empty()
    }

    pub fn clear(&mut self) {
        self.inputs.clear();
        self.pre.clear();
    }
}

/// Parameter gradients, laid out like [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn fill_zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetConfig,
    shapes: Vec<LayerShape>,
    params: Vec<f64>,
}

impl Network {
    /// Builds a network with weights drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// and zero biases.
    pub fn init(config: &NetConfig) -> Result<Self, NetError> {
        let mut net = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        for shape in &net.shapes {
            let bound = 1.0 / (shape.in_dim as f64).sqrt();
            let block = &mut net.params[shape.weight_offset..shape.weight_offset + shape.in_dim * shape.out_dim];
            for w in block {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    /// All parameters zero: every input maps to the uniform distribution.
    pub fn zeros(config: &NetConfig) -> Result<Self, NetError> {
        config.validate()?;
        let mut shapes = Vec::new();
        let mut offset = 0;
        for (in_dim, out_dim) in config.layer_dims() {
            shapes.push(LayerShape {
                in_dim,
                out_dim,
                weight_offset: offset,
                bias_offset: offset + in_dim * out_dim,
            });
            offset += in_dim * out_dim + out_dim;
        }
        Ok(Self {
            config: config.clone(),
            shapes,
            params: vec![0.0; offset],
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Mask over [`Network::params`] that is `true` for weights and `false` for biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for s in &self.shapes {
            mask[s.weight_offset..s.bias_offset].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    /// Order-sensitive hash of the exact parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        for p in &self.params {
            p.to_bits().hash(&mut hasher);
        }
        hasher.finish()
    }

    pub fn gradients(&self) -> Gradients {
        Gradients::zeros(self.params.len())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Prediction, NetError> {
        let logits = self.logits(x)?;
        let probs = softmax(&logits);
        Ok(Prediction { logits, probs })
    }

    /// Logits only, without the softmax.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        self.check_input(x)?;
        let last = self.shapes.len() - 1;
        let mut current = x.to_vec();
        for (l, shape) in self.shapes.iter().enumerate() {
            let mut z = self.affine(shape, &current);
            if l != last {
                z.iter_mut().for_each(|v| *v = self.config.activation.apply(*v));
            }
            current = z;
        }
        Ok(current)
    }

    /// Forward pass that records what [`Network::backward`] needs into `tape`.
    pub fn forward_cached(&self, x: &[f64], tape: &mut Tape) -> Result<Prediction, NetError> {
        self.check_input(x)?;
        tape.clear();
        let last = self.shapes.len() - 1;
        let mut current = x.to_vec();
        for (l, shape) in self.shapes.iter().enumerate() {
            let z = self.affine(shape, &current);
            tape.inputs.push(current);
            current = if l == last {
                z.clone()
            } else {
                z.iter().map(|&v| self.config.activation.apply(v)).collect()
            };
            tape.pre.push(z);
        }
        let probs = softmax(&current);
        Ok(Prediction { logits: current, probs })
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d logits`.
    pub fn backward(&self, tape: &Tape, dl_dlogits: &[f64], grads: &mut Gradients) -> Result<(), NetError> {
        if tape.is_empty() {
            return Err(NetError::NoForwardState);
        }
        if tape.pre.len() != self.shapes.len() {
            return Err(NetError::Dimension {
                expected: self.shapes.len(),
                got: tape.pre.len(),
            });
        }
        if dl_dlogits.len() != self.num_classes() {
            return Err(NetError::Dimension {
                expected: self.num_classes(),
                got: dl_dlogits.len(),
            });
        }
        if grads.values.len() != self.params.len() {
            return Err(NetError::Dimension {
                expected: self.params.len(),
                got: grads.values.len(),
            });
        }

        let act = self.config.activation;
        let mut delta = dl_dlogits.to_vec();
        for l in (0..self.shapes.len()).rev() {
            let s = self.shapes[l];
            let input = &tape.inputs[l];
            for (o, &d) in delta.iter().enumerate().take(s.out_dim) {
                if d == 0.0 {
                    continue;
                }
                let row = s.weight_offset + o * s.in_dim;
                for (g, &xi) in grads.values[row..row + s.in_dim].iter_mut().zip(input) {
                    *g += d * xi;
                }
                grads.values[s.bias_offset + o] += d;
            }
            if l == 0 {
                break;
            }
            // Propagate to the previous layer's activations, then through its nonlinearity.
            let mut prev = vec![0.0; s.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = s.weight_offset + o * s.in_dim;
                for (p, &w) in prev.iter_mut().zip(&self.params[row..row + s.in_dim]) {
                    *p += d * w;
                }
            }
            let z_prev = &tape.pre[l - 1];
            for ((p, &z), &a) in prev.iter_mut().zip(z_prev).zip(input) {
                *p *= act.derivative(z, a);
            }
            delta = prev;
        }
        Ok(())
    }

    fn affine(&self, shape: &LayerShape, input: &[f64]) -> Vec<f64> {
        let w = &self.params[shape.weight_offset..shape.bias_offset];
        let b = &self.params[shape.bias_offset..shape.bias_offset + shape.out_dim];
        w.chunks_exact(shape.in_dim)
            .zip(b)
            .map(|(row, &bias)| row.iter().zip(input).fold(bias, |acc, (w, x)| acc + w * x))
            .collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NetError> {
        if x.len() != self.config.input_dim {
            return Err(NetError::Dimension {
                expected: self.config.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(hidden: Vec<usize>, seed: u64) -> NetConfig {
        NetConfig {
            input_dim: 3,
            hidden_dims: hidden,
            num_classes: 4,
            activation: Activation::Tanh,
            init_seed: seed,
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = Network::init(&cfg(vec![5], 7)).unwrap();
        let b = Network::init(&cfg(vec![5], 7)).unwrap();
        let c = Network::init(&cfg(vec![5], 8)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let net = Network::init(&cfg(vec![16, 8], 1)).unwrap();
        for s in &net.shapes {
            let bound = 1.0 / (s.in_dim as f64).sqrt();
            assert!(net.params[s.weight_offset..s.bias_offset]
                .iter()
                .all(|w| w.abs() < bound));
            assert!(net.params[s.bias_offset..s.bias_offset + s.out_dim]
                .iter()
                .all(|&b| b == 0.0));
        }
    }

    #[test]
    fn empty_hidden_is_softmax_regression() {
        let net = Network::init(&cfg(vec![], 1)).unwrap();
        assert_eq!(net.num_layers(), 1);
        assert_eq!(net.num_params(), 3 * 4 + 4);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = cfg(vec![4], 0);
        c.num_classes = 1;
        assert!(matches!(Network::init(&c), Err(NetError::Config(_))));
        let mut c = cfg(vec![4, 0], 0);
        assert!(Network::init(&c).is_err());
        c.hidden_dims = vec![];
        c.input_dim = 0;
        assert!(Network::init(&c).is_err());
    }

    #[test]
    fn zero_network_is_uniform() {
        let net = Network::zeros(&cfg(vec![6], 0)).unwrap();
        let out = net.forward(&[0.3, -2.0, 9.0]).unwrap();
        for p in out.probs {
            assert_eq!(p, 0.25);
        }
    }

    #[test]
    fn softmax_cases() {
        assert!(softmax(&[1.0, 1.0, 1.0]).iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax(&[60.0, 0.0, 0.0]);
        assert!(p[0] == 1.0 && p[1] < 1e-25);
        let p = softmax(&[1e3, -1e3, 5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let net = Network::init(&cfg(vec![2], 0)).unwrap();
        assert_eq!(
            net.forward(&[1.0]).unwrap_err(),
            NetError::Dimension { expected: 3, got: 1 }
        );
    }

    #[test]
    fn backward_requires_tape() {
        let net = Network::init(&cfg(vec![2], 0)).unwrap();
        let mut g = net.gradients();
        let err = net.backward(&Tape::new(), &[0.0; 4], &mut g).unwrap_err();
        assert_eq!(err, NetError::NoForwardState);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = Network::init(&cfg(vec![5, 3], 3)).unwrap();
        let mut tape = Tape::new();
        net.forward_cached(&[0.1, 0.2, 0.3], &mut tape).unwrap();
        let mut g = net.gradients();
        net.backward(&tape, &[0.0; 4], &mut g).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cached_and_plain_forward_agree() {
        let net = Network::init(&cfg(vec![5, 3], 3)).unwrap();
        let mut tape = Tape::new();
        let x = [0.4, -1.2, 0.9];
        assert_eq!(net.forward_cached(&x, &mut tape).unwrap(), net.forward(&x).unwrap());
    }
}
