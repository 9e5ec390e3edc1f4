//! The victim: a feed-forward softmax policy with a value head.
//!
//! Layout is `d → tanh hidden layers → (policy logits, scalar value)`, with
//! both heads reading the last hidden layer. Reverse-mode gradients are
//! written out by hand over a [`ForwardTape`], which yields exact
//! `∇_x log π(a|x)` for the attacks and parameter gradients for training.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::mdp::{sample_categorical, DifferentiablePolicy};
use crate::vector::softmax;

pub const CHECKPOINT_FORMAT: &str = "uaplab.policy";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 64];

/// Affine layer `y = W x + b`, `W` row-major with shape `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    fn random<R: Rng>(inputs: usize, outputs: usize, scale: f64, rng: &mut R) -> Self {
        let std = scale / (inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { inputs, outputs, weights, bias: vec![0.0; outputs] }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// `Wᵀ g`
    fn backward_input(&self, grad_out: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.inputs];
        for (row, go) in self.weights.chunks(self.inputs).zip(grad_out) {
            if *go == 0.0 {
                continue;
            }
            for (gi, w) in g.iter_mut().zip(row) {
                *gi += go * w;
            }
        }
        g
    }

    /// `W += scale · g xᵀ`, `b += scale · g`
    fn accumulate(&mut self, grad_out: &[f64], x: &[f64], scale: f64) {
        for ((row, b), go) in self.weights.chunks_mut(self.inputs).zip(&mut self.bias).zip(grad_out) {
            let s = scale * go;
            if s == 0.0 {
                continue;
            }
            *b += s;
            for (w, v) in row.iter_mut().zip(x) {
                *w += s * v;
            }
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn check(&self) -> Result<()> {
        if self.weights.len() != self.inputs * self.outputs || self.bias.len() != self.outputs {
            return Err(Error::Schema(format!(
                "layer {}x{} carries {} weights and {} biases",
                self.outputs,
                self.inputs,
                self.weights.len(),
                self.bias.len()
            )));
        }
        ensure_finite(&self.weights, "layer weights")?;
        ensure_finite(&self.bias, "layer bias")
    }
}

/// All trainable parameters. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub hidden: Vec<Dense>,
    pub policy_head: Dense,
    pub value_head: Dense,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
            policy_head: Dense::zeros(self.policy_head.inputs, self.policy_head.outputs),
            value_head: Dense::zeros(self.value_head.inputs, self.value_head.outputs),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.hidden.iter().chain([&self.policy_head, &self.value_head])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.hidden.iter_mut().chain([&mut self.policy_head, &mut self.value_head])
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    /// Flat view: per layer, weights then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch { expected: self.param_count(), found: flat.len() });
        }
        let mut offset = 0;
        for l in self.layers_mut() {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Cached intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTape {
    pub input: Vec<f64>,
    /// Post-tanh activations of each hidden layer.
    pub hidden: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub value: f64,
}

impl ForwardTape {
    fn last_hidden(&self) -> &[f64] {
        self.hidden.last().unwrap_or(&self.input)
    }
}

/// Outcome of sampling one action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Act {
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    params: Params,
    metadata: Option<serde_json::Value>,
}

impl PolicyNet {
    /// Seeded initialization. The policy head starts near zero so the
    /// initial policy is close to uniform; the value head starts at zero.
    pub fn new(input_dim: usize, hidden_sizes: &[usize], action_count: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || action_count == 0 || hidden_sizes.contains(&0) {
            return Err(Error::InvalidInput("layer sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hidden = Vec::new();
        let mut prev = input_dim;
        for &h in hidden_sizes {
            hidden.push(Dense::random(prev, h, 1.0, &mut rng));
            prev = h;
        }
        let policy_head = Dense::random(prev, action_count, 0.01, &mut rng);
        let value_head = Dense::zeros(prev, 1);
        Ok(Self { params: Params { hidden, policy_head, value_head }, metadata: None })
    }

    pub fn from_params(params: Params) -> Result<Self> {
        let net = Self { params, metadata: None };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        let mut prev = None;
        for l in &self.params.hidden {
            l.check()?;
            if let Some(p) = prev {
                if l.inputs != p {
                    return Err(Error::Schema(format!("layer expects {} inputs, previous has {p}", l.inputs)));
                }
            }
            prev = Some(l.outputs);
        }
        for head in [&self.params.policy_head, &self.params.value_head] {
            head.check()?;
            let expected = prev.unwrap_or(self.params.policy_head.inputs);
            if head.inputs != expected {
                return Err(Error::Schema(format!("head expects {} inputs, trunk has {expected}", head.inputs)));
            }
        }
        if self.params.value_head.outputs != 1 {
            return Err(Error::Schema("value head must have one output".into()));
        }
        if self.params.policy_head.outputs == 0 {
            return Err(Error::Schema("policy head has no actions".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.params.hidden.iter().map(|l| l.outputs).collect()
    }

    pub fn metadata(&self) -> Option<&serde_json::Value> {
        self.metadata.as_ref()
    }

    pub fn set_metadata(&mut self, metadata: serde_json::Value) {
        self.metadata = Some(metadata);
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTape> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), found: x.len() });
        }
        ensure_finite(x, "policy input")?;
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(self.params.hidden.len());
        for layer in &self.params.hidden {
            let prev = hidden.last().map_or(x, |h| h.as_slice());
            let h: Vec<f64> = layer.forward(prev).into_iter().map(f64::tanh).collect();
            hidden.push(h);
        }
        let last = hidden.last().map_or(x, |h| h.as_slice());
        let logits = self.params.policy_head.forward(last);
        let value = self.params.value_head.forward(last)[0];
        ensure_finite(&logits, "policy logits")?;
        if !value.is_finite() {
            return Err(Error::NonFinite("value head".into()));
        }
        let probs = softmax(&logits);
        Ok(ForwardTape { input: x.to_vec(), hidden, logits, probs, value })
    }

    /// Back-propagates `d_logits` and `d_value` through the tape.
    ///
    /// Parameter gradients are accumulated into `grads` scaled by `scale`
    /// when given; the returned vector is the (unscaled) input gradient.
    pub fn backward(
        &self,
        tape: &ForwardTape,
        d_logits: &[f64],
        d_value: f64,
        scale: f64,
        mut grads: Option<&mut Params>,
    ) -> Vec<f64> {
        let last = tape.last_hidden();
        if let Some(g) = grads.as_deref_mut() {
            g.policy_head.accumulate(d_logits, last, scale);
            g.value_head.accumulate(&[d_value], last, scale);
        }
        let mut g_h = self.params.policy_head.backward_input(d_logits);
        if d_value != 0.0 {
            for (gi, w) in g_h.iter_mut().zip(&self.params.value_head.weights) {
                *gi += d_value * w;
            }
        }
        for l in (0..self.params.hidden.len()).rev() {
            let h = &tape.hidden[l];
            let g_z: Vec<f64> = g_h.iter().zip(h).map(|(g, hv)| g * (1.0 - hv * hv)).collect();
            let below = if l == 0 { &tape.input } else { &tape.hidden[l - 1] };
            if let Some(g) = grads.as_deref_mut() {
                g.hidden[l].accumulate(&g_z, below, scale);
            }
            g_h = self.params.hidden[l].backward_input(&g_z);
        }
        g_h
    }

    /// `∂ log π(a|x) / ∂ logits = e_a − π`.
    pub fn dlogp_dlogits(probs: &[f64], action: usize) -> Vec<f64> {
        probs.iter().enumerate().map(|(i, p)| if i == action { 1.0 - p } else { -p }).collect()
    }

    pub fn act<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Act> {
        let tape = self.forward(x)?;
        let action = sample_categorical(&tape.probs, rng);
        Ok(Act { action, log_prob: tape.probs[action].ln(), value: tape.value })
    }

    /// Exact `∇_θ log π(a|x)`.
    pub fn grad_logp_params(&self, x: &[f64], action: usize) -> Result<Params> {
        self.check_action(action)?;
        let tape = self.forward(x)?;
        let mut grads = self.params.zeros_like();
        self.backward(&tape, &Self::dlogp_dlogits(&tape.probs, action), 0.0, 1.0, Some(&mut grads));
        Ok(grads)
    }

    fn check_action(&self, action: usize) -> Result<()> {
        if action < self.action_count() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("action {action} out of range")))
        }
    }

    // -- checkpoint ---------------------------------------------------------

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            input_dim: self.input_dim(),
            hidden_sizes: self.hidden_sizes(),
            action_count: self.action_count(),
            activation: "tanh".to_string(),
            params: self.params.clone(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                c.format, c.version
            )));
        }
        if c.activation != "tanh" {
            return Err(Error::Schema(format!("unsupported activation `{}`", c.activation)));
        }
        let net = Self { params: c.params, metadata: c.metadata };
        net.validate()?;
        if net.input_dim() != c.input_dim
            || net.action_count() != c.action_count
            || net.hidden_sizes() != c.hidden_sizes
        {
            return Err(Error::Schema("declared sizes disagree with parameter shapes".into()));
        }
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.to_checkpoint())?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        Self::from_checkpoint(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_json()?.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))
            .map_err(|e| Error::Schema(e.to_string()))?;
        Self::from_checkpoint(c)
    }

    /// Rejects a checkpoint whose input size differs from the environment's.
    pub fn ensure_input_dim(&self, dim: usize) -> Result<()> {
        if self.input_dim() == dim {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected: dim, found: self.input_dim() })
        }
    }
}

impl DifferentiablePolicy for PolicyNet {
    fn input_dim(&self) -> usize {
        self.params.hidden.first().map_or(self.params.policy_head.inputs, |l| l.inputs)
    }

    fn action_count(&self) -> usize {
        self.params.policy_head.outputs
    }

    fn probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.probs)
    }

    fn grad_logp_input(&self, x: &[f64], action: usize) -> Result<Vec<f64>> {
        self.check_action(action)?;
        let tape = self.forward(x)?;
        Ok(self.backward(&tape, &Self::dlogp_dlogits(&tape.probs, action), 0.0, 1.0, None))
    }

    fn value(&self, x: &[f64]) -> Result<Option<f64>> {
        Ok(Some(self.forward(x)?.value))
    }
}

/// On-disk checkpoint layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub action_count: usize,
    pub activation: String,
    pub params: Params,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}
