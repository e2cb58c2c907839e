//! Small fully connected networks with hand-written reverse-mode gradients.
//!
//! Everything is `f64`. A forward pass records a [`Tape`] of pre- and
//! post-activations; [`MlpNet::backward`] consumes it to produce parameter
//! gradients and the gradient with respect to the input, which the actor update
//! needs for `∇ₐQ`.
//!
//! Weight matrices are stored row-major with shape `(out, in)`.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input width {got} does not match network input width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("tape was recorded on a different network or before the last parameter update")]
    StaleTape,
    #[error("networks or gradient sets have incompatible shapes")]
    ShapeMismatch,
    #[error("non-finite gradient; update rejected")]
    NonFinite,
    #[error("invalid network description: {0}")]
    Invalid(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputActivation {
    Linear,
    /// `scale · tanh(z)`, bounded by `±scale`.
    ScaledTanh(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
        }
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.in_dim..(j + 1) * self.in_dim]
    }
}

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

/// Feed-forward network. Equality compares architecture and parameters only.
#[derive(Debug)]
pub struct MlpNet {
    layers: Vec<Dense>,
    hidden: Activation,
    output: OutputActivation,
    id: u64,
    version: u64,
}

impl Clone for MlpNet {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            hidden: self.hidden,
            output: self.output,
            id: fresh_id(),
            version: 0,
        }
    }
}

impl PartialEq for MlpNet {
    fn eq(&self, other: &Self) -> bool {
        self.hidden == other.hidden && self.output == other.output && self.layers == other.layers
    }
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    net_id: u64,
    version: u64,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Parameter gradients, shape-congruent with an [`MlpNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(net: &MlpNet) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }

    fn congruent(&self, net: &MlpNet) -> bool {
        self.weights.len() == net.layers.len()
            && net.layers.iter().enumerate().all(|(i, l)| {
                self.weights[i].len() == l.weights.len() && self.biases[i].len() == l.biases.len()
            })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl MlpNet {
    /// Zero-initialized network with the given layer widths (input first).
    pub fn zeros(
        layer_sizes: &[usize],
        hidden: Activation,
        output: OutputActivation,
    ) -> Result<Self, NnError> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(NnError::Invalid(
                "need at least input and output widths, all non-zero".into(),
            ));
        }
        if let OutputActivation::ScaledTanh(s) = output {
            if !(s > 0.0) || !s.is_finite() {
                return Err(NnError::Invalid("scaled tanh needs a positive scale".into()));
            }
        }
        Ok(Self {
            layers: layer_sizes
                .windows(2)
                .map(|w| Dense::zeros(w[0], w[1]))
                .collect(),
            hidden,
            output,
            id: fresh_id(),
            version: 0,
        })
    }

    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn new<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        hidden: Activation,
        output: OutputActivation,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let mut net = Self::zeros(layer_sizes, hidden, output)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.in_dim as f64).sqrt();
            for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable access to the parameters; invalidates outstanding tapes.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.version += 1;
        &mut self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].in_dim)
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Multiplies the last layer's weights and biases by `factor`.
    pub fn scale_last_layer(&mut self, factor: f64) {
        self.version += 1;
        if let Some(l) = self.layers.last_mut() {
            l.weights.iter_mut().chain(l.biases.iter_mut()).for_each(|w| *w *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|w| w.is_finite()))
    }

    pub fn same_shape(&self, other: &MlpNet) -> bool {
        self.layer_sizes() == other.layer_sizes()
    }

    fn activate(&self, last: bool, z: f64) -> f64 {
        if last {
            match self.output {
                OutputActivation::Linear => z,
                OutputActivation::ScaledTanh(s) => s * z.tanh(),
            }
        } else {
            match self.hidden {
                Activation::Relu => z.max(0.0),
                Activation::Tanh => z.tanh(),
            }
        }
    }

    /// Derivative of the activation given its pre-activation `z` and output `y`.
    fn activation_slope(&self, last: bool, z: f64, y: f64) -> f64 {
        if last {
            match self.output {
                OutputActivation::Linear => 1.0,
                OutputActivation::ScaledTanh(s) => {
                    let t = y / s;
                    s * (1.0 - t * t)
                }
            }
        } else {
            match self.hidden {
                Activation::Relu => {
                    if z > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                Activation::Tanh => 1.0 - y * y,
            }
        }
    }

    /// Forward pass reusing the buffers of `tape`.
    pub fn forward_into(&self, input: &[f64], tape: &mut Tape) -> Result<(), NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::WidthMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let n = self.layers.len();
        tape.net_id = self.id;
        tape.version = self.version;
        tape.input.clear();
        tape.input.extend_from_slice(input);
        tape.pre.resize_with(n, Vec::new);
        tape.post.resize_with(n, Vec::new);
        for (l, layer) in self.layers.iter().enumerate() {
            let last = l + 1 == n;
            let (before, after) = tape.post.split_at_mut(l);
            let x: &[f64] = if l == 0 { &tape.input } else { &before[l - 1] };
            let pre = &mut tape.pre[l];
            let post = &mut after[0];
            pre.clear();
            post.clear();
            for j in 0..layer.out_dim {
                let z = dot(layer.row(j), x) + layer.biases[j];
                pre.push(z);
                post.push(self.activate(last, z));
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape), NnError> {
        let mut tape = Tape::default();
        self.forward_into(input, &mut tape)?;
        Ok((tape.output().to_vec(), tape))
    }

    /// Output only; no tape kept.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.forward(input)?.0)
    }

    /// Scalar output of a single-output network.
    pub fn predict_scalar(&self, input: &[f64]) -> Result<f64, NnError> {
        Ok(self.predict(input)?[0])
    }

    fn check_tape(&self, tape: &Tape) -> Result<(), NnError> {
        if tape.net_id != self.id || tape.version != self.version || tape.post.len() != self.layers.len()
        {
            return Err(NnError::StaleTape);
        }
        Ok(())
    }

    fn backprop(
        &self,
        tape: &Tape,
        output_grad: &[f64],
        mut grads: Option<&mut GradientSet>,
    ) -> Result<Vec<f64>, NnError> {
        self.check_tape(tape)?;
        if output_grad.len() != self.output_dim() {
            return Err(NnError::WidthMismatch {
                expected: self.output_dim(),
                got: output_grad.len(),
            });
        }
        if let Some(g) = grads.as_deref() {
            if !g.congruent(self) {
                return Err(NnError::ShapeMismatch);
            }
        }
        let n = self.layers.len();
        let mut upstream = output_grad.to_vec();
        let mut dz = Vec::new();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let last = l + 1 == n;
            dz.clear();
            dz.extend(
                tape.pre[l]
                    .iter()
                    .zip(&tape.post[l])
                    .zip(&upstream)
                    .map(|((&z, &y), &g)| g * self.activation_slope(last, z, y)),
            );
            let x: &[f64] = if l == 0 { &tape.input } else { &tape.post[l - 1] };
            if let Some(g) = grads.as_deref_mut() {
                let (gw, gb) = (&mut g.weights[l], &mut g.biases[l]);
                for (j, &d) in dz.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, x, &mut gw[j * layer.in_dim..(j + 1) * layer.in_dim]);
                    }
                    gb[j] += d;
                }
            }
            let mut down = vec![0.0; layer.in_dim];
            for (j, &d) in dz.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, layer.row(j), &mut down);
                }
            }
            upstream = down;
        }
        Ok(upstream)
    }

    /// Reverse-mode gradients of `output_grad · output` with respect to every
    /// parameter and to the input.
    pub fn backward(
        &self,
        tape: &Tape,
        output_grad: &[f64],
    ) -> Result<(GradientSet, Vec<f64>), NnError> {
        let mut grads = GradientSet::zeros_like(self);
        let input_grad = self.backprop(tape, output_grad, Some(&mut grads))?;
        Ok((grads, input_grad))
    }

    /// Like [`backward`](Self::backward) but adds into `grads`.
    pub fn backward_accumulate(
        &self,
        tape: &Tape,
        output_grad: &[f64],
        grads: &mut GradientSet,
    ) -> Result<Vec<f64>, NnError> {
        self.backprop(tape, output_grad, Some(grads))
    }

    /// Input gradient only, skipping parameter gradients.
    pub fn input_gradient(&self, tape: &Tape, output_grad: &[f64]) -> Result<Vec<f64>, NnError> {
        self.backprop(tape, output_grad, None)
    }

    /// `self ← τ·source + (1−τ)·self`, elementwise.
    pub fn soft_update(&mut self, source: &MlpNet, tau: f64) -> Result<(), NnError> {
        if !self.same_shape(source) {
            return Err(NnError::ShapeMismatch);
        }
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(NnError::Invalid(format!("tau must lie in (0, 1], got {tau}")));
        }
        self.version += 1;
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            for (tw, sw) in t
                .weights
                .iter_mut()
                .chain(t.biases.iter_mut())
                .zip(s.weights.iter().chain(&s.biases))
            {
                *tw = if tau == 1.0 { *sw } else { tau * sw + (1.0 - tau) * *tw };
            }
        }
        Ok(())
    }

    /// Binary checkpoint; see [`MlpNet::read_from`] for the layout.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), NnError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let sizes = self.layer_sizes();
        w.write_all(&(sizes.len() as u32).to_le_bytes())?;
        for s in &sizes {
            w.write_all(&(*s as u32).to_le_bytes())?;
        }
        w.write_all(&[match self.hidden {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }])?;
        let (code, scale) = match self.output {
            OutputActivation::Linear => (0u8, 0.0),
            OutputActivation::ScaledTanh(s) => (1u8, s),
        };
        w.write_all(&[code])?;
        w.write_all(&scale.to_le_bytes())?;
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.biases) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint written by [`write_to`](Self::write_to).
    ///
    /// Layout, all little-endian:
    ///
    /// ```text
    /// magic     8 bytes  "DETPONN1"
    /// n_sizes   u32
    /// sizes     u32 × n_sizes          input width first
    /// hidden    u8                     0 = relu, 1 = tanh
    /// output    u8                     0 = linear, 1 = scaled tanh
    /// scale     f64                    0 for linear
    /// params    f64 × …                per layer: weights (out × in, row-major), then biases
    /// ```
    pub fn read_from<R: Read>(mut r: R) -> Result<Self, NnError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::Format("bad magic".into()));
        }
        let n = read_u32(&mut r)? as usize;
        if !(2..=64).contains(&n) {
            return Err(NnError::Format(format!("implausible layer count {n}")));
        }
        let sizes = (0..n)
            .map(|_| read_u32(&mut r).map(|x| x as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let mut code = [0u8; 2];
        r.read_exact(&mut code[..1])?;
        let hidden = match code[0] {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            c => return Err(NnError::Format(format!("unknown hidden activation {c}"))),
        };
        r.read_exact(&mut code[1..])?;
        let scale = read_f64(&mut r)?;
        let output = match code[1] {
            0 => OutputActivation::Linear,
            1 => OutputActivation::ScaledTanh(scale),
            c => return Err(NnError::Format(format!("unknown output activation {c}"))),
        };
        let mut net = Self::zeros(&sizes, hidden, output)?;
        for l in &mut net.layers {
            for v in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *v = read_f64(&mut r)?;
            }
        }
        Ok(net)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DETPONN1";

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, NnError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Largest relative errors found by [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub max_param_error: f64,
    pub max_input_error: f64,
}

impl GradientCheck {
    pub fn max_error(&self) -> f64 {
        self.max_param_error.max(self.max_input_error)
    }
}

/// Compares reverse-mode gradients of `output_grad · net(input)` with central
/// finite differences of step `h`, for every parameter and every input.
///
/// The relative error is `|g − n| / max(|g|, |n|, floor)`, so gradients that
/// are both tiny are compared in absolute terms.
pub fn gradient_check(
    net: &MlpNet,
    input: &[f64],
    output_grad: &[f64],
    h: f64,
    floor: f64,
) -> Result<GradientCheck, NnError> {
    let (_, tape) = net.forward(input)?;
    let (grads, input_grad) = net.backward(&tape, output_grad)?;
    let objective = |n: &MlpNet, x: &[f64]| -> Result<f64, NnError> {
        Ok(n.predict(x)?.iter().zip(output_grad).map(|(y, g)| y * g).sum())
    };
    let rel = |g: f64, n: f64| (g - n).abs() / g.abs().max(n.abs()).max(floor);

    let mut max_param_error: f64 = 0.0;
    let mut probe = net.clone();
    for l in 0..net.layers.len() {
        for (is_bias, analytic) in [(false, &grads.weights[l]), (true, &grads.biases[l])] {
            for (i, &g) in analytic.iter().enumerate() {
                let mut value_at = |delta: f64| -> Result<f64, NnError> {
                    let layer = &mut probe.layers_mut()[l];
                    let slot = if is_bias { &mut layer.biases[i] } else { &mut layer.weights[i] };
                    let orig = *slot;
                    *slot = orig + delta;
                    let v = objective(&probe, input);
                    let layer = &mut probe.layers_mut()[l];
                    let slot = if is_bias { &mut layer.biases[i] } else { &mut layer.weights[i] };
                    *slot = orig;
                    v
                };
                let numeric = (value_at(h)? - value_at(-h)?) / (2.0 * h);
                max_param_error = max_param_error.max(rel(g, numeric));
            }
        }
    }

    let mut max_input_error: f64 = 0.0;
    let mut x = input.to_vec();
    for (i, &g) in input_grad.iter().enumerate() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = objective(net, &x)?;
        x[i] = orig - h;
        let minus = objective(net, &x)?;
        x[i] = orig;
        max_input_error = max_input_error.max(rel(g, (plus - minus) / (2.0 * h)));
    }
    Ok(GradientCheck {
        max_param_error,
        max_input_error,
    })
}

/// Adaptive-moment optimizer state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: GradientSet,
    v: GradientSet,
}

impl Adam {
    pub fn new(net: &MlpNet, learning_rate: f64) -> Self {
        Self::with_moments(net, learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_moments(net: &MlpNet, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            m: GradientSet::zeros_like(net),
            v: GradientSet::zeros_like(net),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected descent step along `grads`. Non-finite gradients
    /// leave both the network and the optimizer untouched.
    pub fn step(&mut self, net: &mut MlpNet, grads: &GradientSet) -> Result<(), NnError> {
        if !grads.congruent(net) || !self.m.congruent(net) {
            return Err(NnError::ShapeMismatch);
        }
        if !grads.is_finite() {
            return Err(NnError::NonFinite);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 / (1.0 - self.beta1.powi(t));
        let c2 = 1.0 / (1.0 - self.beta2.powi(t));
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        net.version += 1;
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let params = [
                (&mut layer.weights, &grads.weights[l], &mut self.m.weights[l], &mut self.v.weights[l]),
                (&mut layer.biases, &grads.biases[l], &mut self.m.biases[l], &mut self.v.biases[l]),
            ];
            for (p, g, m, v) in params {
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    p[i] -= lr * (m[i] * c1) / ((v[i] * c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
