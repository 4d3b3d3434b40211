//! Dense feed-forward networks with hand-written reverse mode and an Adam updater.
//!
//! Parameters of every layer are laid out as a row-major `out x in` weight
//! matrix followed by the bias vector. The same flat order is used by
//! [`DenseNet::param`], [`GradientTape::get`] and the Adam moment buffers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            Activation::Identity => T::one(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major, `out_dim x in_dim`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Real> Dense<T> {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Dense {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
            activation,
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot<R: Rng + ?Sized>(
        rng: &mut R,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Self {
        let mut layer = Self::zeros(in_dim, out_dim, activation);
        if in_dim + out_dim > 0 {
            let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
            for w in layer.weight.iter_mut() {
                *w = T::lit(rng.random_range(-limit..=limit));
            }
        }
        layer
    }

    fn check(&self) -> Result<()> {
        if self.weight.len() != self.in_dim * self.out_dim || self.bias.len() != self.out_dim {
            return Err(Error::Shape(format!(
                "dense layer {}x{} holds {} weights and {} biases",
                self.out_dim,
                self.in_dim,
                self.weight.len(),
                self.bias.len()
            )));
        }
        if self.weight.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dense layer parameter".into()));
        }
        Ok(())
    }

    #[inline]
    fn forward_into(&self, input: &[T], out: &mut Vec<T>) {
        out.clear();
        for (o, &b) in self.bias.iter().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = b;
            for (&w, &x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(self.activation.apply(acc));
        }
    }
}

/// Multi-layer perceptron: a chain of [`Dense`] layers.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet<T> {
    layers: Vec<Dense<T>>,
}

/// Activations recorded by [`DenseNet::forward`]; `values[0]` is the input and
/// `values[l + 1]` the output of layer `l`.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    values: Vec<Vec<T>>,
    shapes: Vec<(usize, usize)>,
}

impl<T> ForwardCache<T> {
    pub fn output(&self) -> &[T] {
        self.values.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl<T: Real> DenseNet<T> {
    pub fn new(layers: Vec<Dense<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for layer in &layers {
            layer.check()?;
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape(format!(
                    "layer {l} emits {} values but layer {} expects {}",
                    pair[0].out_dim,
                    l + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(DenseNet { layers })
    }

    /// `dims = [in, h1, ..., out]`: tanh on hidden layers, linear output.
    pub fn mlp<R: Rng + ?Sized>(rng: &mut R, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "mlp needs input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| Dense::glorot(rng, dims[l], dims[l + 1], hidden_or_linear(l, n)))
            .collect();
        DenseNet { layers }
    }

    /// Same topology as [`DenseNet::mlp`] with every parameter zero.
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "mlp needs input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| Dense::zeros(dims[l], dims[l + 1], hidden_or_linear(l, n)))
            .collect();
        DenseNet { layers }
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn param(&self, index: usize) -> T {
        *self.locate(index)
    }

    pub fn set_param(&mut self, index: usize, value: T) {
        *self.locate_mut(index) = value;
    }

    /// Mutable access to the output layer, e.g. to pin a bias.
    pub fn output_layer_mut(&mut self) -> &mut Dense<T> {
        let last = self.layers.len() - 1;
        &mut self.layers[last]
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn locate(&self, mut index: usize) -> &T {
        for layer in &self.layers {
            if index < layer.weight.len() {
                return &layer.weight[index];
            }
            index -= layer.weight.len();
            if index < layer.bias.len() {
                return &layer.bias[index];
            }
            index -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    fn locate_mut(&mut self, mut index: usize) -> &mut T {
        for layer in &mut self.layers {
            if index < layer.weight.len() {
                return &mut layer.weight[index];
            }
            index -= layer.weight.len();
            if index < layer.bias.len() {
                return &mut layer.bias[index];
            }
            index -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    fn check_input(&self, input: &[T]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        Ok(())
    }

    /// Forward pass keeping every activation for [`DenseNet::backward`].
    pub fn forward(&self, input: &[T]) -> Result<(Vec<T>, ForwardCache<T>)> {
        self.check_input(input)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.to_vec());
        for layer in &self.layers {
            let mut out = Vec::with_capacity(layer.out_dim);
            layer.forward_into(values.last().unwrap(), &mut out);
            values.push(out);
        }
        let output = values.last().unwrap().clone();
        let shapes = self.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect();
        Ok((output, ForwardCache { values, shapes }))
    }

    /// Forward pass without recording activations.
    pub fn eval(&self, input: &[T]) -> Result<Vec<T>> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.forward_into(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Accumulates `d loss / d params` into `tape` and returns `d loss / d input`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        output_grad: &[T],
        tape: &mut GradientTape<T>,
    ) -> Result<Vec<T>> {
        let shapes_match = cache.shapes.len() == self.layers.len()
            && cache
                .shapes
                .iter()
                .zip(&self.layers)
                .all(|(&(i, o), l)| i == l.in_dim && o == l.out_dim);
        if !shapes_match {
            return Err(Error::StaleCache(
                "cache was recorded on a network with different layer shapes".into(),
            ));
        }
        if !tape.matches(self) {
            return Err(Error::Shape("gradient tape does not mirror the network".into()));
        }
        if output_grad.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "output gradient has {} entries, network emits {}",
                output_grad.len(),
                self.output_dim()
            )));
        }

        let mut grad = output_grad.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.values[l];
            let output = &cache.values[l + 1];
            for (g, &y) in grad.iter_mut().zip(output) {
                *g *= layer.activation.derivative_from_output(y);
            }
            let (tw, tb) = (&mut tape.weight[l], &mut tape.bias[l]);
            let mut input_grad = vec![T::zero(); layer.in_dim];
            for (o, &g) in grad.iter().enumerate() {
                tb[o] += g;
                if g == T::zero() {
                    continue;
                }
                let row = o * layer.in_dim;
                for i in 0..layer.in_dim {
                    tw[row + i] += g * input[i];
                    input_grad[i] += g * layer.weight[row + i];
                }
            }
            grad = input_grad;
        }
        tape.count += 1;
        Ok(grad)
    }
}

fn hidden_or_linear(layer: usize, n_layers: usize) -> Activation {
    if layer + 1 == n_layers {
        Activation::Identity
    } else {
        Activation::Tanh
    }
}

/// Gradient buffers with exactly the network's parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTape<T> {
    weight: Vec<Vec<T>>,
    bias: Vec<Vec<T>>,
    /// Number of backward passes folded in since the last reset.
    pub count: usize,
}

impl<T: Real> GradientTape<T> {
    pub fn for_net(net: &DenseNet<T>) -> Self {
        GradientTape {
            weight: net.layers.iter().map(|l| vec![T::zero(); l.weight.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![T::zero(); l.bias.len()]).collect(),
            count: 0,
        }
    }

    pub fn matches(&self, net: &DenseNet<T>) -> bool {
        self.weight.len() == net.layers.len()
            && net
                .layers
                .iter()
                .enumerate()
                .all(|(l, layer)| {
                    self.weight[l].len() == layer.weight.len() && self.bias[l].len() == layer.bias.len()
                })
    }

    fn buffers(&self) -> impl Iterator<Item = &T> {
        self.weight
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    fn buffers_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.weight
            .iter_mut()
            .zip(self.bias.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    /// Entry in the flat parameter order of the owning network.
    pub fn get(&self, index: usize) -> T {
        *self.buffers().nth(index).expect("tape index out of range")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.buffers().copied().collect()
    }

    pub fn reset(&mut self) {
        self.buffers_mut().for_each(|v| *v = T::zero());
        self.count = 0;
    }

    pub fn scale(&mut self, factor: T) {
        self.buffers_mut().for_each(|v| *v *= factor);
    }

    /// Adds another tape (same shapes) into this one.
    pub fn merge(&mut self, other: &GradientTape<T>) {
        for (a, &b) in self.buffers_mut().zip(other.buffers()) {
            *a += b;
        }
        self.count += other.count;
    }

    pub fn is_finite(&self) -> bool {
        self.buffers().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.buffers().all(|v| *v == T::zero())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for one network. Updates ascend the accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<T>,
    second: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn for_net(net: &DenseNet<T>, config: AdamConfig) -> Self {
        let n = net.param_count();
        AdamState {
            config,
            step: 0,
            first: vec![T::zero(); n],
            second: vec![T::zero(); n],
        }
    }

    /// Rebuilds a state from stored moments (checkpoint resume).
    pub fn from_parts(config: AdamConfig, step: u64, first: Vec<T>, second: Vec<T>) -> Result<Self> {
        if first.len() != second.len() {
            return Err(Error::Shape("adam moment buffers differ in length".into()));
        }
        Ok(AdamState {
            config,
            step,
            first,
            second,
        })
    }

    pub fn moments(&self) -> (&[T], &[T]) {
        (&self.first, &self.second)
    }
}

/// One Adam ascent step on `net` using the gradient in `tape`; clears the tape.
///
/// A tape holding non-finite entries is discarded and the parameters are left
/// untouched.
pub fn adam_step<T: Real>(
    net: &mut DenseNet<T>,
    tape: &mut GradientTape<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    if tape.count == 0 {
        return Err(Error::EmptyTape);
    }
    if !tape.matches(net) || state.first.len() != net.param_count() {
        return Err(Error::Shape("optimizer buffers do not mirror the network".into()));
    }
    if !tape.is_finite() {
        tape.reset();
        return Err(Error::NonFinite("gradient tape entry".into()));
    }

    state.step += 1;
    let cfg = state.config;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bias1 = T::one() - T::lit(cfg.beta1.powi(state.step.min(i32::MAX as u64) as i32));
    let bias2 = T::one() - T::lit(cfg.beta2.powi(state.step.min(i32::MAX as u64) as i32));
    let (lr, eps) = (T::lit(cfg.learning_rate), T::lit(cfg.epsilon));

    let mut k = 0;
    for (l, layer) in net.layers.iter_mut().enumerate() {
        let grads = tape.weight[l].iter().chain(tape.bias[l].iter());
        let params = layer.weight.iter_mut().chain(layer.bias.iter_mut());
        for (p, &g) in params.zip(grads) {
            let m = &mut state.first[k];
            let v = &mut state.second[k];
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p += lr * m_hat / (v_hat.sqrt() + eps);
            k += 1;
        }
    }
    tape.reset();
    Ok(())
}
