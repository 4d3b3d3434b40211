//! Invertible coupling-layer generators with exact log-likelihood.
//!
//! A generator `g` maps a latent standard-normal `z` to a frame `x`; its
//! inverse `f = g⁻¹` maps data back to the latent space. Each coupling layer
//! keeps part `a` of its input and affinely transforms part `b`:
//!
//! ```text
//! f-direction:  out_b = exp(s(a)) ⊙ in_b + t(a)
//! g-direction:  out_b = (in_b − t(a)) ⊘ exp(s(a))
//! ```
//!
//! so `log |det ∇f|` of a layer is `Σ_j s_j(a)` and the generator's total is
//! the sum over layers. `s = c·tanh(raw / c)` bounds the scale exponent.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamConfig, AdamState, DenseNet, ForwardCache, GradientTape};
use crate::scalar::{std_normal_logpdf, Real};

/// Which half of the frame conditions the layer (part `a`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// `a` = first `⌊N/2⌋` coordinates.
    LowerConditions,
    /// `a` = remaining `⌈N/2⌉` coordinates.
    UpperConditions,
}

impl Orientation {
    pub fn flipped(self) -> Self {
        match self {
            Orientation::LowerConditions => Orientation::UpperConditions,
            Orientation::UpperConditions => Orientation::LowerConditions,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowConfig {
    pub blocks: usize,
    pub hidden: usize,
    /// Dense layers per coupling network.
    pub net_layers: usize,
    /// Soft clamp `c` on the log-scale.
    pub scale_clamp: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            blocks: 4,
            hidden: 24,
            net_layers: 3,
            scale_clamp: 5.0,
        }
    }
}

impl FlowConfig {
    fn net_dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(self.hidden, self.net_layers.saturating_sub(1)));
        dims.push(output);
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer<T> {
    pub dim: usize,
    pub orientation: Orientation,
    /// Produces the raw log-scale for part `b`.
    pub scale_net: DenseNet<T>,
    /// Produces the shift for part `b`.
    pub shift_net: DenseNet<T>,
}

impl<T: Real> CouplingLayer<T> {
    pub fn new(
        dim: usize,
        orientation: Orientation,
        scale_net: DenseNet<T>,
        shift_net: DenseNet<T>,
    ) -> Result<Self> {
        let layer = CouplingLayer {
            dim,
            orientation,
            scale_net,
            shift_net,
        };
        let (a, b) = (layer.a_range().len(), layer.b_range().len());
        for net in [&layer.scale_net, &layer.shift_net] {
            if net.input_dim() != a || net.output_dim() != b {
                return Err(Error::Shape(format!(
                    "coupling net maps {}->{}, layer needs {a}->{b}",
                    net.input_dim(),
                    net.output_dim()
                )));
            }
        }
        Ok(layer)
    }

    pub fn a_range(&self) -> std::ops::Range<usize> {
        let half = self.dim / 2;
        match self.orientation {
            Orientation::LowerConditions => 0..half,
            Orientation::UpperConditions => half..self.dim,
        }
    }

    pub fn b_range(&self) -> std::ops::Range<usize> {
        let half = self.dim / 2;
        match self.orientation {
            Orientation::LowerConditions => half..self.dim,
            Orientation::UpperConditions => 0..half,
        }
    }

    #[inline]
    fn clamp_scale(raw: &[T], clamp: T) -> Vec<T> {
        raw.iter().map(|&r| clamp * (r / clamp).tanh()).collect()
    }

    /// Scale exponents and shifts conditioned on part `a`.
    fn conditioners(&self, a: &[T], clamp: T) -> Result<(Vec<T>, Vec<T>)> {
        let raw = self.scale_net.eval(a)?;
        Ok((Self::clamp_scale(&raw, clamp), self.shift_net.eval(a)?))
    }
}

/// Per-layer record of the f-direction pass.
#[derive(Clone, Debug)]
struct StepCache<T> {
    layer: usize,
    input: Vec<T>,
    scale: Vec<T>,
    exp_scale: Vec<T>,
    scale_cache: ForwardCache<T>,
    shift_cache: ForwardCache<T>,
}

/// Activations of one `f` evaluation, consumed by [`FlowGenerator::loglik_backward`].
#[derive(Clone, Debug)]
pub struct FlowCache<T> {
    steps: Vec<StepCache<T>>,
    pub z: Vec<T>,
    pub log_det: T,
}

/// `g = g⁽ᴸ⁾ ∘ … ∘ g⁽¹⁾`; `layers[0]` is `g⁽¹⁾`, the first map applied to `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowGenerator<T> {
    dim: usize,
    scale_clamp: T,
    layers: Vec<CouplingLayer<T>>,
}

impl<T: Real> FlowGenerator<T> {
    pub fn new(dim: usize, scale_clamp: T, layers: Vec<CouplingLayer<T>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("frame dimension must be positive".into()));
        }
        if !(scale_clamp > T::zero()) {
            return Err(Error::Invalid("scale clamp must be positive".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.dim != dim {
                return Err(Error::Shape(format!(
                    "coupling layer {l} has dimension {}, generator {dim}",
                    layer.dim
                )));
            }
        }
        for pair in layers.windows(2) {
            if pair[0].orientation == pair[1].orientation {
                return Err(Error::Invalid(
                    "consecutive coupling layers must alternate orientation".into(),
                ));
            }
        }
        Ok(FlowGenerator {
            dim,
            scale_clamp,
            layers,
        })
    }

    /// Randomly initialised generator (Glorot weights, zero biases).
    pub fn random<R: Rng + ?Sized>(rng: &mut R, dim: usize, config: &FlowConfig) -> Self {
        Self::build(dim, config, |input, output| {
            DenseNet::mlp(rng, &config.net_dims(input, output))
        })
    }

    /// All coupling networks zero: `f` and `g` are the identity.
    pub fn identity(dim: usize, config: &FlowConfig) -> Self {
        Self::build(dim, config, |input, output| {
            DenseNet::zeros(&config.net_dims(input, output))
        })
    }

    fn build(
        dim: usize,
        config: &FlowConfig,
        mut make_net: impl FnMut(usize, usize) -> DenseNet<T>,
    ) -> Self {
        assert!(dim > 0, "frame dimension must be positive");
        let mut layers = Vec::with_capacity(2 * config.blocks);
        let mut orientation = Orientation::LowerConditions;
        for _ in 0..2 * config.blocks {
            let mut layer = CouplingLayer {
                dim,
                orientation,
                scale_net: DenseNet::zeros(&[1, 1]),
                shift_net: DenseNet::zeros(&[1, 1]),
            };
            let (a, b) = (layer.a_range().len(), layer.b_range().len());
            layer.scale_net = make_net(a, b);
            layer.shift_net = make_net(a, b);
            layers.push(layer);
            orientation = orientation.flipped();
        }
        FlowGenerator {
            dim,
            scale_clamp: T::lit(config.scale_clamp),
            layers,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale_clamp(&self) -> T {
        self.scale_clamp
    }

    pub fn layers(&self) -> &[CouplingLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer<T>] {
        &mut self.layers
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.scale_net.is_finite() && l.shift_net.is_finite())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.scale_net.param_count() + l.shift_net.param_count())
            .sum()
    }

    /// Flat parameter access: layer by layer, scale net before shift net.
    pub fn param(&self, index: usize) -> T {
        let (net, i) = self.locate(index);
        let layer = &self.layers[net / 2];
        if net % 2 == 0 {
            layer.scale_net.param(i)
        } else {
            layer.shift_net.param(i)
        }
    }

    pub fn set_param(&mut self, index: usize, value: T) {
        let (net, i) = self.locate(index);
        let layer = &mut self.layers[net / 2];
        if net % 2 == 0 {
            layer.scale_net.set_param(i, value)
        } else {
            layer.shift_net.set_param(i, value)
        }
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (l, layer) in self.layers.iter().enumerate() {
            for (k, net) in [&layer.scale_net, &layer.shift_net].into_iter().enumerate() {
                if index < net.param_count() {
                    return (2 * l + k, index);
                }
                index -= net.param_count();
            }
        }
        panic!("parameter index out of range");
    }

    fn check_frame(&self, v: &[T], what: &str) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!(
                "{what} has {} coordinates, generator dimension is {}",
                v.len(),
                self.dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{what} entry")));
        }
        Ok(())
    }

    /// `z = f(x)` with `log |det ∇f(x)|`, keeping activations for gradients.
    pub fn inverse(&self, x: &[T]) -> Result<FlowCache<T>> {
        self.check_frame(x, "frame")?;
        let mut u = x.to_vec();
        let mut log_det = T::zero();
        let mut steps = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a = &u[layer.a_range()];
            let (raw, scale_cache) = layer.scale_net.forward(a)?;
            let (shift, shift_cache) = layer.shift_net.forward(a)?;
            let scale = CouplingLayer::clamp_scale(&raw, self.scale_clamp);
            let exp_scale: Vec<T> = scale.iter().map(|s| s.exp()).collect();
            let input = u.clone();
            for ((j, &e), &t) in layer.b_range().zip(&exp_scale).zip(&shift) {
                u[j] = e * u[j] + t;
            }
            log_det += scale.iter().copied().sum::<T>();
            if u.iter().any(|v| !v.is_finite()) || !log_det.is_finite() {
                return Err(Error::NonFinite(format!("output of coupling layer {l}")));
            }
            steps.push(StepCache {
                layer: l,
                input,
                scale,
                exp_scale,
                scale_cache,
                shift_cache,
            });
        }
        Ok(FlowCache {
            steps,
            z: u,
            log_det,
        })
    }

    /// `(f(x), log |det ∇f(x)|)` without recording activations.
    pub fn inverse_eval(&self, x: &[T]) -> Result<(Vec<T>, T)> {
        self.check_frame(x, "frame")?;
        let mut u = x.to_vec();
        let mut log_det = T::zero();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (scale, shift) = layer.conditioners(&u[layer.a_range()], self.scale_clamp)?;
            for ((j, &s), &t) in layer.b_range().zip(&scale).zip(&shift) {
                u[j] = s.exp() * u[j] + t;
            }
            log_det += scale.iter().copied().sum::<T>();
            if u.iter().any(|v| !v.is_finite()) || !log_det.is_finite() {
                return Err(Error::NonFinite(format!("output of coupling layer {l}")));
            }
        }
        Ok((u, log_det))
    }

    /// `x = g(z)`.
    pub fn forward(&self, z: &[T]) -> Result<Vec<T>> {
        self.check_frame(z, "latent")?;
        let mut h = z.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let (scale, shift) = layer.conditioners(&h[layer.a_range()], self.scale_clamp)?;
            for ((j, &s), &t) in layer.b_range().zip(&scale).zip(&shift) {
                h[j] = (h[j] - t) * (-s).exp();
            }
            if h.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("output of coupling layer {l}")));
            }
        }
        Ok(h)
    }

    /// Draws `x = g(z)` with `z ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<T>> {
        let z: Vec<T> = (0..self.dim)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        self.forward(&z)
    }

    /// `log N(f(x); 0, I) + log |det ∇f(x)|`.
    pub fn log_prob(&self, x: &[T]) -> Result<T> {
        let (z, log_det) = self.inverse_eval(x)?;
        Ok(std_normal_logpdf(&z) + log_det)
    }

    /// Log-likelihood together with the activations needed by
    /// [`FlowGenerator::loglik_backward`].
    pub fn loglik(&self, x: &[T]) -> Result<(T, FlowCache<T>)> {
        let cache = self.inverse(x)?;
        Ok((std_normal_logpdf(&cache.z) + cache.log_det, cache))
    }

    /// Accumulates `weight · ∂loglik/∂θ` into `tapes`.
    ///
    /// Terms with a non-finite weight or cache are skipped and counted in
    /// [`FlowTapes::skipped`].
    pub fn loglik_backward(
        &self,
        cache: &FlowCache<T>,
        weight: T,
        tapes: &mut FlowTapes<T>,
    ) -> Result<()> {
        if weight == T::zero() {
            return Ok(());
        }
        if tapes.layers.len() != self.layers.len() || cache.steps.len() != self.layers.len() {
            return Err(Error::StaleCache("flow cache or tapes do not match generator".into()));
        }
        if !weight.is_finite()
            || !cache.log_det.is_finite()
            || cache.z.iter().any(|v| !v.is_finite())
        {
            tapes.skipped += 1;
            log::warn!("skipping non-finite flow gradient term");
            return Ok(());
        }

        let clamp = self.scale_clamp;
        // d/dz of w · log N(z; 0, I)
        let mut grad: Vec<T> = cache.z.iter().map(|&z| -weight * z).collect();
        for step in cache.steps.iter().rev() {
            let layer = &self.layers[step.layer];
            let (a_range, b_range) = (layer.a_range(), layer.b_range());
            let b_off = b_range.start;
            let mut shift_grad = Vec::with_capacity(b_range.len());
            let mut raw_grad = Vec::with_capacity(b_range.len());
            for (k, j) in b_range.clone().enumerate() {
                let g_out = grad[j];
                let (s, e) = (step.scale[k], step.exp_scale[k]);
                let g_scale = g_out * e * step.input[b_off + k] + weight;
                let ratio = s / clamp;
                raw_grad.push(g_scale * (T::one() - ratio * ratio));
                shift_grad.push(g_out);
                grad[j] = g_out * e;
            }
            let (scale_tape, shift_tape) = &mut tapes.layers[step.layer];
            let ga = layer.scale_net.backward(&step.scale_cache, &raw_grad, scale_tape)?;
            let gb = layer.shift_net.backward(&step.shift_cache, &shift_grad, shift_tape)?;
            for ((i, &x), &y) in a_range.zip(&ga).zip(&gb) {
                grad[i] += x + y;
            }
        }
        Ok(())
    }
}

/// Gradient buffers for every coupling network of one generator.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowTapes<T> {
    /// `(scale tape, shift tape)` per coupling layer.
    pub layers: Vec<(GradientTape<T>, GradientTape<T>)>,
    /// Gradient terms dropped because of non-finite inputs.
    pub skipped: usize,
}

impl<T: Real> FlowTapes<T> {
    pub fn for_generator(gen: &FlowGenerator<T>) -> Self {
        FlowTapes {
            layers: gen
                .layers
                .iter()
                .map(|l| {
                    (
                        GradientTape::for_net(&l.scale_net),
                        GradientTape::for_net(&l.shift_net),
                    )
                })
                .collect(),
            skipped: 0,
        }
    }

    /// Entry in the generator's flat parameter order.
    pub fn get(&self, mut index: usize) -> T {
        for (s, t) in &self.layers {
            for tape in [s, t] {
                let n = tape.to_vec().len();
                if index < n {
                    return tape.get(index);
                }
                index -= n;
            }
        }
        panic!("tape index out of range");
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|(s, t)| s.to_vec().into_iter().chain(t.to_vec()))
            .collect()
    }

    pub fn merge(&mut self, other: &FlowTapes<T>) {
        for ((s, t), (os, ot)) in self.layers.iter_mut().zip(&other.layers) {
            s.merge(os);
            t.merge(ot);
        }
        self.skipped += other.skipped;
    }

    pub fn scale(&mut self, factor: T) {
        for (s, t) in &mut self.layers {
            s.scale(factor);
            t.scale(factor);
        }
    }

    pub fn reset(&mut self) {
        for (s, t) in &mut self.layers {
            s.reset();
            t.reset();
        }
        self.skipped = 0;
    }

    /// Number of backward passes recorded since the last reset.
    pub fn count(&self) -> usize {
        self.layers.first().map(|(s, _)| s.count).unwrap_or(0)
    }
}

/// Adam state for every coupling network of one generator.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowOptimizer<T> {
    pub layers: Vec<(AdamState<T>, AdamState<T>)>,
}

impl<T: Real> FlowOptimizer<T> {
    pub fn for_generator(gen: &FlowGenerator<T>, config: AdamConfig) -> Self {
        FlowOptimizer {
            layers: gen
                .layers
                .iter()
                .map(|l| {
                    (
                        AdamState::for_net(&l.scale_net, config),
                        AdamState::for_net(&l.shift_net, config),
                    )
                })
                .collect(),
        }
    }

    /// Ascent step on every coupling network; clears the tapes.
    pub fn step(&mut self, gen: &mut FlowGenerator<T>, tapes: &mut FlowTapes<T>) -> Result<()> {
        if tapes.layers.iter().any(|(s, t)| !s.is_finite() || !t.is_finite()) {
            tapes.reset();
            return Err(Error::NonFinite("generator gradient".into()));
        }
        for ((layer, (ts, tt)), (os, ot)) in gen
            .layers
            .iter_mut()
            .zip(tapes.layers.iter_mut())
            .zip(self.layers.iter_mut())
        {
            adam_step(&mut layer.scale_net, ts, os)?;
            adam_step(&mut layer.shift_net, tt, ot)?;
        }
        tapes.skipped = 0;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(blocks: usize) -> FlowConfig {
        FlowConfig {
            blocks,
            hidden: 6,
            ..FlowConfig::default()
        }
    }

    #[test]
    fn identity_flow_is_identity() {
        let gen = FlowGenerator::<f64>::identity(3, &FlowConfig::default());
        let x = [0.5, -1.5, 2.0];
        let (z, log_det) = gen.inverse_eval(&x).unwrap();
        assert_eq!(z, x.to_vec());
        assert_eq!(log_det, 0.0);
        assert_eq!(gen.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn identity_loglik_at_origin() {
        let gen = FlowGenerator::<f64>::identity(2, &FlowConfig::default());
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        assert!((gen.log_prob(&[0.0, 0.0]).unwrap() + ln2pi).abs() < 1e-15);
        assert!((gen.log_prob(&[1.0, 0.0]).unwrap() + ln2pi + 0.5).abs() < 1e-15);
        assert!((ln2pi - 1.8378770664093453).abs() < 1e-15);
    }

    #[test]
    fn constant_conditioners_single_layer() {
        // N = 2, one f-layer with constant scale exponent c and shift d.
        let (c, d) = (0.7f64, -0.3f64);
        let mut scale = DenseNet::zeros(&[1, 1]);
        scale.output_layer_mut().bias[0] = c;
        let mut shift = DenseNet::zeros(&[1, 1]);
        shift.output_layer_mut().bias[0] = d;
        let layer = CouplingLayer::new(2, Orientation::LowerConditions, scale, shift).unwrap();
        let gen = FlowGenerator::new(2, 1e6, vec![layer]).unwrap();
        let x = [1.2, -0.4];
        let (z, log_det) = gen.inverse_eval(&x).unwrap();
        assert_eq!(z[0], x[0]);
        let s = 1e6 * (c / 1e6).tanh();
        assert!((z[1] - (s.exp() * x[1] + d)).abs() < 1e-12);
        assert!((log_det - s).abs() < 1e-12);
        let back = gen.forward(&z).unwrap();
        assert!((back[1] - x[1]).abs() < 1e-12);
    }

    #[test]
    fn orientations_alternate_and_cover_odd_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gen = FlowGenerator::<f64>::random(&mut rng, 5, &small_config(2));
        assert_eq!(gen.layers().len(), 4);
        for pair in gen.layers().windows(2) {
            assert_ne!(pair[0].orientation, pair[1].orientation);
        }
        assert_eq!(gen.layers()[0].a_range(), 0..2);
        assert_eq!(gen.layers()[1].a_range(), 2..5);
    }

    #[test]
    fn non_alternating_rejected() {
        let layers = (0..2)
            .map(|_| {
                CouplingLayer::new(
                    2,
                    Orientation::LowerConditions,
                    DenseNet::<f64>::zeros(&[1, 1]),
                    DenseNet::zeros(&[1, 1]),
                )
                .unwrap()
            })
            .collect();
        assert!(FlowGenerator::new(2, 5.0, layers).is_err());
    }

    #[test]
    fn round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &n in &[2usize, 4, 6] {
            let gen = FlowGenerator::<f64>::random(&mut rng, n, &FlowConfig::default());
            for _ in 0..20 {
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
                let (z, _) = gen.inverse_eval(&x).unwrap();
                let back = gen.forward(&z).unwrap();
                for (a, b) in x.iter().zip(&back) {
                    assert!((a - b).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn cached_and_plain_inverse_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gen = FlowGenerator::<f64>::random(&mut rng, 4, &small_config(2));
        let x = [0.3, -0.2, 1.1, 0.0];
        let cache = gen.inverse(&x).unwrap();
        let (z, log_det) = gen.inverse_eval(&x).unwrap();
        assert_eq!(cache.z, z);
        assert_eq!(cache.log_det, log_det);
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let gen = FlowGenerator::<f64>::identity(2, &small_config(1));
        assert!(matches!(gen.inverse(&[1.0]), Err(Error::Shape(_))));
        assert!(matches!(gen.inverse(&[f64::NAN, 0.0]), Err(Error::NonFinite(_))));
        assert!(matches!(gen.forward(&[f64::INFINITY, 0.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_weight_leaves_tapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gen = FlowGenerator::<f64>::random(&mut rng, 2, &small_config(1));
        let (_, cache) = gen.loglik(&[0.4, 0.9]).unwrap();
        let mut tapes = FlowTapes::for_generator(&gen);
        gen.loglik_backward(&cache, 0.0, &mut tapes).unwrap();
        assert!(tapes.to_vec().iter().all(|v| *v == 0.0));
        assert_eq!(tapes.count(), 0);
    }

    #[test]
    fn backward_is_linear_in_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gen = FlowGenerator::<f64>::random(&mut rng, 3, &small_config(1));
        let (_, cache) = gen.loglik(&[0.4, 0.9, -1.0]).unwrap();
        let mut double = FlowTapes::for_generator(&gen);
        gen.loglik_backward(&cache, 2.0, &mut double).unwrap();
        let mut twice = FlowTapes::for_generator(&gen);
        gen.loglik_backward(&cache, 1.0, &mut twice).unwrap();
        gen.loglik_backward(&cache, 1.0, &mut twice).unwrap();
        for (a, b) in double.to_vec().iter().zip(twice.to_vec()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn non_finite_weight_is_skipped() {
        let gen = FlowGenerator::<f64>::identity(2, &small_config(1));
        let (_, cache) = gen.loglik(&[0.4, 0.9]).unwrap();
        let mut tapes = FlowTapes::for_generator(&gen);
        gen.loglik_backward(&cache, f64::NAN, &mut tapes).unwrap();
        assert_eq!(tapes.skipped, 1);
        assert!(tapes.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn f32_generator_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gen = FlowGenerator::<f32>::random(&mut rng, 4, &small_config(2));
        let x = [0.5f32, -0.25, 1.0, 0.75];
        let (z, _) = gen.inverse_eval(&x).unwrap();
        let back = gen.forward(&z).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
