//! Ground-truth model families for synthetic classification benchmarks.
//!
//! * [`separated_classes`]: random flow-emission HMMs whose states sit at
//!   well-separated offsets.
//! * [`correlated_classes`]: linear-Gaussian emissions with means shared by
//!   all classes; the classes differ only in how the two halves of a frame
//!   co-vary. Pass the sampled frames through [`warp_frame`] for the
//!   nonlinearly warped variant.
//! * [`multimodal_classes`]: diagonal GMM emissions with several narrow modes
//!   per state.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{make_synthetic, ClassSpec, SequenceDataset};
use crate::error::Result;
use crate::flow::{CouplingLayer, FlowConfig, FlowGenerator, Orientation};
use crate::flow_hmm::GenHmmModel;
use crate::gmm::{GmmEmission, GmmHmmModel};
use crate::hmm::{HmmCore, MixtureWeights};
use crate::model::SequenceModel;
use crate::nn::{Activation, Dense, DenseNet};
use crate::scalar::Real;

/// Left-to-right chain: each state stays with probability `stay` and otherwise
/// moves to the next one; the last state is absorbing. Starts in state 0.
pub fn chain_hmm<T: Real>(states: usize, stay: f64) -> HmmCore<T> {
    let mut a = Array2::zeros((states, states));
    for i in 0..states {
        if i + 1 < states {
            a[[i, i]] = T::lit(stay);
            a[[i, i + 1]] = T::lit(1.0 - stay);
        } else {
            a[[i, i]] = T::one();
        }
    }
    let mut q = Array1::zeros(states);
    q[0] = T::one();
    HmmCore::new(q, a).expect("valid chain")
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn label(c: usize) -> String {
    format!("c{c}")
}

/// Shifts the output of `g` by roughly `offset` via the shift-net biases of
/// its last two coupling layers.
fn offset_generator<T: Real>(g: &mut FlowGenerator<T>, offset: &[f64]) {
    let n = g.layers().len();
    for layer in g.layers_mut()[n.saturating_sub(2)..].iter_mut() {
        let b = layer.b_range();
        let out = layer.shift_net.output_layer_mut();
        for (j, d) in b.enumerate() {
            // g computes (z_b - t) e^{-s}
            out.bias[j] = T::lit(-offset[d]);
        }
    }
}

/// `n_classes` flow-emission HMMs. Each (class, state) gets a random centre
/// with per-coordinate spread `separation`, each component a further offset
/// of a third of that.
pub fn separated_classes<T: Real>(
    n_classes: usize,
    states: usize,
    components: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Vec<GenHmmModel<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FlowConfig {
        blocks: 2,
        hidden: 8,
        ..FlowConfig::default()
    };
    (0..n_classes)
        .map(|c| {
            let mut m = GenHmmModel::random(label(c), &mut rng, states, components, dim, &cfg);
            m.set_hmm(chain_hmm(states, 0.7)).expect("same state count");
            for s in 0..states {
                let centre = gaussian_vec(&mut rng, dim, separation);
                for k in 0..components {
                    let g = &mut m.generators_mut()[s][k];
                    for layer in g.layers_mut() {
                        for net in [&mut layer.scale_net, &mut layer.shift_net] {
                            net.output_layer_mut().weight.iter_mut().for_each(|w| *w *= T::lit(0.3));
                        }
                    }
                    let jitter = gaussian_vec(&mut rng, dim, separation / 3.0);
                    let offset: Vec<f64> = centre.iter().zip(&jitter).map(|(a, b)| a + b).collect();
                    offset_generator(g, &offset);
                }
            }
            m
        })
        .collect()
}

fn linear_net<T: Real>(weight: Vec<f64>, bias: Vec<f64>, in_dim: usize, out_dim: usize) -> DenseNet<T> {
    DenseNet::new(vec![Dense {
        in_dim,
        out_dim,
        weight: weight.into_iter().map(T::lit).collect(),
        bias: bias.into_iter().map(T::lit).collect(),
        activation: Activation::Identity,
    }])
    .expect("single layer")
}

/// Generator producing `x_a = mean_a + z_a` and
/// `x_b = mean_b + coupling ⊙ z_a' + noise ⊙ z_b`, where `z_a'` pairs
/// coordinate `j` of `b` with coordinate `j` of `a`. `dim` must be even.
fn linear_gaussian<T: Real>(mean: &[f64], coupling: &[f64], noise: f64) -> FlowGenerator<T> {
    let dim = mean.len();
    let half = dim / 2;
    // g applies layers[0] first: it sets the upper half from z_upper and z_lower.
    // Upper-conditions layer: b = lower half, a = upper half (still latent).
    let shift_lower = linear_net(vec![0.0; half * half], mean[..half].iter().map(|m| -m).collect(), half, half);
    let scale_lower = linear_net(vec![0.0; half * half], vec![0.0; half], half, half);
    let first = CouplingLayer::new(dim, Orientation::UpperConditions, scale_lower, shift_lower).unwrap();
    // Lower-conditions layer: b = upper half driven by the finished lower half.
    // x_b = (z_b - t) e^{-s}; with e^{-s} = noise and
    // t = -(coupling (x_a - mean_a) + mean_b) / noise the claim follows.
    let mut w = vec![0.0; half * half];
    let mut bias = vec![0.0; half];
    for j in 0..half {
        w[j * half + j] = -coupling[j] / noise;
        bias[j] = (coupling[j] * mean[j] - mean[half + j]) / noise;
    }
    let shift_upper = linear_net(w, bias, half, half);
    let scale_upper = linear_net(vec![0.0; half * half], vec![-noise.ln(); half], half, half);
    let second = CouplingLayer::new(dim, Orientation::LowerConditions, scale_upper, shift_upper).unwrap();
    FlowGenerator::new(dim, T::lit(5.0), vec![first, second]).unwrap()
}

/// `n_classes` single-component HMMs with Gaussian emissions whose state
/// means are shared by every class. Class `c` couples coordinate `j` of the
/// upper half to coordinate `j` of the lower half with a class-specific slope
/// in `[-0.8, 0.8]` and unit total variance, so the per-coordinate marginals
/// are identical across classes. `dim` must be even.
pub fn correlated_classes<T: Real>(n_classes: usize, states: usize, dim: usize, seed: u64) -> Vec<GenHmmModel<T>> {
    assert!(dim >= 2 && dim % 2 == 0, "correlated preset needs an even dimension");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..states).map(|_| gaussian_vec(&mut rng, dim, 1.5)).collect();
    let half = dim / 2;
    (0..n_classes)
        .map(|c| {
            let slope = if n_classes == 1 {
                0.0
            } else {
                0.8 * (-1.0 + 2.0 * c as f64 / (n_classes - 1) as f64)
            };
            let generators = means
                .iter()
                .map(|mu| {
                    let coupling: Vec<f64> = (0..half).map(|j| if j % 2 == 0 { slope } else { -slope }).collect();
                    let noise = (1.0 - slope * slope).sqrt();
                    vec![linear_gaussian::<T>(mu, &coupling, noise)]
                })
                .collect();
            GenHmmModel::new(label(c), chain_hmm(states, 0.7), MixtureWeights::uniform(states, 1), generators)
                .expect("consistent shapes")
        })
        .collect()
}

/// Fixed nonlinear bijection applied frame by frame:
/// `u ← u + 0.25 u³` on the lower half, then `v ← v + sin(2u)` on the upper
/// half using the new lower half.
pub fn warp_frame<T: Real>(x: &mut [T]) {
    let half = x.len() / 2;
    for u in x[..half].iter_mut() {
        *u += T::lit(0.25) * *u * *u * *u;
    }
    for j in 0..x.len() - half {
        let u = x[j % half.max(1)];
        x[half + j] += (T::lit(2.0) * u).sin();
    }
}

/// `n_classes` diagonal-GMM HMMs with `modes` narrow components per state.
/// Mode centres are drawn per class and state with spread `spread`.
pub fn multimodal_classes<T: Real>(
    n_classes: usize,
    states: usize,
    modes: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Vec<GmmHmmModel<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_classes)
        .map(|c| {
            let means = Array3::from_shape_fn((states, modes, dim), |_| {
                T::lit(spread * rng.sample::<f64, _>(StandardNormal))
            });
            let variances = Array3::from_elem((states, modes, dim), T::lit(0.25));
            let emission = GmmEmission::new(MixtureWeights::uniform(states, modes), means, variances)
                .expect("consistent shapes");
            GmmHmmModel::new(label(c), chain_hmm(states, 0.7), emission).expect("consistent shapes")
        })
        .collect()
}

/// Train and test sets drawn from the same ground-truth models with
/// independent seeds. Lengths are uniform in `min_len..=max_len`.
pub fn train_test<T: Real, M: SequenceModel<T>>(
    models: &[M],
    train_per_class: usize,
    test_per_class: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<(SequenceDataset<T>, SequenceDataset<T>)> {
    let classes = |count| -> Vec<ClassSpec<'_, T>> {
        models
            .iter()
            .map(|m| ClassSpec {
                label: m.label().to_string(),
                model: m as &dyn SequenceModel<T>,
                count,
                min_len,
                max_len,
            })
            .collect()
    };
    let train = make_synthetic(&classes(train_per_class), seed)?;
    let test = make_synthetic(&classes(test_per_class), seed ^ 0x5eed_7e57)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_is_upper_triangular() {
        let h: HmmCore<f64> = chain_hmm(3, 0.6);
        assert_eq!(h.transition()[[1, 0]], 0.0);
        assert_eq!(h.transition()[[2, 2]], 1.0);
    }

    #[test]
    fn linear_gaussian_moments() {
        let g = linear_gaussian::<f64>(&[1.0, -2.0], &[0.8], 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 40_000;
        let xs: Vec<Vec<f64>> = (0..n).map(|_| g.sample(&mut rng).unwrap()).collect();
        let mean = |d: usize| xs.iter().map(|x| x[d]).sum::<f64>() / n as f64;
        let (m0, m1) = (mean(0), mean(1));
        assert!((m0 - 1.0).abs() < 0.03 && (m1 + 2.0).abs() < 0.03, "{m0} {m1}");
        let cov = xs.iter().map(|x| (x[0] - m0) * (x[1] - m1)).sum::<f64>() / n as f64;
        let var1 = xs.iter().map(|x| (x[1] - m1).powi(2)).sum::<f64>() / n as f64;
        assert!((cov - 0.8).abs() < 0.03, "{cov}");
        assert!((var1 - (0.64 + 0.36)).abs() < 0.04, "{var1}");
    }

    #[test]
    fn warp_is_injective_on_grid() {
        let mut seen = Vec::new();
        for i in -10..=10 {
            for j in -10..=10 {
                let mut x = [i as f64 * 0.3, j as f64 * 0.3];
                warp_frame(&mut x);
                seen.push(x);
            }
        }
        for a in 0..seen.len() {
            for b in a + 1..seen.len() {
                assert!((seen[a][0] - seen[b][0]).abs() + (seen[a][1] - seen[b][1]).abs() > 1e-9);
            }
        }
    }

    #[test]
    fn presets_sample() {
        let sep = separated_classes::<f64>(2, 3, 2, 4, 3.0, 1);
        let (train, test) = train_test(&sep, 3, 2, 5, 8, 2).unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(test.len(), 4);
        let cor = correlated_classes::<f64>(3, 3, 4, 1);
        assert_eq!(cor.len(), 3);
        let mm = multimodal_classes::<f64>(2, 3, 3, 2, 2.0, 1);
        let (train, _) = train_test(&mm, 2, 1, 4, 4, 0).unwrap();
        assert_eq!(train.dim(), 2);
    }
}
