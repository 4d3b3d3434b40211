//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use genhmm::hmm::{FrameLogLik, HmmCore, MixtureWeights};
use genhmm::scalar::log_sum_exp;
use genhmm::{FlowConfig, FlowGenerator, GenHmmModel};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;

/// Row-stochastic matrix with rows drawn as normalised exponentials. With
/// `upper`, entries below the diagonal are zero.
pub fn random_stochastic<R: Rng>(rng: &mut R, rows: usize, cols: usize, upper: bool) -> Array2<f64> {
    let mut m = Array2::zeros((rows, cols));
    for i in 0..rows {
        let mut total = 0.0;
        for j in 0..cols {
            if upper && j < i {
                continue;
            }
            let v = rng.sample::<f64, _>(StandardNormal).exp();
            m[[i, j]] = v;
            total += v;
        }
        m.row_mut(i).mapv_inplace(|v| v / total);
    }
    m
}

pub fn random_hmm<R: Rng>(rng: &mut R, states: usize, components: usize) -> (HmmCore<f64>, MixtureWeights<f64>) {
    let q = random_stochastic(rng, 1, states, false).row(0).to_owned();
    let upper = rng.random_bool(0.3);
    let a = random_stochastic(rng, states, states, upper);
    let pi = random_stochastic(rng, states, components, false);
    (HmmCore::new(q, a).unwrap(), MixtureWeights::new(pi).unwrap())
}

/// Random `log p(x_t | s, k)` table.
pub fn random_component_table<R: Rng>(rng: &mut R, frames: usize, states: usize, components: usize) -> Array3<f64> {
    Array3::from_shape_fn((frames, states, components), |_| -1.0 + 2.0 * rng.sample::<f64, _>(StandardNormal))
}

pub struct Enumerated {
    pub loglik: f64,
    pub gamma: Array2<f64>,
    pub xi: Array3<f64>,
    /// `p(s_t = s, k_t = k | x̄)`.
    pub joint_sk: Array3<f64>,
}

/// Exact marginals by summing over every state and component sequence.
pub fn enumerate_paths(core: &HmmCore<f64>, mix: &MixtureWeights<f64>, component: &Array3<f64>) -> Enumerated {
    let (frames, states, comps) = component.dim();
    let cells = states * comps;
    let total_paths = cells.pow(frames as u32);
    let mut logs = Vec::with_capacity(total_paths);
    let mut paths = Vec::with_capacity(total_paths);
    for code in 0..total_paths {
        let mut c = code;
        let path: Vec<(usize, usize)> = (0..frames)
            .map(|_| {
                let cell = c % cells;
                c /= cells;
                (cell / comps, cell % comps)
            })
            .collect();
        let mut lp = 0.0;
        for (t, &(s, k)) in path.iter().enumerate() {
            lp += if t == 0 {
                core.initial()[s].ln()
            } else {
                core.transition()[[path[t - 1].0, s]].ln()
            };
            lp += mix.weights()[[s, k]].ln() + component[[t, s, k]];
        }
        logs.push(lp);
        paths.push(path);
    }
    let loglik = log_sum_exp(&logs);
    let mut gamma = Array2::zeros((frames, states));
    let mut xi = Array3::zeros((frames.saturating_sub(1), states, states));
    let mut joint_sk = Array3::zeros((frames, states, comps));
    for (path, lp) in paths.iter().zip(&logs) {
        let w = (lp - loglik).exp();
        for (t, &(s, k)) in path.iter().enumerate() {
            gamma[[t, s]] += w;
            joint_sk[[t, s, k]] += w;
            if t + 1 < frames {
                xi[[t, s, path[t + 1].0]] += w;
            }
        }
    }
    Enumerated {
        loglik,
        gamma,
        xi,
        joint_sk,
    }
}

pub fn frame_table(component: Array3<f64>, mix: &MixtureWeights<f64>) -> FrameLogLik<f64> {
    FrameLogLik::from_components(component, mix).unwrap()
}

pub fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `log |det M|` by Gaussian elimination with partial pivoting.
pub fn log_abs_det(mut m: Array2<f64>) -> f64 {
    let n = m.nrows();
    let mut acc = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| m[[a, col]].abs().total_cmp(&m[[b, col]].abs()))
            .unwrap();
        if m[[pivot, col]] == 0.0 {
            return f64::NEG_INFINITY;
        }
        if pivot != col {
            for j in 0..n {
                m.swap([pivot, j], [col, j]);
            }
        }
        let p = m[[col, col]];
        acc += p.abs().ln();
        for r in col + 1..n {
            let f = m[[r, col]] / p;
            for j in col..n {
                m[[r, j]] -= f * m[[col, j]];
            }
        }
    }
    acc
}

/// Dense Jacobian of `x ↦ f(x)` by central differences with step `h`.
pub fn numeric_jacobian(gen: &FlowGenerator<f64>, x: &[f64], h: f64) -> Array2<f64> {
    let n = x.len();
    let mut jac = Array2::zeros((n, n));
    for j in 0..n {
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[j] += h;
        minus[j] -= h;
        let (zp, _) = gen.inverse_eval(&plus).unwrap();
        let (zm, _) = gen.inverse_eval(&minus).unwrap();
        for i in 0..n {
            jac[[i, j]] = (zp[i] - zm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Central difference of a scalar function with respect to one coordinate.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, at: f64, h: f64) -> f64 {
    (f(at + h) - f(at - h)) / (2.0 * h)
}

/// `|a - b| <= rel * max(|a|, |b|, floor)`.
pub fn close_relative(a: f64, b: f64, rel: f64, floor: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(floor)
}

pub fn standard_normal_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn to_array(v: Vec<f64>) -> Array1<f64> {
    Array1::from(v)
}

/// Random generator with every parameter, biases included, jittered by
/// `amount · N(0, 1)` so that no coupling is close to the identity.
pub fn jittered_generator<R: Rng>(rng: &mut R, dim: usize, config: &FlowConfig, amount: f64) -> FlowGenerator<f64> {
    let mut gen = FlowGenerator::random(rng, dim, config);
    for i in 0..gen.param_count() {
        let v = gen.param(i) + amount * rng.sample::<f64, _>(StandardNormal);
        gen.set_param(i, v);
    }
    gen
}

/// Random flow-emission model with jittered generators and random `q`, `A`, `Π`.
pub fn random_genhmm<R: Rng>(
    rng: &mut R,
    states: usize,
    components: usize,
    dim: usize,
    config: &FlowConfig,
) -> GenHmmModel<f64> {
    let (core, mix) = random_hmm(rng, states, components);
    let generators = (0..states)
        .map(|_| (0..components).map(|_| jittered_generator(rng, dim, config, 0.3)).collect())
        .collect();
    GenHmmModel::new("random", core, mix, generators).unwrap()
}
