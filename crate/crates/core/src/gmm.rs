//! Diagonal-covariance GMM-HMM baseline sharing the HMM machinery.

use ndarray::{s, Array1, Array2, Array3, ArrayView2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hmm::{
    forward_backward, mixture_counts, update_initial, update_mixture, update_transition,
    HmmCore, MixtureWeights, PosteriorTables,
};
use crate::model::SequenceModel;
use crate::scalar::Real;

pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Responsibility mass below which a component is considered empty.
const EMPTY_MASS: f64 = 1e-10;

/// Per-state diagonal Gaussian mixtures; `means[[s, k, d]]`, `variances[[s, k, d]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmEmission<T> {
    pub mixture: MixtureWeights<T>,
    pub means: Array3<T>,
    pub variances: Array3<T>,
}

impl<T: Real> GmmEmission<T> {
    pub fn new(mixture: MixtureWeights<T>, means: Array3<T>, variances: Array3<T>) -> Result<Self> {
        let (s, k) = mixture.weights().dim();
        if means.dim().0 != s || means.dim().1 != k || means.dim() != variances.dim() {
            return Err(Error::Shape(format!(
                "means {:?} / variances {:?} do not match {s} states x {k} components",
                means.dim(),
                variances.dim()
            )));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gmm mean".into()));
        }
        let floor = T::lit(VARIANCE_FLOOR);
        if variances.iter().any(|&v| !v.is_finite() || v < floor) {
            return Err(Error::Invalid(format!("gmm variances must be finite and >= {VARIANCE_FLOOR}")));
        }
        Ok(GmmEmission {
            mixture,
            means,
            variances,
        })
    }

    pub fn dim(&self) -> usize {
        self.means.dim().2
    }

    /// `log N(x; μ_{s,k}, diag σ²_{s,k})` for every frame, state and component.
    pub fn frame_table(&self, frames: ArrayView2<T>) -> Result<Array3<T>> {
        let (states, comps, dim) = self.means.dim();
        if frames.ncols() != dim {
            return Err(Error::Shape(format!(
                "frames have width {}, model expects {dim}",
                frames.ncols()
            )));
        }
        let half = T::lit(0.5);
        let mut norm = Array2::zeros((states, comps));
        for s in 0..states {
            for k in 0..comps {
                let log_var: T = self.variances.slice(s![s, k, ..]).iter().map(|v| v.ln()).sum();
                norm[[s, k]] = -half * (T::from_usize(dim).unwrap() * T::ln_2pi() + log_var);
            }
        }
        let mut table = Array3::zeros((frames.nrows(), states, comps));
        for (t, x) in frames.rows().into_iter().enumerate() {
            for s in 0..states {
                for k in 0..comps {
                    let mut quad = T::zero();
                    for d in 0..dim {
                        let diff = x[d] - self.means[[s, k, d]];
                        quad += diff * diff / self.variances[[s, k, d]];
                    }
                    table[[t, s, k]] = norm[[s, k]] - half * quad;
                }
            }
        }
        Ok(table)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmHmmModel<T> {
    label: String,
    hmm: HmmCore<T>,
    emission: GmmEmission<T>,
}

impl<T: Real> GmmHmmModel<T> {
    pub fn new(label: impl Into<String>, hmm: HmmCore<T>, emission: GmmEmission<T>) -> Result<Self> {
        if emission.mixture.n_states() != hmm.n_states() {
            return Err(Error::Shape("emission and HMM disagree on state count".into()));
        }
        Ok(GmmHmmModel {
            label: label.into(),
            hmm,
            emission,
        })
    }

    /// Left-to-right `A`, uniform `q`/`Π`, variances set to the global
    /// per-dimension data variance. Means of state `s` are random frames from
    /// the `s`-th of `states` equal segments of the training sequences.
    pub fn initialize<R: Rng + ?Sized>(
        label: impl Into<String>,
        rng: &mut R,
        states: usize,
        components: usize,
        data: &[ArrayView2<T>],
    ) -> Result<Self> {
        if data.iter().all(|x| x.nrows() == 0) {
            return Err(Error::Data("cannot initialise a GMM from an empty dataset".into()));
        }
        let dim = data[0].ncols();
        let global = global_variance(data, dim);
        let mut means = Array3::zeros((states, components, dim));
        let mut variances = Array3::zeros((states, components, dim));
        for s in 0..states {
            let segment: Vec<(usize, usize)> = data
                .iter()
                .enumerate()
                .flat_map(|(r, x)| {
                    let len = x.nrows();
                    (s * len / states..((s + 1) * len / states).max(s * len / states + 1).min(len))
                        .map(move |t| (r, t))
                })
                .collect();
            for k in 0..components {
                let (r, t) = segment[rng.random_range(0..segment.len())];
                means.slice_mut(s![s, k, ..]).assign(&data[r].row(t));
                variances.slice_mut(s![s, k, ..]).assign(&global);
            }
        }
        let emission = GmmEmission::new(MixtureWeights::uniform(states, components), means, variances)?;
        GmmHmmModel::new(label, HmmCore::left_to_right(states), emission)
    }

    pub fn emission(&self) -> &GmmEmission<T> {
        &self.emission
    }

    pub fn set_label(&mut self, label: impl Into<String>) {
        self.label = label.into();
    }
}

fn global_variance<T: Real>(data: &[ArrayView2<T>], dim: usize) -> Array1<T> {
    let n: usize = data.iter().map(|x| x.nrows()).sum();
    let nf = T::from_usize(n.max(1)).unwrap();
    let mut mean = Array1::<T>::zeros(dim);
    for x in data {
        for row in x.rows() {
            mean += &row;
        }
    }
    mean.mapv_inplace(|v| v / nf);
    let mut var = Array1::<T>::zeros(dim);
    for x in data {
        for row in x.rows() {
            for d in 0..dim {
                let diff = row[d] - mean[d];
                var[d] += diff * diff;
            }
        }
    }
    let floor = T::lit(VARIANCE_FLOOR);
    var.mapv(|v| (v / nf).max(floor))
}

impl<T: Real> SequenceModel<T> for GmmHmmModel<T> {
    fn label(&self) -> &str {
        &self.label
    }

    fn hmm(&self) -> &HmmCore<T> {
        &self.hmm
    }

    fn mixture(&self) -> &MixtureWeights<T> {
        &self.emission.mixture
    }

    fn dim(&self) -> usize {
        self.emission.dim()
    }

    fn component_table(&self, frames: ArrayView2<T>) -> Result<Array3<T>> {
        self.emission.frame_table(frames)
    }

    fn sample_component(&self, state: usize, component: usize, rng: &mut dyn RngCore) -> Result<Vec<T>> {
        let dim = self.dim();
        Ok((0..dim)
            .map(|d| {
                let z: f64 = rng.sample(StandardNormal);
                self.emission.means[[state, component, d]]
                    + self.emission.variances[[state, component, d]].sqrt() * T::lit(z)
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmEmReport {
    /// Per-frame average log-likelihood of the model entering the step.
    pub avg_loglik: f64,
    pub degenerate: usize,
    /// Components reseeded because they received no responsibility.
    pub reseeded: usize,
}

/// One Baum-Welch iteration with diagonal-Gaussian sufficient statistics.
pub fn gmm_em_step<T: Real, R: Rng + ?Sized>(
    model: &mut GmmHmmModel<T>,
    data: &[ArrayView2<T>],
    rng: &mut R,
) -> Result<GmmEmReport> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let results: Vec<Result<Option<PosteriorTables<T>>>> = data
        .par_iter()
        .map(|x| {
            let ll = model.frame_loglik_table(x.view())?;
            match forward_backward(&model.hmm, &model.emission.mixture, &ll) {
                Ok(p) => Ok(Some(p)),
                Err(Error::Degenerate { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut posteriors = Vec::with_capacity(data.len());
    let (mut total, mut frames) = (0.0, 0usize);
    for r in results {
        let p = r?;
        if let Some(p) = &p {
            total += p.loglik.as_f64();
            frames += p.gamma.nrows();
        }
        posteriors.push(p);
    }
    if frames == 0 {
        return Err(Error::Data("every sequence is degenerate under the current model".into()));
    }
    let degenerate = posteriors.iter().filter(|p| p.is_none()).count();
    let used: Vec<(ArrayView2<T>, &PosteriorTables<T>)> = data
        .iter()
        .zip(&posteriors)
        .filter_map(|(x, p)| p.as_ref().map(|p| (x.view(), p)))
        .collect();
    let posts: Vec<&PosteriorTables<T>> = used.iter().map(|(_, p)| *p).collect();

    let (states, comps, dim) = model.emission.means.dim();
    let mass = mixture_counts(&posts, (states, comps));
    let mut sums = Array3::<T>::zeros((states, comps, dim));
    for (x, p) in &used {
        for (t, row) in x.rows().into_iter().enumerate() {
            for s in 0..states {
                for k in 0..comps {
                    let w = p.gamma[[t, s]] * p.kappa[[t, s, k]];
                    for d in 0..dim {
                        sums[[s, k, d]] += w * row[d];
                    }
                }
            }
        }
    }
    let mut means = model.emission.means.clone();
    for s in 0..states {
        for k in 0..comps {
            if mass[[s, k]].as_f64() > EMPTY_MASS {
                for d in 0..dim {
                    means[[s, k, d]] = sums[[s, k, d]] / mass[[s, k]];
                }
            }
        }
    }
    let mut sq = Array3::<T>::zeros((states, comps, dim));
    for (x, p) in &used {
        for (t, row) in x.rows().into_iter().enumerate() {
            for s in 0..states {
                for k in 0..comps {
                    let w = p.gamma[[t, s]] * p.kappa[[t, s, k]];
                    for d in 0..dim {
                        let diff = row[d] - means[[s, k, d]];
                        sq[[s, k, d]] += w * diff * diff;
                    }
                }
            }
        }
    }
    let floor = T::lit(VARIANCE_FLOOR);
    let mut variances = model.emission.variances.clone();
    let mut reseeded = 0;
    let views: Vec<ArrayView2<T>> = used.iter().map(|(x, _)| x.view()).collect();
    let global = global_variance(&views, dim);
    for s in 0..states {
        for k in 0..comps {
            if mass[[s, k]].as_f64() > EMPTY_MASS {
                for d in 0..dim {
                    variances[[s, k, d]] = (sq[[s, k, d]] / mass[[s, k]]).max(floor);
                }
            } else {
                let (x, _) = used[rng.random_range(0..used.len())];
                let t = rng.random_range(0..x.nrows());
                means.slice_mut(s![s, k, ..]).assign(&x.row(t));
                variances.slice_mut(s![s, k, ..]).assign(&global);
                reseeded += 1;
                log::warn!("[{}] reseeded empty component ({s}, {k})", model.label);
            }
        }
    }

    let mut hmm = model.hmm.clone();
    if let Some(q) = update_initial(&posts) {
        hmm.set_initial(q)?;
    }
    if let Some(a) = update_transition(&posts, hmm.transition()) {
        hmm.set_transition(a)?;
    }
    let pi = update_mixture(&posts, model.emission.mixture.weights())
        .map(MixtureWeights::new)
        .transpose()?
        .unwrap_or_else(|| model.emission.mixture.clone());
    model.hmm = hmm;
    model.emission = GmmEmission::new(pi, means, variances)?;

    Ok(GmmEmReport {
        avg_loglik: total / frames as f64,
        degenerate,
        reseeded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GmmTrainConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GmmTrainConfig {
    fn default() -> Self {
        GmmTrainConfig {
            max_iterations: 50,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmTrainState {
    pub config: GmmTrainConfig,
    /// Completed EM iterations.
    pub iteration: usize,
    /// Per-frame average log-likelihood of the model entering each iteration.
    pub history: Vec<f64>,
    pub converged: bool,
}

impl GmmTrainState {
    pub fn new(config: GmmTrainConfig) -> Self {
        GmmTrainState {
            config,
            iteration: 0,
            history: Vec::new(),
            converged: false,
        }
    }

    fn has_converged(&self) -> bool {
        match self.history.as_slice() {
            [.., prev, last] => {
                (last - prev).abs() / last.abs().max(f64::MIN_POSITIVE) < self.config.tolerance
            }
            _ => false,
        }
    }
}

/// Runs [`gmm_em_step`] from `state` until convergence or `max_iterations`.
/// Iteration `i` draws reseeding frames from stream `i` of the seed, so a
/// restored state continues exactly where it stopped.
pub fn train_gmm_from<T: Real, F>(
    model: &mut GmmHmmModel<T>,
    data: &[ArrayView2<T>],
    state: &mut GmmTrainState,
    mut on_iteration: F,
) -> Result<()>
where
    F: FnMut(&GmmHmmModel<T>, &GmmTrainState, &GmmEmReport) -> Result<()>,
{
    if !(state.config.tolerance > 0.0) {
        return Err(Error::Invalid("tolerance must be positive".into()));
    }
    while state.iteration < state.config.max_iterations && !state.converged {
        let iteration = state.iteration;
        let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed);
        rng.set_stream(iteration as u64);
        let em_err = |e| Error::Em {
            iteration,
            source: Box::new(e),
        };
        let report = gmm_em_step(model, data, &mut rng).map_err(em_err)?;
        if !report.avg_loglik.is_finite() {
            return Err(em_err(Error::NonFinite("dataset log-likelihood".into())));
        }
        state.history.push(report.avg_loglik);
        state.iteration += 1;
        log::info!(
            "[{}] GMM EM iteration {}: avg loglik {:.6} nats/frame",
            model.label,
            state.iteration,
            report.avg_loglik
        );
        state.converged = state.has_converged();
        on_iteration(model, state, &report)?;
    }
    Ok(())
}

pub fn train_gmm<T: Real>(
    model: &mut GmmHmmModel<T>,
    data: &[ArrayView2<T>],
    config: GmmTrainConfig,
) -> Result<GmmTrainState> {
    let mut state = GmmTrainState::new(config);
    train_gmm_from(model, data, &mut state, |_, _, _| Ok(()))?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn single(mean: Vec<f64>, var: Vec<f64>, comps: usize) -> GmmHmmModel<f64> {
        let dim = mean.len();
        let means = Array3::from_shape_fn((1, comps, dim), |(_, _, d)| mean[d]);
        let vars = Array3::from_shape_fn((1, comps, dim), |(_, _, d)| var[d]);
        let em = GmmEmission::new(MixtureWeights::uniform(1, comps), means, vars).unwrap();
        GmmHmmModel::new("g", HmmCore::uniform(1), em).unwrap()
    }

    #[test]
    fn standard_normal_at_origin() {
        let m = single(vec![0.0, 0.0], vec![1.0, 1.0], 1);
        let table = m.component_table(Array2::zeros((1, 2)).view()).unwrap();
        assert!((table[[0, 0, 0]] + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn scalar_density_matches_closed_form() {
        let m = single(vec![1.5], vec![0.25], 1);
        let x = 0.7f64;
        // N(0.7; 1.5, 0.25) = exp(-(0.8)^2 / 0.5) / sqrt(2π · 0.25)
        let expected = (-(0.8f64 * 0.8) / 0.5).exp() / (2.0 * std::f64::consts::PI * 0.25).sqrt();
        let table = m.component_table(array![[x]].view()).unwrap();
        assert!((table[[0, 0, 0]] - expected.ln()).abs() < 1e-14);
    }

    #[test]
    fn identical_components_mix_to_component() {
        let m = single(vec![0.3, -0.2], vec![2.0, 0.5], 2);
        let x = array![[1.0, 1.0], [0.0, -2.0]];
        let ll = m.frame_loglik_table(x.view()).unwrap();
        for t in 0..2 {
            assert!((ll.state[[t, 0]] - ll.component[[t, 0, 0]]).abs() < 1e-14);
        }
    }

    #[test]
    fn single_gaussian_mle_in_one_step() {
        let data = vec![array![[1.0, 2.0], [3.0, -1.0], [2.0, 0.5]], array![[0.0, 0.0]]];
        let views: Vec<_> = data.iter().map(|x| x.view()).collect();
        let mut m = single(vec![10.0, 10.0], vec![1.0, 1.0], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        gmm_em_step(&mut m, &views, &mut rng).unwrap();
        let mean = [1.5f64, 0.375];
        let frames = [[1.0, 2.0], [3.0, -1.0], [2.0, 0.5], [0.0, 0.0]];
        for d in 0..2 {
            let var: f64 = frames.iter().map(|f| (f[d] - mean[d]).powi(2)).sum::<f64>() / 4.0;
            assert!((m.emission().means[[0, 0, d]] - mean[d]).abs() < 1e-12);
            assert!((m.emission().variances[[0, 0, d]] - var).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_component_is_reseeded() {
        // Component 1 sits so far away that it gets no responsibility.
        let means = array![[[0.0f64], [1e6]]];
        let vars = array![[[1.0], [1e-6]]];
        let em = GmmEmission::new(MixtureWeights::uniform(1, 2), means, vars).unwrap();
        let mut m = GmmHmmModel::new("g", HmmCore::uniform(1), em).unwrap();
        let data = vec![array![[0.1], [-0.4], [0.3]]];
        let views: Vec<_> = data.iter().map(|x| x.view()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = gmm_em_step(&mut m, &views, &mut rng).unwrap();
        assert_eq!(report.reseeded, 1);
        assert!(m.emission().means[[0, 1, 0]].abs() < 1.0);
    }

    #[test]
    fn variance_floor_applies() {
        let data = vec![array![[2.0], [2.0], [2.0]]];
        let views: Vec<_> = data.iter().map(|x| x.view()).collect();
        let mut m = single(vec![0.0], vec![1.0], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        gmm_em_step(&mut m, &views, &mut rng).unwrap();
        assert_eq!(m.emission().variances[[0, 0, 0]], VARIANCE_FLOOR);
    }

    #[test]
    fn bad_variances_rejected() {
        let r = GmmEmission::<f64>::new(
            MixtureWeights::uniform(1, 1),
            Array3::zeros((1, 1, 2)),
            Array3::from_elem((1, 1, 2), 1e-9),
        );
        assert!(r.is_err());
    }
}
