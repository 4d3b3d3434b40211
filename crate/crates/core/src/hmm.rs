//! Log-space forward-backward and the closed-form M-step for HMMs whose
//! emissions are mixtures. Emission models only need to supply a
//! [`FrameLogLik`] table.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, log_sum_exp_iter, Real};

fn stochastic_tolerance<T: Real>() -> f64 {
    (100.0 * T::epsilon().as_f64()).max(1e-9)
}

fn check_distribution<T: Real>(row: ArrayView1<T>, what: &str) -> Result<()> {
    if row.iter().any(|&v| !v.is_finite() || v < T::zero()) {
        return Err(Error::Invalid(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
    if (sum - 1.0).abs() > stochastic_tolerance::<T>() {
        return Err(Error::Invalid(format!("{what} sums to {sum}, expected 1")));
    }
    Ok(())
}

/// Initial distribution `q` and row-stochastic transition matrix `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct HmmCore<T> {
    initial: Array1<T>,
    transition: Array2<T>,
}

impl<T: Real> HmmCore<T> {
    pub fn new(initial: Array1<T>, transition: Array2<T>) -> Result<Self> {
        let n = initial.len();
        if n == 0 {
            return Err(Error::Invalid("an HMM needs at least one state".into()));
        }
        if transition.dim() != (n, n) {
            return Err(Error::Shape(format!(
                "transition matrix is {:?}, expected {n}x{n}",
                transition.dim()
            )));
        }
        check_distribution(initial.view(), "initial distribution")?;
        for (i, row) in transition.rows().into_iter().enumerate() {
            check_distribution(row, &format!("transition row {i}"))?;
        }
        Ok(HmmCore {
            initial,
            transition,
        })
    }

    /// Uniform `q`, uniform `A`.
    pub fn uniform(states: usize) -> Self {
        let p = T::one() / T::from_usize(states).unwrap();
        HmmCore {
            initial: Array1::from_elem(states, p),
            transition: Array2::from_elem((states, states), p),
        }
    }

    /// Uniform `q`; row `i` of `A` spreads its mass evenly over `j ≥ i`.
    pub fn left_to_right(states: usize) -> Self {
        let mut transition = Array2::zeros((states, states));
        for i in 0..states {
            let p = T::one() / T::from_usize(states - i).unwrap();
            transition.slice_mut(s![i, i..]).fill(p);
        }
        HmmCore {
            initial: Array1::from_elem(states, T::one() / T::from_usize(states).unwrap()),
            transition,
        }
    }

    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn initial(&self) -> &Array1<T> {
        &self.initial
    }

    pub fn transition(&self) -> &Array2<T> {
        &self.transition
    }

    pub fn set_initial(&mut self, initial: Array1<T>) -> Result<()> {
        *self = HmmCore::new(initial, self.transition.clone())?;
        Ok(())
    }

    pub fn set_transition(&mut self, transition: Array2<T>) -> Result<()> {
        *self = HmmCore::new(self.initial.clone(), transition)?;
        Ok(())
    }
}

/// Per-state mixture weights `Π` (`|S| x K`, rows sum to one).
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureWeights<T> {
    weights: Array2<T>,
}

impl<T: Real> MixtureWeights<T> {
    pub fn new(weights: Array2<T>) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::Invalid("mixture weights need at least one state and component".into()));
        }
        for (i, row) in weights.rows().into_iter().enumerate() {
            check_distribution(row, &format!("mixture row {i}"))?;
        }
        Ok(MixtureWeights { weights })
    }

    pub fn uniform(states: usize, components: usize) -> Self {
        MixtureWeights {
            weights: Array2::from_elem(
                (states, components),
                T::one() / T::from_usize(components).unwrap(),
            ),
        }
    }

    pub fn n_states(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &Array2<T> {
        &self.weights
    }
}

/// Emission log-likelihoods of one sequence: `component[[t, s, k]] = log p(x_t | s, k)`
/// and `state[[t, s]] = log Σ_k π_{s,k} p(x_t | s, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLogLik<T> {
    pub component: Array3<T>,
    pub state: Array2<T>,
}

impl<T: Real> FrameLogLik<T> {
    /// Mixes component log-likelihoods with `Π`.
    pub fn from_components(component: Array3<T>, mixture: &MixtureWeights<T>) -> Result<Self> {
        let (frames, states, comps) = component.dim();
        if (states, comps) != mixture.weights.dim() {
            return Err(Error::Shape(format!(
                "component table is {states}x{comps} per frame, mixture is {:?}",
                mixture.weights.dim()
            )));
        }
        let log_pi = mixture.weights.mapv(|p| p.ln());
        let mut state = Array2::zeros((frames, states));
        for t in 0..frames {
            for s in 0..states {
                let terms = (0..comps).map(|k| log_pi[[s, k]] + component[[t, s, k]]);
                state[[t, s]] = log_sum_exp_iter(terms);
            }
        }
        Ok(FrameLogLik { component, state })
    }

    pub fn frames(&self) -> usize {
        self.state.nrows()
    }

    pub fn n_states(&self) -> usize {
        self.state.ncols()
    }
}

/// Exact posteriors of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorTables<T> {
    /// `gamma[[t, i]] = p(s_t = i | x̄)`.
    pub gamma: Array2<T>,
    /// `xi[[t, i, j]] = p(s_t = i, s_{t+1} = j | x̄)`, `T - 1` slices.
    pub xi: Array3<T>,
    /// `kappa[[t, s, k]] = p(k_t = k | s_t = s, x̄)`.
    pub kappa: Array3<T>,
    /// `log p(x̄)`.
    pub loglik: T,
}

/// Component posterior given the state, normalised in log space.
///
/// Returns the table and how many `(t, s)` cells had every component at
/// `-inf` (those fall back to uniform).
pub fn kappa_posterior<T: Real>(
    mixture: &MixtureWeights<T>,
    ll: &FrameLogLik<T>,
) -> Result<(Array3<T>, usize)> {
    let (frames, states, comps) = ll.component.dim();
    if (states, comps) != mixture.weights.dim() {
        return Err(Error::Shape("component table does not match mixture weights".into()));
    }
    let log_pi = mixture.weights.mapv(|p| p.ln());
    let mut kappa = Array3::zeros((frames, states, comps));
    let mut fallbacks = 0;
    let uniform = T::one() / T::from_usize(comps).unwrap();
    let mut joint = vec![T::zero(); comps];
    for t in 0..frames {
        for s in 0..states {
            for k in 0..comps {
                let v = ll.component[[t, s, k]];
                if v.is_nan() || v == T::infinity() {
                    return Err(Error::NonFinite(format!("component log-likelihood at ({t}, {s}, {k})")));
                }
                joint[k] = log_pi[[s, k]] + v;
            }
            let norm = log_sum_exp(&joint);
            if norm == T::neg_infinity() {
                fallbacks += 1;
                kappa.slice_mut(s![t, s, ..]).fill(uniform);
                continue;
            }
            for k in 0..comps {
                kappa[[t, s, k]] = (joint[k] - norm).exp();
            }
        }
    }
    if fallbacks > 0 {
        log::warn!("{fallbacks} frame/state cells had no feasible component; using uniform κ-posterior");
    }
    Ok((kappa, fallbacks))
}

/// Posterior state, pairwise and component marginals of one sequence.
///
/// Errors with [`Error::Degenerate`] when some frame cannot be emitted by any
/// reachable state.
pub fn forward_backward<T: Real>(
    core: &HmmCore<T>,
    mixture: &MixtureWeights<T>,
    ll: &FrameLogLik<T>,
) -> Result<PosteriorTables<T>> {
    let frames = ll.frames();
    let n = core.n_states();
    if frames == 0 {
        return Err(Error::Invalid("sequence has no frames".into()));
    }
    if ll.n_states() != n || mixture.n_states() != n {
        return Err(Error::Shape(format!(
            "emission table has {} states, HMM has {n}",
            ll.n_states()
        )));
    }
    if let Some(((t, s), _)) = ll
        .state
        .indexed_iter()
        .find(|(_, v)| v.is_nan() || **v == T::infinity())
    {
        return Err(Error::NonFinite(format!("state log-likelihood at ({t}, {s})")));
    }

    let log_q = core.initial.mapv(|p| p.ln());
    let log_a = core.transition.mapv(|p| p.ln());

    let mut alpha = Array2::from_elem((frames, n), T::neg_infinity());
    for i in 0..n {
        alpha[[0, i]] = log_q[i] + ll.state[[0, i]];
    }
    let mut scratch = vec![T::zero(); n];
    for t in 1..frames {
        for j in 0..n {
            for i in 0..n {
                scratch[i] = alpha[[t - 1, i]] + log_a[[i, j]];
            }
            alpha[[t, j]] = log_sum_exp(&scratch) + ll.state[[t, j]];
        }
    }
    for t in 0..frames {
        if alpha.row(t).iter().all(|&v| v == T::neg_infinity()) {
            return Err(Error::Degenerate { frame: t });
        }
    }

    let mut beta = Array2::zeros((frames, n));
    for t in (0..frames - 1).rev() {
        for i in 0..n {
            for j in 0..n {
                scratch[j] = log_a[[i, j]] + ll.state[[t + 1, j]] + beta[[t + 1, j]];
            }
            beta[[t, i]] = log_sum_exp(&scratch);
        }
    }

    let loglik = log_sum_exp(alpha.row(frames - 1).as_slice().unwrap());
    let mut gamma = Array2::zeros((frames, n));
    for t in 0..frames {
        for i in 0..n {
            gamma[[t, i]] = (alpha[[t, i]] + beta[[t, i]] - loglik).exp();
        }
    }
    let mut xi = Array3::zeros((frames.saturating_sub(1), n, n));
    for t in 0..frames.saturating_sub(1) {
        for i in 0..n {
            for j in 0..n {
                let v = alpha[[t, i]] + log_a[[i, j]] + ll.state[[t + 1, j]] + beta[[t + 1, j]];
                xi[[t, i, j]] = (v - loglik).exp();
            }
        }
    }
    let (kappa, _) = kappa_posterior(mixture, ll)?;
    Ok(PosteriorTables {
        gamma,
        xi,
        kappa,
        loglik,
    })
}

/// `q_i = (1/R) Σ_r γ^{(r)}[0][i]`; `None` without sequences.
pub fn update_initial<T: Real>(posteriors: &[&PosteriorTables<T>]) -> Option<Array1<T>> {
    let first = posteriors.first()?;
    let mut q = Array1::zeros(first.gamma.ncols());
    for p in posteriors {
        q += &p.gamma.row(0);
    }
    let r = T::from_usize(posteriors.len()).unwrap();
    Some(q.mapv(|v| v / r))
}

/// `A_ij = ξ̄_ij / Σ_k ξ̄_ik` with `ξ̄ = Σ_r Σ_t ξ^{(r)}_t`; rows with no mass keep
/// `previous`. `None` when no sequence has a transition.
pub fn update_transition<T: Real>(
    posteriors: &[&PosteriorTables<T>],
    previous: &Array2<T>,
) -> Option<Array2<T>> {
    let n = previous.nrows();
    let mut counts = Array2::<T>::zeros((n, n));
    let mut any = false;
    for p in posteriors {
        if p.xi.len_of(Axis(0)) == 0 {
            continue;
        }
        any = true;
        counts += &p.xi.sum_axis(Axis(0));
    }
    if !any {
        log::warn!("no sequence has two or more frames; transition update skipped");
        return None;
    }
    let mut out = previous.clone();
    for i in 0..n {
        let total: T = counts.row(i).iter().copied().sum();
        if total > T::zero() {
            for j in 0..n {
                out[[i, j]] = counts[[i, j]] / total;
            }
        }
    }
    Some(out)
}

/// `π_{s,k} ∝ Σ_r Σ_t γ[t][s] · κ[t][s][k]`; rows with no mass keep `previous`.
pub fn update_mixture<T: Real>(
    posteriors: &[&PosteriorTables<T>],
    previous: &Array2<T>,
) -> Option<Array2<T>> {
    if posteriors.is_empty() {
        return None;
    }
    let counts = mixture_counts(posteriors, previous.dim());
    let mut out = previous.clone();
    for s in 0..counts.nrows() {
        let total: T = counts.row(s).iter().copied().sum();
        if total > T::zero() {
            for k in 0..counts.ncols() {
                out[[s, k]] = counts[[s, k]] / total;
            }
        }
    }
    Some(out)
}

/// `Σ_r Σ_t γ[t][s] · κ[t][s][k]` as an `|S| x K` table.
pub fn mixture_counts<T: Real>(
    posteriors: &[&PosteriorTables<T>],
    dim: (usize, usize),
) -> Array2<T> {
    let mut counts = Array2::<T>::zeros(dim);
    for p in posteriors {
        for t in 0..p.gamma.nrows() {
            for s in 0..dim.0 {
                let g = p.gamma[[t, s]];
                for k in 0..dim.1 {
                    counts[[s, k]] += g * p.kappa[[t, s, k]];
                }
            }
        }
    }
    counts
}
