//! Generator-mixed HMM: every state emits through a mixture of `K` flow
//! generators, trained by EM with Adam ascent on the generator objective.
//!
//! One EM iteration:
//!
//! 1. E-step under the frozen model `H_old`: component tables, forward-backward
//!    and κ-posteriors for every sequence. The dataset log-likelihood recorded
//!    in [`TrainState::history`] is the one of `H_old`.
//! 2. `inner_batches` Adam steps on
//!    `Q(Θ) = Σ_r Σ_t Σ_{s,k} γ_t(s) κ_t(s,k) log p(x_t | s, k; θ_{s,k})`
//!    using the `H_old` posteriors, each over a batch of `batch_size`
//!    sequences, gradients averaged by the batch frame count.
//! 3. Optional guard: if `Q(Θ_new) < Q(Θ_old)` the generator step is undone.
//! 4. Closed-form `q`, `A`, `Π` from the same `H_old` posteriors.

use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowGenerator, FlowOptimizer, FlowTapes};
use crate::hmm::{
    forward_backward, update_initial, update_mixture, update_transition, FrameLogLik, HmmCore,
    MixtureWeights, PosteriorTables,
};
use crate::model::SequenceModel;
use crate::nn::AdamConfig;
use crate::scalar::Real;

/// Sequences handled by one parallel work item; fixed so results do not depend
/// on the thread count.
const CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct GenHmmModel<T> {
    label: String,
    hmm: HmmCore<T>,
    mixture: MixtureWeights<T>,
    /// `generators[s][k]`.
    generators: Vec<Vec<FlowGenerator<T>>>,
    dim: usize,
}

impl<T: Real> GenHmmModel<T> {
    pub fn new(
        label: impl Into<String>,
        hmm: HmmCore<T>,
        mixture: MixtureWeights<T>,
        generators: Vec<Vec<FlowGenerator<T>>>,
    ) -> Result<Self> {
        let states = hmm.n_states();
        if mixture.n_states() != states || generators.len() != states {
            return Err(Error::Shape(format!(
                "{states} HMM states but {} mixture rows and {} generator rows",
                mixture.n_states(),
                generators.len()
            )));
        }
        let k = mixture.n_components();
        if generators.iter().any(|row| row.len() != k) {
            return Err(Error::Shape(format!("every state needs {k} generators")));
        }
        let dim = generators[0][0].dim();
        if generators.iter().flatten().any(|g| g.dim() != dim) {
            return Err(Error::Shape("generators disagree on frame dimension".into()));
        }
        Ok(GenHmmModel {
            label: label.into(),
            hmm,
            mixture,
            generators,
            dim,
        })
    }

    /// Left-to-right `A`, uniform `q` and `Π`, randomly initialised generators.
    pub fn random<R: Rng + ?Sized>(
        label: impl Into<String>,
        rng: &mut R,
        states: usize,
        components: usize,
        dim: usize,
        flow: &FlowConfig,
    ) -> Self {
        let generators = (0..states)
            .map(|_| {
                (0..components)
                    .map(|_| FlowGenerator::random(rng, dim, flow))
                    .collect()
            })
            .collect();
        GenHmmModel {
            label: label.into(),
            hmm: HmmCore::left_to_right(states),
            mixture: MixtureWeights::uniform(states, components),
            generators,
            dim,
        }
    }

    pub fn generators(&self) -> &[Vec<FlowGenerator<T>>] {
        &self.generators
    }

    pub fn generators_mut(&mut self) -> &mut [Vec<FlowGenerator<T>>] {
        &mut self.generators
    }

    pub fn set_hmm(&mut self, hmm: HmmCore<T>) -> Result<()> {
        if hmm.n_states() != self.hmm.n_states() {
            return Err(Error::Shape("state count may not change".into()));
        }
        self.hmm = hmm;
        Ok(())
    }

    pub fn set_mixture(&mut self, mixture: MixtureWeights<T>) -> Result<()> {
        if mixture.weights().dim() != self.mixture.weights().dim() {
            return Err(Error::Shape("mixture shape may not change".into()));
        }
        self.mixture = mixture;
        Ok(())
    }

    pub fn set_label(&mut self, label: impl Into<String>) {
        self.label = label.into();
    }

    /// `Q(Θ)` of this model's generators under fixed posteriors:
    /// `Σ_t Σ_{s,k} γ_t(s) κ_t(s,k) log p(x_t | s, k)`.
    pub fn generator_objective(
        &self,
        frames: ArrayView2<T>,
        posteriors: &PosteriorTables<T>,
    ) -> Result<T> {
        let table = self.component_table(frames)?;
        Ok(weighted_objective(&table, posteriors))
    }

    /// Accumulates `∂Q(Θ)/∂θ_{s,k}` of one sequence into `tapes[s][k]`.
    /// Terms whose posterior weight does not exceed `min_weight` are skipped.
    pub fn accumulate_generator_gradient(
        &self,
        frames: ArrayView2<T>,
        posteriors: &PosteriorTables<T>,
        min_weight: T,
        tapes: &mut [Vec<FlowTapes<T>>],
    ) -> Result<()> {
        for (t, x) in frames.rows().into_iter().enumerate() {
            let x = x.to_vec();
            for (s, row) in self.generators.iter().enumerate() {
                let g = posteriors.gamma[[t, s]];
                for (k, gen) in row.iter().enumerate() {
                    let w = g * posteriors.kappa[[t, s, k]];
                    if !(w > min_weight) {
                        continue;
                    }
                    let (_, cache) = gen.loglik(&x).map_err(|e| at_cell(e, t, s, k))?;
                    gen.loglik_backward(&cache, w, &mut tapes[s][k])?;
                }
            }
        }
        Ok(())
    }

    /// Empty gradient tapes shaped like `generators[s][k]`.
    pub fn new_tapes(&self) -> Vec<Vec<FlowTapes<T>>> {
        self.generators
            .iter()
            .map(|row| row.iter().map(FlowTapes::for_generator).collect())
            .collect()
    }
}

fn at_cell(e: Error, t: usize, s: usize, k: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (frame {t}, state {s}, component {k})")),
        Error::Shape(msg) => Error::Shape(format!("{msg} (frame {t}, state {s}, component {k})")),
        other => other,
    }
}

fn weighted_objective<T: Real>(table: &Array3<T>, post: &PosteriorTables<T>) -> T {
    let (frames, states, comps) = table.dim();
    let mut q = T::zero();
    for t in 0..frames {
        for s in 0..states {
            let g = post.gamma[[t, s]];
            for k in 0..comps {
                let w = g * post.kappa[[t, s, k]];
                if w > T::zero() {
                    q += w * table[[t, s, k]];
                }
            }
        }
    }
    q
}

impl<T: Real> SequenceModel<T> for GenHmmModel<T> {
    fn label(&self) -> &str {
        &self.label
    }

    fn hmm(&self) -> &HmmCore<T> {
        &self.hmm
    }

    fn mixture(&self) -> &MixtureWeights<T> {
        &self.mixture
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn component_table(&self, frames: ArrayView2<T>) -> Result<Array3<T>> {
        if frames.ncols() != self.dim {
            return Err(Error::Shape(format!(
                "frames have width {}, model expects {}",
                frames.ncols(),
                self.dim
            )));
        }
        let (states, comps) = (self.hmm.n_states(), self.mixture.n_components());
        let mut table = Array3::zeros((frames.nrows(), states, comps));
        for (t, x) in frames.rows().into_iter().enumerate() {
            let x = x.to_vec();
            for (s, row) in self.generators.iter().enumerate() {
                for (k, gen) in row.iter().enumerate() {
                    table[[t, s, k]] = gen.log_prob(&x).map_err(|e| at_cell(e, t, s, k))?;
                }
            }
        }
        Ok(table)
    }

    fn sample_component(
        &self,
        state: usize,
        component: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<T>> {
        self.generators[state][component].sample(rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    /// Sequences per gradient batch (`R_b`); `0` means the whole dataset.
    pub batch_size: usize,
    /// Gradient batches per EM iteration.
    pub inner_batches: usize,
    pub max_iterations: usize,
    /// Stop once `|ΔLL| / |LL|` between consecutive iterations falls below this.
    pub tolerance: f64,
    pub seed: u64,
    /// Undo a generator step that lowers `Q(Θ)` under the frozen posteriors.
    pub guard_generator_step: bool,
    /// Posterior weights at or below this are left out of the gradient.
    pub min_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 32,
            inner_batches: 8,
            max_iterations: 50,
            tolerance: 1e-4,
            seed: 0,
            guard_generator_step: true,
            min_weight: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if !(a.learning_rate > 0.0) || !(a.epsilon > 0.0) {
            return Err(Error::Invalid("learning rate and epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::Invalid("adam betas must lie in [0, 1)".into()));
        }
        if self.inner_batches == 0 {
            return Err(Error::Invalid("need at least one gradient batch per EM iteration".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Invalid("tolerance must be positive".into()));
        }
        if !(self.min_weight >= 0.0) {
            return Err(Error::Invalid("min_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Component tables of the dataset under the current generators.
#[derive(Clone, Debug)]
struct TableCache<T> {
    fingerprint: (usize, usize),
    tables: Vec<Array3<T>>,
}

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    /// Completed EM iterations.
    pub iteration: usize,
    /// Per-frame average log-likelihood of the model entering each iteration.
    pub history: Vec<f64>,
    /// `optimizers[s][k]` mirrors the generators.
    pub optimizers: Vec<Vec<FlowOptimizer<T>>>,
    pub converged: bool,
    /// Generator steps undone by the guard.
    pub reverted_steps: usize,
    cache: Option<TableCache<T>>,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: &GenHmmModel<T>, config: TrainConfig) -> Self {
        TrainState {
            config,
            iteration: 0,
            history: Vec::new(),
            optimizers: model
                .generators
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|g| FlowOptimizer::for_generator(g, config.adam))
                        .collect()
                })
                .collect(),
            converged: false,
            reverted_steps: 0,
            cache: None,
        }
    }

    /// Rebuilds a state from checkpointed parts.
    pub fn restore(
        config: TrainConfig,
        iteration: usize,
        history: Vec<f64>,
        optimizers: Vec<Vec<FlowOptimizer<T>>>,
        reverted_steps: usize,
    ) -> Self {
        TrainState {
            config,
            iteration,
            history,
            optimizers,
            converged: false,
            reverted_steps,
            cache: None,
        }
    }

    fn has_converged(&self) -> bool {
        match self.history.as_slice() {
            [.., prev, last] => {
                let denom = last.abs().max(f64::MIN_POSITIVE);
                (last - prev).abs() / denom < self.config.tolerance
            }
            _ => false,
        }
    }
}

/// Outcome of one EM iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct EmReport {
    /// Per-frame average log-likelihood under the model that entered the step.
    pub avg_loglik: f64,
    /// Sequences excluded as degenerate.
    pub degenerate: usize,
    /// `Q(Θ)` before and after the generator step, per frame.
    pub objective_before: f64,
    pub objective_after: f64,
    pub reverted: bool,
    pub skipped_terms: usize,
}

struct EStep<T> {
    /// `None` for degenerate sequences.
    posteriors: Vec<Option<PosteriorTables<T>>>,
    total_loglik: T,
    frames: usize,
    objective: T,
}

fn fingerprint<T>(data: &[ArrayView2<T>]) -> (usize, usize) {
    (data.len(), data.iter().map(|x| x.nrows()).sum())
}

fn component_tables<T: Real>(
    model: &GenHmmModel<T>,
    data: &[ArrayView2<T>],
) -> Result<Vec<Array3<T>>> {
    data.par_iter()
        .map(|x| model.component_table(x.view()))
        .collect::<Vec<_>>()
        .into_iter()
        .enumerate()
        .map(|(r, t)| t.map_err(|e| Error::Data(format!("sequence {r}: {e}"))))
        .collect()
}

fn e_step<T: Real>(model: &GenHmmModel<T>, tables: &[Array3<T>]) -> Result<EStep<T>> {
    let results: Vec<Result<Option<PosteriorTables<T>>>> = tables
        .par_iter()
        .map(|table| {
            let ll = FrameLogLik::from_components(table.clone(), &model.mixture)?;
            match forward_backward(&model.hmm, &model.mixture, &ll) {
                Ok(p) => Ok(Some(p)),
                Err(Error::Degenerate { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut posteriors = Vec::with_capacity(tables.len());
    let (mut total, mut frames, mut objective) = (T::zero(), 0, T::zero());
    for (r, res) in results.into_iter().enumerate() {
        let post = res?;
        if let Some(p) = &post {
            total += p.loglik;
            frames += p.gamma.nrows();
            objective += weighted_objective(&tables[r], p);
        } else {
            log::warn!("sequence {r} is degenerate under the current model; excluded");
        }
        posteriors.push(post);
    }
    Ok(EStep {
        posteriors,
        total_loglik: total,
        frames,
        objective,
    })
}

/// Per-frame average log-likelihood of `data` (degenerate sequences excluded)
/// and the number of degenerate sequences.
pub fn average_loglik<T: Real, M: SequenceModel<T>>(
    model: &M,
    data: &[ArrayView2<T>],
) -> Result<(f64, usize)> {
    let scores: Vec<Result<_>> = data
        .par_iter()
        .map(|x| model.sequence_loglik(x.view()))
        .collect();
    let (mut total, mut frames, mut degenerate) = (0.0, 0usize, 0usize);
    for (score, x) in scores.into_iter().zip(data) {
        let score = score?;
        if score.degenerate {
            degenerate += 1;
        } else {
            total += score.value.as_f64();
            frames += x.nrows();
        }
    }
    if frames == 0 {
        return Err(Error::Data("no usable sequences".into()));
    }
    Ok((total / frames as f64, degenerate))
}

fn batch_rng(seed: u64, iteration: usize, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((iteration as u64) << 32) | batch as u64);
    rng
}

/// One EM iteration over `data` (each item is a `T x N` frame matrix).
pub fn em_step<T: Real>(
    model: &mut GenHmmModel<T>,
    data: &[ArrayView2<T>],
    state: &mut TrainState<T>,
) -> Result<EmReport> {
    let iteration = state.iteration;
    em_step_inner(model, data, state).map_err(|e| Error::Em {
        iteration,
        source: Box::new(e),
    })
}

fn em_step_inner<T: Real>(
    model: &mut GenHmmModel<T>,
    data: &[ArrayView2<T>],
    state: &mut TrainState<T>,
) -> Result<EmReport> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let config = state.config;
    let fp = fingerprint(data);
    let tables = match state.cache.take() {
        Some(c) if c.fingerprint == fp => c.tables,
        _ => component_tables(model, data)?,
    };
    let estep = e_step(model, &tables)?;
    if estep.frames == 0 {
        return Err(Error::Data("every sequence is degenerate under the current model".into()));
    }
    let avg_loglik = estep.total_loglik.as_f64() / estep.frames as f64;
    if !avg_loglik.is_finite() {
        return Err(Error::NonFinite("dataset log-likelihood".into()));
    }
    let usable: Vec<usize> = (0..data.len())
        .filter(|&r| estep.posteriors[r].is_some())
        .collect();

    let snapshot = config.guard_generator_step.then(|| model.generators.clone());
    let mut skipped_terms = 0;
    let min_weight = T::lit(config.min_weight);
    for n in 0..config.inner_batches {
        let batch: Vec<usize> = if config.batch_size == 0 || config.batch_size >= usable.len() {
            usable.clone()
        } else {
            let mut rng = batch_rng(config.seed, state.iteration, n);
            let mut picked: Vec<usize> = sample(&mut rng, usable.len(), config.batch_size)
                .into_iter()
                .map(|i| usable[i])
                .collect();
            picked.sort_unstable();
            picked
        };
        let batch_frames: usize = batch.iter().map(|&r| data[r].nrows()).sum();

        let partial: Vec<Result<Vec<Vec<FlowTapes<T>>>>> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut tapes = model.new_tapes();
                for &r in chunk {
                    let post = estep.posteriors[r].as_ref().expect("usable sequence");
                    model.accumulate_generator_gradient(data[r].view(), post, min_weight, &mut tapes)?;
                }
                Ok(tapes)
            })
            .collect();
        let mut tapes = model.new_tapes();
        for part in partial {
            for (row, prow) in tapes.iter_mut().zip(part?) {
                for (t, p) in row.iter_mut().zip(&prow) {
                    t.merge(p);
                }
            }
        }
        let scale = T::one() / T::from_usize(batch_frames.max(1)).unwrap();
        for (s, row) in tapes.iter_mut().enumerate() {
            for (k, tape) in row.iter_mut().enumerate() {
                skipped_terms += tape.skipped;
                if tape.count() == 0 {
                    continue;
                }
                tape.scale(scale);
                state.optimizers[s][k].step(&mut model.generators[s][k], tape)?;
            }
        }
    }

    let objective_before = estep.objective.as_f64() / estep.frames as f64;
    let mut objective_after = f64::NAN;
    let mut reverted = false;
    if let Some(old) = snapshot {
        let new_tables = component_tables(model, data);
        let new_objective = new_tables.as_ref().ok().map(|tabs| {
            usable
                .iter()
                .map(|&r| weighted_objective(&tabs[r], estep.posteriors[r].as_ref().unwrap()))
                .fold(T::zero(), |a, b| a + b)
        });
        match (new_tables, new_objective) {
            (Ok(tabs), Some(q)) if q.is_finite() && q >= estep.objective => {
                objective_after = q.as_f64() / estep.frames as f64;
                state.cache = Some(TableCache {
                    fingerprint: fp,
                    tables: tabs,
                });
            }
            _ => {
                model.generators = old;
                reverted = true;
                state.reverted_steps += 1;
                objective_after = objective_before;
                state.cache = Some(TableCache {
                    fingerprint: fp,
                    tables,
                });
            }
        }
    }

    let posts: Vec<&PosteriorTables<T>> = estep.posteriors.iter().flatten().collect();
    let mut hmm = model.hmm.clone();
    if let Some(q) = update_initial(&posts) {
        hmm.set_initial(q)?;
    }
    if let Some(a) = update_transition(&posts, hmm.transition()) {
        hmm.set_transition(a)?;
    }
    model.hmm = hmm;
    if let Some(pi) = update_mixture(&posts, model.mixture.weights()) {
        model.mixture = MixtureWeights::new(pi)?;
    }

    state.history.push(avg_loglik);
    state.iteration += 1;
    Ok(EmReport {
        avg_loglik,
        degenerate: data.len() - usable.len(),
        objective_before,
        objective_after,
        reverted,
        skipped_terms,
    })
}

/// Runs [`em_step`] until convergence or `max_iterations`, starting from
/// `state` (fresh or restored), calling `on_iteration` after every step.
pub fn train_from<T: Real, F>(
    model: &mut GenHmmModel<T>,
    data: &[ArrayView2<T>],
    state: &mut TrainState<T>,
    mut on_iteration: F,
) -> Result<()>
where
    F: FnMut(&GenHmmModel<T>, &TrainState<T>, &EmReport) -> Result<()>,
{
    state.config.validate()?;
    while state.iteration < state.config.max_iterations && !state.converged {
        let report = em_step(model, data, state)?;
        log::info!(
            "[{}] EM iteration {}: avg loglik {:.6} nats/frame{}",
            model.label,
            state.iteration,
            report.avg_loglik,
            if report.reverted { " (generator step reverted)" } else { "" }
        );
        state.converged = state.has_converged();
        on_iteration(model, state, &report)?;
    }
    Ok(())
}

/// Trains a fresh state on `data`.
pub fn train<T: Real>(
    model: &mut GenHmmModel<T>,
    data: &[ArrayView2<T>],
    config: TrainConfig,
) -> Result<TrainState<T>> {
    config.validate()?;
    let mut state = TrainState::new(model, config);
    train_from(model, data, &mut state, |_, _, _| Ok(()))?;
    Ok(state)
}

/// Frames of a set of sequences as views.
pub fn views<T>(seqs: &[Array2<T>]) -> Vec<ArrayView2<'_, T>> {
    seqs.iter().map(|s| s.view()).collect()
}
