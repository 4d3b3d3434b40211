//! Behaviour shared by every HMM with mixture emissions, plus the generative
//! classification rule.

use ndarray::{Array2, Array3, ArrayView2};
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::hmm::{forward_backward, FrameLogLik, HmmCore, MixtureWeights};
use crate::scalar::Real;

/// `log p(x̄)` of one sequence. Degenerate sequences (some frame impossible
/// under every state path) carry `-inf` and the flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceLogLik<T> {
    pub value: T,
    pub degenerate: bool,
}

pub trait SequenceModel<T: Real>: Sync {
    fn label(&self) -> &str;
    fn hmm(&self) -> &HmmCore<T>;
    fn mixture(&self) -> &MixtureWeights<T>;
    fn dim(&self) -> usize;

    /// `log p(x_t | s, k)` for every frame, state and component.
    fn component_table(&self, frames: ArrayView2<T>) -> Result<Array3<T>>;

    /// Draws one frame from component `k` of state `s`.
    fn sample_component(&self, state: usize, component: usize, rng: &mut dyn RngCore)
        -> Result<Vec<T>>;

    fn n_states(&self) -> usize {
        self.hmm().n_states()
    }

    fn n_components(&self) -> usize {
        self.mixture().n_components()
    }

    fn frame_loglik_table(&self, frames: ArrayView2<T>) -> Result<FrameLogLik<T>> {
        FrameLogLik::from_components(self.component_table(frames)?, self.mixture())
    }

    fn sequence_loglik(&self, frames: ArrayView2<T>) -> Result<SequenceLogLik<T>> {
        let table = self.frame_loglik_table(frames)?;
        match forward_backward(self.hmm(), self.mixture(), &table) {
            Ok(post) => Ok(SequenceLogLik {
                value: post.loglik,
                degenerate: false,
            }),
            Err(Error::Degenerate { .. }) => Ok(SequenceLogLik {
                value: T::neg_infinity(),
                degenerate: true,
            }),
            Err(e) => Err(e),
        }
    }

    /// Samples a state path from `q`/`A` and one frame per step.
    fn sample_sequence(
        &self,
        length: usize,
        rng: &mut dyn RngCore,
    ) -> Result<(Vec<usize>, Array2<T>)> {
        let hmm = self.hmm();
        let pi = self.mixture().weights();
        let mut states = Vec::with_capacity(length);
        let mut frames = Array2::zeros((length, self.dim()));
        let mut state = draw_categorical(hmm.initial().iter().copied(), rng);
        for t in 0..length {
            if t > 0 {
                state = draw_categorical(hmm.transition().row(state).iter().copied(), rng);
            }
            let k = draw_categorical(pi.row(state).iter().copied(), rng);
            let x = self.sample_component(state, k, rng)?;
            frames.row_mut(t).assign(&ndarray::ArrayView1::from(&x));
            states.push(state);
        }
        Ok((states, frames))
    }
}

fn draw_categorical<T: Real>(probs: impl Iterator<Item = T> + Clone, rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.enumerate() {
        let p = p.as_f64();
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Result of the generative decision rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Classification {
    Class(usize),
    /// Every model assigned zero likelihood.
    Unclassifiable,
}

/// Scores of `frames` under each model and the argmax (ties go to the lowest
/// index). With `per_frame` the scores are divided by the sequence length.
pub fn classify<T: Real, M: SequenceModel<T>>(
    models: &[M],
    frames: ArrayView2<T>,
    per_frame: bool,
) -> Result<(Classification, Vec<T>)> {
    if models.is_empty() {
        return Err(Error::Invalid("classification needs at least one model".into()));
    }
    let dim = models[0].dim();
    if models.iter().any(|m| m.dim() != dim) {
        return Err(Error::Shape("models disagree on frame dimension".into()));
    }
    let len = T::from_usize(frames.nrows().max(1)).unwrap();
    let mut scores = Vec::with_capacity(models.len());
    for m in models {
        let v = m.sequence_loglik(frames)?.value;
        scores.push(if per_frame { v / len } else { v });
    }
    let mut best: Option<usize> = None;
    for (i, &v) in scores.iter().enumerate() {
        if v == T::neg_infinity() {
            continue;
        }
        match best {
            Some(b) if !(v > scores[b]) => {}
            _ => best = Some(i),
        }
    }
    Ok((
        best.map_or(Classification::Unclassifiable, Classification::Class),
        scores,
    ))
}

/// Number of HMM states for a class: mean length over `frames_per_state`,
/// rounded and clipped into `{3, 4, 5}`.
pub fn state_count_for_mean_length(mean_length: f64, frames_per_state: f64) -> usize {
    let raw = (mean_length / frames_per_state).round();
    if raw.is_nan() {
        return 3;
    }
    raw.clamp(3.0, 5.0) as usize
}
