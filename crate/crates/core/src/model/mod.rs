//! Model backends: anything that maps a partially filled sequence to exact
//! per-position categorical distributions over the vocabulary.

mod hmm;
mod scripted;

use std::sync::atomic::{AtomicU64, Ordering};

pub use hmm::{random_hmm, random_hmm_with, HmmModel, HmmShape};
pub use scripted::{PatternSym, Rule, ScriptedModel};

use crate::error::{LopaError, Result};
use crate::types::{PositionSet, Prediction, SequenceState, DIST_TOL};

/// A masked-token predictor.
///
/// `predict` returns one distribution for every masked position inside
/// `window`, and nothing else. Implementations must be pure.
pub trait ModelBackend: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn predict(&self, state: &SequenceState, window: &PositionSet) -> Result<Prediction>;

    /// One packed forward pass over several sequences. Results are in input order.
    fn predict_batch(&self, states: &[SequenceState], window: &PositionSet) -> Result<Vec<Prediction>> {
        states.iter().map(|s| self.predict(s, window)).collect()
    }
}

impl<M: ModelBackend + ?Sized> ModelBackend for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn predict(&self, state: &SequenceState, window: &PositionSet) -> Result<Prediction> {
        (**self).predict(state, window)
    }
    fn predict_batch(&self, states: &[SequenceState], window: &PositionSet) -> Result<Vec<Prediction>> {
        (**self).predict_batch(states, window)
    }
}

impl<M: ModelBackend + ?Sized> ModelBackend for Box<M> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn predict(&self, state: &SequenceState, window: &PositionSet) -> Result<Prediction> {
        (**self).predict(state, window)
    }
    fn predict_batch(&self, states: &[SequenceState], window: &PositionSet) -> Result<Vec<Prediction>> {
        (**self).predict_batch(states, window)
    }
}

pub(crate) fn check_vocab(model_vocab: usize, state: &SequenceState) -> Result<()> {
    if model_vocab != state.vocab_size() {
        return Err(LopaError::VocabMismatch {
            model: model_vocab,
            state: state.vocab_size(),
        });
    }
    Ok(())
}

/// Checks that `dist` is a finite, non-negative vector summing to one.
pub fn check_distribution(dist: &[f64]) -> Result<()> {
    if dist.is_empty() {
        return Err(LopaError::InvalidDistribution("empty".into()));
    }
    if dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(LopaError::InvalidDistribution(
            "entries must be finite and non-negative".into(),
        ));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > DIST_TOL {
        return Err(LopaError::InvalidDistribution(format!("sums to {sum}")));
    }
    Ok(())
}

/// Counts calls made through it. Each `predict` or `predict_batch` is one forward.
pub struct CountingBackend<M> {
    inner: M,
    calls: AtomicU64,
    sequences: AtomicU64,
}

impl<M: ModelBackend> CountingBackend<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
            sequences: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn sequences(&self) -> u64 {
        self.sequences.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<M: ModelBackend> ModelBackend for CountingBackend<M> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn predict(&self, state: &SequenceState, window: &PositionSet) -> Result<Prediction> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.sequences.fetch_add(1, Ordering::SeqCst);
        self.inner.predict(state, window)
    }

    fn predict_batch(&self, states: &[SequenceState], window: &PositionSet) -> Result<Vec<Prediction>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.sequences.fetch_add(states.len() as u64, Ordering::SeqCst);
        self.inner.predict_batch(states, window)
    }
}

/// Every position of the sequence, as a window.
pub fn full_window(state: &SequenceState) -> PositionSet {
    (0..state.len()).collect()
}
