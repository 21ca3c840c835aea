use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_vocab, ModelBackend};
use crate::error::{LopaError, Result};
use crate::types::{PositionSet, Prediction, SequenceState, TokenId};

const ROW_TOL: f64 = 1e-12;

/// Discrete hidden Markov model used as an exactly solvable masked predictor.
///
/// Filled positions contribute their emission likelihood; masked positions
/// contribute likelihood one, so the marginal at a masked position is the
/// exact conditional given every filled token on both sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmmModel {
    initial: Vec<f64>,
    transition: Vec<Vec<f64>>,
    emission: Vec<Vec<f64>>,
}

impl HmmModel {
    pub fn new(initial: Vec<f64>, transition: Vec<Vec<f64>>, emission: Vec<Vec<f64>>) -> Result<Self> {
        let n = initial.len();
        if n == 0 {
            return Err(LopaError::InvalidModel("no hidden states".into()));
        }
        let v = emission.first().map_or(0, Vec::len);
        if v == 0 {
            return Err(LopaError::InvalidModel("empty vocabulary".into()));
        }
        if transition.len() != n || transition.iter().any(|r| r.len() != n) {
            return Err(LopaError::InvalidModel(format!("transition must be {n}x{n}")));
        }
        if emission.len() != n || emission.iter().any(|r| r.len() != v) {
            return Err(LopaError::InvalidModel(format!("emission must be {n}x{v}")));
        }
        check_row("initial", &initial)?;
        for (i, row) in transition.iter().enumerate() {
            check_row(&format!("transition row {i}"), row)?;
        }
        for (i, row) in emission.iter().enumerate() {
            check_row(&format!("emission row {i}"), row)?;
        }
        Ok(Self {
            initial,
            transition,
            emission,
        })
    }

    /// Parses and validates a model from its JSON form.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: HmmModel =
            serde_json::from_str(text).map_err(|e| LopaError::InvalidModel(e.to_string()))?;
        HmmModel::new(raw.initial, raw.transition, raw.emission)
    }

    pub fn n_hidden(&self) -> usize {
        self.initial.len()
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    pub fn emission(&self) -> &[Vec<f64>] {
        &self.emission
    }

    fn likelihood(&self, hidden: usize, token: Option<TokenId>) -> f64 {
        token.map_or(1.0, |t| self.emission[hidden][t as usize])
    }

    /// Exact per-position token marginals for the masked positions in `window`.
    #[allow(clippy::needless_range_loop)]
    pub fn posteriors(&self, state: &SequenceState, window: &PositionSet) -> Result<Prediction> {
        check_vocab(self.vocab_size(), state)?;
        if state.is_empty() {
            return Err(LopaError::EmptySequence);
        }
        let targets: Vec<usize> = window
            .iter()
            .copied()
            .filter(|&i| state.is_masked(i))
            .collect();
        if targets.is_empty() {
            return Ok(Prediction::new());
        }

        let n = self.n_hidden();
        let len = state.len();
        let tokens = state.tokens();

        // Scaled forward pass: each alpha row is renormalized to sum to one.
        let mut alpha = vec![vec![0.0; n]; len];
        for s in 0..n {
            alpha[0][s] = self.initial[s] * self.likelihood(s, tokens[0]);
        }
        normalize_row(&mut alpha[0])?;
        for t in 1..len {
            let (prev, cur) = alpha.split_at_mut(t);
            let prev = &prev[t - 1];
            let cur = &mut cur[0];
            for s in 0..n {
                let mut acc = 0.0;
                for r in 0..n {
                    acc += prev[r] * self.transition[r][s];
                }
                cur[s] = acc * self.likelihood(s, tokens[t]);
            }
            normalize_row(cur)?;
        }

        let mut beta = vec![vec![1.0; n]; len];
        for t in (0..len - 1).rev() {
            let mut next = vec![0.0; n];
            for s in 0..n {
                next[s] = self.likelihood(s, tokens[t + 1]) * beta[t + 1][s];
            }
            for r in 0..n {
                let mut acc = 0.0;
                for s in 0..n {
                    acc += self.transition[r][s] * next[s];
                }
                beta[t][r] = acc;
            }
            normalize_row(&mut beta[t])?;
        }

        let vocab = self.vocab_size();
        let mut out = Prediction::new();
        for i in targets {
            let mut gamma: Vec<f64> = (0..n).map(|s| alpha[i][s] * beta[i][s]).collect();
            normalize_row(&mut gamma)?;
            let mut dist = vec![0.0; vocab];
            for (s, g) in gamma.iter().enumerate() {
                for (v, e) in self.emission[s].iter().enumerate() {
                    dist[v] += g * e;
                }
            }
            normalize_row(&mut dist)?;
            out.insert(i, dist);
        }
        Ok(out)
    }

    /// Draws a token sequence from the generative model.
    pub fn sample_tokens(&self, len: usize, seed: u64) -> Vec<TokenId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let mut hidden = draw(&mut rng, &self.initial);
        for t in 0..len {
            if t > 0 {
                hidden = draw(&mut rng, &self.transition[hidden]);
            }
            out.push(draw(&mut rng, &self.emission[hidden]) as TokenId);
        }
        out
    }
}

impl ModelBackend for HmmModel {
    fn vocab_size(&self) -> usize {
        self.emission[0].len()
    }

    fn predict(&self, state: &SequenceState, window: &PositionSet) -> Result<Prediction> {
        self.posteriors(state, window)
    }
}

fn check_row(name: &str, row: &[f64]) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(LopaError::InvalidModel(format!("{name} has a negative or non-finite entry")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(LopaError::InvalidModel(format!("{name} sums to {sum}")));
    }
    Ok(())
}

fn normalize_row(row: &mut [f64]) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if !sum.is_finite() || sum <= 0.0 {
        return Err(LopaError::ImpossibleEvidence);
    }
    row.iter_mut().for_each(|x| *x /= sum);
    Ok(())
}

fn draw(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Controls how peaked the rows of a random model are.
///
/// Each row entry is `(-ln u)^exponent` for uniform `u`, then normalized.
/// An exponent of 1 gives a flat Dirichlet draw; larger exponents concentrate
/// mass on fewer entries. `self_loop` adds extra mass to the transition diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmmShape {
    pub transition_exponent: f64,
    pub emission_exponent: f64,
    pub self_loop: f64,
}

impl HmmShape {
    /// Sticky transitions and near-deterministic emissions: filled tokens carry
    /// strong evidence about their neighbours.
    pub fn sticky() -> Self {
        Self {
            transition_exponent: 3.0,
            emission_exponent: 8.0,
            self_loop: 0.9,
        }
    }
}

impl Default for HmmShape {
    fn default() -> Self {
        Self {
            transition_exponent: 1.0,
            emission_exponent: 1.0,
            self_loop: 0.0,
        }
    }
}

pub fn random_hmm(n_hidden: usize, vocab_size: usize, seed: u64) -> Result<HmmModel> {
    random_hmm_with(n_hidden, vocab_size, seed, HmmShape::default())
}

pub fn random_hmm_with(n_hidden: usize, vocab_size: usize, seed: u64, shape: HmmShape) -> Result<HmmModel> {
    if n_hidden == 0 || vocab_size == 0 {
        return Err(LopaError::InvalidModel("dimensions must be >= 1".into()));
    }
    if !(shape.self_loop >= 0.0 && shape.self_loop < 1.0) {
        return Err(LopaError::InvalidModel("self_loop must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = random_row(&mut rng, n_hidden, 1.0);
    let transition = (0..n_hidden)
        .map(|i| {
            let mut row = random_row(&mut rng, n_hidden, shape.transition_exponent);
            if shape.self_loop > 0.0 {
                row.iter_mut().for_each(|x| *x *= 1.0 - shape.self_loop);
                row[i] += shape.self_loop;
                renormalize(&mut row);
            }
            row
        })
        .collect();
    let emission = (0..n_hidden)
        .map(|_| random_row(&mut rng, vocab_size, shape.emission_exponent))
        .collect();
    HmmModel::new(initial, transition, emission)
}

fn random_row(rng: &mut ChaCha8Rng, len: usize, exponent: f64) -> Vec<f64> {
    let mut row: Vec<f64> = (0..len)
        .map(|_| {
            // gen::<f64>() is in [0, 1); shift to (0, 1].
            let u = 1.0 - rng.gen::<f64>();
            (-u.ln()).powf(exponent).max(f64::MIN_POSITIVE)
        })
        .collect();
    renormalize(&mut row);
    row
}

// Two passes bring the sum within a few ulps of one.
fn renormalize(row: &mut [f64]) {
    for _ in 0..2 {
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= sum);
    }
}
