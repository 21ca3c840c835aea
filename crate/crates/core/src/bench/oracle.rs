//! Brute-force re-derivations used to cross-check the decoders.
//!
//! Nothing here calls into `decode`; branch construction, thresholding and
//! scoring are written out again from the definitions.

use std::collections::{BTreeMap, HashMap};

use crate::error::{LopaError, Result};
use crate::model::ModelBackend;
use crate::types::{ConfMetric, DecodeConfig, Distribution, SequenceState, TokenId};

pub const MAX_ORACLE_UNFILLED: usize = 12;
pub const MAX_ORACLE_BUDGET: usize = 8;
pub const MAX_TFO_GEN: usize = 10;
pub const MAX_TFO_VOCAB: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct BranchOracle {
    pub scores: Vec<f64>,
    pub best: usize,
    /// Filled positions of each rebuilt branch, for diagnostics.
    pub branch_fills: Vec<BTreeMap<usize, TokenId>>,
}

fn top1(d: &Distribution) -> (TokenId, f64) {
    let mut best = (0, d[0]);
    for (t, &p) in d.iter().enumerate().skip(1) {
        if p > best.1 {
            best = (t as TokenId, p);
        }
    }
    best
}

fn scope_masked(state: &SequenceState, config: &DecodeConfig) -> Vec<usize> {
    let start = state.prompt_len();
    let end = start + state.gen_len().min(config.max_new_tokens);
    (start..end).filter(|&i| state.is_masked(i)).collect()
}

/// Threshold rule written out: everything strictly above `tau`, else the first argmax.
fn threshold_fills(masked: &[usize], dists: &BTreeMap<usize, Distribution>, tau: f64) -> BTreeMap<usize, TokenId> {
    let mut fills: BTreeMap<usize, TokenId> = masked
        .iter()
        .filter_map(|&i| {
            let (tok, c) = top1(&dists[&i]);
            (c > tau).then_some((i, tok))
        })
        .collect();
    if fills.is_empty() {
        let mut best = masked[0];
        for &i in &masked[1..] {
            if top1(&dists[&i]).1 > top1(&dists[&best]).1 {
                best = i;
            }
        }
        fills.insert(best, top1(&dists[&best]).0);
    }
    fills
}

fn branch_score(confs: &[f64], metric: ConfMetric) -> f64 {
    if confs.is_empty() {
        return 1.0;
    }
    let mean = |xs: &[f64]| {
        let mut s = 0.0;
        for x in xs {
            s += x;
        }
        s / xs.len() as f64
    };
    match metric {
        ConfMetric::Mean => mean(confs),
        ConfMetric::SlidingWindow { w } => {
            let w = w.max(1).min(confs.len());
            let mut best = f64::INFINITY;
            for start in 0..=confs.len() - w {
                best = best.min(mean(&confs[start..start + w]));
            }
            best
        }
        ConfMetric::BottomFraction { eta } => {
            let mut sorted = confs.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let m = ((eta * confs.len() as f64).ceil() as usize).max(1).min(confs.len());
            mean(&sorted[..m])
        }
    }
}

/// Rebuilds the anchor and `k` lookahead branches for `state` and scores each
/// with its own unbatched predict call.
pub fn brute_force_branch_oracle<M: ModelBackend + ?Sized>(
    backend: &M,
    state: &SequenceState,
    config: &DecodeConfig,
) -> Result<BranchOracle> {
    let masked = scope_masked(state, config);
    if masked.is_empty() {
        return Err(LopaError::NothingMasked);
    }
    if masked.len() > MAX_ORACLE_UNFILLED || config.branch_budget > MAX_ORACLE_BUDGET {
        return Err(LopaError::TooLarge(format!(
            "oracle handles at most {MAX_ORACLE_UNFILLED} masked positions and k <= {MAX_ORACLE_BUDGET}, got {} and {}",
            masked.len(),
            config.branch_budget
        )));
    }
    let scope = masked.iter().copied().collect();
    let dists = backend.predict(state, &scope)?;
    let anchor = threshold_fills(&masked, &dists, config.tau);

    let mut rest: Vec<usize> = masked.iter().copied().filter(|i| !anchor.contains_key(i)).collect();
    // stable sort keeps ascending position among equal confidences
    rest.sort_by(|a, b| top1(&dists[b]).1.partial_cmp(&top1(&dists[a]).1).unwrap());

    let mut branch_fills = vec![anchor.clone()];
    for &p in rest.iter().take(config.branch_budget) {
        let mut f = anchor.clone();
        f.insert(p, top1(&dists[&p]).0);
        branch_fills.push(f);
    }

    let mut scores = Vec::with_capacity(branch_fills.len());
    for fills in &branch_fills {
        let next = state.apply_fills(fills)?;
        let unfilled: Vec<usize> = masked.iter().copied().filter(|i| !fills.contains_key(i)).collect();
        let pred = backend.predict(&next, &unfilled.iter().copied().collect())?;
        let confs: Vec<f64> = unfilled.iter().map(|i| top1(&pred[i]).1).collect();
        scores.push(branch_score(&confs, config.conf_metric));
    }
    let mut best = 0;
    for (j, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = j;
        }
    }
    Ok(BranchOracle {
        scores,
        best,
        branch_fills,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfoBound {
    pub tokens: u64,
    pub min_forwards: u64,
    pub best_tpf: f64,
    /// Distinct states whose distributions were evaluated.
    pub explored: usize,
}

struct Explorer<'a, M: ?Sized> {
    backend: &'a M,
    tau: f64,
    scope: Vec<usize>,
    cap: usize,
    preds: HashMap<Vec<Option<TokenId>>, BTreeMap<usize, Distribution>>,
    memo: HashMap<(Vec<Option<TokenId>>, usize), u64>,
}

impl<M: ModelBackend + ?Sized> Explorer<'_, M> {
    fn forwards_to_finish(&mut self, state: &SequenceState, horizon: usize) -> Result<u64> {
        let masked: Vec<usize> = self.scope.iter().copied().filter(|&i| state.is_masked(i)).collect();
        if masked.is_empty() {
            return Ok(0);
        }
        let key = (state.tokens().to_vec(), horizon);
        if let Some(&v) = self.memo.get(&key) {
            return Ok(v);
        }
        if !self.preds.contains_key(state.tokens()) {
            if self.preds.len() >= self.cap {
                return Err(LopaError::TooLarge(format!("explored more than {} states", self.cap)));
            }
            let p = self.backend.predict(state, &masked.iter().copied().collect())?;
            self.preds.insert(state.tokens().to_vec(), p);
        }
        let dists = self.preds[state.tokens()].clone();
        let base = threshold_fills(&masked, &dists, self.tau);

        let mut options = vec![base.clone()];
        if horizon > 0 {
            for &p in masked.iter().filter(|i| !base.contains_key(i)) {
                let mut f = base.clone();
                f.insert(p, top1(&dists[&p]).0);
                options.push(f);
            }
        }
        let mut best = u64::MAX;
        for fills in options {
            let next = state.apply_fills(&fills)?;
            best = best.min(1 + self.forwards_to_finish(&next, horizon.saturating_sub(1))?);
        }
        self.memo.insert(key, best);
        Ok(best)
    }
}

/// Fewest forward passes needed to finish generation when, for the first
/// `horizon` steps, any single extra position may be filled alongside the
/// threshold set; threshold decoding only afterwards.
///
/// Every LoPA trajectory with at most `horizon` iterations lies inside this
/// search space, so with `horizon >= gen_len` the returned TPF bounds LoPA's.
pub fn brute_force_tfo_explorer<M: ModelBackend + ?Sized>(
    backend: &M,
    state: &SequenceState,
    tau: f64,
    horizon: usize,
    cap: usize,
) -> Result<TfoBound> {
    if state.gen_len() > MAX_TFO_GEN || state.vocab_size() > MAX_TFO_VOCAB {
        return Err(LopaError::TooLarge(format!(
            "explorer handles gen_len <= {MAX_TFO_GEN} and vocab <= {MAX_TFO_VOCAB}"
        )));
    }
    let scope: Vec<usize> = (state.prompt_len()..state.len()).collect();
    let tokens = scope.iter().filter(|&&i| state.is_masked(i)).count() as u64;
    if tokens == 0 {
        return Err(LopaError::NothingMasked);
    }
    let mut ex = Explorer {
        backend,
        tau,
        scope,
        cap,
        preds: HashMap::new(),
        memo: HashMap::new(),
    };
    let min_forwards = ex.forwards_to_finish(state, horizon)?;
    Ok(TfoBound {
        tokens,
        min_forwards,
        best_tpf: tokens as f64 / min_forwards as f64,
        explored: ex.preds.len(),
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LopaAudit {
    pub verifications: usize,
    pub winner_mismatches: usize,
    /// Largest gap between carried and freshly predicted distributions.
    pub carried_max_err: f64,
    /// Largest gap between the packed-pass scores and the oracle's.
    pub score_max_err: f64,
    pub tokens: u64,
    pub forwards: u64,
}

impl LopaAudit {
    pub fn passed(&self, tol: f64) -> bool {
        self.winner_mismatches == 0 && self.carried_max_err <= tol
    }
}

/// Re-runs LoPA one iteration at a time through the public decode steps and
/// checks every verification against [`brute_force_branch_oracle`] and every
/// carried prediction against a fresh predict on the adopted state.
pub fn audit_lopa_run<M: ModelBackend + ?Sized>(
    backend: &M,
    state: &SequenceState,
    config: &DecodeConfig,
) -> Result<LopaAudit> {
    use crate::decode::{anchor_step, spawn_lookahead, verify_branches};

    let scope: crate::types::PositionSet = config.scope(state).collect();
    let mut audit = LopaAudit::default();
    let mut cur = state.clone();
    let mut dists = backend.predict(&cur, &scope)?;
    audit.forwards = 1;
    while cur.masked_iter().any(|i| scope.contains(&i)) {
        let anchor = anchor_step(&cur, &dists, config)?;
        let lookahead = spawn_lookahead(&anchor.branch, &dists, &anchor.conf, config.branch_budget)?;
        let done = lookahead.is_empty() && !anchor.branch.state().masked_iter().any(|i| scope.contains(&i));
        if done {
            audit.tokens += anchor.branch.filled.len() as u64;
            break;
        }
        let mut branches = vec![anchor.branch];
        branches.extend(lookahead);
        let v = verify_branches(backend, branches, &scope, config.conf_metric)?;
        audit.forwards += 1;
        audit.verifications += 1;

        let oracle = brute_force_branch_oracle(backend, &cur, config)?;
        if oracle.best != v.winner || oracle.branch_fills[oracle.best] != v.winner().filled {
            audit.winner_mismatches += 1;
        }
        for (b, s) in v.branches.iter().zip(&oracle.scores) {
            let got = b.score.unwrap_or(f64::NAN);
            audit.score_max_err = audit.score_max_err.max((got - s).abs());
        }

        let winner_state = v.winner().state().clone();
        let fresh = backend.predict(&winner_state, &scope)?;
        if fresh.len() != v.carried.len() || fresh.keys().ne(v.carried.keys()) {
            audit.carried_max_err = f64::INFINITY;
        }
        for (i, d) in &fresh {
            if let Some(c) = v.carried.get(i) {
                for (a, b) in d.iter().zip(c) {
                    audit.carried_max_err = audit.carried_max_err.max((a - b).abs());
                }
            }
        }
        audit.tokens += v.winner().filled.len() as u64;
        cur = winner_state;
        dists = v.carried;
    }
    Ok(audit)
}
