//! Lookahead parallel decoding and the plain threshold decoder it extends.
//!
//! One LoPA iteration:
//! 1. build the anchor branch by threshold-filling from the current distributions,
//! 2. spawn up to `k` lookahead branches, each the anchor plus one more of its
//!    most confident unfilled positions,
//! 3. score every branch from a single packed forward pass and adopt the best.
//!
//! The winner's distributions from step 3 feed the next iteration's anchor, so
//! each iteration costs exactly one forward pass.

use std::collections::BTreeMap;
use std::ops::Range;

use super::select::{
    confidence_map, greedy_token, score_confidences, select_fill_set_with, conf_from_dist,
    FillDecision,
};
use super::trace::{BranchRecord, DecodeOutput, DecodeTrace, ForwardKind, IterationRecord};
use crate::blockpipe::BlockState;
use crate::error::{LopaError, Result};
use crate::model::{check_vocab, ModelBackend};
use crate::types::{
    Branch, BranchKind, ConfMetric, ConfidenceMap, DecodeConfig, DecodeMetrics, PositionSet,
    Prediction, SequenceState,
};

/// Decides where fills may happen and with which threshold.
pub trait WindowPolicy {
    /// Masked positions open for filling in `state`.
    fn window(&self, state: &SequenceState) -> PositionSet;
    fn threshold(&self, position: usize) -> f64;
    /// Called once before decoding and after every adopted iteration.
    fn advance(&mut self, state: &SequenceState) -> Result<()>;
    fn blocks(&self) -> Option<Vec<BlockState>> {
        None
    }
    fn block_size(&self) -> Option<usize> {
        None
    }
}

/// The whole generation scope is one window with a single threshold.
#[derive(Debug, Clone)]
pub struct FullWindow {
    scope: Range<usize>,
    tau: f64,
}

impl FullWindow {
    pub fn new(state: &SequenceState, config: &DecodeConfig) -> Self {
        Self {
            scope: config.scope(state),
            tau: config.tau,
        }
    }
}

impl WindowPolicy for FullWindow {
    fn window(&self, state: &SequenceState) -> PositionSet {
        self.scope.clone().filter(|&i| state.is_masked(i)).collect()
    }
    fn threshold(&self, _position: usize) -> f64 {
        self.tau
    }
    fn advance(&mut self, _state: &SequenceState) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub branch: Branch,
    /// Confidence of every masked window position before filling.
    pub conf: ConfidenceMap,
    pub decision: FillDecision,
}

/// Anchor construction over the whole decoding scope with `config.tau`.
pub fn anchor_step(state: &SequenceState, dists: &Prediction, config: &DecodeConfig) -> Result<Anchor> {
    let window = FullWindow::new(state, config).window(state);
    anchor_step_in(state, dists, &window, |_| config.tau)
}

/// Anchor construction restricted to `window`, with a per-position threshold.
pub fn anchor_step_in(
    state: &SequenceState,
    dists: &Prediction,
    window: &PositionSet,
    tau: impl Fn(usize) -> f64,
) -> Result<Anchor> {
    let mut window_dists = Prediction::new();
    for &i in window {
        if !state.is_masked(i) {
            continue;
        }
        let d = dists
            .get(&i)
            .ok_or_else(|| LopaError::Invariant(format!("no distribution for masked position {i}")))?;
        window_dists.insert(i, d.clone());
    }
    if window_dists.is_empty() {
        return Err(LopaError::NothingMasked);
    }
    let conf = confidence_map(&window_dists)?;
    let decision = select_fill_set_with(&conf, tau)?;
    let filled: BTreeMap<_, _> = decision
        .i_fill
        .iter()
        .map(|&i| (i, greedy_token(&window_dists[&i])))
        .collect();
    let unfilled = conf
        .keys()
        .copied()
        .filter(|i| !decision.i_fill.contains(i))
        .collect();
    let branch = Branch::new(state.clone(), filled, unfilled, BranchKind::Anchor)?;
    Ok(Anchor {
        branch,
        conf,
        decision,
    })
}

/// The `k` most confident unfilled positions of the anchor, each filled greedily
/// on top of it. Ordered by descending confidence, then ascending position.
pub fn spawn_lookahead(b0: &Branch, dists: &Prediction, conf: &ConfidenceMap, k: usize) -> Result<Vec<Branch>> {
    let mut candidates: Vec<(usize, f64)> = conf
        .iter()
        .filter(|(i, _)| b0.unfilled.contains(i))
        .map(|(&i, &c)| (i, c))
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    candidates
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(j, (pos, _))| {
            let dist = dists
                .get(&pos)
                .ok_or_else(|| LopaError::Invariant(format!("no distribution for position {pos}")))?;
            b0.extend(pos, greedy_token(dist), BranchKind::Lookahead(j + 1))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    /// Input branches with `dists` and `score` populated.
    pub branches: Vec<Branch>,
    pub winner: usize,
    /// Full forward output for the winner, reused by the next anchor step.
    pub carried: Prediction,
}

impl Verification {
    pub fn winner(&self) -> &Branch {
        &self.branches[self.winner]
    }
}

/// Scores all branches from one packed forward pass and picks the best.
///
/// `window` is what the forward pass predicts; each branch is scored over its
/// own `unfilled` set. Ties keep the earlier branch, so the anchor wins them.
pub fn verify_branches<M: ModelBackend + ?Sized>(
    backend: &M,
    branches: Vec<Branch>,
    window: &PositionSet,
    metric: ConfMetric,
) -> Result<Verification> {
    if branches.is_empty() {
        return Err(LopaError::Invariant("no branches to verify".into()));
    }
    if branches[0].kind != BranchKind::Anchor {
        return Err(LopaError::Invariant("first branch must be the anchor".into()));
    }
    metric.validate()?;
    for b in &branches {
        check_vocab(backend.vocab_size(), b.state())?;
    }
    let states: Vec<SequenceState> = branches.iter().map(|b| b.state().clone()).collect();
    let mut outputs = backend.predict_batch(&states, window)?;
    if outputs.len() != branches.len() {
        return Err(LopaError::Invariant("backend returned wrong batch size".into()));
    }

    let mut scored = Vec::with_capacity(branches.len());
    let mut winner = 0;
    let mut best = f64::NEG_INFINITY;
    for (j, (mut branch, out)) in branches.into_iter().zip(outputs.iter()).enumerate() {
        let mut dists = Prediction::new();
        for &i in &branch.unfilled {
            let d = out
                .get(&i)
                .ok_or_else(|| LopaError::Invariant(format!("verification missed position {i}")))?;
            dists.insert(i, d.clone());
        }
        let confs: Vec<f64> = dists.values().map(|d| conf_from_dist(d)).collect::<Result<_>>()?;
        let score = score_confidences(&confs, metric);
        if score > best {
            best = score;
            winner = j;
        }
        branch.dists = Some(dists);
        branch.score = Some(score);
        scored.push(branch);
    }
    let carried = outputs.swap_remove(winner);
    Ok(Verification {
        branches: scored,
        winner,
        carried,
    })
}

fn scope_set(state: &SequenceState, config: &DecodeConfig) -> PositionSet {
    config.scope(state).collect()
}

fn has_masked_in(state: &SequenceState, scope: &PositionSet) -> bool {
    scope.iter().any(|&i| state.is_masked(i))
}

fn record(branch: &Branch) -> BranchRecord {
    BranchRecord {
        kind: branch.kind,
        filled: branch.filled.iter().map(|(&p, &t)| (p, t)).collect(),
        score: branch.score,
    }
}

/// LoPA over the whole generation scope.
pub fn lopa_decode<M: ModelBackend + ?Sized>(
    backend: &M,
    state: &SequenceState,
    config: &DecodeConfig,
) -> Result<DecodeOutput> {
    let mut policy = FullWindow::new(state, config);
    lopa_decode_with(backend, state, config, &mut policy)
}

/// LoPA with fills confined to whatever `policy` exposes each iteration.
///
/// Terminates when the policy's window is empty or the anchor completes the
/// scope; the final anchor is adopted without a verification pass since there
/// is nothing left to predict.
pub fn lopa_decode_with<M: ModelBackend + ?Sized>(
    backend: &M,
    state: &SequenceState,
    config: &DecodeConfig,
    policy: &mut dyn WindowPolicy,
) -> Result<DecodeOutput> {
    config.validate()?;
    check_vocab(backend.vocab_size(), state)?;
    let scope = scope_set(state, config);
    if !has_masked_in(state, &scope) {
        return Err(LopaError::NothingMasked);
    }

    let mut metrics = DecodeMetrics::default();
    let mut iterations = Vec::new();
    let mut cur = state.clone();
    policy.advance(&cur)?;

    let mut dists = backend.predict(&cur, &scope)?;
    metrics.forwards += 1;
    let mut forward = ForwardKind::Initial;
    let mut forward_branches = 1;

    loop {
        let window = policy.window(&cur);
        if window.is_empty() {
            break;
        }
        let anchor = anchor_step_in(&cur, &dists, &window, |i| policy.threshold(i))?;
        let lookahead = spawn_lookahead(&anchor.branch, &dists, &anchor.conf, config.branch_budget)?;
        let anchor_fills = anchor.branch.filled.len();
        let fallback_used = anchor.decision.fallback_used;

        if lookahead.is_empty() && !has_masked_in(anchor.branch.state(), &scope) {
            cur = anchor.branch.state().clone();
            metrics.record_step(anchor_fills);
            policy.advance(&cur)?;
            iterations.push(IterationRecord {
                forward,
                forward_branches,
                window: window.into_iter().collect(),
                anchor_fills,
                fallback_used,
                branches: vec![record(&anchor.branch)],
                winner: 0,
                fills: anchor_fills,
                verified: false,
                blocks: policy.blocks(),
            });
            break;
        }

        let mut branches = Vec::with_capacity(lookahead.len() + 1);
        branches.push(anchor.branch);
        branches.extend(lookahead);
        let n_branches = branches.len();
        let verification = verify_branches(backend, branches, &scope, config.conf_metric)?;
        metrics.forwards += 1;

        let winner = verification.winner();
        let fills = winner.filled.len();
        cur = winner.state().clone();
        metrics.record_step(fills);
        policy.advance(&cur)?;
        iterations.push(IterationRecord {
            forward,
            forward_branches,
            window: window.into_iter().collect(),
            anchor_fills,
            fallback_used,
            branches: verification.branches.iter().map(record).collect(),
            winner: verification.winner,
            fills,
            verified: true,
            blocks: policy.blocks(),
        });
        dists = verification.carried;
        forward = ForwardKind::Verify;
        forward_branches = n_branches;
    }

    let scope_range = config.scope(state);
    Ok(DecodeOutput {
        state: cur,
        metrics,
        trace: DecodeTrace {
            initial: state.clone(),
            scope: (scope_range.start, scope_range.end),
            branch_budget: config.branch_budget,
            block_size: policy.block_size(),
            iterations,
        },
    })
}

/// Threshold decoding with no lookahead: predict, fill, repeat.
pub fn baseline_decode<M: ModelBackend + ?Sized>(
    backend: &M,
    state: &SequenceState,
    config: &DecodeConfig,
) -> Result<DecodeOutput> {
    config.validate()?;
    check_vocab(backend.vocab_size(), state)?;
    let scope = scope_set(state, config);
    if !has_masked_in(state, &scope) {
        return Err(LopaError::NothingMasked);
    }
    let mut metrics = DecodeMetrics::default();
    let mut iterations = Vec::new();
    let mut cur = state.clone();
    while has_masked_in(&cur, &scope) {
        let dists = backend.predict(&cur, &scope)?;
        metrics.forwards += 1;
        let window: PositionSet = scope.iter().copied().filter(|&i| cur.is_masked(i)).collect();
        let anchor = anchor_step_in(&cur, &dists, &window, |_| config.tau)?;
        let fills = anchor.branch.filled.len();
        metrics.record_step(fills);
        iterations.push(IterationRecord {
            forward: if iterations.is_empty() {
                ForwardKind::Initial
            } else {
                ForwardKind::Predict
            },
            forward_branches: 1,
            window: window.into_iter().collect(),
            anchor_fills: fills,
            fallback_used: anchor.decision.fallback_used,
            branches: vec![record(&anchor.branch)],
            winner: 0,
            fills,
            verified: false,
            blocks: None,
        });
        cur = anchor.branch.state().clone();
    }
    let scope_range = config.scope(state);
    Ok(DecodeOutput {
        state: cur,
        metrics,
        trace: DecodeTrace {
            initial: state.clone(),
            scope: (scope_range.start, scope_range.end),
            branch_budget: 0,
            block_size: None,
            iterations,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{full_window, CountingBackend, ScriptedModel};

    fn one_hot(vocab: usize) -> ScriptedModel {
        let mut d = vec![0.0; vocab];
        d[1] = 1.0;
        ScriptedModel::new(vocab).unwrap().with_default(d).unwrap()
    }

    fn dist_with_top(conf: f64) -> Vec<f64> {
        vec![conf, 1.0 - conf]
    }

    fn dists_from(confs: &[(usize, f64)]) -> Prediction {
        confs.iter().map(|&(i, c)| (i, dist_with_top(c))).collect()
    }

    #[test]
    fn anchor_fills_above_threshold() {
        let s = SequenceState::new(&[0, 0], 6, 2).unwrap();
        let dists = dists_from(&[(2, 0.97), (3, 0.6), (4, 0.6), (5, 0.42), (6, 0.6), (7, 0.91)]);
        let a = anchor_step(&s, &dists, &DecodeConfig::with_budget(0.9, 0)).unwrap();
        assert_eq!(a.branch.filled.keys().copied().collect::<Vec<_>>(), vec![2, 7]);
        assert_eq!(a.branch.unfilled, [3, 4, 5, 6].into_iter().collect());
    }

    #[test]
    fn anchor_fallback_and_full_acceptance() {
        let s = SequenceState::new(&[], 3, 2).unwrap();
        let cfg = DecodeConfig::with_budget(0.9, 0);
        let a = anchor_step(&s, &dists_from(&[(0, 0.5), (1, 0.7), (2, 0.6)]), &cfg).unwrap();
        assert_eq!(a.branch.filled.keys().copied().collect::<Vec<_>>(), vec![1]);
        assert!(a.decision.fallback_used);
        let a = anchor_step(&s, &dists_from(&[(0, 0.95), (1, 0.99), (2, 0.91)]), &cfg).unwrap();
        assert_eq!(a.branch.filled.len(), 3);
        assert!(a.branch.unfilled.is_empty());
    }

    #[test]
    fn anchor_requires_masked_positions() {
        let s = SequenceState::new(&[], 1, 2).unwrap();
        let s = s.apply_fills(&[(0, 0)].into_iter().collect()).unwrap();
        assert!(anchor_step(&s, &Prediction::new(), &DecodeConfig::default()).is_err());
    }

    #[test]
    fn lookahead_top_k() {
        let s = SequenceState::new(&[], 10, 2).unwrap();
        let b0 = Branch::new(s, BTreeMap::new(), [5, 8, 9].into_iter().collect(), BranchKind::Anchor).unwrap();
        let conf: ConfidenceMap = [(5, 0.6), (8, 0.8), (9, 0.7)].into_iter().collect();
        let dists = dists_from(&[(5, 0.6), (8, 0.8), (9, 0.7)]);
        let br = spawn_lookahead(&b0, &dists, &conf, 2).unwrap();
        let picked: Vec<usize> = br.iter().map(|b| *b.filled.keys().next().unwrap()).collect();
        assert_eq!(picked, vec![8, 9]);
        assert_eq!(br[0].kind, BranchKind::Lookahead(1));
        assert!(spawn_lookahead(&b0, &dists, &conf, 0).unwrap().is_empty());
        assert_eq!(spawn_lookahead(&b0, &dists, &conf, 5).unwrap().len(), 3);
    }

    #[test]
    fn lookahead_ties_by_position() {
        let s = SequenceState::new(&[], 4, 2).unwrap();
        let b0 = Branch::new(s, BTreeMap::new(), [0, 1, 2, 3].into_iter().collect(), BranchKind::Anchor).unwrap();
        let confs = [(0, 0.5), (1, 0.7), (2, 0.7), (3, 0.7)];
        let br = spawn_lookahead(&b0, &dists_from(&confs), &confs.into_iter().collect(), 2).unwrap();
        let picked: Vec<usize> = br.iter().map(|b| *b.filled.keys().next().unwrap()).collect();
        assert_eq!(picked, vec![1, 2]);
    }

    #[test]
    fn single_branch_verification() {
        let m = CountingBackend::new(one_hot(3));
        let s = SequenceState::new(&[0], 3, 3).unwrap();
        let b0 = Branch::new(s.clone(), [(1, 1)].into_iter().collect(), [2, 3].into_iter().collect(), BranchKind::Anchor).unwrap();
        let v = verify_branches(&m, vec![b0], &full_window(&s), ConfMetric::Mean).unwrap();
        assert_eq!(v.winner, 0);
        assert_eq!(m.calls(), 1);
        assert_eq!(v.winner().dists.as_ref().unwrap().len(), 2);
        assert_eq!(v.carried.len(), 2);
    }

    #[test]
    fn tie_keeps_anchor() {
        let m = ScriptedModel::new(2).unwrap();
        let s = SequenceState::new(&[], 3, 2).unwrap();
        let b0 = Branch::new(s.clone(), BTreeMap::new(), [0, 1, 2].into_iter().collect(), BranchKind::Anchor).unwrap();
        let b1 = b0.extend(0, 0, BranchKind::Lookahead(1)).unwrap();
        let b2 = b0.extend(1, 0, BranchKind::Lookahead(2)).unwrap();
        let v = verify_branches(&m, vec![b0, b1, b2], &full_window(&s), ConfMetric::Mean).unwrap();
        // uniform everywhere: every branch scores 0.5
        assert_eq!(v.winner, 0);
    }

    #[test]
    fn one_hot_lopa_finishes_in_one_iteration() {
        let m = CountingBackend::new(one_hot(4));
        let s = SequenceState::new(&[0, 2], 6, 4).unwrap();
        let out = lopa_decode(&m, &s, &DecodeConfig::with_budget(0.9, 3)).unwrap();
        assert!(out.state.is_complete());
        assert_eq!(out.metrics.per_step_fills, vec![6]);
        assert_eq!(out.metrics.forwards, 1);
        assert_eq!(m.calls(), 1);
        assert_eq!(out.metrics.tpf(), 6.0);
    }

    #[test]
    fn baseline_cases() {
        let s = SequenceState::new(&[1], 5, 4).unwrap();
        let out = baseline_decode(&one_hot(4), &s, &DecodeConfig::with_budget(0.9, 0)).unwrap();
        assert_eq!(out.metrics.forwards, 1);
        assert_eq!(out.metrics.tpf(), 5.0);

        let uniform = ScriptedModel::new(4).unwrap();
        let out = baseline_decode(&uniform, &s, &DecodeConfig::with_budget(0.9, 0)).unwrap();
        assert_eq!(out.metrics.tpf(), 1.0);
        assert_eq!(out.metrics.per_step_fills, vec![1; 5]);

        let out = baseline_decode(&one_hot(4), &s, &DecodeConfig::with_budget(1.0, 0)).unwrap();
        assert_eq!(out.metrics.tpf(), 1.0);
    }

    #[test]
    fn max_new_tokens_limits_scope() {
        let s = SequenceState::new(&[1], 5, 4).unwrap();
        let mut cfg = DecodeConfig::with_budget(0.9, 2);
        cfg.max_new_tokens = 3;
        let out = lopa_decode(&ScriptedModel::new(4).unwrap(), &s, &cfg).unwrap();
        assert_eq!(out.metrics.tokens_generated, 3);
        assert_eq!(out.state.masked(), [4, 5].into_iter().collect());
    }

    #[test]
    fn decode_rejects_complete_state() {
        let s = SequenceState::new(&[1], 1, 2).unwrap().apply_fills(&[(1, 0)].into_iter().collect()).unwrap();
        let m = ScriptedModel::new(2).unwrap();
        assert_eq!(lopa_decode(&m, &s, &DecodeConfig::default()).unwrap_err(), LopaError::NothingMasked);
        assert_eq!(baseline_decode(&m, &s, &DecodeConfig::default()).unwrap_err(), LopaError::NothingMasked);
    }
}
