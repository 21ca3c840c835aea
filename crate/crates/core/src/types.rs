//! Value types shared by every decoder: sequences, branches, configs and metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{LopaError, Result};

pub type TokenId = u32;

/// Categorical distribution over the vocabulary, indexed by token id.
pub type Distribution = Vec<f64>;

/// Per-position predictive distributions, keyed by masked position.
pub type Prediction = BTreeMap<usize, Distribution>;

/// Position -> top-1 confidence, keyed only by masked positions.
pub type ConfidenceMap = BTreeMap<usize, f64>;

pub type PositionSet = BTreeSet<usize>;

/// Tolerance for "sums to one" on distributions handed across module boundaries.
pub const DIST_TOL: f64 = 1e-9;

/// A partially filled token sequence. `None` is a masked position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequenceState {
    tokens: Vec<Option<TokenId>>,
    vocab_size: usize,
    prompt_len: usize,
}

impl SequenceState {
    pub fn new(prompt: &[TokenId], gen_len: usize, vocab_size: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(LopaError::EmptyVocab);
        }
        if gen_len == 0 {
            return Err(LopaError::EmptyGeneration);
        }
        for (position, &token) in prompt.iter().enumerate() {
            if token as usize >= vocab_size {
                return Err(LopaError::TokenOutOfRange {
                    position,
                    token,
                    vocab_size,
                });
            }
        }
        let mut tokens: Vec<Option<TokenId>> = prompt.iter().copied().map(Some).collect();
        tokens.resize(prompt.len() + gen_len, None);
        Ok(Self {
            tokens,
            vocab_size,
            prompt_len: prompt.len(),
        })
    }

    /// Builds a state from raw tokens. Every prompt position must be filled.
    pub fn from_tokens(tokens: Vec<Option<TokenId>>, vocab_size: usize, prompt_len: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(LopaError::EmptyVocab);
        }
        if prompt_len > tokens.len() {
            return Err(LopaError::PositionOutOfRange(prompt_len));
        }
        for (position, tok) in tokens.iter().enumerate() {
            match tok {
                None if position < prompt_len => return Err(LopaError::PromptPosition(position)),
                Some(t) if *t as usize >= vocab_size => {
                    return Err(LopaError::TokenOutOfRange {
                        position,
                        token: *t,
                        vocab_size,
                    })
                }
                _ => {}
            }
        }
        Ok(Self {
            tokens,
            vocab_size,
            prompt_len,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn gen_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    pub fn tokens(&self) -> &[Option<TokenId>] {
        &self.tokens
    }

    pub fn get(&self, position: usize) -> Option<TokenId> {
        self.tokens.get(position).copied().flatten()
    }

    pub fn is_masked(&self, position: usize) -> bool {
        matches!(self.tokens.get(position), Some(None))
    }

    pub fn masked(&self) -> PositionSet {
        self.masked_iter().collect()
    }

    pub fn masked_iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.is_none().then_some(i))
    }

    pub fn masked_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_none()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.tokens.iter().all(Option::is_some)
    }

    /// Returns a new state with `fills` applied; `self` is left untouched.
    pub fn apply_fills(&self, fills: &BTreeMap<usize, TokenId>) -> Result<Self> {
        let mut next = self.clone();
        for (&position, &token) in fills {
            if position >= next.tokens.len() {
                return Err(LopaError::PositionOutOfRange(position));
            }
            if position < next.prompt_len {
                return Err(LopaError::PromptPosition(position));
            }
            if next.tokens[position].is_some() {
                return Err(LopaError::AlreadyFilled(position));
            }
            if token as usize >= next.vocab_size {
                return Err(LopaError::TokenOutOfRange {
                    position,
                    token,
                    vocab_size: next.vocab_size,
                });
            }
            next.tokens[position] = Some(token);
        }
        Ok(next)
    }

    /// Generated (non-prompt) token ids, `None` where still masked.
    pub fn generated(&self) -> &[Option<TokenId>] {
        &self.tokens[self.prompt_len..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum BranchKind {
    Anchor,
    Lookahead(usize),
}

impl BranchKind {
    /// Position of the branch inside a verification batch (anchor is 0).
    pub fn index(self) -> usize {
        match self {
            BranchKind::Anchor => 0,
            BranchKind::Lookahead(j) => j,
        }
    }
}

/// A candidate continuation explored within one decoding iteration.
///
/// `unfilled` is taken relative to the decoding window the branch was built in;
/// for whole-sequence decoding it is exactly `masked(base) \ filled`.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    base: SequenceState,
    state: SequenceState,
    pub filled: BTreeMap<usize, TokenId>,
    pub unfilled: PositionSet,
    pub dists: Option<Prediction>,
    pub score: Option<f64>,
    pub kind: BranchKind,
}

impl Branch {
    pub fn new(
        base: SequenceState,
        filled: BTreeMap<usize, TokenId>,
        unfilled: PositionSet,
        kind: BranchKind,
    ) -> Result<Self> {
        if let Some(p) = filled.keys().find(|p| unfilled.contains(p)) {
            return Err(LopaError::Invariant(format!(
                "position {p} is both filled and unfilled"
            )));
        }
        if let Some(p) = unfilled.iter().find(|&&p| !base.is_masked(p)) {
            return Err(LopaError::Invariant(format!(
                "unfilled position {p} is not masked in the base state"
            )));
        }
        let state = base.apply_fills(&filled)?;
        Ok(Self {
            base,
            state,
            filled,
            unfilled,
            dists: None,
            score: None,
            kind,
        })
    }

    pub fn base(&self) -> &SequenceState {
        &self.base
    }

    /// The base state with this branch's fills applied.
    pub fn state(&self) -> &SequenceState {
        &self.state
    }

    /// Same branch with one more position filled, removed from `unfilled`.
    pub fn extend(&self, position: usize, token: TokenId, kind: BranchKind) -> Result<Self> {
        let mut filled = self.filled.clone();
        if filled.insert(position, token).is_some() {
            return Err(LopaError::AlreadyFilled(position));
        }
        let mut unfilled = self.unfilled.clone();
        unfilled.remove(&position);
        Branch::new(self.base.clone(), filled, unfilled, kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConfMetric {
    /// Arithmetic mean of per-position confidence.
    Mean,
    /// Lowest window mean over contiguous runs of `w` unfilled positions.
    SlidingWindow { w: usize },
    /// Mean of the lowest `ceil(eta * n)` confidences.
    BottomFraction { eta: f64 },
}

impl ConfMetric {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ConfMetric::Mean => Ok(()),
            ConfMetric::SlidingWindow { w } if w >= 1 => Ok(()),
            ConfMetric::SlidingWindow { w } => Err(LopaError::InvalidConfig(format!(
                "sliding window width must be >= 1, got {w}"
            ))),
            ConfMetric::BottomFraction { eta } if eta > 0.0 && eta <= 1.0 => Ok(()),
            ConfMetric::BottomFraction { eta } => Err(LopaError::InvalidConfig(format!(
                "bottom fraction must lie in (0, 1], got {eta}"
            ))),
        }
    }

    pub fn tag(&self) -> String {
        match self {
            ConfMetric::Mean => "mean".into(),
            ConfMetric::SlidingWindow { w } => format!("sliding_window({w})"),
            ConfMetric::BottomFraction { eta } => format!("bottom_fraction({eta})"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfFn {
    #[default]
    Top1Prob,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Greedy,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    PreferAnchorThenLowestIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub tau: f64,
    pub branch_budget: usize,
    #[serde(default = "default_metric")]
    pub conf_metric: ConfMetric,
    #[serde(default)]
    pub conf_fn: ConfFn,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub tie_break: TieBreak,
    /// Caps the generation region to the first `max_new_tokens` generated positions.
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_metric() -> ConfMetric {
    ConfMetric::Mean
}

fn default_max_new_tokens() -> usize {
    usize::MAX
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            tau: 0.9,
            branch_budget: 0,
            conf_metric: ConfMetric::Mean,
            conf_fn: ConfFn::Top1Prob,
            sampling: Sampling::Greedy,
            tie_break: TieBreak::PreferAnchorThenLowestIndex,
            max_new_tokens: usize::MAX,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn with_budget(tau: f64, branch_budget: usize) -> Self {
        Self {
            tau,
            branch_budget,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(LopaError::InvalidConfig(format!(
                "tau must lie in (0, 1], got {}",
                self.tau
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(LopaError::InvalidConfig("max_new_tokens must be >= 1".into()));
        }
        self.conf_metric.validate()
    }

    /// Generated positions the decoder is allowed to fill.
    pub fn scope(&self, state: &SequenceState) -> std::ops::Range<usize> {
        let start = state.prompt_len();
        let end = start + state.gen_len().min(self.max_new_tokens);
        start..end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub block_size: usize,
    pub tau_add: f64,
    pub tau_act: f64,
    pub tau_conf: f64,
    /// Swap which threshold applies to the newest vs older active blocks.
    #[serde(default)]
    pub swap_thresholds: bool,
}

impl BlockConfig {
    pub fn new(block_size: usize, tau_add: f64, tau_act: f64, tau_conf: f64) -> Self {
        Self {
            block_size,
            tau_add,
            tau_act,
            tau_conf,
            swap_thresholds: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(LopaError::InvalidConfig("block_size must be >= 1".into()));
        }
        for (name, v) in [
            ("tau_add", self.tau_add),
            ("tau_act", self.tau_act),
            ("tau_conf", self.tau_conf),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(LopaError::InvalidConfig(format!(
                    "{name} must lie in (0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeMetrics {
    pub forwards: u64,
    pub tokens_generated: u64,
    pub per_step_fills: Vec<u64>,
}

impl DecodeMetrics {
    pub fn record_step(&mut self, fills: usize) {
        self.per_step_fills.push(fills as u64);
        self.tokens_generated += fills as u64;
    }

    /// Tokens per forward pass; zero when nothing was run.
    pub fn tpf(&self) -> f64 {
        if self.forwards == 0 {
            0.0
        } else {
            self.tokens_generated as f64 / self.forwards as f64
        }
    }
}
