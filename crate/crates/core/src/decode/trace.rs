use serde::{Deserialize, Serialize};

use crate::blockpipe::BlockState;
use crate::error::{LopaError, Result};
use crate::types::{BranchKind, DecodeMetrics, SequenceState, TokenId};

/// What produced the distributions an iteration filled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardKind {
    /// First predict on the starting state.
    Initial,
    /// Packed verification of the previous iteration's branches.
    Verify,
    /// Plain single-sequence predict (threshold decoding without lookahead).
    Predict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub kind: BranchKind,
    pub filled: Vec<(usize, TokenId)>,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Forward pass whose outputs this iteration consumed.
    pub forward: ForwardKind,
    /// Sequences packed into that forward pass.
    pub forward_branches: usize,
    pub window: Vec<usize>,
    pub anchor_fills: usize,
    pub fallback_used: bool,
    pub branches: Vec<BranchRecord>,
    pub winner: usize,
    /// Tokens committed by the adopted branch.
    pub fills: usize,
    /// False when the branches were never scored (last iteration, or no lookahead decoder).
    pub verified: bool,
    /// Block statuses after this iteration, for block-pipelined runs.
    pub blocks: Option<Vec<BlockState>>,
}

impl IterationRecord {
    pub fn winner_kind(&self) -> BranchKind {
        self.branches[self.winner].kind
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub initial: SequenceState,
    pub scope: (usize, usize),
    pub branch_budget: usize,
    pub block_size: Option<usize>,
    pub iterations: Vec<IterationRecord>,
}

impl DecodeTrace {
    /// Base state of every iteration, followed by the final state.
    pub fn replay_states(&self) -> Result<Vec<SequenceState>> {
        let mut states = Vec::with_capacity(self.iterations.len() + 1);
        let mut cur = self.initial.clone();
        states.push(cur.clone());
        for it in &self.iterations {
            let winner = it
                .branches
                .get(it.winner)
                .ok_or_else(|| LopaError::Invariant("winner index out of range".into()))?;
            cur = cur.apply_fills(&winner.filled.iter().copied().collect())?;
            states.push(cur.clone());
        }
        Ok(states)
    }

    pub fn tokens(&self) -> u64 {
        self.iterations.iter().map(|i| i.fills as u64).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LopaError::InvalidConfig(format!("trace: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub state: SequenceState,
    pub metrics: DecodeMetrics,
    pub trace: DecodeTrace,
}
