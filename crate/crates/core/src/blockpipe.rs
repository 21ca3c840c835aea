//! Block-pipelined decoding.
//!
//! The generation region is cut into fixed-size blocks. Blocks move
//! inactive -> active -> committed; the union of active blocks is the window
//! that threshold filling and lookahead operate on. Inside the window every
//! filled token in the sequence is visible to the model.
//!
//! Scheduling rules:
//! - an active block that is fully filled is committed, in block order only;
//! - the next inactive block is activated once the newest started block has a
//!   fill ratio of at least `tau_add`;
//! - the newest active block fills with `tau_act`, older active blocks with
//!   `tau_conf` (reversed when `swap_thresholds` is set).
//!
//! The final block is clipped to the sequence when the generation length is not
//! a multiple of `block_size`; the clipped tail never exists, so it is never
//! decoded or counted.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::decode::{lopa_decode_with, DecodeOutput, WindowPolicy};
use crate::error::Result;
use crate::model::ModelBackend;
use crate::types::{BlockConfig, DecodeConfig, PositionSet, SequenceState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockStatus {
    Inactive,
    Active,
    Committed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockState {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub status: BlockStatus,
}

impl BlockState {
    pub fn span(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn filled_count(&self, state: &SequenceState) -> usize {
        self.span().filter(|&i| !state.is_masked(i)).count()
    }

    pub fn fill_ratio(&self, state: &SequenceState) -> f64 {
        self.filled_count(state) as f64 / (self.end - self.start) as f64
    }

    pub fn is_full(&self, state: &SequenceState) -> bool {
        self.span().all(|i| !state.is_masked(i))
    }
}

/// Inactive blocks covering `scope`, the last one clipped to its end.
pub fn init_blocks(scope: Range<usize>, block_size: usize) -> Vec<BlockState> {
    let block_size = block_size.max(1);
    let mut blocks = Vec::new();
    let mut start = scope.start;
    while start < scope.end {
        let end = (start + block_size).min(scope.end);
        blocks.push(BlockState {
            index: blocks.len(),
            start,
            end,
            status: BlockStatus::Inactive,
        });
        start = end;
    }
    blocks
}

/// Masked positions inside active blocks.
pub fn active_window(blocks: &[BlockState], state: &SequenceState) -> PositionSet {
    blocks
        .iter()
        .filter(|b| b.status == BlockStatus::Active)
        .flat_map(|b| b.span())
        .filter(|&i| state.is_masked(i))
        .collect()
}

/// Applies the commit and activation rules until nothing changes.
pub fn schedule_blocks(blocks: &[BlockState], state: &SequenceState, cfg: &BlockConfig) -> Vec<BlockState> {
    let mut blocks = blocks.to_vec();
    loop {
        let mut changed = false;

        for i in 0..blocks.len() {
            let prefix_committed = blocks[..i].iter().all(|b| b.status == BlockStatus::Committed);
            if blocks[i].status == BlockStatus::Active && prefix_committed && blocks[i].is_full(state) {
                blocks[i].status = BlockStatus::Committed;
                changed = true;
            }
        }

        let newest_started = blocks.iter().rev().find(|b| b.status != BlockStatus::Inactive);
        let ready = newest_started.is_none_or(|b| b.fill_ratio(state) >= cfg.tau_add);
        if ready {
            if let Some(next) = blocks.iter_mut().find(|b| b.status == BlockStatus::Inactive) {
                next.status = BlockStatus::Active;
                changed = true;
            }
        }

        if !changed {
            return blocks;
        }
    }
}

/// Fill threshold at `position` under the current block statuses.
pub fn block_threshold(blocks: &[BlockState], cfg: &BlockConfig, position: usize) -> f64 {
    let (newest, older) = if cfg.swap_thresholds {
        (cfg.tau_conf, cfg.tau_act)
    } else {
        (cfg.tau_act, cfg.tau_conf)
    };
    let newest_active = blocks
        .iter()
        .rev()
        .find(|b| b.status == BlockStatus::Active)
        .map(|b| b.index);
    match blocks.iter().find(|b| b.span().contains(&position)) {
        Some(b) if Some(b.index) == newest_active => newest,
        _ => older,
    }
}

/// Window policy driven by the block scheduler.
#[derive(Debug, Clone)]
pub struct BlockPipeline {
    blocks: Vec<BlockState>,
    cfg: BlockConfig,
}

impl BlockPipeline {
    pub fn new(scope: Range<usize>, cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            blocks: init_blocks(scope, cfg.block_size),
            cfg,
        })
    }

    pub fn blocks_now(&self) -> &[BlockState] {
        &self.blocks
    }
}

impl WindowPolicy for BlockPipeline {
    fn window(&self, state: &SequenceState) -> PositionSet {
        active_window(&self.blocks, state)
    }

    fn threshold(&self, position: usize) -> f64 {
        block_threshold(&self.blocks, &self.cfg, position)
    }

    fn advance(&mut self, state: &SequenceState) -> Result<()> {
        self.blocks = schedule_blocks(&self.blocks, state, &self.cfg);
        Ok(())
    }

    fn blocks(&self) -> Option<Vec<BlockState>> {
        Some(self.blocks.clone())
    }

    fn block_size(&self) -> Option<usize> {
        Some(self.cfg.block_size)
    }
}

/// LoPA restricted to the active window of a block pipeline.
pub fn lopa_block_decode<M: ModelBackend + ?Sized>(
    backend: &M,
    state: &SequenceState,
    dcfg: &DecodeConfig,
    bcfg: &BlockConfig,
) -> Result<DecodeOutput> {
    let mut pipeline = BlockPipeline::new(dcfg.scope(state), bcfg.clone())?;
    lopa_decode_with(backend, state, dcfg, &mut pipeline)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::lopa_decode;
    use crate::model::ScriptedModel;

    fn with_statuses(block_size: usize, statuses: &[BlockStatus]) -> Vec<BlockState> {
        let mut blocks = init_blocks(0..block_size * statuses.len(), block_size);
        for (b, s) in blocks.iter_mut().zip(statuses) {
            b.status = *s;
        }
        blocks
    }

    fn fill(state: &SequenceState, positions: impl IntoIterator<Item = usize>) -> SequenceState {
        state.apply_fills(&positions.into_iter().map(|p| (p, 0)).collect()).unwrap()
    }

    #[test]
    fn window_is_union_of_active_spans() {
        use BlockStatus::*;
        let s = SequenceState::new(&[], 16, 2).unwrap();
        let s = fill(&s, 0..4);
        let blocks = with_statuses(4, &[Committed, Active, Active, Inactive]);
        assert_eq!(active_window(&blocks, &s), (4..12).collect());
        let s2 = fill(&s, [5, 9]);
        assert_eq!(active_window(&blocks, &s2), (4..12).filter(|&i| i != 5 && i != 9).collect());

        let none = with_statuses(4, &[Inactive; 4]);
        assert!(active_window(&none, &s).is_empty());
        let all = with_statuses(4, &[Active; 4]);
        assert_eq!(active_window(&all, &s), (4..16).collect());
    }

    #[test]
    fn activation_uses_fill_ratio() {
        use BlockStatus::*;
        let cfg = BlockConfig::new(32, 0.1, 0.95, 0.9);
        let s = SequenceState::new(&[], 64, 2).unwrap();
        let blocks = with_statuses(32, &[Active, Inactive]);

        let out = schedule_blocks(&blocks, &fill(&s, 0..3), &cfg);
        assert_eq!(out[1].status, Inactive, "3/32 is below 0.1");
        let out = schedule_blocks(&blocks, &fill(&s, 0..4), &cfg);
        assert_eq!(out[1].status, Active, "4/32 reaches 0.1");
    }

    #[test]
    fn full_block_commits() {
        use BlockStatus::*;
        let cfg = BlockConfig::new(4, 0.5, 0.9, 0.9);
        let s = SequenceState::new(&[], 8, 2).unwrap();
        let blocks = with_statuses(4, &[Active, Active]);
        let out = schedule_blocks(&blocks, &fill(&s, 0..4), &cfg);
        assert_eq!(out[0].status, Committed);
        assert_eq!(out[1].status, Active);
    }

    #[test]
    fn later_full_block_waits_for_prefix() {
        use BlockStatus::*;
        let cfg = BlockConfig::new(4, 0.5, 0.9, 0.9);
        let s = SequenceState::new(&[], 8, 2).unwrap();
        let blocks = with_statuses(4, &[Active, Active]);
        let out = schedule_blocks(&blocks, &fill(&s, 4..8), &cfg);
        assert_eq!(out[1].status, Active);
        let out = schedule_blocks(&out, &fill(&s, 0..8), &cfg);
        assert_eq!(out[0].status, Committed);
        assert_eq!(out[1].status, Committed);
    }

    #[test]
    fn tau_add_one_is_sequential() {
        use BlockStatus::*;
        let cfg = BlockConfig::new(4, 1.0, 0.9, 0.9);
        let s = SequenceState::new(&[], 12, 2).unwrap();
        let start = schedule_blocks(&with_statuses(4, &[Inactive; 3]), &s, &cfg);
        assert_eq!(start.iter().map(|b| b.status).collect::<Vec<_>>(), vec![Active, Inactive, Inactive]);
        let partial = schedule_blocks(&start, &fill(&s, 0..3), &cfg);
        assert_eq!(partial[1].status, Inactive);
        let done = schedule_blocks(&start, &fill(&s, 0..4), &cfg);
        assert_eq!(done.iter().map(|b| b.status).collect::<Vec<_>>(), vec![Committed, Active, Inactive]);
    }

    #[test]
    fn thresholds_by_block_age() {
        use BlockStatus::*;
        let mut cfg = BlockConfig::new(4, 0.1, 0.95, 0.8);
        let blocks = with_statuses(4, &[Committed, Active, Active]);
        assert_eq!(block_threshold(&blocks, &cfg, 9), 0.95);
        assert_eq!(block_threshold(&blocks, &cfg, 5), 0.8);
        cfg.swap_thresholds = true;
        assert_eq!(block_threshold(&blocks, &cfg, 9), 0.8);
        assert_eq!(block_threshold(&blocks, &cfg, 5), 0.95);
    }

    #[test]
    fn last_block_is_clipped() {
        let blocks = init_blocks(2..12, 4);
        assert_eq!(blocks.iter().map(|b| b.span()).collect::<Vec<_>>(), vec![2..6, 6..10, 10..12]);
    }

    #[test]
    fn one_hot_two_sequential_blocks() {
        let model = ScriptedModel::new(3).unwrap().with_default(vec![0.0, 0.0, 1.0]).unwrap();
        let s = SequenceState::new(&[0], 8, 3).unwrap();
        let dcfg = DecodeConfig::with_budget(0.9, 2);
        let bcfg = BlockConfig::new(4, 1.0, 0.9, 0.9);
        let out = lopa_block_decode(&model, &s, &dcfg, &bcfg).unwrap();
        assert_eq!(out.metrics.per_step_fills, vec![4, 4]);
        let firsts: Vec<usize> = out
            .trace
            .iterations
            .iter()
            .map(|it| it.branches[it.winner].filled[0].0)
            .collect();
        assert_eq!(firsts, vec![1, 5]);
        assert_eq!(out.metrics.forwards, 2);
    }

    #[test]
    fn single_block_matches_plain_lopa() {
        let model = crate::model::random_hmm(3, 4, 11).unwrap();
        let s = SequenceState::new(&[1, 2], 10, 4).unwrap();
        let dcfg = DecodeConfig::with_budget(0.6, 3);
        let bcfg = BlockConfig::new(16, 0.1, 0.6, 0.9);
        let a = lopa_block_decode(&model, &s, &dcfg, &bcfg).unwrap();
        let b = lopa_decode(&model, &s, &dcfg).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.metrics, b.metrics);
    }
}
