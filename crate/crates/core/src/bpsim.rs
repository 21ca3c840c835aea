//! Branch-parallel execution simulator.
//!
//! Replays a decode trace on `D` simulated devices. Each forward pass hands the
//! packed branches out round-robin; every device writes cache entries for the
//! blocks its branch has fully filled (pre-write). Under the two-phase protocol
//! the winner's cache is then broadcast over all peers (commit-winner). Under
//! the single-phase protocol entries are computed with block-causal visibility
//! and no broadcast happens.
//!
//! Cache "features" are fingerprints of the tokens visible when the entry was
//! written, so consistency is checked exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blockpipe::{init_blocks, BlockState};
use crate::decode::{DecodeTrace, ForwardKind};
use crate::error::{LopaError, Result};
use crate::types::{SequenceState, TokenId};

/// Bytes charged per cached token when broadcasting.
pub const BYTES_PER_TOKEN: u64 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub fingerprint: u64,
    pub payload: Vec<Option<TokenId>>,
}

impl CacheEntry {
    pub fn new(payload: Vec<Option<TokenId>>) -> Self {
        Self {
            fingerprint: fingerprint(&payload),
            payload,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.fingerprint == fingerprint(&self.payload)
    }
}

/// FNV-1a over the token ids; masked positions hash as `u32::MAX`.
pub fn fingerprint(tokens: &[Option<TokenId>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tokens {
        for byte in t.unwrap_or(u32::MAX).to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

pub type Cache = BTreeMap<usize, CacheEntry>;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DeviceState {
    pub device_id: usize,
    pub cache: Cache,
}

impl DeviceState {
    pub fn new(device_id: usize) -> Self {
        Self {
            device_id,
            cache: Cache::new(),
        }
    }

    pub fn cache_bytes(&self) -> u64 {
        self.cache
            .values()
            .map(|e| e.payload.len() as u64 * BYTES_PER_TOKEN)
            .sum()
    }
}

/// What a cache entry for a block may depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Visibility {
    /// Every token of the sequence (full attention inside the window).
    Full,
    /// Only tokens at or before the end of the block.
    BlockCausal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    TwoPhase,
    SinglePhase,
}

impl Protocol {
    pub fn visibility(self) -> Visibility {
        match self {
            Protocol::TwoPhase => Visibility::Full,
            Protocol::SinglePhase => Visibility::BlockCausal,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::TwoPhase => "two-phase",
            Protocol::SinglePhase => "single-phase",
        })
    }
}

impl FromStr for Protocol {
    type Err = LopaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-phase" => Ok(Protocol::TwoPhase),
            "single-phase" => Ok(Protocol::SinglePhase),
            other => Err(LopaError::InvalidConfig(format!("unknown protocol {other:?}"))),
        }
    }
}

/// Writes an entry for every block fully filled in `branch`; other entries are kept.
pub fn pre_write(
    device: &DeviceState,
    branch: &SequenceState,
    blocks: &[BlockState],
    visibility: Visibility,
) -> Result<DeviceState> {
    let mut next = device.clone();
    for block in blocks {
        if block.end > branch.len() || block.start > block.end {
            return Err(LopaError::InvalidConfig(format!(
                "block {} span {}..{} does not fit a sequence of length {}",
                block.index,
                block.start,
                block.end,
                branch.len()
            )));
        }
        if !block.is_full(branch) {
            continue;
        }
        let visible = match visibility {
            Visibility::Full => branch.tokens(),
            Visibility::BlockCausal => &branch.tokens()[..block.end],
        };
        next.cache.insert(block.index, CacheEntry::new(visible.to_vec()));
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommitStats {
    /// Peer entries replaced with different content.
    pub overwritten: usize,
    /// Speculative peer entries the winner does not hold.
    pub deleted: usize,
    /// Size of the broadcast winner cache.
    pub bytes: u64,
}

/// Replaces every device's cache with the winner's.
pub fn commit_winner(devices: &[DeviceState], winner_device: usize) -> Result<(Vec<DeviceState>, CommitStats)> {
    let winner = devices.get(winner_device).ok_or_else(|| {
        LopaError::Protocol(format!(
            "winner device {winner_device} out of range for {} devices",
            devices.len()
        ))
    })?;
    let mut stats = CommitStats {
        bytes: winner.cache_bytes(),
        ..CommitStats::default()
    };
    let out = devices
        .iter()
        .map(|d| {
            if d.device_id != winner.device_id {
                for (k, e) in &d.cache {
                    match winner.cache.get(k) {
                        Some(w) if w != e => stats.overwritten += 1,
                        None => stats.deleted += 1,
                        _ => {}
                    }
                }
            }
            DeviceState {
                device_id: d.device_id,
                cache: winner.cache.clone(),
            }
        })
        .collect();
    Ok((out, stats))
}

/// Pre-write only, relying on block-causal visibility for consistency.
///
/// `assigned[d]` lists the branch states device `d` runs this pass, in order.
pub fn single_phase_update(
    devices: &[DeviceState],
    assigned: &[Vec<&SequenceState>],
    blocks: &[BlockState],
    visibility: Visibility,
) -> Result<Vec<DeviceState>> {
    if visibility != Visibility::BlockCausal {
        return Err(LopaError::Protocol(
            "single-phase update requires block-causal visibility".into(),
        ));
    }
    if assigned.len() != devices.len() {
        return Err(LopaError::Protocol("one branch list per device required".into()));
    }
    devices
        .iter()
        .zip(assigned)
        .map(|(d, branches)| {
            branches
                .iter()
                .try_fold(d.clone(), |dev, b| pre_write(&dev, b, blocks, visibility))
        })
        .collect()
}

/// Branch indices per device: round-robin when there are at least as many
/// branches as devices, otherwise idle devices replicate a branch.
pub fn assign_branches(branches: usize, devices: usize) -> Vec<Vec<usize>> {
    if branches == 0 {
        return vec![Vec::new(); devices];
    }
    (0..devices)
        .map(|d| {
            if branches >= devices {
                (d..branches).step_by(devices).collect()
            } else {
                vec![d % branches]
            }
        })
        .collect()
}

/// Rebuilds a cache from scratch by writing each adopted state in order.
pub fn rebuild_from_history(history: &[SequenceState], blocks: &[BlockState], visibility: Visibility) -> Result<Cache> {
    let mut dev = DeviceState::new(0);
    for s in history {
        dev = pre_write(&dev, s, blocks, visibility)?;
    }
    Ok(dev.cache)
}

/// Blocks fully filled in `state` with every earlier block also full.
pub fn committed_blocks(blocks: &[BlockState], state: &SequenceState) -> Vec<usize> {
    blocks
        .iter()
        .take_while(|b| b.is_full(state))
        .map(|b| b.index)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub fwd_base: f64,
    pub fwd_per_token: f64,
    pub bcast_base: f64,
    pub bcast_per_byte: f64,
    pub devices: usize,
}

impl CostModel {
    /// Constant 1 ms forward, free communication.
    pub fn ideal(devices: usize) -> Self {
        Self {
            fwd_base: 1e-3,
            fwd_per_token: 0.0,
            bcast_base: 0.0,
            bcast_per_byte: 0.0,
            devices,
        }
    }

    /// Forward cost grows with sequence length; broadcasts cost latency plus bandwidth.
    pub fn linear_comm(devices: usize) -> Self {
        Self {
            fwd_base: 1e-3,
            fwd_per_token: 2e-6,
            bcast_base: 5e-5,
            bcast_per_byte: 1e-9,
            devices,
        }
    }

    pub fn preset(name: &str, devices: usize) -> Result<Self> {
        match name {
            "ideal" => Ok(Self::ideal(devices)),
            "linear-comm" => Ok(Self::linear_comm(devices)),
            other => Err(LopaError::InvalidConfig(format!("unknown cost preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices == 0 {
            return Err(LopaError::InvalidConfig("devices must be >= 1".into()));
        }
        for (name, v) in [
            ("fwd_base", self.fwd_base),
            ("fwd_per_token", self.fwd_per_token),
            ("bcast_base", self.bcast_base),
            ("bcast_per_byte", self.bcast_per_byte),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LopaError::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Time for one forward pass of `branches` sequences of `seq_len` tokens.
    pub fn compute_time(&self, branches: usize, seq_len: usize) -> f64 {
        let rounds = branches.div_ceil(self.devices).max(1);
        rounds as f64 * (self.fwd_base + self.fwd_per_token * seq_len as f64)
    }

    pub fn broadcast_time(&self, bytes: u64) -> f64 {
        if self.devices > 1 {
            self.bcast_base + self.bcast_per_byte * bytes as f64
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationCost {
    pub compute_time: f64,
    pub comm_time: f64,
    pub branches: usize,
    pub fills: usize,
    pub comm_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConsistencyStats {
    pub commits: usize,
    /// Device caches differing from the winner-history rebuild after a commit.
    pub oracle_mismatches: usize,
    /// Committed blocks whose entries differ, or are missing, across devices.
    pub committed_divergences: usize,
    /// Passes where device caches disagreed before any commit.
    pub transient_divergences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub protocol: Protocol,
    pub devices: usize,
    pub tokens: u64,
    pub forwards: u64,
    pub wall_clock: f64,
    pub avg_tps: f64,
    pub max_tps: f64,
    pub tpf: f64,
    pub latency: f64,
    pub per_iteration: Vec<IterationCost>,
    pub consistency: ConsistencyStats,
}

/// Re-costs a decode trace on the simulated devices.
///
/// Forward `i` produces the distributions iteration `i` fills from. A trailing
/// verification pass with no fills is costed too when the last iteration was
/// verified.
pub fn simulate_run(trace: &DecodeTrace, cm: &CostModel, protocol: Protocol) -> Result<SimReport> {
    cm.validate()?;
    let (start, end) = trace.scope;
    let block_size = trace.block_size.unwrap_or(end.saturating_sub(start)).max(1);
    let blocks = init_blocks(start..end, block_size);
    let visibility = protocol.visibility();
    let states = trace.replay_states()?;
    let seq_len = trace.initial.len();
    let d = cm.devices;

    let mut devices: Vec<DeviceState> = (0..d).map(DeviceState::new).collect();
    let mut history: Vec<SequenceState> = Vec::new();
    let mut per_iteration = Vec::new();
    let mut stats = ConsistencyStats::default();

    let n_iter = trace.iterations.len();
    let trailing = trace.iterations.last().is_some_and(|it| it.verified);
    let steps = n_iter + usize::from(trailing);

    for step in 0..steps {
        let (kind, fills) = match trace.iterations.get(step) {
            Some(it) => (it.forward, it.fills),
            None => (ForwardKind::Verify, 0),
        };

        // Sequences packed into this forward and the one that gets adopted.
        let (packed, adopted): (Vec<SequenceState>, usize) = match kind {
            ForwardKind::Verify => {
                let prev = &trace.iterations[step - 1];
                let base = &states[step - 1];
                let packed = prev
                    .branches
                    .iter()
                    .map(|b| base.apply_fills(&b.filled.iter().copied().collect()))
                    .collect::<Result<Vec<_>>>()?;
                (packed, prev.winner)
            }
            ForwardKind::Initial | ForwardKind::Predict => (vec![states[step].clone()], 0),
        };

        let assignment = assign_branches(packed.len(), d);
        let mut comm_time = 0.0;
        let mut comm_bytes = 0;
        history.push(packed[adopted].clone());

        match protocol {
            Protocol::TwoPhase => {
                // Each branch writes into a working copy of its host's cache.
                let before = devices.clone();
                let mut winner_device = None;
                for (dev, branches) in assignment.iter().enumerate() {
                    for &j in branches {
                        let written = pre_write(&before[dev], &packed[j], &blocks, visibility)?;
                        if j == adopted && winner_device.is_none() {
                            winner_device = Some(dev);
                            devices[dev] = written;
                        } else if winner_device != Some(dev) {
                            devices[dev] = written;
                        }
                    }
                }
                if devices.windows(2).any(|w| w[0].cache != w[1].cache) {
                    stats.transient_divergences += 1;
                }
                if kind == ForwardKind::Verify {
                    let host = winner_device.ok_or_else(|| {
                        LopaError::Invariant("adopted branch was not assigned to a device".into())
                    })?;
                    let (committed, cs) = commit_winner(&devices, host)?;
                    devices = committed;
                    stats.commits += 1;
                    comm_bytes = cs.bytes;
                    comm_time = cm.broadcast_time(cs.bytes);
                    let oracle = rebuild_from_history(&history, &blocks, visibility)?;
                    stats.oracle_mismatches += devices.iter().filter(|dv| dv.cache != oracle).count();
                }
            }
            Protocol::SinglePhase => {
                let refs: Vec<Vec<&SequenceState>> = assignment
                    .iter()
                    .map(|bs| bs.iter().map(|&j| &packed[j]).collect())
                    .collect();
                devices = single_phase_update(&devices, &refs, &blocks, visibility)?;
                let base = match kind {
                    ForwardKind::Verify => &states[step - 1],
                    _ => &states[step],
                };
                for idx in committed_blocks(&blocks, base) {
                    let first = devices[0].cache.get(&idx);
                    if first.is_none() || devices.iter().any(|dv| dv.cache.get(&idx) != first) {
                        stats.committed_divergences += 1;
                    }
                }
            }
        }

        per_iteration.push(IterationCost {
            compute_time: cm.compute_time(packed.len(), seq_len),
            comm_time,
            branches: packed.len(),
            fills,
            comm_bytes,
        });
    }

    let tokens = trace.tokens();
    let forwards = per_iteration.len() as u64;
    let wall_clock: f64 = per_iteration.iter().map(|c| c.compute_time + c.comm_time).sum();
    let max_tps = per_iteration
        .iter()
        .map(|c| c.fills as f64 / (c.compute_time + c.comm_time))
        .filter(|x| x.is_finite())
        .fold(0.0, f64::max);
    Ok(SimReport {
        protocol,
        devices: d,
        tokens,
        forwards,
        wall_clock,
        avg_tps: if wall_clock > 0.0 { tokens as f64 / wall_clock } else { 0.0 },
        max_tps,
        tpf: if forwards > 0 { tokens as f64 / forwards as f64 } else { 0.0 },
        latency: wall_clock,
        per_iteration,
        consistency: stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockpipe::BlockStatus;

    fn blocks(n: usize, size: usize, offset: usize) -> Vec<BlockState> {
        init_blocks(offset..offset + n * size, size)
    }

    fn state_with(prompt: &[u32], gen: usize, fills: &[(usize, u32)]) -> SequenceState {
        SequenceState::new(prompt, gen, 4)
            .unwrap()
            .apply_fills(&fills.iter().copied().collect())
            .unwrap()
    }

    #[test]
    fn pre_write_only_full_blocks() {
        let bl = blocks(3, 2, 1);
        let dev = DeviceState::new(0);
        let s = state_with(&[0], 6, &[(3, 1), (4, 2)]);
        let out = pre_write(&dev, &s, &bl, Visibility::Full).unwrap();
        assert_eq!(out.cache.keys().copied().collect::<Vec<_>>(), vec![1]);
        assert!(out.cache[&1].is_consistent());

        let empty = state_with(&[0], 6, &[(1, 1)]);
        assert_eq!(pre_write(&dev, &empty, &bl, Visibility::Full).unwrap(), dev);
    }

    #[test]
    fn pre_write_rejects_bad_spans() {
        let s = state_with(&[0], 2, &[]);
        let bad = vec![BlockState { index: 0, start: 1, end: 9, status: BlockStatus::Active }];
        assert!(pre_write(&DeviceState::new(0), &s, &bad, Visibility::Full).is_err());
    }

    #[test]
    fn divergent_branches_then_commit() {
        let bl = blocks(2, 2, 1);
        let a = state_with(&[0], 4, &[(3, 1), (4, 1)]);
        let b = state_with(&[0], 4, &[(3, 2), (4, 2), (1, 0)]);
        let d0 = pre_write(&DeviceState::new(0), &a, &bl, Visibility::Full).unwrap();
        let d1 = pre_write(&DeviceState::new(1), &b, &bl, Visibility::Full).unwrap();
        assert_ne!(d0.cache[&1], d1.cache[&1]);

        let (out, stats) = commit_winner(&[d0.clone(), d1], 0).unwrap();
        assert!(out.iter().all(|d| d.cache == d0.cache));
        assert_eq!(stats.overwritten, 1);
        assert_eq!(stats.bytes, 5 * BYTES_PER_TOKEN);
        assert!(commit_winner(&out, 7).is_err());
    }

    #[test]
    fn commit_is_idempotent_but_still_charged() {
        let bl = blocks(1, 2, 1);
        let a = state_with(&[0], 2, &[(1, 1), (2, 1)]);
        let devs: Vec<_> = (0..3)
            .map(|i| pre_write(&DeviceState::new(i), &a, &bl, Visibility::Full).unwrap())
            .collect();
        let (out, stats) = commit_winner(&devs, 1).unwrap();
        assert_eq!(out, devs);
        assert_eq!((stats.overwritten, stats.deleted), (0, 0));
        assert!(stats.bytes > 0);
    }

    #[test]
    fn empty_winner_clears_speculative_entries() {
        let bl = blocks(1, 2, 1);
        let a = state_with(&[0], 2, &[(1, 1), (2, 1)]);
        let peer = pre_write(&DeviceState::new(1), &a, &bl, Visibility::Full).unwrap();
        let (out, stats) = commit_winner(&[DeviceState::new(0), peer], 0).unwrap();
        assert!(out.iter().all(|d| d.cache.is_empty()));
        assert_eq!(stats.deleted, 1);
    }

    #[test]
    fn single_phase_needs_block_causal() {
        let s = state_with(&[0], 2, &[]);
        let devs = vec![DeviceState::new(0)];
        assert!(single_phase_update(&devs, &[vec![&s]], &blocks(1, 2, 1), Visibility::Full).is_err());
    }

    #[test]
    fn block_causal_entries_ignore_later_divergence() {
        let bl = blocks(2, 2, 1);
        let a = state_with(&[0], 4, &[(1, 1), (2, 1), (3, 0)]);
        let b = state_with(&[0], 4, &[(1, 1), (2, 1), (4, 3)]);
        let devs = vec![DeviceState::new(0), DeviceState::new(1)];
        let out = single_phase_update(&devs, &[vec![&a], vec![&b]], &bl, Visibility::BlockCausal).unwrap();
        assert_eq!(out[0].cache[&0], out[1].cache[&0]);
    }

    #[test]
    fn round_robin_assignment() {
        assert_eq!(assign_branches(5, 2), vec![vec![0, 2, 4], vec![1, 3]]);
        assert_eq!(assign_branches(2, 4), vec![vec![0], vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn cost_model_arithmetic() {
        let cm = CostModel::ideal(8);
        assert_eq!(cm.compute_time(8, 100), 1e-3);
        let cm1 = CostModel::ideal(1);
        assert_eq!(cm1.compute_time(8, 100), 8e-3);
        assert!(CostModel { devices: 0, ..cm }.validate().is_err());
        assert!(CostModel::preset("nope", 1).is_err());
        assert_eq!(cm1.broadcast_time(1000), 0.0);
    }

    #[test]
    fn protocol_parse() {
        assert_eq!("two-phase".parse::<Protocol>().unwrap(), Protocol::TwoPhase);
        assert_eq!(Protocol::SinglePhase.to_string(), "single-phase");
        assert!("three-phase".parse::<Protocol>().is_err());
    }
}
