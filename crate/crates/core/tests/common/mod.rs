#![allow(dead_code)]

use std::collections::BTreeMap;

use lopa::blockpipe::{active_window, init_blocks, schedule_blocks, BlockState, BlockStatus};
use lopa::decode::DecodeOutput;
use lopa::model::{random_hmm, random_hmm_with, HmmModel, HmmShape};
use lopa::{BlockConfig, ConfidenceMap, DecodeConfig, Distribution, PositionSet, SequenceState, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random HMM instance with a sampled prompt: N in 2..=8, V in 2..=16, gen in 4..=32.
pub fn random_instance(seed: u64) -> (HmmModel, SequenceState) {
    let mut r = rng(seed ^ 0x5eed);
    let n = r.gen_range(2..=8);
    let v = r.gen_range(2..=16);
    let gen = r.gen_range(4..=32);
    let prompt_len = r.gen_range(0..=4);
    let shape = if seed.is_multiple_of(2) { HmmShape::default() } else { HmmShape::sticky() };
    let hmm = random_hmm_with(n, v, seed, shape).unwrap();
    let prompt = hmm.sample_tokens(prompt_len, seed);
    let state = SequenceState::new(&prompt, gen, v).unwrap();
    (hmm, state)
}

/// Small instance that the brute-force branch oracle accepts (at most 12 masked).
pub fn small_instance(seed: u64) -> (HmmModel, SequenceState) {
    let mut r = rng(seed ^ 0xa11);
    let n = r.gen_range(2..=5);
    let v = r.gen_range(2..=6);
    let gen = r.gen_range(3..=12);
    let prompt_len = r.gen_range(1..=3);
    let shape = if seed.is_multiple_of(3) { HmmShape::default() } else { HmmShape::sticky() };
    let hmm = random_hmm_with(n, v, seed, shape).unwrap();
    let prompt = hmm.sample_tokens(prompt_len, seed + 1);
    (hmm, SequenceState::new(&prompt, gen, v).unwrap())
}

/// The fixed suite used for TPF measurements: N=8, V=16, prompt 8, gen 64.
pub fn sticky_suite(count: u64) -> Vec<(HmmModel, SequenceState)> {
    (0..count)
        .map(|seed| {
            let hmm = random_hmm_with(8, 16, seed, HmmShape::sticky()).unwrap();
            let prompt = hmm.sample_tokens(8, 1000 + seed);
            let state = SequenceState::new(&prompt, 64, 16).unwrap();
            (hmm, state)
        })
        .collect()
}

pub fn plain_hmm(n: usize, v: usize, seed: u64) -> HmmModel {
    random_hmm(n, v, seed).unwrap()
}

pub fn config(tau: f64, k: usize) -> DecodeConfig {
    DecodeConfig::with_budget(tau, k)
}

/// Marginals over masked positions by summing over every hidden path.
pub fn enumerate_marginals(hmm: &HmmModel, tokens: &[Option<TokenId>]) -> BTreeMap<usize, Distribution> {
    let n = hmm.n_hidden();
    let l = tokens.len();
    let v = hmm.emission()[0].len();
    let (pi, a, e) = (hmm.initial(), hmm.transition(), hmm.emission());
    let mut acc: BTreeMap<usize, Distribution> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_none())
        .map(|(i, _)| (i, vec![0.0; v]))
        .collect();
    let mut path = vec![0usize; l];
    let total_paths = n.pow(l as u32);
    for code in 0..total_paths {
        let mut c = code;
        for h in path.iter_mut() {
            *h = c % n;
            c /= n;
        }
        let mut w = pi[path[0]];
        for j in 1..l {
            w *= a[path[j - 1]][path[j]];
        }
        for (j, t) in tokens.iter().enumerate() {
            if let Some(t) = t {
                w *= e[path[j]][*t as usize];
            }
        }
        if w == 0.0 {
            continue;
        }
        for (&i, d) in acc.iter_mut() {
            for (x, p) in d.iter_mut().enumerate() {
                *p += w * e[path[i]][x];
            }
        }
    }
    for d in acc.values_mut() {
        let z: f64 = d.iter().sum();
        for p in d.iter_mut() {
            *p /= z;
        }
    }
    acc
}

pub fn max_abs_diff(a: &BTreeMap<usize, Distribution>, b: &BTreeMap<usize, Distribution>) -> f64 {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    a.iter()
        .flat_map(|(i, d)| d.iter().zip(&b[i]).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Random confidence map over positions 0..n, drawing some values from a small
/// grid so ties and exact-threshold values occur.
pub fn random_conf_map(r: &mut ChaCha8Rng, tau: f64) -> ConfidenceMap {
    let n = r.gen_range(1..=16);
    let offset = r.gen_range(0..8);
    (0..n)
        .map(|i| {
            let c = match r.gen_range(0..4) {
                0 => tau,
                1 => [0.25, 0.5, 0.75, 1.0][r.gen_range(0..4)],
                _ => r.gen_range(0.0..=1.0),
            };
            (offset + i, c)
        })
        .collect()
}

/// Piecewise reference for the threshold fill set.
pub fn reference_fill_set(conf: &ConfidenceMap, tau: f64) -> PositionSet {
    let high: PositionSet = conf.iter().filter(|(_, &c)| c > tau).map(|(&i, _)| i).collect();
    if !high.is_empty() {
        return high;
    }
    let max = conf.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let first = conf.iter().find(|(_, &c)| c == max).map(|(&i, _)| i).unwrap();
    [first].into_iter().collect()
}

/// Checks that every adopted fill of a block-pipelined run lies in a block that
/// was active when the iteration started. Returns the number of violations.
pub fn inactive_fill_violations(out: &DecodeOutput, bcfg: &BlockConfig) -> usize {
    let trace = &out.trace;
    let states = trace.replay_states().unwrap();
    let mut blocks: Vec<BlockState> = schedule_blocks(
        &init_blocks(trace.scope.0..trace.scope.1, bcfg.block_size),
        &trace.initial,
        bcfg,
    );
    let mut violations = 0;
    for (i, it) in trace.iterations.iter().enumerate() {
        let window = active_window(&blocks, &states[i]);
        let recorded: PositionSet = it.window.iter().copied().collect();
        if window != recorded {
            violations += 1;
        }
        for &(p, _) in &it.branches[it.winner].filled {
            let in_active = blocks
                .iter()
                .any(|b| b.status == BlockStatus::Active && b.span().contains(&p));
            if !in_active || !window.contains(&p) {
                violations += 1;
            }
        }
        blocks = it.blocks.clone().expect("block runs record block states");
    }
    violations
}
