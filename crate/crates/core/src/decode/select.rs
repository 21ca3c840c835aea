//! Per-position confidence, threshold fill selection and branch scoring.

use serde::{Deserialize, Serialize};

use crate::error::{LopaError, Result};
use crate::model::check_distribution;
use crate::types::{ConfMetric, ConfidenceMap, Distribution, PositionSet, Prediction, TokenId};

/// Top-1 probability of a distribution.
pub fn conf_from_dist(dist: &[f64]) -> Result<f64> {
    check_distribution(dist)?;
    Ok(dist.iter().copied().fold(0.0, f64::max).min(1.0))
}

/// Most probable token; ties go to the lowest id.
pub fn greedy_token(dist: &Distribution) -> TokenId {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Confidence for every position of `dists`.
pub fn confidence_map(dists: &Prediction) -> Result<ConfidenceMap> {
    dists
        .iter()
        .map(|(&i, d)| conf_from_dist(d).map(|c| (i, c)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FillDecision {
    pub s_high: PositionSet,
    pub i_fill: PositionSet,
    pub fallback_used: bool,
}

/// Positions strictly above `tau`, or the single most confident one if none are.
pub fn select_fill_set(conf: &ConfidenceMap, tau: f64) -> Result<FillDecision> {
    select_fill_set_with(conf, |_| tau)
}

/// Same rule with a per-position threshold.
pub fn select_fill_set_with(conf: &ConfidenceMap, tau: impl Fn(usize) -> f64) -> Result<FillDecision> {
    if conf.is_empty() {
        return Err(LopaError::NothingMasked);
    }
    let s_high: PositionSet = conf
        .iter()
        .filter(|(&i, &c)| c > tau(i))
        .map(|(&i, _)| i)
        .collect();
    if !s_high.is_empty() {
        return Ok(FillDecision {
            i_fill: s_high.clone(),
            s_high,
            fallback_used: false,
        });
    }
    // BTreeMap iterates in ascending position, so strict > keeps the lowest index on ties.
    let mut best: Option<(usize, f64)> = None;
    for (&i, &c) in conf {
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((i, c));
        }
    }
    let (i, _) = best.expect("non-empty map");
    Ok(FillDecision {
        s_high,
        i_fill: [i].into_iter().collect(),
        fallback_used: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchScore {
    pub value: f64,
    pub metric: ConfMetric,
}

/// Scores a branch from the distributions over its unfilled positions.
///
/// A branch with nothing left unfilled scores 1.0.
pub fn branch_confidence(dists: &Prediction, metric: ConfMetric) -> Result<BranchScore> {
    metric.validate()?;
    let confs: Vec<f64> = dists
        .values()
        .map(|d| conf_from_dist(d))
        .collect::<Result<_>>()?;
    Ok(BranchScore {
        value: score_confidences(&confs, metric),
        metric,
    })
}

/// `confs` must be in position order.
pub(crate) fn score_confidences(confs: &[f64], metric: ConfMetric) -> f64 {
    let n = confs.len();
    if n == 0 {
        return 1.0;
    }
    match metric {
        ConfMetric::Mean => confs.iter().sum::<f64>() / n as f64,
        ConfMetric::SlidingWindow { w } => {
            let w = w.clamp(1, n);
            confs
                .windows(w)
                .map(|win| win.iter().sum::<f64>() / w as f64)
                .fold(f64::INFINITY, f64::min)
        }
        ConfMetric::BottomFraction { eta } => {
            let m = ((eta * n as f64).ceil() as usize).clamp(1, n);
            let mut sorted = confs.to_vec();
            sorted.sort_by(f64::total_cmp);
            sorted[..m].iter().sum::<f64>() / m as f64
        }
    }
}
