//! Confidence-driven decoding and lookahead parallel decoding.

mod lopa;
mod select;
mod trace;

pub use lopa::{
    anchor_step, anchor_step_in, baseline_decode, lopa_decode, lopa_decode_with, spawn_lookahead,
    verify_branches, Anchor, FullWindow, Verification, WindowPolicy,
};
pub use select::{
    branch_confidence, conf_from_dist, confidence_map, greedy_token, select_fill_set,
    select_fill_set_with, BranchScore, FillDecision,
};
pub use trace::{BranchRecord, DecodeOutput, DecodeTrace, ForwardKind, IterationRecord};
