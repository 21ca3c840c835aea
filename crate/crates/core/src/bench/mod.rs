//! Benchmark harness: run configs, sweeps, brute-force oracles and reports.

pub mod config;
pub mod oracle;
pub mod report;
pub mod suite;

pub use config::{CostSpec, Format, ModelSpec, RunConfig, SweepSpec};
pub use oracle::{
    audit_lopa_run, brute_force_branch_oracle, brute_force_tfo_explorer, BranchOracle, LopaAudit, TfoBound,
};
pub use report::{emit_report, render_csv, render_json, render_tpf_svg, render_tps_svg};
pub use suite::{aggregate, decode_instance, run_suite, Aggregate, RunRow, SuiteReport, SweepAxes};
