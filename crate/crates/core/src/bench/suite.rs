use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::blockpipe::lopa_block_decode;
use crate::bpsim::{simulate_run, Protocol};
use crate::decode::{lopa_decode, DecodeOutput};
use crate::error::Result;
use crate::model::ModelBackend;
use crate::types::{DecodeConfig, DecodeMetrics, SequenceState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run_id: usize,
    pub instance: usize,
    pub k: usize,
    pub tau: f64,
    pub block_size: Option<usize>,
    pub tau_add: Option<f64>,
    pub tau_act: Option<f64>,
    pub tau_conf: Option<f64>,
    pub devices: usize,
    pub protocol: Protocol,
    pub tokens: u64,
    pub forwards: u64,
    pub tpf: f64,
    pub wall_clock_s: f64,
    pub avg_tps: f64,
    pub max_tps: f64,
    pub latency_s: f64,
    pub metrics: DecodeMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub k: usize,
    pub tau: f64,
    pub devices: usize,
    pub runs: usize,
    pub mean_tpf: f64,
    pub min_tpf: f64,
    pub max_tpf: f64,
    pub mean_tps: f64,
    pub min_tps: f64,
    pub max_tps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxes {
    pub k: Vec<usize>,
    pub tau: Vec<f64>,
    pub devices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub axes: SweepAxes,
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<Aggregate>,
}

impl SuiteReport {
    pub fn from_rows(axes: SweepAxes, rows: Vec<RunRow>) -> Self {
        let aggregates = aggregate(&axes, &rows);
        Self {
            axes,
            rows,
            aggregates,
        }
    }

    pub fn aggregate_for(&self, k: usize, tau: f64, devices: usize) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.k == k && a.tau == tau && a.devices == devices)
    }
}

/// One aggregate per grid cell, in axis order.
pub fn aggregate(axes: &SweepAxes, rows: &[RunRow]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for &k in &axes.k {
        for &tau in &axes.tau {
            for &devices in &axes.devices {
                let cell: Vec<&RunRow> = rows
                    .iter()
                    .filter(|r| r.k == k && r.tau == tau && r.devices == devices)
                    .collect();
                if cell.is_empty() {
                    continue;
                }
                let n = cell.len() as f64;
                let tpf: Vec<f64> = cell.iter().map(|r| r.tpf).collect();
                let tps: Vec<f64> = cell.iter().map(|r| r.avg_tps).collect();
                out.push(Aggregate {
                    k,
                    tau,
                    devices,
                    runs: cell.len(),
                    mean_tpf: tpf.iter().sum::<f64>() / n,
                    min_tpf: tpf.iter().copied().fold(f64::INFINITY, f64::min),
                    max_tpf: tpf.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    mean_tps: tps.iter().sum::<f64>() / n,
                    min_tps: tps.iter().copied().fold(f64::INFINITY, f64::min),
                    max_tps: tps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                });
            }
        }
    }
    out
}

/// Runs LoPA (block-pipelined when the config has a block section).
pub fn decode_instance(
    cfg: &RunConfig,
    model: &dyn ModelBackend,
    state: &SequenceState,
    dcfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    match &cfg.block {
        Some(bcfg) => lopa_block_decode(model, state, dcfg, bcfg),
        None => lopa_decode(model, state, dcfg),
    }
}

/// Executes the full sweep grid: every (k, tau) decode on every instance,
/// re-costed for every device count.
pub fn run_suite(cfg: &RunConfig) -> Result<SuiteReport> {
    cfg.validate()?;
    let axes = SweepAxes {
        k: cfg.k_axis(),
        tau: cfg.tau_axis(),
        devices: cfg.devices_axis(),
    };
    let instances = (0..cfg.repetitions)
        .map(|r| cfg.instance(r))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for &k in &axes.k {
        for &tau in &axes.tau {
            let dcfg = DecodeConfig {
                tau,
                branch_budget: k,
                ..cfg.decode.clone()
            };
            for (instance, (model, state)) in instances.iter().enumerate() {
                let out = decode_instance(cfg, model.as_ref(), state, &dcfg)?;
                for &devices in &axes.devices {
                    let cm = cfg.cost_model.build(devices)?;
                    let sim = simulate_run(&out.trace, &cm, cfg.protocol)?;
                    rows.push(RunRow {
                        run_id: rows.len(),
                        instance,
                        k,
                        tau,
                        block_size: cfg.block.as_ref().map(|b| b.block_size),
                        tau_add: cfg.block.as_ref().map(|b| b.tau_add),
                        tau_act: cfg.block.as_ref().map(|b| b.tau_act),
                        tau_conf: cfg.block.as_ref().map(|b| b.tau_conf),
                        devices,
                        protocol: cfg.protocol,
                        tokens: out.metrics.tokens_generated,
                        forwards: out.metrics.forwards,
                        tpf: out.metrics.tpf(),
                        wall_clock_s: sim.wall_clock,
                        avg_tps: sim.avg_tps,
                        max_tps: sim.max_tps,
                        latency_s: sim.latency,
                        metrics: out.metrics.clone(),
                    });
                }
            }
        }
    }
    Ok(SuiteReport::from_rows(axes, rows))
}
