use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use lopa::bench::oracle::{MAX_ORACLE_BUDGET, MAX_ORACLE_UNFILLED, MAX_TFO_GEN, MAX_TFO_VOCAB};
use lopa::bench::{
    audit_lopa_run, brute_force_tfo_explorer, decode_instance, emit_report, run_suite, Format, RunConfig,
};
use lopa::bpsim::{simulate_run, CostModel, Protocol};
use lopa::decode::{baseline_decode, DecodeTrace};
use lopa::{DecodeConfig, LopaError};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_INVARIANT: u8 = 3;
const TFO_STATE_CAP: usize = 200_000;

#[derive(Parser)]
#[command(name = "lopa", version, about = "Lookahead parallel decoding lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the decode seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Output formats; repeat or comma-separate.
    #[arg(long, value_enum, value_delimiter = ',')]
    format: Vec<Format>,
    #[arg(long)]
    protocol: Option<Protocol>,
}

#[derive(Subcommand)]
enum Command {
    /// Decode one instance and print its tokens and metrics.
    Decode {
        #[command(flatten)]
        common: Common,
        /// Instance index (offsets the model and prompt seeds).
        #[arg(long, default_value_t = 0)]
        instance: usize,
        /// Threshold decoding without lookahead branches.
        #[arg(long)]
        baseline: bool,
    },
    /// Run the configured sweep and write reports.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Like `bench`, with sweep axes given on the command line.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        tau: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        devices: Vec<usize>,
    },
    /// Re-cost a saved decode trace on simulated devices.
    SimulateBp {
        #[arg(long)]
        trace: PathBuf,
        /// Cost preset: ideal or linear-comm.
        #[arg(long, default_value = "ideal")]
        preset: String,
        #[arg(long, default_value_t = 1)]
        devices: usize,
        #[arg(long, default_value = "two-phase")]
        protocol: Protocol,
    },
    /// Cross-check decodes against brute-force oracles; exits 3 on a violation.
    Oracle {
        #[command(flatten)]
        common: Common,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(e: impl ToString) -> Self {
        Self { code: EXIT_CONFIG, message: e.to_string() }
    }
}

impl From<LopaError> for Failure {
    fn from(e: LopaError) -> Self {
        let code = match e {
            LopaError::InvalidConfig(_) | LopaError::InvalidModel(_) => EXIT_CONFIG,
            LopaError::Invariant(_) => EXIT_INVARIANT,
            _ => EXIT_FAILURE,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(&common.config).map_err(Failure::config)?;
    if let Some(seed) = common.seed {
        cfg.decode.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.output.dir = Some(dir.clone());
    }
    if !common.format.is_empty() {
        cfg.output.formats = common.format.clone();
    }
    if let Some(p) = common.protocol {
        cfg.protocol = p;
    }
    cfg.validate().map_err(Failure::config)?;
    Ok(cfg)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string(v).expect("json value serializes"));
}

fn cmd_decode(common: &Common, instance: usize, baseline: bool) -> CliResult<()> {
    let cfg = load_config(common)?;
    let (model, state) = cfg.instance(instance).map_err(Failure::config)?;
    let out = if baseline {
        baseline_decode(model.as_ref(), &state, &cfg.decode)?
    } else {
        decode_instance(&cfg, model.as_ref(), &state, &cfg.decode)?
    };
    let cm = cfg.cost_model.build(cfg.devices).map_err(Failure::config)?;
    let sim = simulate_run(&out.trace, &cm, cfg.protocol)?;
    if let Some(dir) = &cfg.output.dir {
        std::fs::create_dir_all(dir).map_err(|e| Failure::from(LopaError::from(e)))?;
        std::fs::write(dir.join("trace.json"), out.trace.to_json())
            .map_err(|e| Failure::from(LopaError::from(e)))?;
    }
    print_json(&json!({
        "prompt": &state.tokens()[..state.prompt_len()],
        "generated": out.state.generated(),
        "forwards": out.metrics.forwards,
        "tokens": out.metrics.tokens_generated,
        "tpf": out.metrics.tpf(),
        "per_step_fills": out.metrics.per_step_fills,
        "devices": sim.devices,
        "protocol": sim.protocol,
        "wall_clock_s": sim.wall_clock,
        "avg_tps": sim.avg_tps,
    }));
    Ok(())
}

fn run_and_emit(cfg: &RunConfig) -> CliResult<()> {
    let report = run_suite(cfg)?;
    for a in &report.aggregates {
        println!(
            "k={:<3} tau={:<5} devices={:<2} runs={:<3} tpf={:.4} tps={:.2}",
            a.k, a.tau, a.devices, a.runs, a.mean_tpf, a.mean_tps
        );
    }
    let formats = if cfg.output.formats.is_empty() {
        vec![Format::Csv, Format::Json, Format::Svg]
    } else {
        cfg.output.formats.clone()
    };
    if let Some(dir) = &cfg.output.dir {
        for path in emit_report(&report, &formats, dir)? {
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn cmd_sweep(common: &Common, k: &[usize], tau: &[f64], devices: &[usize]) -> CliResult<()> {
    let mut cfg = load_config(common)?;
    if !k.is_empty() {
        cfg.sweep.k = Some(k.to_vec());
    }
    if !tau.is_empty() {
        cfg.sweep.tau = Some(tau.to_vec());
    }
    if !devices.is_empty() {
        cfg.sweep.devices = Some(devices.to_vec());
    }
    cfg.validate().map_err(Failure::config)?;
    run_and_emit(&cfg)
}

fn cmd_simulate(trace: &Path, preset: &str, devices: usize, protocol: Protocol) -> CliResult<()> {
    let text = std::fs::read_to_string(trace).map_err(Failure::config)?;
    let trace = DecodeTrace::from_json(&text).map_err(Failure::config)?;
    let cm = CostModel::preset(preset, devices).map_err(Failure::config)?;
    let sim = simulate_run(&trace, &cm, protocol)?;
    print_json(&json!({
        "protocol": sim.protocol,
        "devices": sim.devices,
        "tokens": sim.tokens,
        "forwards": sim.forwards,
        "tpf": sim.tpf,
        "wall_clock_s": sim.wall_clock,
        "avg_tps": sim.avg_tps,
        "max_tps": sim.max_tps,
        "latency_s": sim.latency,
        "consistency": sim.consistency,
    }));
    Ok(())
}

fn cmd_oracle(common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    let mut violations = Vec::new();
    let mut checked = 0usize;
    for rep in 0..cfg.repetitions {
        let (model, state) = cfg.instance(rep).map_err(Failure::config)?;
        for &k in &cfg.k_axis() {
            for &tau in &cfg.tau_axis() {
                let dcfg = DecodeConfig { tau, branch_budget: k, ..cfg.decode.clone() };
                let out = decode_instance(&cfg, model.as_ref(), &state, &dcfg)?;
                let tag = format!("instance={rep} k={k} tau={tau}");

                let small = state.gen_len().min(dcfg.max_new_tokens) <= MAX_ORACLE_UNFILLED
                    && k <= MAX_ORACLE_BUDGET;
                if cfg.block.is_none() && small {
                    let audit = audit_lopa_run(model.as_ref(), &state, &dcfg)?;
                    checked += 1;
                    if audit.winner_mismatches > 0 {
                        violations.push(format!("{tag}: {} winner mismatches", audit.winner_mismatches));
                    }
                    if audit.carried_max_err > 1e-9 {
                        violations.push(format!("{tag}: carried distributions off by {:e}", audit.carried_max_err));
                    }
                    if audit.forwards != out.metrics.forwards || audit.tokens != out.metrics.tokens_generated {
                        violations.push(format!("{tag}: step-by-step rerun disagrees with the decoder"));
                    }
                }

                let gen = state.gen_len().min(dcfg.max_new_tokens);
                if gen <= MAX_TFO_GEN && state.vocab_size() <= MAX_TFO_VOCAB {
                    match brute_force_tfo_explorer(model.as_ref(), &state, tau, gen, TFO_STATE_CAP) {
                        Ok(bound) => {
                            checked += 1;
                            if out.metrics.tpf() > bound.best_tpf + 1e-12 {
                                violations.push(format!(
                                    "{tag}: tpf {} exceeds bound {}",
                                    out.metrics.tpf(),
                                    bound.best_tpf
                                ));
                            }
                        }
                        Err(LopaError::TooLarge(_)) => {}
                        Err(e) => return Err(e.into()),
                    }
                }

                for &d in &cfg.devices_axis() {
                    let cm = cfg.cost_model.build(d).map_err(Failure::config)?;
                    for protocol in [Protocol::TwoPhase, Protocol::SinglePhase] {
                        let sim = simulate_run(&out.trace, &cm, protocol)?;
                        checked += 1;
                        let c = &sim.consistency;
                        if c.oracle_mismatches > 0 || c.committed_divergences > 0 {
                            violations.push(format!(
                                "{tag} devices={d} {protocol}: {} oracle mismatches, {} committed divergences",
                                c.oracle_mismatches, c.committed_divergences
                            ));
                        }
                        if sim.forwards != out.metrics.forwards {
                            violations.push(format!("{tag} devices={d} {protocol}: forward count differs"));
                        }
                    }
                }
            }
        }
    }
    for v in &violations {
        eprintln!("violation: {v}");
    }
    println!("oracle checks: {checked}, violations: {}", violations.len());
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Failure { code: EXIT_INVARIANT, message: format!("{} invariant violations", violations.len()) })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Decode { common, instance, baseline } => cmd_decode(common, *instance, *baseline),
        Command::Bench { common } => load_config(common).and_then(|cfg| run_and_emit(&cfg)),
        Command::Sweep { common, k, tau, devices } => cmd_sweep(common, k, tau, devices),
        Command::SimulateBp { trace, preset, devices, protocol } => cmd_simulate(trace, preset, *devices, *protocol),
        Command::Oracle { common } => cmd_oracle(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
