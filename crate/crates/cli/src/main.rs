//! `thzsim`: runs experiment plans and writes their CSV results.
//!
//! Exit status is 0 on success, 2 for usage errors (bad arguments, missing or
//! invalid plan/config files, invalid overrides) and 1 when a simulation
//! fails. Failures print one JSON line on stderr:
//! `{"error":"<kind>","message":"...","exit":<code>}`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thz_hybrid::channel::generate_channel;
use thz_hybrid::harness::{
    canned_plan, codebook_table, delay_table, dump_channel, run_plan, write_csv, ExperimentPlan,
};
use thz_hybrid::numerics::stream_rng;
use thz_hybrid::{default_paper_config, Error, SystemConfig};

#[derive(Debug, Parser)]
#[command(name = "thzsim", version, about = "Wideband THz hybrid-beamforming uplink simulator")]
struct Cli {
    /// Base configuration (JSON); the built-in default when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set adc_bits=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Monte-Carlo trials per sweep point.
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Seed of the per-trial random streams.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output file (CSV), or file stem for `dump-channel`.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a JSON experiment plan.
    Run { plan: PathBuf },
    /// Array gain against direction, with and without delay lines.
    Fig2a,
    /// Spectral efficiency against SNR for every scheme.
    Fig2b,
    /// Rate against SNR for RRC and rectangular pulses.
    Fig2c,
    /// Spectral efficiency against SNR for 1-4 bit and ideal ADCs.
    Fig2d,
    /// Write one channel realization (paths CSV + binary responses).
    DumpChannel,
    /// Write the delay-line tables of the first-stage design.
    DumpDelays,
    /// Write the Lloyd-Max codebook of a resolution.
    DumpCodebook { bits: u32 },
}

struct Failure {
    code: u8,
    error: Error,
}

fn usage(error: Error) -> Failure {
    Failure { code: 2, error }
}

fn runtime(error: Error) -> Failure {
    Failure { code: 1, error }
}

fn base_config(cli: &Cli) -> Result<Option<SystemConfig>, Failure> {
    if cli.config.is_none() && cli.set.is_empty() {
        return Ok(None);
    }
    let mut cfg = match &cli.config {
        Some(p) => SystemConfig::load(p).map_err(usage)?,
        None => default_paper_config(),
    };
    for s in &cli.set {
        cfg = cfg.apply_override(s).map_err(usage)?;
    }
    Ok(Some(cfg.validate().map_err(usage)?))
}

fn effective_config(cli: &Cli) -> Result<SystemConfig, Failure> {
    match base_config(cli)? {
        Some(c) => Ok(c),
        None => default_paper_config().validate().map_err(usage),
    }
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn execute_plan(cli: &Cli, mut plan: ExperimentPlan) -> Result<(), Failure> {
    if let Some(p) = &cli.config {
        plan.config = Some(SystemConfig::load(p).map_err(usage)?);
    }
    plan.overrides.extend(cli.set.iter().cloned());
    if let Some(t) = cli.trials {
        plan.trials = t;
    }
    if let Some(s) = cli.seed {
        plan.seed = Some(s);
    }
    plan.resolved().map_err(usage)?;
    let out = out_path(cli, &format!("{}.csv", plan.name));
    let result = run_plan(&plan).map_err(runtime)?;
    result.write(&out).map_err(runtime)?;
    println!("wrote {} rows to {}", result.len(), out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(usage(Error::Value("--jobs must be positive".into())));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| runtime(Error::Value(format!("thread pool: {e}"))))?;
    }
    match &cli.command {
        Command::Run { plan } => {
            let plan = ExperimentPlan::load(plan).map_err(usage)?;
            execute_plan(cli, plan)
        }
        Command::Fig2a | Command::Fig2b | Command::Fig2c | Command::Fig2d => {
            let name = match cli.command {
                Command::Fig2a => "fig2a",
                Command::Fig2b => "fig2b",
                Command::Fig2c => "fig2c",
                _ => "fig2d",
            };
            // --config/--set are applied by execute_plan
            let plan = canned_plan(name, None).map_err(usage)?;
            execute_plan(cli, plan)
        }
        Command::DumpChannel => {
            let cfg = effective_config(cli)?;
            let seed = cli.seed.unwrap_or(cfg.rng_seed);
            let ch = generate_channel(&cfg, &mut stream_rng(seed, 0)).map_err(runtime)?;
            let (csv, bin) = dump_channel(&ch, &out_path(cli, "channel")).map_err(runtime)?;
            println!("wrote {} and {}", csv.display(), bin.display());
            Ok(())
        }
        Command::DumpDelays => {
            let cfg = effective_config(cli)?;
            let seed = cli.seed.unwrap_or(cfg.rng_seed);
            let rows = delay_table(&cfg, seed).map_err(runtime)?;
            write_rows(&out_path(cli, "delays.csv"), &rows)
        }
        Command::DumpCodebook { bits } => {
            let rows = codebook_table(*bits).map_err(usage)?;
            write_rows(&out_path(cli, &format!("codebook_{bits}.csv")), &rows)
        }
    }
}

fn write_rows<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<(), Failure> {
    write_csv(path, rows).map_err(runtime)?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = serde_json::json!({
                "error": f.error.kind(),
                "message": f.error.to_string(),
                "exit": f.code,
            });
            eprintln!("{line}");
            ExitCode::from(f.code)
        }
    }
}
