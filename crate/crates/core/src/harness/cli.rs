//! Command-line front end: one subcommand per pipeline phase.
//!
//! Every subcommand takes `--config <FILE>` plus repeatable
//! `--set key.path=value` overrides, with `--seed` and `--out` as shorthands
//! for the two most common ones. Exit codes: 0 on success, 1 for usage
//! problems (bad arguments, unreadable or invalid config), 2 for runtime
//! failures (missing/stale artifacts, training or sampling errors).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;

use super::artifacts::{samples_file, RunDir, FLOW_CKPT, SYNTHETIC_CSV};
use super::phases::{
    phase_benchmark, phase_bootstrap, phase_evaluate, phase_landscape, phase_report, phase_sample,
    phase_train_codec, phase_train_flow, timed, PHASE_BENCHMARK, PHASE_BOOTSTRAP, PHASE_EVALUATE,
    PHASE_LANDSCAPE, PHASE_SAMPLE, PHASE_TRAIN_CODEC, PHASE_TRAIN_FLOW,
};
use super::report::render_table;
use super::{parse_override, resolve_config, resolve_run_dir, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser)]
#[command(
    name = "latentflow",
    version,
    about = "Fitness-guided sequence generation: build benchmarks, train, sample, evaluate",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the ground-truth fitness landscape and persist it
    LandscapeGen(PhaseArgs),
    /// Draw the restricted training subset from the landscape
    BenchmarkBuild(PhaseArgs),
    /// Train the sequence/latent codec on the benchmark records
    TrainCodec(PhaseArgs),
    /// Train the guided generative model on codec latents
    TrainFlow(PhaseArgs),
    /// Augment with self-generated data and retrain the generative model
    Bootstrap(PhaseArgs),
    /// Draw sequences from the trained model, one batch per run seed
    Sample(PhaseArgs),
    /// Rank samples, score the kept top-k with the oracle, write the report
    Evaluate(PhaseArgs),
    /// Schema-check and re-print a previously written report
    Report(PhaseArgs),
}

#[derive(Args)]
struct PhaseArgs {
    /// Run-configuration JSON file (missing fields take defaults)
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override a config field: dotted.path=value, value parsed as JSON with
    /// string fallback (e.g. --set sampler.steps=40). Applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run a single seed: shorthand for --set seeds=[SEED]
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
    /// Output directory, overriding the config's `output` and the env root
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

/// A dispatch failure, classified for the exit code.
struct Failure {
    code: i32,
    error: Error,
}

impl Failure {
    fn usage(error: Error) -> Failure {
        Failure { code: EXIT_USAGE, error }
    }
    fn runtime(error: Error) -> Failure {
        Failure { code: EXIT_RUNTIME, error }
    }
}

/// Parse and run `argv` (including the program name); returns the process
/// exit code instead of exiting, so callers and tests stay in control.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // usage error. `print` routes to stdout/stderr accordingly.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.error);
            f.code
        }
    }
}

/// Resolve the config (file + overrides + shorthands) and the run directory.
/// Everything here is the caller's input, so failures are usage errors.
fn setup(a: &PhaseArgs) -> Result<(RunDir, RunConfig), Failure> {
    let mut sets = Vec::with_capacity(a.set.len() + 1);
    for s in &a.set {
        sets.push(parse_override(s).map_err(Failure::usage)?);
    }
    if let Some(seed) = a.seed {
        sets.push(("seeds".to_string(), format!("[{}]", seed)));
    }
    let mut cfg = resolve_config(&a.config, &sets).map_err(Failure::usage)?;
    if let Some(out) = &a.out {
        cfg.output = Some(out.clone());
    }
    let rd = resolve_run_dir(&cfg).map_err(Failure::usage)?;
    Ok((rd, cfg))
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::LandscapeGen(a) => {
            let (rd, cfg) = setup(&a)?;
            timed(&rd, PHASE_LANDSCAPE, || phase_landscape(&rd, &cfg))
                .map_err(Failure::runtime)?;
            println!(
                "landscape ready: {} symbols, length {} → {}",
                cfg.landscape.vocab.chars().count(),
                cfg.landscape.length,
                rd.root().display()
            );
        }
        Command::BenchmarkBuild(a) => {
            let (rd, cfg) = setup(&a)?;
            let subset = timed(&rd, PHASE_BENCHMARK, || phase_benchmark(&rd, &cfg))
                .map_err(Failure::runtime)?;
            println!(
                "benchmark built: {} records, difficulty {} → {}",
                subset.len(),
                cfg.benchmark.difficulty,
                rd.root().display()
            );
        }
        Command::TrainCodec(a) => {
            let (rd, cfg) = setup(&a)?;
            timed(&rd, PHASE_TRAIN_CODEC, || phase_train_codec(&rd, &cfg))
                .map_err(Failure::runtime)?;
            println!("codec trained → {}", rd.root().display());
        }
        Command::TrainFlow(a) => {
            let (rd, cfg) = setup(&a)?;
            let training = timed(&rd, PHASE_TRAIN_FLOW, || phase_train_flow(&rd, &cfg))
                .map_err(Failure::runtime)?;
            let best = training
                .val_trace
                .iter()
                .map(|&(_, loss)| loss)
                .fold(f64::INFINITY, f64::min);
            println!(
                "generative model trained: best validation loss {:.6} at step {} → {}",
                best,
                training.best_step,
                rd.root().display()
            );
        }
        Command::Bootstrap(a) => {
            let (rd, cfg) = setup(&a)?;
            let summary = timed(&rd, PHASE_BOOTSTRAP, || phase_bootstrap(&rd, &cfg))
                .map_err(Failure::runtime)?;
            println!(
                "bootstrap done: {} synthetic records ({}), retrained on {} total ({} start) → {} replaced",
                summary.synthetic,
                SYNTHETIC_CSV,
                summary.total_training,
                if summary.warm_start { "warm" } else { "fresh" },
                FLOW_CKPT
            );
        }
        Command::Sample(a) => {
            let (rd, cfg) = setup(&a)?;
            let outcomes =
                timed(&rd, PHASE_SAMPLE, || phase_sample(&rd, &cfg)).map_err(Failure::runtime)?;
            let mut succeeded = 0usize;
            let mut first_failure = None;
            for o in &outcomes {
                match &o.outcome {
                    Ok(n) => {
                        succeeded += 1;
                        println!("seed {}: {} sequences → {}", o.seed, n, samples_file(o.seed));
                    }
                    Err(msg) => {
                        if first_failure.is_none() {
                            first_failure = Some(msg.clone());
                        }
                        println!("seed {}: failed: {}", o.seed, msg);
                    }
                }
            }
            if succeeded == 0 {
                return Err(Failure::runtime(Error::contract(format!(
                    "no seed produced samples (first failure: {})",
                    first_failure.unwrap_or_else(|| "none attempted".into())
                ))));
            }
        }
        Command::Evaluate(a) => {
            let (rd, cfg) = setup(&a)?;
            let report = timed(&rd, PHASE_EVALUATE, || phase_evaluate(&rd, &cfg))
                .map_err(Failure::runtime)?;
            print!("{}", render_table(&report));
        }
        Command::Report(a) => {
            let (rd, cfg) = setup(&a)?;
            // A pure re-read: not timed, so it never shows up in timings.json.
            let (report, _) = phase_report(&rd, &cfg).map_err(Failure::runtime)?;
            print!("{}", render_table(&report));
        }
    }
    Ok(())
}
