//! `fcl`: runs federated class-incremental segmentation experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fcl_core::analysis::emit;
use fcl_core::config::Config;
use fcl_core::experiments::{self, SweepParam, GRADCHECK_TOLERANCE};
use fcl_core::federation::run_lifecycle;
use fcl_core::persist::{self, Checkpoint};
use fcl_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fcl", version, about = "Federated class-incremental segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full training lifecycle; writes rounds.csv, tasks.json, curves.svg, a checkpoint and the test data.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Per-group transplant sensitivity and gradient conflict after one increment.
    Sensitivity {
        #[arg(long)]
        config: PathBuf,
    },
    /// Epochs to the recovery threshold for the recovery function, a warm start and a fresh head.
    RecoverBench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Final mIoU across values of one parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// beta, buffers or tau.
        #[arg(long)]
        param: String,
        /// Comma-separated values; a buffers value may itself be a `/`-separated per-client list.
        #[arg(long)]
        values: String,
    },
    /// Finite-difference check of the segmenter gradients.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

fn run(out: &Path, config: &Path) -> Result<()> {
    let cfg = Config::load(config)?;
    let result = run_lifecycle(&cfg)?;
    for path in emit(out, &result.report, true)? {
        println!("wrote {}", path.display());
    }
    let ckpt = Checkpoint { net: result.net, generators: result.clients.into_iter().map(|c| c.generators).collect(), psi: result.psi };
    let ckpt_path = out.join("checkpoint.txt");
    persist::write_checkpoint(&ckpt_path, &ckpt)?;
    println!("wrote {}", ckpt_path.display());
    let data_path = out.join("test_data.txt");
    let test: Vec<_> = result.test_pools.into_iter().flatten().collect();
    persist::write_dataset(&data_path, &test)?;
    println!("wrote {}", data_path.display());
    println!("final cumulative mIoU {:.4}", result.report.final_miou);
    Ok(())
}

fn sensitivity(config: &Path) -> Result<()> {
    let out = experiments::sensitivity(&Config::load(config)?)?;
    let r = &out.report;
    println!("base mIoU {:.4}", r.base_miou);
    println!("group    replaced_miou  delta     share     conflict");
    for (i, name) in ["shallow", "deep", "head"].iter().enumerate() {
        println!("{name:<8} {:<14.4} {:<9.4} {:<9.4} {:.6e}", r.replaced_miou[i], r.delta[i], r.shares[i], out.conflict[i]);
    }
    if r.degenerate {
        println!("all deltas are zero; shares undefined");
    }
    Ok(())
}

fn recover_bench(config: &Path) -> Result<()> {
    let b = experiments::recover_bench(&Config::load(config)?)?;
    println!("pre-degradation mIoU {:.4}, degraded {:.4}, target {:.4}", b.pre_degradation_miou, b.degraded_miou, b.target);
    println!("method      epochs  reached  start_miou  final_miou");
    for (name, m) in [("rkr", b.rkr), ("warm_start", b.warm_start), ("retrain", b.retrain)] {
        println!("{name:<11} {:<7} {:<8} {:<11.4} {:.4}", m.epochs, m.reached, m.start_miou, m.final_miou);
    }
    Ok(())
}

fn sweep(config: &Path, param: &str, values: &str) -> Result<()> {
    let param = SweepParam::parse(param)
        .ok_or_else(|| Error::Config(format!("unknown sweep parameter `{param}` (expected beta, buffers or tau)")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().replace('/', ",")).collect();
    let points = experiments::sweep(&Config::load(config)?, param, &values)?;
    println!("value       final_miou  triggers  forgetting");
    for p in points {
        println!("{:<11} {:<11.4} {:<9} {:.4}", p.value, p.final_miou, p.triggers, p.mean_forgetting);
    }
    Ok(())
}

fn gradcheck(seeds: u64) -> Result<bool> {
    let mut ok = true;
    for seed in 0..seeds {
        let report = experiments::autodiff_check(seed, 5, 6)?;
        println!("seed {seed}: max relative error {:.3e} ({})", report.max_rel_error, if report.passed { "pass" } else { "FAIL" });
        ok &= report.passed;
    }
    println!("tolerance {GRADCHECK_TOLERANCE:e}");
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Run { config, out } => run(out, config).map(|()| true),
        Command::Sensitivity { config } => sensitivity(config).map(|()| true),
        Command::RecoverBench { config } => recover_bench(config).map(|()| true),
        Command::Sweep { config, param, values } => sweep(config, param, values).map(|()| true),
        Command::Gradcheck { seeds } => gradcheck(*seeds),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
