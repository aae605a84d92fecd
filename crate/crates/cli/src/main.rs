// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qsieve_cli::{Run, RunConfig, StageError};

#[derive(Parser)]
#[command(
    name = "qsieve",
    version,
    about = "Locate-then-analyze pipeline for attention heads"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Layer scan: layer_scan.csv and layer_scan.svg.
    Trace(Common),
    /// Probe every head at the critical layer.
    Sieve(Common),
    /// Head interaction matrix and heatmap.
    Kernel {
        #[command(flatten)]
        common: Common,
        /// One kernel per layer plus coherence_per_layer.csv.
        #[arg(long)]
        all_layers: bool,
    },
    /// Single-head and driver-head ablations at the critical layer.
    Ablate(Common),
    /// Welch t-test and recovery/coherence rank correlation.
    Stats(Common),
    /// Every stage in order, then run_manifest.json.
    RunAll(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Trace(c)
            | Command::Sieve(c)
            | Command::Ablate(c)
            | Command::Stats(c)
            | Command::RunAll(c) => c,
            Command::Kernel { common, .. } => common,
        }
    }
}

fn execute(cmd: &Command) -> Result<(), StageError> {
    let common = cmd.common();
    let mut config = RunConfig::load(&common.config).map_err(|source| StageError {
        stage: "config",
        source,
    })?;
    if let Some(dir) = &common.output_dir {
        config.output_dir = dir.clone();
    }
    let mut run = Run::new(config)?;
    match cmd {
        Command::Trace(_) => {
            let p = run.trace()?;
            println!("critical layer {} (R = {:?})", p.critical_layer, p.scores);
        }
        Command::Sieve(_) => {
            let s = run.sieve()?;
            for r in &s.sieves {
                println!(
                    "layer {} head {}: accuracy {:.3}, selected {:?}",
                    s.layer, r.head_index, r.train_accuracy, r.selected_indices
                );
            }
        }
        Command::Kernel { all_layers, .. } => {
            for k in run.kernel(*all_layers)? {
                println!(
                    "layer {}: coherence {:.4} -> {}",
                    k.layer, k.coherence, k.csv
                );
            }
        }
        Command::Ablate(_) => {
            let a = run.ablate()?;
            for h in &a.per_head {
                println!(
                    "layer {} head {}: drop {:+.6} {:?}",
                    a.layer, h.head, h.drop, h.mechanism
                );
            }
        }
        Command::Stats(_) => {
            let s = run.stats()?;
            println!(
                "t = {:.4}, dof = {:.2}, p = {:.4}, rho = {:.4}",
                s.report.t_statistic,
                s.report.degrees_of_freedom,
                s.report.p_value,
                s.report.spearman_rho
            );
        }
        Command::RunAll(_) => {
            let m = run.run_all()?;
            println!(
                "critical layer {}; {} artifacts; manifest in {}",
                m.critical_layer,
                m.artifacts.len(),
                run.output_dir().display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
