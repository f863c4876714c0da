use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ba_core::harness::{self, HarnessError, Report, Scenario};
use ba_core::params::{desk_params, ParamOverrides, ProtocolParams};

#[derive(Parser)]
#[command(name = "baxsim", version, about = "Byzantine agreement experiment runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file and write its report.
    Run {
        scenario: PathBuf,
        /// Output directory.
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
        /// Override the scenario's seed base.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of trials.
        #[arg(long)]
        trials: Option<usize>,
        /// Whether the adversary sees honest traffic metadata.
        #[arg(long)]
        show_metadata: Option<bool>,
        /// Write one trace file per trial.
        #[arg(long)]
        trace: bool,
    },
    /// Recompute report numbers from the trace files in a report directory.
    VerifyTraces { dir: PathBuf },
    /// Fit the growth exponent of max honest bits across report directories.
    CompareScaling {
        dirs: Vec<PathBuf>,
        /// Also write the merged table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the desk parameter record for `n`.
    PrintParams {
        #[arg(short)]
        n: Option<usize>,
        /// Parameter file (`key = value` lines, including `n`).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides as `key=value`.
        #[arg(long = "set")]
        sets: Vec<String>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Params(#[from] ba_core::params::ParamsError),
    #[error("{0}")]
    Usage(String),
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool, CliError> {
    match cli.cmd {
        Cmd::Run {
            scenario,
            out,
            seed,
            trials,
            show_metadata,
            trace,
        } => {
            let mut sc = Scenario::load(&scenario)?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            if let Some(t) = trials {
                sc.trials = t;
            }
            if let Some(m) = show_metadata {
                sc.output.show_metadata = m;
            }
            sc.output.trace |= trace;
            let report = harness::run(&sc, Some(&out))?;
            report.write(&out)?;
            let a = &report.aggregate;
            println!(
                "{}: {} trials, {} successes, mean agreement {:.4}, validity violations {}, mean max bits {:.1}",
                sc.name, a.trials, a.successes, a.mean_agreement, a.validity_violations, a.mean_max_honest_bits
            );
            if let Some(g) = &report.growth {
                println!("growth exponent {:.3} ({})", g.exponent, g.caveat);
            }
            println!("report written to {}", out.display());
            Ok(true)
        }
        Cmd::VerifyTraces { dir } => {
            let v = harness::verify_traces(&dir)?;
            for m in &v.mismatches {
                println!("MISMATCH {m}");
            }
            println!(
                "{} trials, {} trace lines checked, {} mismatches",
                v.trials_checked,
                v.lines,
                v.mismatches.len()
            );
            Ok(v.ok())
        }
        Cmd::CompareScaling { dirs, csv } => {
            let reports = dirs.iter().map(|d| Report::read(d)).collect::<Result<Vec<_>, _>>()?;
            let rows = harness::merge_scaling(&reports);
            let g = harness::compare_scaling(&rows)?;
            println!("n,mean_max_honest_bits");
            for (n, b) in &g.points {
                println!("{n},{b}");
            }
            println!("growth exponent {:.3}", g.exponent);
            println!("note: {}", g.caveat);
            if let Some(path) = csv {
                let merged = Report {
                    scaling: rows,
                    ..reports[0].clone()
                };
                std::fs::write(&path, merged.scaling_csv()).map_err(|source| HarnessError::Io { path, source })?;
            }
            Ok(true)
        }
        Cmd::PrintParams { n, config, sets } => {
            let p = print_params(n, config, &sets)?;
            print!("{p}");
            Ok(true)
        }
    }
}

fn print_params(n: Option<usize>, config: Option<PathBuf>, sets: &[String]) -> Result<ProtocolParams, CliError> {
    let mut text = match config {
        Some(path) => std::fs::read_to_string(&path).map_err(|source| HarnessError::Io { path, source })?,
        None => String::new(),
    };
    if let Some(n) = n {
        text.push_str(&format!("\nn = {n}\n"));
    }
    for s in sets {
        if !s.contains('=') {
            return Err(CliError::Usage(format!("`--set {s}`: expected key=value")));
        }
        text.push_str(s);
        text.push('\n');
    }
    if text.trim().is_empty() {
        return Ok(desk_params(64, &ParamOverrides::default())?);
    }
    Ok(ProtocolParams::from_kv_str(&text)?)
}
