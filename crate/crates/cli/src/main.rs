use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use visionscale_core::corpus::{build_synthetic_corpus, load_manifest, save_manifest};
use visionscale_core::eval::ProtocolKind;
use visionscale_core::harness::{
    emit_report, fit_from_ledger, load_fits, run_grid, save_fits, FitEntry, GridConfig, RunLedger,
    RunOptions,
};
use visionscale_core::scaling::{clamp_pct, FitOptions};
use visionscale_core::scenarios::{
    builtin_table1, evaluate_scenario, is_human_level, load_scenarios_csv, write_outcomes_csv,
    GroupedOutcome,
};
use visionscale_core::{Error, MixtureSpec, Result};

#[derive(Parser)]
#[command(
    name = "visionscale",
    version,
    about = "Desk-scale MAE data/resolution scaling experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic labeled corpus on disk.
    GenerateCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        images: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        side: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Run (or resume) an experiment grid, appending to a JSONL ledger.
    RunGrid {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Stop after this many new cells (simulates an interrupted run).
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Fit one law per (model size, protocol) group of a ledger.
    Fit {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate fitted laws at a data amount and resolution.
    Predict {
        #[arg(long)]
        fits: PathBuf,
        /// Data amount in thousands of images.
        #[arg(long)]
        i: f64,
        #[arg(long)]
        ppi: f64,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        protocol: Option<ProtocolKind>,
    },
    /// Evaluate fitted laws on scenario rows.
    Scenario {
        #[arg(long)]
        fits: PathBuf,
        #[command(flatten)]
        source: ScenarioSource,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write points, fits, charts and scenario predictions to a directory.
    Report {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        fits: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
#[group(multiple = false)]
struct ScenarioSource {
    /// Use the built-in three-row table (the default).
    #[arg(long)]
    table1: bool,
    /// Scenario CSV: label,i_thousands,ppi,param_count,expected_pct
    #[arg(long)]
    file: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::LedgerMismatch(_) => 2,
        Error::Identifiability(_) => 3,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Format { .. } => 4,
        Error::Numeric(_) | Error::NonFiniteLoss { .. } => 1,
    }
}

fn select<'a>(
    fits: &'a [FitEntry],
    model: Option<&str>,
    protocol: Option<ProtocolKind>,
) -> Result<Vec<&'a FitEntry>> {
    let chosen: Vec<_> = fits
        .iter()
        .filter(|f| model.map_or(true, |m| f.model == m))
        .filter(|f| protocol.map_or(true, |p| f.protocol == Some(p)))
        .collect();
    if chosen.is_empty() {
        let have: Vec<_> = fits.iter().map(FitEntry::group_label).collect();
        return Err(Error::Config(format!(
            "no fit matches the selection; available: {}",
            have.join(", ")
        )));
    }
    Ok(chosen)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateCorpus {
            out,
            images,
            classes,
            side,
            seed,
        } => {
            let m = build_synthetic_corpus(images, &MixtureSpec::standard(), classes, side, seed)?;
            save_manifest(&m, &out)?;
            let counts: Vec<String> = m
                .source_counts()
                .iter()
                .map(|(s, n)| format!("{s}={n}"))
                .collect();
            println!(
                "wrote {} images ({}) to {}",
                m.len(),
                counts.join(" "),
                out.display()
            );
        }
        Command::RunGrid {
            corpus,
            config,
            ledger,
            workers,
            stop_after,
        } => {
            let config = GridConfig::load(&config)?;
            let manifest = load_manifest(&corpus)?;
            let s = run_grid(
                &config,
                &manifest,
                &ledger,
                &RunOptions {
                    workers,
                    stop_after,
                },
            )?;
            let failed = s.ledger.results.len() - s.ledger.ok_count();
            println!(
                "executed {} cells, skipped {} already in the ledger; {} ok, {} failed",
                s.executed,
                s.skipped,
                s.ledger.ok_count(),
                failed
            );
        }
        Command::Fit { ledger, out } => {
            let ledger = RunLedger::load(&ledger)?;
            let report = fit_from_ledger(&ledger, &FitOptions::default());
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            if report.fits.is_empty() {
                return Err(Error::Identifiability(format!(
                    "no group could be fitted ({})",
                    report.warnings.join("; ")
                )));
            }
            save_fits(&report.fits, &out)?;
            for f in &report.fits {
                let p = f.fit.params;
                println!(
                    "{}: c={:.6} a={:.6} b={:.6} rmse={:.4} n={}",
                    f.group_label(),
                    p.c,
                    p.a,
                    p.b,
                    f.fit.rmse,
                    f.fit.n_points
                );
            }
        }
        Command::Predict {
            fits,
            i,
            ppi,
            model,
            protocol,
        } => {
            let fits = load_fits(&fits)?;
            for f in select(&fits, model.as_deref(), protocol)? {
                let predicted = f.fit.predict(i, ppi)?;
                let line = json!({
                    "model": f.model,
                    "protocol": f.protocol,
                    "i": i,
                    "ppi": ppi,
                    "predicted_pct": predicted,
                    "clamped_pct": clamp_pct(predicted),
                    "human_level": is_human_level(predicted),
                });
                println!("{line}");
            }
        }
        Command::Scenario { fits, source, out } => {
            let fits = load_fits(&fits)?;
            let specs = match source.file {
                Some(path) => load_scenarios_csv(&path)?,
                None => builtin_table1(),
            };
            let mut rows = Vec::new();
            for f in &fits {
                for spec in &specs {
                    rows.push(GroupedOutcome {
                        model: f.model.clone(),
                        protocol: f.protocol.map(|p| p.to_string()).unwrap_or_default(),
                        outcome: evaluate_scenario(&f.fit.params, spec)?,
                    });
                }
            }
            write_outcomes_csv(&rows, File::create(&out)?)?;
            println!("wrote {} scenario rows to {}", rows.len(), out.display());
        }
        Command::Report { ledger, fits, out } => {
            let ledger = RunLedger::load(&ledger)?;
            let fits = load_fits(&fits)?;
            let files = emit_report(&ledger, &fits, &builtin_table1(), &out)?;
            println!("{}", files.points_csv.display());
            println!("{}", files.fits_json.display());
            for c in &files.charts {
                println!("{}", c.display());
            }
            println!("{}", files.scenarios_csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
