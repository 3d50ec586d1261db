//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::check::{divergence_identity_report, shift_mean_cases};
use super::config::ExperimentConfig;
use super::report::emit_csv;
use super::runner::{run_experiment_with, SeedRun};
use crate::error::{Error, Result};
use crate::metrics::RoundRecord;
use crate::quantization::{payload_size, read_fsq, Codec};

/// Built-in configuration used by `check` when no file is given.
pub const SMOKE_CONFIG: &str = include_str!("../../configs/smoke.toml");

#[derive(Debug, Parser)]
#[command(
    name = "fedshift",
    version,
    about = "Mixed-precision federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment and write `rounds.csv` to the output directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run this single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// `section.key=value`, applied before validation. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Worker threads for client training (0 = all cores).
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Run the live identity checks on the smoke configuration.
    Check {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Describe a `.fsq` payload file.
    InspectPayload { file: PathBuf },
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn cli_main<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out: out_dir,
            overrides,
            parallelism,
        } => cmd_run(&config, seed, out_dir, &overrides, parallelism, out),
        Command::Check { config } => cmd_check(config.as_deref(), out),
        Command::InspectPayload { file } => cmd_inspect(&file, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_run(
    path: &Path,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    overrides: &[String],
    parallelism: Option<usize>,
    out: &mut dyn Write,
) -> Result<()> {
    let mut cfg = ExperimentConfig::load_with_overrides(path, overrides)?;
    if let Some(s) = seed {
        cfg.run.seeds = vec![s];
    }
    if let Some(d) = out_dir {
        cfg.run.output_dir = d;
    }
    if let Some(p) = parallelism {
        cfg.run.parallelism = p;
    }
    let dir = cfg.run.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let resolved = dir.join("config.toml");
    std::fs::write(&resolved, cfg.to_toml_string()?).map_err(|e| Error::io(&resolved, e))?;
    let dump = dir.join("payloads");
    if cfg.run.dump_payloads {
        std::fs::create_dir_all(&dump).map_err(|e| Error::io(&dump, e))?;
    }

    let (runs, failure) =
        match run_experiment_with(&cfg, cfg.run.dump_payloads.then_some(dump.as_path())) {
            Ok(runs) => (runs, None),
            Err((runs, e)) => (runs, Some(e)),
        };
    // Completed rounds are written even when a later round fails.
    write_runs(&cfg, &runs, &dir.join("rounds.csv"))?;
    if let Some(e) = failure {
        return Err(e);
    }
    for r in &runs {
        if let Some(last) = r.records.last() {
            let _ = writeln!(
                out,
                "seed {}: {} rounds, final accuracy {:.4}, test loss {:.4}",
                r.seed,
                r.records.len(),
                last.test_accuracy,
                last.test_loss
            );
        }
    }
    let _ = writeln!(out, "wrote {}", dir.join("rounds.csv").display());
    Ok(())
}

/// Concatenate every seed's records into one CSV.
pub fn write_runs(cfg: &ExperimentConfig, runs: &[SeedRun], path: &Path) -> Result<()> {
    let records: Vec<RoundRecord> = runs
        .iter()
        .flat_map(|r| r.records.iter().cloned())
        .collect();
    let names: Vec<String> = cfg
        .model
        .layer_shapes()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    emit_csv(&records, &names, cfg.model.num_classes, path)
}

fn cmd_check(path: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::from_toml_str(SMOKE_CONFIG)?,
    };
    cfg.federation.shift_enabled = true;

    let eq10 = shift_mean_cases(1000, 0x5eed)?;
    let _ = writeln!(
        out,
        "shifted mean: {}/{} cases within tolerance (worst {:.3e})",
        eq10.cases - eq10.failures,
        eq10.cases,
        eq10.worst
    );

    let runs = run_experiment_with(&cfg, None).map_err(|(_, e)| e)?;
    let records: Vec<RoundRecord> = runs.into_iter().flat_map(|r| r.records).collect();
    let rep = divergence_identity_report(&records);
    let _ = writeln!(
        out,
        "divergence identity: {} layer-rounds, worst residual {:.3e} of tolerance; condition agrees on {}/{}",
        rep.layer_rounds,
        rep.worst_residual_ratio,
        rep.sign_checked - rep.sign_mismatches,
        rep.sign_checked
    );
    if eq10.failures > 0 || rep.worst_residual_ratio > 1.0 || rep.sign_mismatches > 0 {
        return Err(Error::Identity("identity suite failed".into()));
    }
    let _ = writeln!(out, "ok");
    Ok(())
}

fn cmd_inspect(path: &Path, out: &mut dyn Write) -> Result<()> {
    let q = read_fsq(path)?;
    let (weights, aux) = payload_size(&q);
    let _ = writeln!(
        out,
        "scheme {:?}, {} bits, {} layers",
        q.scheme,
        q.bits,
        q.layers.len()
    );
    for l in &q.layers {
        let codec = match &l.codec {
            Codec::Uniform(u) => format!("uniform [{:e}, {:e}]", u.w_min, u.w_max),
            Codec::Kmeans(cb) => format!("kmeans, {} centroids", cb.centroids.len()),
        };
        let _ = writeln!(out, "  {}: {} values, {codec}", l.name, l.len());
    }
    let _ = writeln!(out, "weight bytes {weights}, aux bytes {aux}");
    Ok(())
}
