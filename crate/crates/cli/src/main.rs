use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nct_core::etf::{EtfTerminus, FrameKind};
use nct_core::experiment::{ExperimentConfig, ExperimentError};
use nct_core::metrics;
use nct_core::oracle::{self, OracleError, OracleLoss, OracleProblem, SolverConfig};
use serde_json::json;

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (interface revision 1)");

#[derive(Parser)]
#[command(name = "nct", version = VERSION, about = "Incremental learning against a fixed neural-collapse terminus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train through every session of a configured stream and write metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `out_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Root seed (overrides `seed` in the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the session plan a config would produce, as JSON.
    Plan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build a terminus and print it, or its geometry check with --verify.
    Etf {
        #[arg(long)]
        d: usize,
        #[arg(long = "K")]
        k: usize,
        #[arg(long, default_value = "etf")]
        kind: FrameKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        verify: bool,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Optimize free features against the terminus and report residuals.
    Oracle {
        #[arg(long = "K")]
        k: usize,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value = "align")]
        loss: OracleLoss,
        /// Per-class sample counts, comma separated (one value broadcasts).
        #[arg(long, value_delimiter = ',', default_values_t = [10usize])]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        sessions: usize,
        /// Residual tolerance; defaults to 1e-4 (align) or 1e-2 (ce).
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Recompute diagnostics from a labeled feature dump.
    Metrics {
        #[arg(long)]
        features: PathBuf,
        /// Terminus file for the cosine statistics.
        #[arg(long)]
        terminus: Option<PathBuf>,
    },
}

struct Failure {
    code: &'static str,
    exit: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: "usage", exit: 1, message: message.into() }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Self { code: e.code(), exit: e.exit_code() as u8, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            emit(&e.to_string());
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("ERROR usage: {e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("ERROR {}: {}", f.code, f.message);
            ExitCode::from(f.exit)
        }
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) ends output quietly.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let dir = out
                .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
                .ok_or_else(|| Failure::usage("no output directory: pass --out or set out_dir"))?;
            let result = nct_core::run_experiment(&cfg)?;
            result.write_outputs(&dir)?;
            emit(&format!(
                "A={:.6} PD={:.6} sessions={}\n",
                result.report.average_accuracy,
                result.report.performance_drop,
                result.sessions.len()
            ));
            if !result.report.violations.is_empty() {
                return Err(Failure { code: "invariant", exit: 2, message: result.report.violations.join("; ") });
            }
            Ok(())
        }
        Command::Plan { config, seed } => {
            let cfg = load_config(&config, seed)?;
            emit(&format!("{}\n", cfg.build_plan()?.to_json()));
            Ok(())
        }
        Command::Etf { d, k, kind, seed, verify, tol } => {
            let t = EtfTerminus::build(d, k, kind, seed).map_err(|e| Failure::usage(e.to_string()))?;
            if verify {
                let r = t.verify_geometry(tol);
                emit(&format!("{}\n", serde_json::to_string(&r).expect("report serializes")));
            } else {
                emit(&t.to_text());
            }
            Ok(())
        }
        Command::Oracle { k, d, loss, counts, seed, sessions, tol } => {
            let counts = match counts.as_slice() {
                [n] => vec![*n; k],
                list if list.len() == k => list.to_vec(),
                list => return Err(Failure::usage(format!("--counts has {} entries for K={k}", list.len()))),
            };
            let terminus =
                EtfTerminus::build(d, k, FrameKind::SimplexEtf, seed).map_err(|e| Failure::usage(e.to_string()))?;
            let problem = OracleProblem::split_evenly(terminus, counts, sessions, loss)
                .map_err(|e| Failure::usage(e.to_string()))?;
            let cfg = SolverConfig { seed, ..SolverConfig::default() };
            let solution = match oracle::solve(&problem, &cfg) {
                Ok(s) => s,
                Err(OracleError::NotConverged(s)) => *s,
                Err(e) => return Err(Failure::usage(e.to_string())),
            };
            let tol = tol.unwrap_or(match loss {
                OracleLoss::CrossEntropy => 1e-2,
                OracleLoss::Misalignment => 1e-4,
            });
            let check = oracle::check_nc_terminus(&solution.features, &problem.terminus, tol);
            let out = json!({
                "residual_norm": check.residual_norm,
                "residual_align": check.residual_align,
                "residual_cross": check.residual_cross,
                "pass": check.pass,
                "tol": tol,
                "convergence": solution.report,
            });
            emit(&format!("{}\n", serde_json::to_string_pretty(&out).expect("report serializes")));
            Ok(())
        }
        Command::Metrics { features, terminus } => {
            let read = |p: &PathBuf| {
                std::fs::read_to_string(p).map_err(|e| Failure::usage(format!("cannot read {}: {e}", p.display())))
            };
            let (feats, labels) =
                metrics::parse_feature_dump(&read(&features)?).map_err(|e| Failure::usage(e.to_string()))?;
            let feats: Vec<Vec<f64>> =
                feats.iter().map(|f| nct_core::linalg::normalized(f, 1e-12).unwrap_or_else(|| f.clone())).collect();
            let mut scope: Vec<usize> = labels.clone();
            scope.sort_unstable();
            scope.dedup();
            let trace = metrics::trace_ratio(&feats, &labels, &scope).ok();
            let (cross, own) = match terminus {
                Some(p) => {
                    let t = EtfTerminus::from_text(&read(&p)?).map_err(|e| Failure::usage(e.to_string()))?;
                    let protos = |c: usize| t.prototype(c).ok();
                    (
                        metrics::nc_cross_cos(&feats, &labels, protos, &scope).ok(),
                        metrics::nc_self_cos(&feats, &labels, protos, &scope).ok(),
                    )
                }
                None => (None, None),
            };
            let out = json!({
                "samples": feats.len(),
                "classes": scope.len(),
                "avg_cross_cos": cross,
                "avg_self_cos": own,
                "trace_ratio": trace,
            });
            emit(&format!("{}\n", serde_json::to_string_pretty(&out).expect("report serializes")));
            Ok(())
        }
    }
}
