//! `slora`: configure, run and record the sensitivity-LoRA pipeline.
//!
//! Each invocation runs one command against one TOML config and writes its
//! artifacts into a fresh content-addressed directory under the output root.

pub mod config;
pub mod error;
pub mod output;
pub mod pipeline;
pub mod report;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{ConfigError, RunConfig, Scope};
pub use error::CliError;
pub use report::{Command, RunReport};

#[derive(Debug, Parser)]
#[command(name = "slora", version, about = "Hessian-sensitivity LoRA rank allocation at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Estimate the Hessian diagonal of every weight matrix.
    Probe(RunArgs),
    /// Probe, score and allocate LoRA ranks.
    Allocate(RunArgs),
    /// Fine-tune under several allocation strategies and seeds.
    Compare(RunArgs),
    /// Kendall-τ stability of the sensitivity ordering.
    Robustness(RunArgs),
    /// Probe through evaluation in one run.
    E2e(RunArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML config; omitted means all defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output root, overriding `output.dir`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Global seed, overriding `seed`.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Strip timestamps and timings from report.json.
    #[arg(long)]
    pub normalize_report: bool,
}

impl CliCommand {
    pub fn split(&self) -> (Command, &RunArgs) {
        match self {
            CliCommand::Probe(a) => (Command::Probe, a),
            CliCommand::Allocate(a) => (Command::Allocate, a),
            CliCommand::Compare(a) => (Command::Compare, a),
            CliCommand::Robustness(a) => (Command::Robustness, a),
            CliCommand::E2e(a) => (Command::E2e, a),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub dir: PathBuf,
    pub files: Vec<String>,
    pub report: RunReport,
}

/// The config a run actually uses: file (or defaults) plus flag overrides.
pub fn effective_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

pub fn execute(command: Command, args: &RunArgs) -> Result<Outcome, CliError> {
    let cfg = effective_config(args)?;
    let mut report = pipeline::run(command, &cfg)?;
    if args.normalize_report {
        report.normalize();
    }
    let dir = output::create_run_dir(Path::new(&cfg.output.dir), command, &cfg)?;
    let files = output::write_artifacts(&dir, &report)?;
    Ok(Outcome { dir, files, report })
}

/// Human-readable digest of a finished run.
pub fn summary(o: &Outcome) -> String {
    let r = &o.report;
    let mut s = String::new();
    if let Some(probe) = &r.probe {
        if r.command == Command::Probe {
            let _ = writeln!(s, "{:<12} {:>4} {:>4} {:>14}", "matrix", "d1", "d2", "trace");
            for p in probe {
                let _ = writeln!(s, "{:<12} {:>4} {:>4} {:>14.6e}", p.matrix_id.to_string(), p.d1, p.d2, p.trace);
            }
        }
    }
    if let (Some(sens), Some(a)) = (&r.sensitivity, &r.allocation) {
        let a = &a.allocation;
        let _ = writeln!(s, "{} allocation, r_total {}", a.strategy_used, a.r_total);
        for id in sens.ordering().items() {
            let clamp = if a.is_clamped(id) { " (clamped)" } else { "" };
            let _ = writeln!(s, "  {:<12} theta {:.4}  rank {}{clamp}", id.to_string(), sens.matrices[id].theta, a.ranks[id]);
        }
    }
    if let Some(f) = &r.finetune {
        let _ = writeln!(
            s,
            "train loss {:.6} -> {:.6}, eval loss {:.6}",
            f.initial_train_loss, f.final_train_loss, f.final_eval_loss
        );
    }
    if let Some(t) = &r.comparison {
        let _ = writeln!(s, "r_total {} over {} seeds", t.r_total, r.config.compare.seeds.len());
        for m in &t.summaries {
            let _ = writeln!(s, "  {:<8} eval {:.6} ± {:.6}", m.strategy.to_string(), m.mean_eval_loss, m.std_eval_loss);
        }
    }
    if let Some(rb) = &r.robustness {
        let th = rb.thresholds_met;
        let _ = writeln!(s, "cross-domain min tau {:.4} (met: {})", rb.cross_domain.min_off_diagonal(), th.cross_domain);
        for row in &rb.subset {
            let _ = writeln!(s, "  subset {:<4} tau {:.4}", row.fraction, row.tau);
        }
        for row in &rb.epoch {
            let _ = writeln!(s, "  epoch {:<2} tau {:.4}", row.epoch, row.tau);
        }
        let _ = writeln!(s, "subset met: {}, epoch met: {}", th.subset, th.epoch);
        if let Some(nc) = &rb.negative_control {
            let _ = writeln!(s, "negative control tau {:.4}", nc.min_off_diagonal());
        }
    }
    if let Some(t) = &r.timings_ms {
        if r.command == Command::E2e {
            let _ = writeln!(
                s,
                "total {:.1} ms, probe+metrics+allocate {:.1} ms ({:.2}%)",
                t.total_ms,
                t.analysis_ms(),
                100.0 * t.overhead_fraction()
            );
        } else {
            let _ = writeln!(s, "total {:.1} ms", t.total_ms);
        }
    }
    let _ = writeln!(s, "wrote {}", o.dir.display());
    s
}
