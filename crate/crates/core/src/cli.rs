//! The `gu` command line.
//!
//! Exit codes: 0 when the requested work completed cleanly, 1 when an
//! episode failed or an audit/selftest found violations, 2 for usage and
//! configuration errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::{EpisodeConfig, Variant};
use crate::error::{GuError, Result};
use crate::harness::{build_problem, compare_variants, run_episode_on, theory_audit, AuditTolerances};
use crate::selftest::run_selftest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "gu", version, about = "Metric-aware forget/retain gradient disentanglement simulator")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Output directory (created if absent).
    #[arg(long, global = true, env = "GU_OUT_DIR", default_value = "./out")]
    pub out: PathBuf,

    /// Overrides task.seed from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for sweep (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Suppress progress output.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Path to a key=value config file.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one episode and write its per-step CSV.
    Run(ConfigArg),
    /// Run a theory-form episode and audit it against the closed-form predictions.
    Audit(ConfigArg),
    /// Run every variant in compare.variants on the same task.
    Compare(ConfigArg),
    /// Run the comparison at every point of the sweep.* grid.
    Sweep(ConfigArg),
    /// Run the built-in oracle and finite-difference checks.
    Selftest,
}

struct Context {
    out: PathBuf,
    seed: Option<u64>,
    jobs: Option<usize>,
    quiet: bool,
}

impl Context {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn load(&self, path: &Path) -> Result<EpisodeConfig> {
        let mut cfg = EpisodeConfig::from_file(path)?;
        if let Some(s) = self.seed {
            cfg.task.seed = s;
        }
        Ok(cfg)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out)?;
        let path = self.out.join(name);
        std::fs::write(&path, contents)?;
        Ok(path)
    }
}

fn cmd_run(ctx: &Context, cfg: &EpisodeConfig) -> Result<i32> {
    let problem = build_problem(cfg)?;
    let record = run_episode_on(cfg, &problem)?;
    let path = ctx.write(&format!("episode_{}_seed{}.csv", cfg.variant, cfg.task.seed), &record.to_csv())?;
    ctx.say(format!(
        "{}: {} steps, dL_f={:.6e}, dL_r={:.6e} -> {}",
        cfg.variant,
        record.steps.len(),
        record.summary.delta_forget,
        record.summary.delta_retain,
        path.display()
    ));
    if let crate::harness::EpisodeStatus::Failed { step, message } = &record.status {
        eprintln!("episode failed at step {step}: {message}");
        return Ok(EXIT_VIOLATION);
    }
    Ok(EXIT_OK)
}

fn cmd_audit(ctx: &Context, cfg: &EpisodeConfig) -> Result<i32> {
    if cfg.variant != Variant::SplitTheoryStep {
        return Err(GuError::AuditUndefined(format!(
            "episode.variant must be {} for an audit, got {}",
            Variant::SplitTheoryStep,
            cfg.variant
        )));
    }
    let problem = build_problem(cfg)?;
    let record = run_episode_on(cfg, &problem)?;
    ctx.write(&format!("episode_{}_seed{}.csv", cfg.variant, cfg.task.seed), &record.to_csv())?;
    let report = theory_audit(&record, problem.retain.as_ref(), &AuditTolerances::from_config(cfg))?;
    let comment = format!(
        "gu audit seed={} steps={} violations={}",
        cfg.task.seed,
        record.steps.len(),
        report.total_violations()
    );
    let path = ctx.write(&format!("audit_seed{}.csv", cfg.task.seed), &report.to_csv(&comment))?;
    for c in &report.checks {
        ctx.say(format!(
            "{}: {} evaluated, {} violations, worst {:.3e}",
            c.name, c.evaluated, c.violations, c.worst_error
        ));
    }
    ctx.say(format!("audit report -> {}", path.display()));
    Ok(if report.passed() && record.completed() { EXIT_OK } else { EXIT_VIOLATION })
}

fn compare_comment(cfg: &EpisodeConfig) -> String {
    format!(
        "gu compare seed={} overlap={} kappa={} tau={} alpha={} beta={} rho={} steps={}",
        cfg.task.seed, cfg.task.overlap, cfg.gu.kappa, cfg.gu.tau, cfg.gu.alpha, cfg.gu.beta, cfg.gu.rho, cfg.steps
    )
}

fn cmd_compare(ctx: &Context, cfg: &EpisodeConfig) -> Result<i32> {
    let table = compare_variants(cfg, &cfg.compare_variants)?;
    let path = ctx.write(&format!("compare_seed{}.csv", cfg.task.seed), &table.to_csv(&compare_comment(cfg)))?;
    for r in &table.rows {
        ctx.say(format!(
            "{}: dL_f={:.6e} dL_r={:.6e} mean entanglement={:.6e}",
            r.variant, r.delta_forget, r.delta_retain, r.mean_entanglement
        ));
    }
    ctx.say(format!("comparison -> {}", path.display()));
    Ok(if table.rows.iter().all(|r| r.completed) { EXIT_OK } else { EXIT_VIOLATION })
}

fn cmd_sweep(ctx: &Context, cfg: &EpisodeConfig) -> Result<i32> {
    let points = cfg.sweep_points();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = ctx.jobs {
        builder = builder.num_threads(j.max(1));
    }
    let pool = builder.build().map_err(|e| GuError::Config(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<Result<bool>> = pool.install(|| {
        points
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let table = compare_variants(p, &p.compare_variants)?;
                ctx.write(&format!("sweep_{i:04}.csv"), &table.to_csv(&compare_comment(p)))?;
                Ok(table.rows.iter().all(|r| r.completed))
            })
            .collect()
    });
    let mut clean = true;
    for o in outcomes {
        clean &= o?;
    }
    ctx.say(format!("sweep: {} grid points -> {}", points.len(), ctx.out.display()));
    Ok(if clean { EXIT_OK } else { EXIT_VIOLATION })
}

fn dispatch(cli: Cli) -> Result<i32> {
    let ctx = Context { out: cli.out, seed: cli.seed, jobs: cli.jobs, quiet: cli.quiet };
    match cli.command {
        Command::Run(a) => cmd_run(&ctx, &ctx.load(&a.config)?),
        Command::Audit(a) => cmd_audit(&ctx, &ctx.load(&a.config)?),
        Command::Compare(a) => cmd_compare(&ctx, &ctx.load(&a.config)?),
        Command::Sweep(a) => cmd_sweep(&ctx, &ctx.load(&a.config)?),
        Command::Selftest => {
            let report = run_selftest();
            if !ctx.quiet {
                print!("{}", report.render());
            }
            Ok(if report.passed() { EXIT_OK } else { EXIT_VIOLATION })
        }
    }
}

/// Parses `argv` (including the program name), runs the command, and returns the exit status.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("run `gu --help` for usage");
            EXIT_USAGE
        }
    }
}
