use std::path::PathBuf;
use std::process::ExitCode;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use flakerank_core::analyzer::CostModel;
use flakerank_core::generator::{self, GeneratorSpec};
use flakerank_core::ingest;
use flakerank_core::labeler::LabelOptions;
use flakerank_core::pipeline::{self, PipelineError};
use flakerank_core::rulebook;

/// Label flaky CI job failures, measure the cost of each failure category
/// and rank the categories.
#[derive(Debug, Parser)]
#[command(name = "flakerank", version, propagate_version = true)]
struct Cli {
    /// More diagnostics on stderr (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Mark flaky failures and assign failure categories.
    Label(LabelCmd),
    /// Aggregate flaky failures into per-category recency, frequency and cost.
    Analyze(AnalyzeCmd),
    /// Rank failure categories from their RFM table.
    Rank(RankCmd),
    /// Run label, analyze and rank into one output directory.
    Run(RunCmd),
    /// Inspect the effective rulebook.
    Rules(RulesCmd),
    /// Generate a synthetic jobs corpus with a ground-truth manifest.
    #[command(hide = true)]
    Gen(GenCmd),
}

#[derive(Debug, Args)]
struct LabelFlags {
    /// Rule file replacing the built-in rulebook.
    #[arg(long, env = "FLAKERANK_RULES")]
    rules: Option<PathBuf>,
    /// Directory of `<id>.log` files; these win over the inline logs column.
    #[arg(long, env = "FLAKERANK_LOGS_DIR")]
    logs_dir: Option<PathBuf>,
    /// Worker threads for log matching.
    #[arg(long = "jobs", env = "FLAKERANK_JOBS", default_value_t = 1)]
    workers: usize,
    /// Scan at most this many bytes of each log.
    #[arg(long, env = "FLAKERANK_MAX_LOG_BYTES")]
    max_log_bytes: Option<usize>,
}

impl LabelFlags {
    fn options(&self) -> LabelOptions {
        LabelOptions {
            workers: self.workers,
            max_log_bytes: self.max_log_bytes,
        }
    }
}

#[derive(Debug, Args)]
struct CostFlags {
    /// Cost per hour of failed-job runtime.
    #[arg(long, env = "FLAKERANK_COST_RATE", default_value_t = 1.0)]
    cost_rate: f64,
    /// Fixed cost added per flaky failure.
    #[arg(long, env = "FLAKERANK_DIAGNOSIS_OVERHEAD", default_value_t = 0.0)]
    diagnosis_overhead: f64,
    /// Date recency is measured from (RFC 3339); defaults to the latest job.
    #[arg(long, env = "FLAKERANK_REFERENCE_DATE", value_parser = parse_date)]
    reference_date: Option<DateTime<Utc>>,
}

impl CostFlags {
    fn model(&self) -> CostModel {
        CostModel {
            cost_rate: self.cost_rate,
            diagnosis_overhead: self.diagnosis_overhead,
            reference_date: self.reference_date,
        }
    }
}

#[derive(Debug, Args)]
struct RankFlags {
    /// Number of clusters; chosen by silhouette when omitted.
    #[arg(long, env = "FLAKERANK_K")]
    k: Option<usize>,
    #[arg(long, env = "FLAKERANK_SEED", default_value_t = 42)]
    seed: u64,
}

#[derive(Debug, Args)]
struct LabelCmd {
    /// Jobs CSV ("-" for stdin).
    #[arg(short, long)]
    input: PathBuf,
    /// Labeled CSV ("-" for stdout).
    #[arg(short, long)]
    output: PathBuf,
    #[command(flatten)]
    label: LabelFlags,
}

#[derive(Debug, Args)]
struct AnalyzeCmd {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[command(flatten)]
    cost: CostFlags,
    /// Also write per-month flaky counts here.
    #[arg(long)]
    evolution: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RankCmd {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[command(flatten)]
    rank: RankFlags,
    /// Serialize the clustering model as JSON.
    #[arg(long, hide = true)]
    dump_model: Option<PathBuf>,
    /// Write a markdown report.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Evolution table to chart in the report.
    #[arg(long, requires = "report")]
    evolution: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunCmd {
    #[arg(short, long)]
    input: PathBuf,
    /// Output directory, created if missing.
    #[arg(short, long)]
    output: PathBuf,
    #[command(flatten)]
    label: LabelFlags,
    #[command(flatten)]
    cost: CostFlags,
    #[command(flatten)]
    rank: RankFlags,
}

#[derive(Debug, Args)]
struct RulesCmd {
    /// Print each category with its pattern count.
    #[arg(long)]
    list: bool,
    #[arg(long, env = "FLAKERANK_RULES")]
    rules: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenCmd {
    /// Jobs CSV; the manifest goes next to it.
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 50_000)]
    n_jobs: usize,
    #[arg(long, default_value_t = 0.05)]
    flaky_rate: f64,
    #[arg(long, default_value_t = 180)]
    span_days: u32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn parse_date(raw: &str) -> Result<DateTime<Utc>, String> {
    ingest::parse_timestamp(raw).ok_or_else(|| format!("not an RFC 3339 timestamp: {raw:?}"))
}

fn execute(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Label(cmd) => {
            let summary = pipeline::label_stage(&pipeline::LabelArgs {
                input: cmd.input,
                output: cmd.output,
                rules: cmd.label.rules.clone(),
                logs_dir: cmd.label.logs_dir.clone(),
                options: cmd.label.options(),
            })?;
            eprintln!("{summary}");
        }
        Command::Analyze(cmd) => {
            let n = pipeline::analyze_stage(&pipeline::AnalyzeArgs {
                input: cmd.input,
                output: cmd.output,
                evolution: cmd.evolution,
                cost: cmd.cost.model(),
            })?;
            eprintln!("categories: {n}");
        }
        Command::Rank(cmd) => {
            let ranking = pipeline::rank_stage(&pipeline::RankArgs {
                input: cmd.input,
                output: cmd.output,
                k: cmd.rank.k,
                seed: cmd.rank.seed,
                dump_model: cmd.dump_model,
                report: cmd.report,
                evolution: cmd.evolution,
            })?;
            let k = ranking.model.as_ref().map_or(0, |m| m.k);
            eprintln!("categories: {}, clusters: {k}", ranking.categories.len());
        }
        Command::Run(cmd) => {
            let cfg = pipeline::RunConfig {
                input: cmd.input,
                out_dir: cmd.output,
                rules: cmd.label.rules.clone(),
                logs_dir: cmd.label.logs_dir.clone(),
                cost: cmd.cost.model(),
                k: cmd.rank.k,
                seed: cmd.rank.seed,
                label: cmd.label.options(),
            };
            let summary = pipeline::run_pipeline(&cfg)?;
            eprintln!("{}", summary.label);
            eprintln!("categories: {}", summary.n_categories);
            eprintln!("outputs: {}", cfg.out_dir.display());
        }
        Command::Rules(cmd) => {
            let rb = rulebook::load_rules(cmd.rules.as_deref())?;
            if cmd.list {
                for rule in rb.rules() {
                    println!("{}\t{}", rule.category, rule.patterns.len());
                }
            } else {
                eprintln!(
                    "rulebook {}: {} rules (use --list)",
                    rb.source(),
                    rb.rules().len()
                );
            }
        }
        Command::Gen(cmd) => {
            let spec = GeneratorSpec {
                n_jobs: cmd.n_jobs,
                flaky_rate: cmd.flaky_rate,
                span_days: cmd.span_days,
                seed: cmd.seed,
                ..GeneratorSpec::default()
            };
            let manifest = generator::generate_corpus(&spec, &cmd.output)?;
            eprintln!(
                "jobs: {}, flaky: {}, manifest: {}",
                manifest.n_jobs,
                manifest.n_flaky,
                generator::manifest_path(&cmd.output).display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .target(env_logger::Target::Stderr)
        .init();

    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
