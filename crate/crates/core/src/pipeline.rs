//! File-to-file pipeline stages. `run_pipeline` chains the same stage
//! functions the `label`, `analyze` and `rank` commands call, through the
//! same files, so its outputs equal a manual chain byte for byte.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::analyzer::{self, AnalyzeError, CostModel};
use crate::clustering::ClusterError;
use crate::generator::GeneratorError;
use crate::ingest::{self, IngestError};
use crate::labeler::{self, LabelOptions, LabelSummary};
use crate::ranker::{self, RankError, Ranking};
use crate::rulebook::{self, RulebookError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Rules(#[from] RulebookError),
    #[error(transparent)]
    Analyze(#[from] AnalyzeError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Generate(#[from] GeneratorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit status: 1 for I/O and parse failures, 2 for validation
    /// failures.
    pub fn exit_code(&self) -> i32 {
        const INPUT: i32 = 1;
        const VALIDATION: i32 = 2;
        fn ingest(e: &IngestError) -> i32 {
            if e.is_validation() {
                VALIDATION
            } else {
                INPUT
            }
        }
        match self {
            PipelineError::Ingest(e) => ingest(e),
            PipelineError::Rules(RulebookError::Io { .. }) => INPUT,
            PipelineError::Rules(_) => VALIDATION,
            PipelineError::Analyze(AnalyzeError::Ingest(e)) => ingest(e),
            PipelineError::Analyze(_) => VALIDATION,
            PipelineError::Rank(RankError::Ingest(e)) => ingest(e),
            PipelineError::Rank(RankError::Cluster(_)) => VALIDATION,
            PipelineError::Rank(_) => VALIDATION,
            PipelineError::Generate(GeneratorError::InvalidSpec(_)) => VALIDATION,
            PipelineError::Generate(GeneratorError::Ingest(e)) => ingest(e),
            PipelineError::Generate(GeneratorError::Io { .. }) => INPUT,
            PipelineError::Config(_) => VALIDATION,
            PipelineError::Io { .. } => INPUT,
        }
    }
}

impl From<ClusterError> for PipelineError {
    fn from(e: ClusterError) -> Self {
        PipelineError::Rank(RankError::Cluster(e))
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn write_file(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let mut out = ingest::create_output(path)?;
    write(&mut out)?;
    out.flush().map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, Default)]
pub struct LabelArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    pub rules: Option<PathBuf>,
    pub logs_dir: Option<PathBuf>,
    pub options: LabelOptions,
}

pub fn label_stage(args: &LabelArgs) -> Result<LabelSummary> {
    if args.options.workers == 0 {
        return Err(PipelineError::Config("worker count must be >= 1".into()));
    }
    let rb = rulebook::load_rules(args.rules.as_deref())?;
    let jobs = ingest::parse_jobs(&args.input, args.logs_dir.as_deref())?;
    let (labeled, summary) = labeler::label_dataset(jobs, &rb, args.options);
    write_file(&args.output, |out| {
        ingest::write_rows(out, &labeled.rows).map_err(Into::into)
    })?;
    Ok(summary)
}

#[derive(Debug, Clone, Default)]
pub struct AnalyzeArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    pub evolution: Option<PathBuf>,
    pub cost: CostModel,
}

/// Returns the number of categories written.
pub fn analyze_stage(args: &AnalyzeArgs) -> Result<usize> {
    let labeled = ingest::parse_labeled(&args.input)?;
    let rfm = analyzer::compute_rfm(&labeled.rows, &args.cost)?;
    write_file(&args.output, |out| {
        analyzer::write_rfm(out, &rfm).map_err(Into::into)
    })?;
    if let Some(path) = &args.evolution {
        let ev = analyzer::compute_evolution(&labeled.rows);
        write_file(path, |out| {
            analyzer::write_evolution(out, &ev).map_err(Into::into)
        })?;
    }
    Ok(rfm.len())
}

#[derive(Debug, Clone)]
pub struct RankArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    pub k: Option<usize>,
    pub seed: u64,
    pub dump_model: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// Evolution table to include in the report.
    pub evolution: Option<PathBuf>,
}

impl Default for RankArgs {
    fn default() -> Self {
        RankArgs {
            input: PathBuf::new(),
            output: PathBuf::new(),
            k: None,
            seed: 42,
            dump_model: None,
            report: None,
            evolution: None,
        }
    }
}

pub fn rank_stage(args: &RankArgs) -> Result<Ranking> {
    let rfm = analyzer::read_rfm(ingest::open_input(&args.input)?)?;
    let ranking = ranker::rank_categories(&rfm, args.k, args.seed)?;
    write_file(&args.output, |out| {
        ranker::write_ranked(out, &ranking.categories).map_err(Into::into)
    })?;
    if let Some(path) = &args.dump_model {
        let json = serde_json::to_string_pretty(&ranking.model).expect("model serializes");
        write_file(path, |out| {
            writeln!(out, "{json}").map_err(|source| PipelineError::Io {
                path: path.display().to_string(),
                source,
            })
        })?;
    }
    if let Some(path) = &args.report {
        let evolution = match &args.evolution {
            Some(p) => Some(analyzer::read_evolution(ingest::open_input(p)?)?),
            None => None,
        };
        let text = ranker::render_report(&ranking.categories, evolution.as_deref());
        write_file(path, |out| {
            out.write_all(text.as_bytes())
                .map_err(|source| PipelineError::Io {
                    path: path.display().to_string(),
                    source,
                })
        })?;
    }
    Ok(ranking)
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub input: PathBuf,
    pub out_dir: PathBuf,
    pub rules: Option<PathBuf>,
    pub logs_dir: Option<PathBuf>,
    pub cost: CostModel,
    pub k: Option<usize>,
    pub seed: u64,
    pub label: LabelOptions,
}

impl RunConfig {
    pub fn new(input: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            input: input.into(),
            out_dir: out_dir.into(),
            rules: None,
            logs_dir: None,
            cost: CostModel::default(),
            k: None,
            seed: 42,
            label: LabelOptions::default(),
        }
    }
}

/// Output file names inside the run directory.
pub const LABELED_FILE: &str = "labeled.csv";
pub const RFM_FILE: &str = "rfm.csv";
pub const EVOLUTION_FILE: &str = "evolution.csv";
pub const RANKED_FILE: &str = "ranked.csv";
pub const REPORT_FILE: &str = "report.md";

#[derive(Debug)]
pub struct RunSummary {
    pub label: LabelSummary,
    pub n_categories: usize,
    pub ranking: Ranking,
}

/// `label`, then `analyze`, then `rank`, writing every table into
/// `out_dir`. Files from stages that finished are left in place when a
/// later stage fails.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    fs::create_dir_all(&cfg.out_dir).map_err(|source| PipelineError::Io {
        path: cfg.out_dir.display().to_string(),
        source,
    })?;
    let path = |name: &str| cfg.out_dir.join(name);
    let mut done: Vec<&str> = Vec::new();
    let warn_partial = |done: &[&str], e: &PipelineError| {
        if !done.is_empty() {
            log::warn!(
                "pipeline stopped ({e}); kept outputs of completed stages: {}",
                done.join(", ")
            );
        }
    };

    let label = label_stage(&LabelArgs {
        input: cfg.input.clone(),
        output: path(LABELED_FILE),
        rules: cfg.rules.clone(),
        logs_dir: cfg.logs_dir.clone(),
        options: cfg.label,
    })?;
    done.push(LABELED_FILE);

    let n_categories = analyze_stage(&AnalyzeArgs {
        input: path(LABELED_FILE),
        output: path(RFM_FILE),
        evolution: Some(path(EVOLUTION_FILE)),
        cost: cfg.cost,
    })
    .inspect_err(|e| warn_partial(&done, e))?;
    done.extend([RFM_FILE, EVOLUTION_FILE]);

    let ranking = rank_stage(&RankArgs {
        input: path(RFM_FILE),
        output: path(RANKED_FILE),
        k: cfg.k,
        seed: cfg.seed,
        dump_model: None,
        report: Some(path(REPORT_FILE)),
        evolution: Some(path(EVOLUTION_FILE)),
    })
    .inspect_err(|e| warn_partial(&done, e))?;

    Ok(RunSummary {
        label,
        n_categories,
        ranking,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_split_input_from_validation() {
        let io = PipelineError::Ingest(IngestError::MissingColumn("id".into()));
        assert_eq!(io.exit_code(), 1);
        let dup = PipelineError::Ingest(IngestError::DuplicateId { row: 2, id: 7 });
        assert_eq!(dup.exit_code(), 2);
        let k = PipelineError::from(ClusterError::KTooLarge { k: 3, n: 2 });
        assert_eq!(k.exit_code(), 2);
        let nested = PipelineError::Analyze(AnalyzeError::Ingest(IngestError::MissingLogFile(4)));
        assert_eq!(nested.exit_code(), 1);
    }

    #[test]
    fn zero_workers_rejected_before_reading() {
        let args = LabelArgs {
            input: "/nonexistent".into(),
            output: "/nonexistent/out".into(),
            options: LabelOptions {
                workers: 0,
                max_log_bytes: None,
            },
            ..LabelArgs::default()
        };
        assert_eq!(label_stage(&args).unwrap_err().exit_code(), 2);
    }
}
