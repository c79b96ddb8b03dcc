//! Flaky-failure detection by rerun analysis, then category assignment.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Utc};
use rayon::prelude::*;

use crate::ingest::{Dataset, JobRecord, JobStatus, LabeledJob};
use crate::rulebook::Rulebook;

/// Category assigned to flaky failures that no rule matches.
pub const UNKNOWN_CATEGORY: &str = "unknown";

/// Reruns of one job: same project, commit and job name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RerunKey<'a> {
    pub project_id: &'a str,
    pub commit_sha: &'a str,
    pub name: &'a str,
}

impl<'a> RerunKey<'a> {
    pub fn of(job: &'a JobRecord) -> Self {
        RerunKey {
            project_id: &job.project_id,
            commit_sha: &job.commit_sha,
            name: &job.name,
        }
    }
}

/// Position of a job within its rerun group. Jobs without `created_at` sort
/// after every timestamped job, by id.
pub fn rerun_order(a: &JobRecord, b: &JobRecord) -> Ordering {
    fn key(j: &JobRecord) -> (bool, Option<DateTime<Utc>>, u64) {
        (j.created_at.is_none(), j.created_at, j.id)
    }
    key(a).cmp(&key(b))
}

/// A success that counts as rerun evidence. Jobs without `created_at` are
/// not eligible.
fn is_success_evidence(job: &JobRecord) -> bool {
    job.status == JobStatus::Success && job.created_at.is_some()
}

#[derive(Debug)]
pub struct RerunGroup<'a> {
    pub key: RerunKey<'a>,
    /// Row indices into the dataset, sorted by [`rerun_order`].
    pub jobs: Vec<usize>,
}

pub fn rerun_groups(jobs: &[JobRecord]) -> Vec<RerunGroup<'_>> {
    let mut index: HashMap<RerunKey<'_>, usize> = HashMap::new();
    let mut groups: Vec<RerunGroup<'_>> = Vec::new();
    for (i, job) in jobs.iter().enumerate() {
        let key = RerunKey::of(job);
        let slot = *index.entry(key.clone()).or_insert_with(|| {
            groups.push(RerunGroup {
                key,
                jobs: Vec::new(),
            });
            groups.len() - 1
        });
        groups[slot].jobs.push(i);
    }
    for g in &mut groups {
        g.jobs.sort_by(|&a, &b| rerun_order(&jobs[a], &jobs[b]));
    }
    groups
}

/// Per-row flaky flag: a failed job is flaky iff a later job in its rerun
/// group succeeded.
pub fn detect_flaky(jobs: &[JobRecord]) -> Vec<bool> {
    let mut flaky = vec![false; jobs.len()];
    for group in rerun_groups(jobs) {
        let mut later_success = false;
        for &i in group.jobs.iter().rev() {
            let job = &jobs[i];
            if job.status == JobStatus::Failed && later_success {
                flaky[i] = true;
            }
            later_success |= is_success_evidence(job);
        }
    }
    flaky
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelSummary {
    pub n_rows: usize,
    pub n_flaky: usize,
    pub n_unknown: usize,
    pub per_category: BTreeMap<String, usize>,
}

impl std::fmt::Display for LabelSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "labeled {} jobs: {} flaky, {} non-flaky, {} unknown",
            self.n_rows,
            self.n_flaky,
            self.n_rows - self.n_flaky,
            self.n_unknown
        )?;
        for (cat, n) in &self.per_category {
            writeln!(f, "  {cat}: {n}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LabelOptions {
    pub workers: usize,
    /// Only the first `max_log_bytes` of each log are scanned.
    pub max_log_bytes: Option<usize>,
}

impl Default for LabelOptions {
    fn default() -> Self {
        LabelOptions {
            workers: 1,
            max_log_bytes: None,
        }
    }
}

fn truncate_log(log: &str, max: Option<usize>) -> &str {
    match max {
        Some(max) if log.len() > max => {
            let mut end = max;
            while !log.is_char_boundary(end) {
                end -= 1;
            }
            &log[..end]
        }
        _ => log,
    }
}

fn categorize(rb: &Rulebook, job: &JobRecord, flaky: bool, max: Option<usize>) -> String {
    if !flaky {
        return String::new();
    }
    rb.match_category(truncate_log(&job.logs, max))
        .unwrap_or(UNKNOWN_CATEGORY)
        .to_string()
}

/// Labels every row. Output order equals input order and does not depend on
/// the worker count.
pub fn label_dataset(
    jobs: Dataset<JobRecord>,
    rb: &Rulebook,
    opts: LabelOptions,
) -> (Dataset<LabeledJob>, LabelSummary) {
    let flaky = detect_flaky(&jobs.rows);
    let max = opts.max_log_bytes;
    let categories: Vec<String> = if opts.workers <= 1 {
        jobs.rows
            .iter()
            .zip(&flaky)
            .map(|(j, &f)| categorize(rb, j, f, max))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .expect("thread pool");
        pool.install(|| {
            jobs.rows
                .par_iter()
                .zip(flaky.par_iter())
                .map(|(j, &f)| categorize(rb, j, f, max))
                .collect()
        })
    };

    let mut summary = LabelSummary {
        n_rows: jobs.rows.len(),
        ..Default::default()
    };
    let rows: Vec<LabeledJob> = jobs
        .rows
        .into_iter()
        .zip(flaky)
        .zip(categories)
        .map(|((job, flaky), category)| {
            if flaky {
                summary.n_flaky += 1;
                if category == UNKNOWN_CATEGORY {
                    summary.n_unknown += 1;
                }
                *summary.per_category.entry(category.clone()).or_default() += 1;
            }
            LabeledJob {
                job,
                flaky,
                category,
            }
        })
        .collect();
    (
        Dataset {
            rows,
            source_path: jobs.source_path,
            duration_warnings: jobs.duration_warnings,
        },
        summary,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::parse_timestamp;
    use crate::rulebook::Rule;

    fn job(id: u64, status: JobStatus, hour: Option<u32>) -> JobRecord {
        JobRecord {
            id,
            name: "test".into(),
            project_id: "p".into(),
            commit_sha: "abc".into(),
            status,
            created_at: hour
                .map(|h| parse_timestamp(&format!("2024-01-01T{h:02}:00:00Z")).unwrap()),
            started_at: None,
            finished_at: None,
            duration: 60.0,
            logs: String::new(),
        }
    }

    #[test]
    fn lone_failure_is_not_flaky() {
        assert_eq!(detect_flaky(&[job(1, JobStatus::Failed, Some(1))]), [false]);
    }

    #[test]
    fn failure_then_success_is_flaky() {
        let jobs = [
            job(1, JobStatus::Failed, Some(1)),
            job(2, JobStatus::Success, Some(2)),
        ];
        assert_eq!(detect_flaky(&jobs), [true, false]);
    }

    #[test]
    fn earlier_success_is_regression() {
        let jobs = [
            job(1, JobStatus::Success, Some(1)),
            job(2, JobStatus::Failed, Some(2)),
        ];
        assert_eq!(detect_flaky(&jobs), [false, false]);
    }

    #[test]
    fn id_breaks_timestamp_ties() {
        let jobs = [
            job(5, JobStatus::Success, Some(1)),
            job(4, JobStatus::Failed, Some(1)),
            job(7, JobStatus::Failed, Some(1)),
        ];
        assert_eq!(detect_flaky(&jobs), [false, true, false]);
    }

    #[test]
    fn other_groups_do_not_count() {
        let mut other = job(2, JobStatus::Success, Some(2));
        other.commit_sha = "def".into();
        assert_eq!(
            detect_flaky(&[job(1, JobStatus::Failed, Some(1)), other]),
            [false, false]
        );
    }

    #[test]
    fn canceled_and_skipped_carry_no_signal() {
        let jobs = [
            job(1, JobStatus::Canceled, Some(1)),
            job(2, JobStatus::Skipped, Some(2)),
            job(3, JobStatus::Failed, Some(3)),
            job(4, JobStatus::Canceled, Some(4)),
        ];
        assert_eq!(detect_flaky(&jobs), [false; 4]);
    }

    #[test]
    fn untimestamped_jobs_sort_last_and_are_not_evidence() {
        let jobs = [
            job(1, JobStatus::Failed, None),
            job(2, JobStatus::Success, None),
            job(3, JobStatus::Failed, Some(1)),
        ];
        assert_eq!(detect_flaky(&jobs), [false, false, false]);
    }

    #[test]
    fn unmatched_flaky_log_is_unknown() {
        let mut f = job(1, JobStatus::Failed, Some(1));
        f.logs = "something odd happened".into();
        let ds = Dataset::new(vec![f, job(2, JobStatus::Success, Some(2))], "t");
        let (out, summary) = label_dataset(ds, &Rulebook::builtin(), LabelOptions::default());
        assert_eq!(out.rows[0].category, UNKNOWN_CATEGORY);
        assert_eq!(out.rows[1].category, "");
        assert_eq!(summary.n_unknown, 1);
        assert_eq!(summary.n_flaky, 1);
    }

    #[test]
    fn no_failures_means_nothing_flaky() {
        let ds = Dataset::new(
            vec![
                job(1, JobStatus::Success, Some(1)),
                job(2, JobStatus::Canceled, Some(2)),
            ],
            "t",
        );
        let (out, summary) = label_dataset(ds, &Rulebook::builtin(), LabelOptions::default());
        assert!(out.rows.iter().all(|r| !r.flaky && r.category.is_empty()));
        assert_eq!(summary.n_flaky, 0);
    }

    #[test]
    fn log_cap_limits_scan() {
        let rb = Rulebook::new(vec![Rule::new("late", &["needle"])], "t").unwrap();
        let mut f = job(1, JobStatus::Failed, Some(1));
        f.logs = format!("{}needle", "é".repeat(10));
        let ds = || Dataset::new(vec![f.clone(), job(2, JobStatus::Success, Some(2))], "t");
        let opts = LabelOptions {
            workers: 1,
            max_log_bytes: Some(21),
        };
        assert_eq!(
            label_dataset(ds(), &rb, opts).0.rows[0].category,
            UNKNOWN_CATEGORY
        );
        let (out, _) = label_dataset(ds(), &rb, LabelOptions::default());
        assert_eq!(out.rows[0].category, "late");
    }
}
