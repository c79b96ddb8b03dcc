//! Synthetic CI job corpora with known ground truth.
//!
//! Flaky failures are realized as a failed job followed by a successful
//! rerun of the same (project, commit, job name); the failed job's log
//! carries a marker line for its category. Noise units (plain successes,
//! genuine failures, regressions, canceled and skipped jobs) fill the rest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{self, format_timestamp, IngestError, JobStatus, JOB_COLUMNS};
use crate::labeler::UNKNOWN_CATEGORY;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryMix {
    pub category: String,
    pub weight: f64,
    /// Log lines identifying the category; one is embedded per failure.
    /// Empty means the failure should come out as `unknown`.
    pub markers: Vec<String>,
    pub duration_mean: f64,
    pub duration_spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub n_jobs: usize,
    /// Fraction of all jobs that are flaky failures.
    pub flaky_rate: f64,
    pub categories: Vec<CategoryMix>,
    pub start: DateTime<Utc>,
    pub span_days: u32,
    pub seed: u64,
}

fn mix(category: &str, weight: f64, markers: &[&str], mean: f64, spread: f64) -> CategoryMix {
    CategoryMix {
        category: category.into(),
        weight,
        markers: markers.iter().map(|m| m.to_string()).collect(),
        duration_mean: mean,
        duration_spread: spread,
    }
}

/// Markers for the eight builtin categories, in rulebook order.
pub fn builtin_mix() -> Vec<CategoryMix> {
    vec![
        mix(
            "job_timeout",
            0.10,
            &[
                "ERROR: Job failed: execution took longer than 1h0m0s seconds",
                "The job exceeded the maximum timeout of 3600 seconds",
            ],
            3600.0,
            60.0,
        ),
        mix(
            "runner_failure",
            0.12,
            &[
                "ERROR: Job failed (system failure): prepare environment: exit status 1",
                "WARNING: the runner has disconnected while the job was running",
            ],
            90.0,
            60.0,
        ),
        mix(
            "connection_error",
            0.20,
            &[
                "curl: (28) Failed to connect to registry.example.com port 443: Connection \x1b[1mtimed\x1b[0m out",
                "fatal: could not resolve host: gitlab.example.com",
            ],
            420.0,
            300.0,
        ),
        mix(
            "out_of_memory",
            0.08,
            &[
                "fatal error: runtime: out of memory",
                "Container exited with reason OOMKilled",
            ],
            1500.0,
            600.0,
        ),
        mix(
            "docker_pull_error",
            0.15,
            &[
                "ERROR: Job failed: failed to pull image \"registry.example.com/ci/builder:latest\"",
                "toomanyrequests: You have reached your pull rate limit.",
            ],
            45.0,
            30.0,
        ),
        mix(
            "git_checkout_error",
            0.10,
            &[
                "fatal: unable to access 'https://gitlab.example.com/group/repo.git/': The requested URL returned error: 502",
                "fatal: reference is not a tree: 3f2a9c1d",
            ],
            30.0,
            20.0,
        ),
        mix(
            "dependency_install_error",
            0.15,
            &[
                "ERROR: Could not find a version that satisfies the requirement numpy==1.26.0",
                "error: failed to download crate `serde v1.0.190`",
            ],
            600.0,
            240.0,
        ),
        mix(
            "disk_quota_exceeded",
            0.10,
            &[
                "write /var/lib/docker/tmp/layer.tar: no space left on device",
                "ERROR: Disk quota exceeded on /builds",
            ],
            900.0,
            300.0,
        ),
    ]
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            n_jobs: 50_000,
            flaky_rate: 0.05,
            categories: builtin_mix(),
            start: DateTime::parse_from_rfc3339("2024-01-01T00:00:00Z")
                .unwrap()
                .with_timezone(&Utc),
            span_days: 180,
            seed: 42,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        let bad = |m: &str| Err(GeneratorError::InvalidSpec(m.into()));
        if !(0.0..=0.5).contains(&self.flaky_rate) {
            return bad("flaky_rate must be in [0, 0.5]");
        }
        if self.flaky_rate > 0.0 && self.categories.is_empty() {
            return bad("flaky_rate > 0 needs at least one category");
        }
        if !self.categories.is_empty() {
            let total: f64 = self.categories.iter().map(|c| c.weight).sum();
            if (total - 1.0).abs() > 1e-9 {
                return bad("category weights must sum to 1");
            }
        }
        let negative = |x: f64| x.is_nan() || x < 0.0;
        if self.categories.iter().any(|c| {
            negative(c.weight)
                || negative(c.duration_mean)
                || negative(c.duration_spread)
                || c.duration_spread > c.duration_mean
        }) {
            return bad("weights and durations must be >= 0 with spread <= mean");
        }
        if 2 * self.flaky_count() > self.n_jobs {
            return bad("each flaky failure needs a rerun row; flaky_rate too high for n_jobs");
        }
        if self.span_days == 0 {
            return bad("span_days must be positive");
        }
        Ok(())
    }

    /// Number of flaky failures the corpus will contain.
    pub fn flaky_count(&self) -> usize {
        (self.n_jobs as f64 * self.flaky_rate).round() as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_jobs: usize,
    pub n_flaky: usize,
    pub seed: u64,
    /// Expected labeler category per flaky failure, counted.
    pub category_counts: BTreeMap<String, usize>,
    /// Summed duration (hours) of flaky failures per category.
    pub category_hours: BTreeMap<String, f64>,
    /// Ids of every flaky failure, ascending.
    pub flaky_ids: Vec<u64>,
}

/// A generated row. `duration` is `None` for rows exported without one.
#[derive(Debug, Clone)]
pub struct GeneratedJob {
    pub id: u64,
    pub name: String,
    pub project_id: String,
    pub commit_sha: String,
    pub status: JobStatus,
    pub created_at: DateTime<Utc>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub duration: Option<f64>,
    pub logs: String,
}

const PROJECTS: [&str; 3] = ["acme/engine", "acme/api", "acme/web"];
const JOB_NAMES: [&str; 6] = [
    "build",
    "test:unit",
    "test:integration",
    "lint",
    "docker-build",
    "deploy:staging",
];

struct Gen {
    rng: Xoshiro256PlusPlus,
}

impl Gen {
    fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    fn range(&mut self, lo: i64, hi: i64) -> i64 {
        lo + self.below((hi - lo + 1) as usize) as i64
    }

    fn pick<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }

    fn category(&mut self, mix: &[CategoryMix]) -> usize {
        let u = self.uniform();
        let mut cum = 0.0;
        for (i, c) in mix.iter().enumerate() {
            cum += c.weight;
            if u < cum {
                return i;
            }
        }
        mix.iter().rposition(|c| c.weight > 0.0).unwrap_or(0)
    }
}

fn log_header(job: &str, runner: u32) -> String {
    format!(
        "\x1b[0KRunning with gitlab-runner 16.5.0 (853330f9)\n\
         \x1b[0K  on shared-runner-{runner} xY7z9Q, system ID: r_1a2b3c4d\n\
         \x1b[0K\x1b[36;1mPreparing the \"docker\" executor\x1b[0;m\n\
         Using docker image sha256:9b2f41c for rust:1.75 ...\n\
         section_start:1704067200:step_script\r\x1b[0K\x1b[0K\x1b[36;1mExecuting \"step_script\" stage of the job script\x1b[0;m\n\
         \x1b[32;1m$ ./ci/{job}.sh\x1b[0;m\n"
    )
}

fn failure_log(job: &str, runner: u32, marker: Option<&str>) -> String {
    let mut s = log_header(job, runner);
    s.push_str("   Compiling common v0.10.0 (/builds/common)\n");
    if let Some(m) = marker {
        s.push_str(&format!("\x1b[31;1m{m}\x1b[0;m\n"));
    } else {
        s.push_str("thread 'main' panicked at src/main.rs:12:5: unexpected state\n");
    }
    s.push_str("section_end:1704067500:step_script\r\x1b[0K\x1b[31;1mERROR: Job failed: exit code 1\n\x1b[0;m\n");
    s
}

fn genuine_failure_log(job: &str, runner: u32) -> String {
    let mut s = log_header(job, runner);
    s.push_str(
        "error[E0308]: mismatched types\n  --> src/lib.rs:42:17\n\
         test result: FAILED. 211 passed; 1 failed; 0 ignored\n\
         \x1b[31;1mERROR: Job failed: exit code 101\n\x1b[0;m\n",
    );
    s
}

fn success_log(job: &str, runner: u32) -> String {
    let mut s = log_header(job, runner);
    s.push_str(
        "test result: ok. 212 passed; 0 failed; 0 ignored\n\x1b[32;1mJob succeeded\n\x1b[0;m\n",
    );
    s
}

struct Planned {
    /// Offset (seconds) of the unit's first job from the corpus start.
    unit_start: i64,
    unit: usize,
    pos: usize,
    job: GeneratedJob,
    /// Expected label when this job is a flaky failure.
    flaky_category: Option<usize>,
}

struct UnitBuilder<'a> {
    gen: &'a mut Gen,
    unit: usize,
    unit_start: i64,
    clock: i64,
    project: String,
    name: String,
    sha: String,
    jobs: Vec<Planned>,
}

impl UnitBuilder<'_> {
    fn push(
        &mut self,
        status: JobStatus,
        duration: f64,
        logs: String,
        flaky_category: Option<usize>,
    ) {
        let at = |secs: i64| DateTime::<Utc>::UNIX_EPOCH + Duration::seconds(secs);
        let duration = duration.round();
        let created = self.clock;
        let started = created + self.gen.range(2, 90);
        let finished = started + duration as i64;
        // a small share of exports omit duration; it is back-filled on parse
        let keep_duration = self.gen.uniform() >= 0.03;
        self.jobs.push(Planned {
            unit_start: self.unit_start,
            unit: self.unit,
            pos: self.jobs.len(),
            job: GeneratedJob {
                id: 0,
                name: self.name.clone(),
                project_id: self.project.clone(),
                commit_sha: self.sha.clone(),
                status,
                created_at: at(created),
                started_at: at(started),
                finished_at: at(finished),
                duration: keep_duration.then_some(duration),
                logs,
            },
            flaky_category,
        });
        // the next rerun is triggered after this one finishes
        self.clock = finished + self.gen.range(30, 1800);
    }
}

/// Generates jobs (ids ascending in creation order) and the manifest.
pub fn generate(spec: &GeneratorSpec) -> Result<(Vec<GeneratedJob>, Manifest), GeneratorError> {
    spec.validate()?;
    let mut gen = Gen {
        rng: Xoshiro256PlusPlus::seed_from_u64(spec.seed),
    };
    let span = i64::from(spec.span_days) * 86_400;
    let base = spec.start.timestamp();

    let mut flaky_left = spec.flaky_count();
    let mut rows_left = spec.n_jobs;
    let mut planned: Vec<Planned> = Vec::with_capacity(spec.n_jobs);
    let mut unit = 0usize;

    while rows_left > 0 {
        let unit_start = gen.range(0, span - 1);
        let mut b = UnitBuilder {
            unit,
            unit_start,
            clock: base + unit_start,
            project: gen.pick(&PROJECTS).to_string(),
            name: gen.pick(&JOB_NAMES).to_string(),
            sha: format!("{:016x}{:024x}", gen.rng.next_u64(), unit),
            jobs: Vec::new(),
            gen: &mut gen,
        };
        let runner = b.gen.range(1, 40) as u32;
        let name = b.name.clone();
        // rows still needed by flaky units: two per flaky failure at most
        let noise_rows = rows_left - 2 * flaky_left;
        let choose_flaky = flaky_left > 0 && (noise_rows == 0 || b.gen.uniform() < 0.5);

        if choose_flaky {
            let double = flaky_left >= 2 && rows_left >= 3 && b.gen.uniform() < 0.1;
            let lead_cancel = noise_rows >= 1 && b.gen.uniform() < 0.05;
            if lead_cancel {
                let d = b.gen.range(5, 120) as f64;
                b.push(JobStatus::Canceled, d, success_log(&name, runner), None);
            }
            for _ in 0..(if double { 2 } else { 1 }) {
                let c = b.gen.category(&spec.categories);
                let mix = &spec.categories[c];
                let marker = if mix.markers.is_empty() {
                    None
                } else {
                    Some(b.gen.pick(&mix.markers).clone())
                };
                let d = mix.duration_mean + (2.0 * b.gen.uniform() - 1.0) * mix.duration_spread;
                b.push(
                    JobStatus::Failed,
                    d.max(0.0),
                    failure_log(&name, runner, marker.as_deref()),
                    Some(c),
                );
            }
            let d = b.gen.range(120, 900) as f64;
            b.push(JobStatus::Success, d, success_log(&name, runner), None);
            flaky_left -= if double { 2 } else { 1 };
        } else {
            let roll = b.gen.uniform();
            if roll < 0.70 {
                let d = b.gen.range(60, 1200) as f64;
                b.push(JobStatus::Success, d, success_log(&name, runner), None);
            } else if roll < 0.82 {
                let d = b.gen.range(60, 900) as f64;
                b.push(
                    JobStatus::Failed,
                    d,
                    genuine_failure_log(&name, runner),
                    None,
                );
            } else if roll < 0.90 && noise_rows >= 2 {
                // regression: success, then a failure that is never rerun green
                let d = b.gen.range(60, 900) as f64;
                b.push(JobStatus::Success, d, success_log(&name, runner), None);
                let marker = spec
                    .categories
                    .get(b.gen.below(spec.categories.len().max(1)))
                    .and_then(|m| m.markers.first())
                    .cloned();
                let d = b.gen.range(60, 900) as f64;
                b.push(
                    JobStatus::Failed,
                    d,
                    failure_log(&name, runner, marker.as_deref()),
                    None,
                );
            } else if roll < 0.96 {
                let d = b.gen.range(1, 300) as f64;
                b.push(JobStatus::Canceled, d, success_log(&name, runner), None);
            } else {
                b.push(JobStatus::Skipped, 0.0, String::new(), None);
            }
        }
        rows_left -= b.jobs.len();
        planned.append(&mut b.jobs);
        unit += 1;
    }

    planned.sort_by_key(|p| (p.job.created_at, p.unit_start, p.unit, p.pos));
    let mut manifest = Manifest {
        n_jobs: planned.len(),
        seed: spec.seed,
        ..Manifest::default()
    };
    let mut jobs = Vec::with_capacity(planned.len());
    for (i, mut p) in planned.into_iter().enumerate() {
        p.job.id = 1_000 + i as u64;
        if let Some(c) = p.flaky_category {
            let mix = &spec.categories[c];
            let label = if mix.markers.is_empty() {
                UNKNOWN_CATEGORY.to_string()
            } else {
                mix.category.clone()
            };
            let hours =
                p.job.duration.unwrap_or_else(|| {
                    ingest::seconds_between(p.job.started_at, p.job.finished_at)
                }) / 3600.0;
            *manifest.category_counts.entry(label.clone()).or_default() += 1;
            *manifest.category_hours.entry(label).or_default() += hours;
            manifest.n_flaky += 1;
            manifest.flaky_ids.push(p.job.id);
        }
        jobs.push(p.job);
    }
    Ok((jobs, manifest))
}

pub fn write_jobs<W: Write>(out: W, jobs: &[GeneratedJob]) -> Result<(), IngestError> {
    let rows: Vec<Vec<String>> = jobs
        .iter()
        .map(|j| {
            vec![
                j.id.to_string(),
                j.name.clone(),
                j.project_id.clone(),
                j.commit_sha.clone(),
                j.status.to_string(),
                format_timestamp(&j.created_at),
                format_timestamp(&j.started_at),
                format_timestamp(&j.finished_at),
                j.duration.map(|d| d.to_string()).unwrap_or_default(),
                j.logs.clone(),
            ]
        })
        .collect();
    ingest::write_records(out, &JOB_COLUMNS, &rows)
}

/// Sidecar manifest path for a corpus file: `<out>.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Writes the corpus CSV to `out` and its manifest next to it.
pub fn generate_corpus(spec: &GeneratorSpec, out: &Path) -> Result<Manifest, GeneratorError> {
    let (jobs, manifest) = generate(spec)?;
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |source| GeneratorError::Io { path, source }
    };
    let file = fs::File::create(out).map_err(io_err(out))?;
    write_jobs(io::BufWriter::new(file), &jobs)?;
    let mpath = manifest_path(out);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, json + "\n").map_err(io_err(&mpath))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, GeneratorError> {
    let text = fs::read_to_string(path).map_err(|source| GeneratorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| GeneratorError::InvalidSpec(e.to_string()))
}
