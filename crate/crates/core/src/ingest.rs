//! CSV datasets exchanged between pipeline stages.
//!
//! Every stage reads and writes plain RFC 4180 CSV. The job table carries
//! the CI metadata plus (optionally) the raw log text; the labeled table
//! appends `flaky` and `category`.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use thiserror::Error;

/// Ordered jobs header. The trailing `logs` column is optional on input.
pub const JOB_COLUMNS: [&str; 10] = [
    "id",
    "name",
    "project_id",
    "commit_sha",
    "status",
    "created_at",
    "started_at",
    "finished_at",
    "duration",
    "logs",
];

/// Columns appended to [`JOB_COLUMNS`] by the labeler.
pub const LABEL_COLUMNS: [&str; 2] = ["flaky", "category"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unexpected column `{0}`")]
    UnexpectedColumn(String),
    #[error("row {row}: bad timestamp in `{field}`")]
    BadTimestamp { row: usize, field: &'static str },
    #[error("row {row}: bad status `{token}`")]
    BadStatus { row: usize, token: String },
    #[error("row {row}: bad value `{value}` in `{field}`")]
    BadValue {
        row: usize,
        field: &'static str,
        value: String,
    },
    #[error("row {row}: finished_at precedes started_at")]
    InvertedTimes { row: usize },
    #[error("row {row}: duplicate job id {id}")]
    DuplicateId { row: usize, id: u64 },
    #[error("row {row}: {reason}")]
    InvalidLabel { row: usize, reason: &'static str },
    #[error("no log file for job {0}")]
    MissingLogFile(u64),
}

impl IngestError {
    /// True for errors about the content of otherwise readable rows.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            IngestError::BadTimestamp { .. }
                | IngestError::BadStatus { .. }
                | IngestError::BadValue { .. }
                | IngestError::InvertedTimes { .. }
                | IngestError::DuplicateId { .. }
                | IngestError::InvalidLabel { .. }
        )
    }

    fn io(path: &Path, source: io::Error) -> Self {
        IngestError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum JobStatus {
    Success,
    Failed,
    Canceled,
    Skipped,
}

impl JobStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            JobStatus::Success => "success",
            JobStatus::Failed => "failed",
            JobStatus::Canceled => "canceled",
            JobStatus::Skipped => "skipped",
        }
    }
}

impl fmt::Display for JobStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JobStatus {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "success" => Ok(JobStatus::Success),
            "failed" => Ok(JobStatus::Failed),
            "canceled" => Ok(JobStatus::Canceled),
            "skipped" => Ok(JobStatus::Skipped),
            _ => Err(()),
        }
    }
}

/// One CI job execution.
#[derive(Debug, Clone, PartialEq)]
pub struct JobRecord {
    pub id: u64,
    pub name: String,
    pub project_id: String,
    pub commit_sha: String,
    pub status: JobStatus,
    pub created_at: Option<DateTime<Utc>>,
    pub started_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    /// Seconds. Back-filled from the timestamps (or 0) when absent on input.
    pub duration: f64,
    pub logs: String,
}

/// A job after labeling. `category` is empty iff `flaky` is false.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledJob {
    pub job: JobRecord,
    pub flaky: bool,
    pub category: String,
}

/// Rows of one table in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub rows: Vec<T>,
    pub source_path: String,
    /// Rows whose duration could not be derived and was set to 0.
    pub duration_warnings: usize,
}

impl<T> Dataset<T> {
    pub fn new(rows: Vec<T>, source_path: impl Into<String>) -> Self {
        Dataset {
            rows,
            source_path: source_path.into(),
            duration_warnings: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Result of a lenient parse: rows that validated plus a positioned error
/// for every row that did not.
#[derive(Debug)]
pub struct ParseOutcome<T> {
    pub dataset: Dataset<T>,
    pub errors: Vec<IngestError>,
    pub rows_read: usize,
}

impl<T> ParseOutcome<T> {
    fn into_strict(mut self) -> Result<Dataset<T>> {
        if self.errors.is_empty() {
            Ok(self.dataset)
        } else {
            Err(self.errors.swap_remove(0))
        }
    }
}

pub fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(raw)
        .ok()
        .map(|t| t.with_timezone(&Utc))
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

#[derive(Clone, Copy, PartialEq)]
enum Layout {
    Jobs { logs: bool },
    Labeled { logs: bool },
}

impl Layout {
    fn has_logs(self) -> bool {
        match self {
            Layout::Jobs { logs } | Layout::Labeled { logs } => logs,
        }
    }
}

fn check_header(header: &csv::ByteRecord, labeled: bool) -> Result<Layout> {
    let names: Vec<String> = header
        .iter()
        .map(|f| {
            String::from_utf8_lossy(f)
                .trim_start_matches('\u{feff}')
                .to_string()
        })
        .collect();
    let base = &JOB_COLUMNS[..9];
    for (i, want) in base.iter().enumerate() {
        match names.get(i) {
            Some(got) if got == want => {}
            _ => return Err(IngestError::MissingColumn(want.to_string())),
        }
    }
    let mut rest = &names[9..];
    let logs = rest.first().map(String::as_str) == Some("logs");
    if logs {
        rest = &rest[1..];
    }
    if labeled {
        for (i, want) in LABEL_COLUMNS.iter().enumerate() {
            match rest.get(i) {
                Some(got) if got == want => {}
                _ => return Err(IngestError::MissingColumn(want.to_string())),
            }
        }
        rest = &rest[2..];
    }
    if let Some(extra) = rest.first() {
        return Err(IngestError::UnexpectedColumn(extra.clone()));
    }
    Ok(if labeled {
        Layout::Labeled { logs }
    } else {
        Layout::Jobs { logs }
    })
}

fn field(rec: &csv::ByteRecord, i: usize) -> String {
    rec.get(i)
        .map(|b| String::from_utf8_lossy(b).into_owned())
        .unwrap_or_default()
}

fn opt_timestamp(raw: &str, row: usize, name: &'static str) -> Result<Option<DateTime<Utc>>> {
    if raw.is_empty() {
        return Ok(None);
    }
    parse_timestamp(raw)
        .map(Some)
        .ok_or(IngestError::BadTimestamp { row, field: name })
}

/// Parses one jobs-table row; returns the record and whether the duration
/// had to be zero-filled.
fn parse_job(
    rec: &csv::ByteRecord,
    row: usize,
    layout: Layout,
    logs_dir: Option<&Path>,
) -> Result<(JobRecord, bool)> {
    let id_raw = field(rec, 0);
    let id: u64 = id_raw.trim().parse().map_err(|_| IngestError::BadValue {
        row,
        field: "id",
        value: id_raw.clone(),
    })?;
    let status_raw = field(rec, 4);
    let status = status_raw
        .parse::<JobStatus>()
        .map_err(|_| IngestError::BadStatus {
            row,
            token: status_raw.clone(),
        })?;
    let created_at = opt_timestamp(&field(rec, 5), row, "created_at")?;
    let started_at = opt_timestamp(&field(rec, 6), row, "started_at")?;
    let finished_at = opt_timestamp(&field(rec, 7), row, "finished_at")?;
    if let (Some(s), Some(f)) = (started_at, finished_at) {
        if f < s {
            return Err(IngestError::InvertedTimes { row });
        }
    }

    let duration_raw = field(rec, 8);
    let mut zero_filled = false;
    let duration = if duration_raw.trim().is_empty() {
        match (started_at, finished_at) {
            (Some(s), Some(f)) => seconds_between(s, f),
            _ => {
                zero_filled = true;
                0.0
            }
        }
    } else {
        match duration_raw.trim().parse::<f64>() {
            Ok(d) if d.is_finite() && d >= 0.0 => d,
            _ => {
                return Err(IngestError::BadValue {
                    row,
                    field: "duration",
                    value: duration_raw,
                })
            }
        }
    };

    let logs = match logs_dir {
        Some(dir) => read_log_file(dir, id)?,
        None if layout.has_logs() => field(rec, 9),
        None => String::new(),
    };

    Ok((
        JobRecord {
            id,
            name: field(rec, 1),
            project_id: field(rec, 2),
            commit_sha: field(rec, 3),
            status,
            created_at,
            started_at,
            finished_at,
            duration,
            logs,
        },
        zero_filled,
    ))
}

/// Elapsed seconds from `a` to `b` with sub-second precision.
pub fn seconds_between(a: DateTime<Utc>, b: DateTime<Utc>) -> f64 {
    let d = b - a;
    d.num_seconds() as f64 + f64::from(d.subsec_nanos()) * 1e-9
}

fn read_log_file(dir: &Path, id: u64) -> Result<String> {
    let path = dir.join(format!("{id}.log"));
    match fs::read(&path) {
        Ok(bytes) => Ok(String::from_utf8_lossy(&bytes).into_owned()),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Err(IngestError::MissingLogFile(id)),
        Err(e) => Err(IngestError::io(&path, e)),
    }
}

fn parse_label_columns(
    rec: &csv::ByteRecord,
    row: usize,
    layout: Layout,
    job: JobRecord,
) -> Result<LabeledJob> {
    let base = if layout.has_logs() { 10 } else { 9 };
    let flaky_raw = field(rec, base);
    let flaky = match flaky_raw.as_str() {
        "true" => true,
        "false" => false,
        _ => {
            return Err(IngestError::BadValue {
                row,
                field: "flaky",
                value: flaky_raw,
            })
        }
    };
    let category = field(rec, base + 1);
    if flaky && job.status != JobStatus::Failed {
        return Err(IngestError::InvalidLabel {
            row,
            reason: "flaky job is not failed",
        });
    }
    if flaky && category.is_empty() {
        return Err(IngestError::InvalidLabel {
            row,
            reason: "flaky job without category",
        });
    }
    if !flaky && !category.is_empty() {
        return Err(IngestError::InvalidLabel {
            row,
            reason: "non-flaky job with category",
        });
    }
    Ok(LabeledJob {
        job,
        flaky,
        category,
    })
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(input)
}

fn read_table<R: Read, T>(
    input: R,
    source: &str,
    labeled: bool,
    logs_dir: Option<&Path>,
    mut build: impl FnMut(&csv::ByteRecord, usize, Layout, JobRecord) -> Result<T>,
    id_of: impl Fn(&T) -> u64,
) -> Result<ParseOutcome<T>> {
    let mut rdr = csv_reader(input);
    let layout = check_header(rdr.byte_headers()?, labeled)?;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    let mut zero_filled = 0;
    let mut rows_read = 0;
    let mut rec = csv::ByteRecord::new();
    loop {
        match rdr.read_byte_record(&mut rec) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(e) => {
                rows_read += 1;
                errors.push(IngestError::Csv(e));
                continue;
            }
        }
        rows_read += 1;
        let row = rows_read;
        let parsed = parse_job(&rec, row, layout, logs_dir)
            .and_then(|(job, zf)| build(&rec, row, layout, job).map(|t| (t, zf)));
        match parsed {
            Ok((item, zf)) => {
                let id = id_of(&item);
                if !seen.insert(id) {
                    errors.push(IngestError::DuplicateId { row, id });
                    continue;
                }
                if zf {
                    zero_filled += 1;
                }
                rows.push(item);
            }
            Err(e) => errors.push(e),
        }
    }
    Ok(ParseOutcome {
        dataset: Dataset {
            rows,
            source_path: source.to_string(),
            duration_warnings: zero_filled,
        },
        errors,
        rows_read,
    })
}

/// Lenient jobs parse from any reader. Header problems and I/O failures are
/// fatal; row problems are collected.
pub fn read_jobs<R: Read>(
    input: R,
    source: &str,
    logs_dir: Option<&Path>,
) -> Result<ParseOutcome<JobRecord>> {
    read_table(
        input,
        source,
        false,
        logs_dir,
        |_, _, _, job| Ok(job),
        |j| j.id,
    )
}

pub fn read_labeled<R: Read>(input: R, source: &str) -> Result<ParseOutcome<LabeledJob>> {
    read_table(input, source, true, None, parse_label_columns, |l| l.job.id)
}

fn open(path: &Path) -> Result<Box<dyn Read>> {
    if path == Path::new("-") {
        return Ok(Box::new(io::stdin().lock()));
    }
    let f = fs::File::open(path).map_err(|e| IngestError::io(path, e))?;
    Ok(Box::new(io::BufReader::new(f)))
}

/// Parses a jobs CSV, failing on the first invalid row. When `logs_dir` is
/// given, each job's log is read from `<logs_dir>/<id>.log` and any inline
/// `logs` column is ignored.
pub fn parse_jobs(path: &Path, logs_dir: Option<&Path>) -> Result<Dataset<JobRecord>> {
    let source = path.display().to_string();
    let ds = read_jobs(open(path)?, &source, logs_dir)?.into_strict()?;
    if ds.duration_warnings > 0 {
        log::warn!(
            "{}: {} row(s) without duration or timestamps; duration set to 0",
            source,
            ds.duration_warnings
        );
    }
    Ok(ds)
}

pub fn parse_labeled(path: &Path) -> Result<Dataset<LabeledJob>> {
    let source = path.display().to_string();
    read_labeled(open(path)?, &source)?.into_strict()
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

fn fmt_opt_ts(t: &Option<DateTime<Utc>>) -> String {
    t.as_ref().map(format_timestamp).unwrap_or_default()
}

fn job_fields(j: &JobRecord) -> [String; 10] {
    [
        j.id.to_string(),
        j.name.clone(),
        j.project_id.clone(),
        j.commit_sha.clone(),
        j.status.to_string(),
        fmt_opt_ts(&j.created_at),
        fmt_opt_ts(&j.started_at),
        fmt_opt_ts(&j.finished_at),
        j.duration.to_string(),
        j.logs.clone(),
    ]
}

/// A table that can be written with a fixed header.
pub trait TableRow {
    fn header() -> Vec<&'static str>;
    fn fields(&self) -> Vec<String>;
}

impl TableRow for JobRecord {
    fn header() -> Vec<&'static str> {
        JOB_COLUMNS.to_vec()
    }

    fn fields(&self) -> Vec<String> {
        job_fields(self).to_vec()
    }
}

impl TableRow for LabeledJob {
    fn header() -> Vec<&'static str> {
        JOB_COLUMNS
            .iter()
            .chain(LABEL_COLUMNS.iter())
            .copied()
            .collect()
    }

    fn fields(&self) -> Vec<String> {
        let mut f = job_fields(&self.job).to_vec();
        f.push(self.flaky.to_string());
        f.push(self.category.clone());
        f
    }
}

pub fn write_rows<W: Write, T: TableRow>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(T::header())?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush().map_err(|e| IngestError::Io {
        path: "<output>".into(),
        source: e,
    })?;
    Ok(())
}

/// Opens `path` for writing; `-` means standard output.
pub fn create_output(path: &Path) -> Result<Box<dyn Write>> {
    if path == Path::new("-") {
        return Ok(Box::new(io::stdout().lock()));
    }
    let f = fs::File::create(path).map_err(|e| IngestError::io(path, e))?;
    Ok(Box::new(io::BufWriter::new(f)))
}

/// Writes `rows` as CSV with the table's fixed header.
pub fn write_table<T: TableRow>(rows: &[T], path: &Path) -> Result<()> {
    let out = create_output(path)?;
    write_rows(out, rows).map_err(|e| match e {
        IngestError::Io { source, .. } => IngestError::io(path, source),
        other => other,
    })
}

/// Writes an arbitrary header + string rows table (derived tables).
pub fn write_records<W: Write>(out: W, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| IngestError::Io {
        path: "<output>".into(),
        source: e,
    })?;
    Ok(())
}

/// Reads a derived table, checking the header exactly.
pub fn read_records<R: Read>(input: R, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut rdr = csv_reader(input);
    let got = rdr.headers()?.clone();
    for (i, want) in header.iter().enumerate() {
        if got.get(i).map(|g| g.trim_start_matches('\u{feff}')) != Some(*want) {
            return Err(IngestError::MissingColumn(want.to_string()));
        }
    }
    if let Some(extra) = got.get(header.len()) {
        return Err(IngestError::UnexpectedColumn(extra.to_string()));
    }
    rdr.records()
        .map(|r| r.map_err(IngestError::from))
        .collect()
}

pub fn open_input(path: &Path) -> Result<Box<dyn Read>> {
    open(path)
}
