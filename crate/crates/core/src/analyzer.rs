//! Per-category Recency, Frequency and Monetary measures, plus monthly
//! evolution counts.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, Datelike, Utc};
use thiserror::Error;

use crate::ingest::{self, format_timestamp, seconds_between, IngestError, LabeledJob};

pub const RFM_COLUMNS: [&str; 4] = ["category", "recency", "frequency", "monetary"];
pub const EVOLUTION_COLUMNS: [&str; 3] = ["category", "period", "count"];

const SECONDS_PER_DAY: f64 = 86_400.0;
const SECONDS_PER_HOUR: f64 = 3_600.0;

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("reference date {reference} precedes flaky job {job_id} created at {created}")]
    ReferenceDateBeforeData {
        reference: String,
        job_id: u64,
        created: String,
    },
    #[error("invalid cost model: {0}")]
    InvalidCostModel(&'static str),
    #[error("rfm row {row}: {message}")]
    BadRfmRow { row: usize, message: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// Prices machine time at a flat hourly rate plus a flat per-failure
/// diagnosis overhead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub cost_rate: f64,
    pub diagnosis_overhead: f64,
    /// Defaults to the latest `finished_at` in the dataset, else the latest
    /// `created_at`.
    pub reference_date: Option<DateTime<Utc>>,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            cost_rate: 1.0,
            diagnosis_overhead: 0.0,
            reference_date: None,
        }
    }
}

impl CostModel {
    fn validate(&self) -> Result<(), AnalyzeError> {
        if !(self.cost_rate.is_finite() && self.cost_rate >= 0.0) {
            return Err(AnalyzeError::InvalidCostModel(
                "cost rate must be finite and >= 0",
            ));
        }
        if !(self.diagnosis_overhead.is_finite() && self.diagnosis_overhead >= 0.0) {
            return Err(AnalyzeError::InvalidCostModel(
                "diagnosis overhead must be finite and >= 0",
            ));
        }
        Ok(())
    }
}

/// The dataset-derived default reference date.
pub fn default_reference_date(rows: &[LabeledJob]) -> Option<DateTime<Utc>> {
    rows.iter()
        .filter_map(|r| r.job.finished_at)
        .max()
        .or_else(|| rows.iter().filter_map(|r| r.job.created_at).max())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryRfm {
    pub category: String,
    pub recency_days: f64,
    pub frequency: u64,
    pub monetary: f64,
}

/// Neumaier-compensated running sum.
#[derive(Default, Clone, Copy)]
struct Sum {
    total: f64,
    comp: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.total + x;
        if self.total.abs() >= x.abs() {
            self.comp += (self.total - t) + x;
        } else {
            self.comp += (x - t) + self.total;
        }
        self.total = t;
    }

    fn value(self) -> f64 {
        self.total + self.comp
    }
}

struct Acc {
    latest: DateTime<Utc>,
    count: u64,
    hours: Sum,
}

pub fn compute_rfm(rows: &[LabeledJob], cm: &CostModel) -> Result<Vec<CategoryRfm>, AnalyzeError> {
    cm.validate()?;
    let mut acc: BTreeMap<&str, Acc> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.flaky) {
        // Flaky rows always carry created_at: untimestamped jobs can never
        // be followed by eligible success evidence.
        let created = r.job.created_at.ok_or(AnalyzeError::BadRfmRow {
            row: 0,
            message: format!("flaky job {} has no created_at", r.job.id),
        })?;
        let e = acc.entry(r.category.as_str()).or_insert(Acc {
            latest: created,
            count: 0,
            hours: Sum::default(),
        });
        e.latest = e.latest.max(created);
        e.count += 1;
        e.hours.add(r.job.duration / SECONDS_PER_HOUR);
    }
    if acc.is_empty() {
        log::warn!("no flaky rows; RFM table is empty");
        return Ok(Vec::new());
    }

    let reference = cm
        .reference_date
        .or_else(|| default_reference_date(rows))
        .expect("flaky rows carry created_at");
    if let Some(bad) = rows
        .iter()
        .filter(|r| r.flaky)
        .find(|r| r.job.created_at.is_some_and(|c| c > reference))
    {
        return Err(AnalyzeError::ReferenceDateBeforeData {
            reference: format_timestamp(&reference),
            job_id: bad.job.id,
            created: format_timestamp(&bad.job.created_at.unwrap()),
        });
    }

    let mut out: Vec<CategoryRfm> = acc
        .into_iter()
        .map(|(cat, a)| CategoryRfm {
            category: cat.to_string(),
            recency_days: seconds_between(a.latest, reference) / SECONDS_PER_DAY,
            frequency: a.count,
            monetary: a.hours.value() * cm.cost_rate + a.count as f64 * cm.diagnosis_overhead,
        })
        .collect();
    out.sort_by(|a, b| {
        b.monetary
            .total_cmp(&a.monetary)
            .then_with(|| a.category.cmp(&b.category))
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct EvolutionRow {
    pub category: String,
    /// Calendar month, `YYYY-MM`.
    pub period: String,
    pub count: u64,
}

/// Flaky failures per (category, month of `created_at`), sorted by category
/// then period. Empty months are omitted.
pub fn compute_evolution(rows: &[LabeledJob]) -> Vec<EvolutionRow> {
    let mut counts: BTreeMap<(&str, String), u64> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.flaky) {
        if let Some(t) = r.job.created_at {
            let period = format!("{:04}-{:02}", t.year(), t.month());
            *counts.entry((r.category.as_str(), period)).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|((category, period), count)| EvolutionRow {
            category: category.to_string(),
            period,
            count,
        })
        .collect()
}

pub fn write_rfm<W: Write>(out: W, rows: &[CategoryRfm]) -> Result<(), IngestError> {
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.category.clone(),
                r.recency_days.to_string(),
                r.frequency.to_string(),
                r.monetary.to_string(),
            ]
        })
        .collect();
    ingest::write_records(out, &RFM_COLUMNS, &records)
}

pub fn read_rfm<R: Read>(input: R) -> Result<Vec<CategoryRfm>, AnalyzeError> {
    let records = ingest::read_records(input, &RFM_COLUMNS)?;
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let row = i + 1;
        let bad = |message: String| AnalyzeError::BadRfmRow { row, message };
        let category = rec[0].to_string();
        if category.is_empty() {
            return Err(bad("empty category".into()));
        }
        let recency_days: f64 = rec[1]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| bad(format!("bad recency `{}`", &rec[1])))?;
        let frequency: u64 = rec[2]
            .parse()
            .ok()
            .filter(|v| *v >= 1)
            .ok_or_else(|| bad(format!("bad frequency `{}`", &rec[2])))?;
        let monetary: f64 = rec[3]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| bad(format!("bad monetary `{}`", &rec[3])))?;
        if out.iter().any(|r: &CategoryRfm| r.category == category) {
            return Err(bad(format!("duplicate category `{category}`")));
        }
        out.push(CategoryRfm {
            category,
            recency_days,
            frequency,
            monetary,
        });
    }
    Ok(out)
}

pub fn write_evolution<W: Write>(out: W, rows: &[EvolutionRow]) -> Result<(), IngestError> {
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.category.clone(), r.period.clone(), r.count.to_string()])
        .collect();
    ingest::write_records(out, &EVOLUTION_COLUMNS, &records)
}

pub fn read_evolution<R: Read>(input: R) -> Result<Vec<EvolutionRow>, AnalyzeError> {
    let records = ingest::read_records(input, &EVOLUTION_COLUMNS)?;
    records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let count = rec[2].parse().map_err(|_| AnalyzeError::BadRfmRow {
                row: i + 1,
                message: format!("bad count `{}`", &rec[2]),
            })?;
            Ok(EvolutionRow {
                category: rec[0].to_string(),
                period: rec[1].to_string(),
                count,
            })
        })
        .collect()
}
