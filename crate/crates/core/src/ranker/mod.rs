//! RFM quintile scoring, clustering of score triples, pattern labels and the
//! final priority ranking.

mod report;

use std::cmp::Ordering;
use std::fmt;
use std::io::{Read, Write};

use serde::Serialize;
use thiserror::Error;

use crate::analyzer::CategoryRfm;
use crate::clustering::{self, ClusterError, ClusterModel, FitParams, PointSet};
use crate::ingest::{self, IngestError};

pub use report::render_report;

pub const RANKED_COLUMNS: [&str; 10] = [
    "category",
    "recency",
    "frequency",
    "monetary",
    "r_score",
    "f_score",
    "m_score",
    "cluster",
    "pattern",
    "rank",
];

#[derive(Debug, Error)]
pub enum RankError {
    #[error("cannot score an empty list")]
    EmptyInput,
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    HigherIsBetter,
    LowerIsBetter,
}

/// Strict-rank quintile scores in 1..=5: `1 + floor(5 * c / n)`, where `c`
/// counts values strictly below `v` (or strictly above, for
/// [`Direction::LowerIsBetter`]). Equal values always score equally.
pub fn score_quintiles(values: &[f64], direction: Direction) -> Result<Vec<u8>, RankError> {
    if values.is_empty() {
        return Err(RankError::EmptyInput);
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(RankError::NonFinite(i));
    }
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(values
        .iter()
        .map(|v| {
            let below = sorted.partition_point(|u| u < v);
            let above = n - sorted.partition_point(|u| u <= v);
            let count = match direction {
                Direction::HigherIsBetter => below,
                Direction::LowerIsBetter => above,
            };
            (1 + 5 * count / n).min(5) as u8
        })
        .collect())
}

/// Above/below-average flags for the R, F and M score dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Pattern {
    pub recency_high: bool,
    pub frequency_high: bool,
    pub monetary_high: bool,
}

impl Pattern {
    /// Each flag is set iff the centroid component is at least the mean
    /// score of that dimension over all categories.
    pub fn from_centroid(centroid: &[f64], means: &[f64; 3]) -> Self {
        Pattern {
            recency_high: centroid[0] >= means[0],
            frequency_high: centroid[1] >= means[1],
            monetary_high: centroid[2] >= means[2],
        }
    }

    fn render(self, up: &str, down: &str) -> String {
        let g = |b: bool| if b { up } else { down };
        format!(
            "R{}F{}M{}",
            g(self.recency_high),
            g(self.frequency_high),
            g(self.monetary_high)
        )
    }

    /// `R↑F↓M↑` style.
    pub fn glyphs(self) -> String {
        self.render("↑", "↓")
    }

    /// `R+F-M+` style, as written to CSV.
    pub fn ascii(self) -> String {
        self.render("+", "-")
    }

    pub fn parse_ascii(s: &str) -> Option<Self> {
        let b = s.as_bytes();
        if b.len() != 6 || b[0] != b'R' || b[2] != b'F' || b[4] != b'M' {
            return None;
        }
        let flag = |c: u8| match c {
            b'+' => Some(true),
            b'-' => Some(false),
            _ => None,
        };
        Some(Pattern {
            recency_high: flag(b[1])?,
            frequency_high: flag(b[3])?,
            monetary_high: flag(b[5])?,
        })
    }

    pub fn label(self) -> &'static str {
        match (self.recency_high, self.frequency_high, self.monetary_high) {
            (true, true, true) => "persistent & wasteful",
            (true, true, false) => "persistent",
            (true, false, true) => "recently expensive",
            (false, true, true) => "legacy drain",
            (true, false, false) => "emerging",
            (false, true, false) => "fading churn",
            (false, false, true) => "past incident",
            (false, false, false) => "dormant",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.glyphs())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCategory {
    pub base: CategoryRfm,
    pub r_score: u8,
    pub f_score: u8,
    pub m_score: u8,
}

impl ScoredCategory {
    fn triple(&self) -> Vec<f64> {
        vec![
            f64::from(self.r_score),
            f64::from(self.f_score),
            f64::from(self.m_score),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedCategory {
    pub scored: ScoredCategory,
    /// Cluster ids are numbered in priority order: cluster 0 ranks first.
    pub cluster: usize,
    pub pattern: Pattern,
    pub rank: usize,
}

impl RankedCategory {
    pub fn category(&self) -> &str {
        &self.scored.base.category
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub centroid: Vec<f64>,
    pub pattern: String,
    pub label: &'static str,
    pub categories: Vec<String>,
}

/// Clustering details for inspection (`--dump-model`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelDump {
    pub k: usize,
    pub seed: u64,
    pub inertia: f64,
    pub silhouette: Option<f64>,
    pub score_means: [f64; 3],
    pub clusters: Vec<ClusterSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    /// In rank order.
    pub categories: Vec<RankedCategory>,
    pub model: Option<ModelDump>,
}

pub fn score_categories(rfm: &[CategoryRfm]) -> Result<Vec<ScoredCategory>, RankError> {
    let r = score_quintiles(
        &rfm.iter().map(|c| c.recency_days).collect::<Vec<_>>(),
        Direction::LowerIsBetter,
    )?;
    let f = score_quintiles(
        &rfm.iter().map(|c| c.frequency as f64).collect::<Vec<_>>(),
        Direction::HigherIsBetter,
    )?;
    let m = score_quintiles(
        &rfm.iter().map(|c| c.monetary).collect::<Vec<_>>(),
        Direction::HigherIsBetter,
    )?;
    Ok(rfm
        .iter()
        .enumerate()
        .map(|(i, c)| ScoredCategory {
            base: c.clone(),
            r_score: r[i],
            f_score: f[i],
            m_score: m[i],
        })
        .collect())
}

/// Monetary desc, frequency desc, recency asc, then name.
fn within_cluster_order(a: &CategoryRfm, b: &CategoryRfm) -> Ordering {
    b.monetary
        .total_cmp(&a.monetary)
        .then(b.frequency.cmp(&a.frequency))
        .then(a.recency_days.total_cmp(&b.recency_days))
        .then_with(|| a.category.cmp(&b.category))
}

fn mean_column(points: &[Vec<f64>], col: usize) -> f64 {
    points.iter().map(|p| p[col]).sum::<f64>() / points.len() as f64
}

/// Ranks categories by cluster priority. With `k = None` the number of
/// clusters is chosen by silhouette when there are at least three
/// categories; otherwise everything forms one cluster.
pub fn rank_categories(
    rfm: &[CategoryRfm],
    k: Option<usize>,
    seed: u64,
) -> Result<Ranking, RankError> {
    if rfm.is_empty() {
        return Ok(Ranking {
            categories: Vec::new(),
            model: None,
        });
    }
    let scored = score_categories(rfm)?;
    let triples: Vec<Vec<f64>> = scored.iter().map(ScoredCategory::triple).collect();
    let means = [
        mean_column(&triples, 0),
        mean_column(&triples, 1),
        mean_column(&triples, 2),
    ];
    let params = FitParams {
        seed,
        ..FitParams::default()
    };
    let ps = PointSet::new(triples.clone())?;
    let model = match k {
        Some(k) => clustering::kmeans_fit(&ps, k, &params)?,
        None if ps.len() >= 3 => clustering::select_k(&ps, 2, None, &params)?.1,
        None => ClusterModel {
            k: 1,
            centroids: vec![means.to_vec()],
            assignments: vec![0; ps.len()],
            inertia: clustering::inertia(&triples, &[means.to_vec()], &vec![0; ps.len()]),
            seed,
            silhouette: None,
        },
    };

    // Cluster priority: centroid M, then F, then R, all descending.
    let mut priority: Vec<usize> = (0..model.k).collect();
    priority.sort_by(|&a, &b| {
        let (ca, cb) = (&model.centroids[a], &model.centroids[b]);
        cb[2]
            .total_cmp(&ca[2])
            .then(cb[1].total_cmp(&ca[1]))
            .then(cb[0].total_cmp(&ca[0]))
            .then(a.cmp(&b))
    });
    let mut relabel = vec![0; model.k];
    for (new, &old) in priority.iter().enumerate() {
        relabel[old] = new;
    }

    let mut ranked: Vec<RankedCategory> = scored
        .into_iter()
        .zip(&model.assignments)
        .map(|(s, &a)| RankedCategory {
            scored: s,
            cluster: relabel[a],
            pattern: Pattern::from_centroid(&model.centroids[a], &means),
            rank: 0,
        })
        .collect();
    ranked.sort_by(|a, b| {
        a.cluster
            .cmp(&b.cluster)
            .then_with(|| within_cluster_order(&a.scored.base, &b.scored.base))
    });
    for (i, r) in ranked.iter_mut().enumerate() {
        r.rank = i + 1;
    }

    let clusters = priority
        .iter()
        .enumerate()
        .map(|(new, &old)| {
            let pattern = Pattern::from_centroid(&model.centroids[old], &means);
            ClusterSummary {
                cluster: new,
                centroid: model.centroids[old].clone(),
                pattern: pattern.glyphs(),
                label: pattern.label(),
                categories: ranked
                    .iter()
                    .filter(|r| r.cluster == new)
                    .map(|r| r.category().to_string())
                    .collect(),
            }
        })
        .collect();
    Ok(Ranking {
        categories: ranked,
        model: Some(ModelDump {
            k: model.k,
            seed: model.seed,
            inertia: model.inertia,
            silhouette: model.silhouette,
            score_means: means,
            clusters,
        }),
    })
}

pub fn write_ranked<W: Write>(out: W, ranked: &[RankedCategory]) -> Result<(), IngestError> {
    let rows: Vec<Vec<String>> = ranked
        .iter()
        .map(|r| {
            let b = &r.scored.base;
            vec![
                b.category.clone(),
                b.recency_days.to_string(),
                b.frequency.to_string(),
                b.monetary.to_string(),
                r.scored.r_score.to_string(),
                r.scored.f_score.to_string(),
                r.scored.m_score.to_string(),
                r.cluster.to_string(),
                r.pattern.ascii(),
                r.rank.to_string(),
            ]
        })
        .collect();
    ingest::write_records(out, &RANKED_COLUMNS, &rows)
}

/// Reads a ranked table back (used by tests and downstream tooling).
pub fn read_ranked<R: Read>(input: R) -> Result<Vec<RankedCategory>, IngestError> {
    let records = ingest::read_records(input, &RANKED_COLUMNS)?;
    records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let row = i + 1;
            let num = |idx: usize, name: &'static str| -> Result<f64, IngestError> {
                rec[idx].parse().map_err(|_| IngestError::BadValue {
                    row,
                    field: name,
                    value: rec[idx].to_string(),
                })
            };
            let int = |idx: usize, name: &'static str| -> Result<u64, IngestError> {
                rec[idx].parse().map_err(|_| IngestError::BadValue {
                    row,
                    field: name,
                    value: rec[idx].to_string(),
                })
            };
            Ok(RankedCategory {
                scored: ScoredCategory {
                    base: CategoryRfm {
                        category: rec[0].to_string(),
                        recency_days: num(1, "recency")?,
                        frequency: int(2, "frequency")?,
                        monetary: num(3, "monetary")?,
                    },
                    r_score: int(4, "r_score")? as u8,
                    f_score: int(5, "f_score")? as u8,
                    m_score: int(6, "m_score")? as u8,
                },
                cluster: int(7, "cluster")? as usize,
                pattern: Pattern::parse_ascii(&rec[8]).ok_or(IngestError::BadValue {
                    row,
                    field: "pattern",
                    value: rec[8].to_string(),
                })?,
                rank: int(9, "rank")? as usize,
            })
        })
        .collect()
}
