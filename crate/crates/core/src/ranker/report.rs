use std::collections::BTreeMap;
use std::fmt::Write;

use super::{Pattern, RankedCategory};
use crate::analyzer::EvolutionRow;

const BARS: [char; 9] = [' ', '▁', '▂', '▃', '▄', '▅', '▆', '▇', '█'];

fn parse_period(p: &str) -> Option<(i32, u32)> {
    let (y, m) = p.split_once('-')?;
    let m: u32 = m.parse().ok()?;
    (1..=12).contains(&m).then_some((y.parse().ok()?, m))
}

fn months_between(first: (i32, u32), last: (i32, u32)) -> Vec<(i32, u32)> {
    let mut out = Vec::new();
    let (mut y, mut m) = first;
    while (y, m) <= last {
        out.push((y, m));
        m += 1;
        if m > 12 {
            m = 1;
            y += 1;
        }
    }
    out
}

fn sparkline(counts: &[u64]) -> String {
    let max = counts.iter().copied().max().unwrap_or(0);
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                BARS[0]
            } else {
                // ceil(8c/max), so any nonzero month shows at least one bar
                BARS[((8 * c).div_ceil(max)) as usize]
            }
        })
        .collect()
}

fn evolution_section(out: &mut String, ranked: &[RankedCategory], evolution: &[EvolutionRow]) {
    let mut per_cat: BTreeMap<&str, BTreeMap<(i32, u32), u64>> = BTreeMap::new();
    for row in evolution {
        if let Some(p) = parse_period(&row.period) {
            *per_cat
                .entry(row.category.as_str())
                .or_default()
                .entry(p)
                .or_default() += row.count;
        }
    }
    let all = per_cat.values().flat_map(|m| m.keys().copied());
    let (Some(first), Some(last)) = (all.clone().min(), all.max()) else {
        return;
    };
    let months = months_between(first, last);
    let _ = writeln!(out, "## Monthly evolution\n");
    let _ = writeln!(
        out,
        "Flaky failures per month, {:04}-{:02} to {:04}-{:02}.\n",
        first.0, first.1, last.0, last.1
    );
    let _ = writeln!(out, "| Category | Trend | Total | Peak month |");
    let _ = writeln!(out, "|---|---|---:|---|");
    for r in ranked {
        let Some(series) = per_cat.get(r.category()) else {
            continue;
        };
        let counts: Vec<u64> = months
            .iter()
            .map(|m| series.get(m).copied().unwrap_or(0))
            .collect();
        let total: u64 = counts.iter().sum();
        // earliest month wins ties
        let peak = months
            .iter()
            .zip(&counts)
            .fold(
                (months[0], 0u64),
                |best, (m, &c)| if c > best.1 { (*m, c) } else { best },
            );
        let _ = writeln!(
            out,
            "| {} | `{}` | {} | {:04}-{:02} ({}) |",
            r.category(),
            sparkline(&counts),
            total,
            peak.0 .0,
            peak.0 .1,
            peak.1
        );
    }
    out.push('\n');
}

/// Deterministic markdown summary of a ranking.
pub fn render_report(ranked: &[RankedCategory], evolution: Option<&[EvolutionRow]>) -> String {
    let mut out = String::from("# Flaky failure category ranking\n\n");
    if ranked.is_empty() {
        out.push_str("No flaky failure categories found.\n");
        return out;
    }

    let n_clusters = ranked.iter().map(|r| r.cluster).max().unwrap_or(0) + 1;
    let total_cost: f64 = ranked.iter().map(|r| r.scored.base.monetary).sum();
    let total_failures: u64 = ranked.iter().map(|r| r.scored.base.frequency).sum();
    let _ = writeln!(
        out,
        "{} categories, {} clusters, {} flaky failures, total cost {:.2}.\n",
        ranked.len(),
        n_clusters,
        total_failures,
        total_cost
    );

    let _ = writeln!(out, "## Ranking\n");
    let _ = writeln!(
        out,
        "| Rank | Category | Pattern | Cluster | Recency (days) | Frequency | Monetary | R | F | M |"
    );
    let _ = writeln!(out, "|---:|---|---|---:|---:|---:|---:|---:|---:|---:|");
    for r in ranked {
        let b = &r.scored.base;
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {:.2} | {} | {:.2} | {} | {} | {} |",
            r.rank,
            b.category,
            r.pattern,
            r.cluster,
            b.recency_days,
            b.frequency,
            b.monetary,
            r.scored.r_score,
            r.scored.f_score,
            r.scored.m_score
        );
    }
    out.push('\n');

    let _ = writeln!(out, "## Patterns\n");
    for cluster in 0..n_clusters {
        let members: Vec<&RankedCategory> =
            ranked.iter().filter(|r| r.cluster == cluster).collect();
        let Some(first) = members.first() else {
            continue;
        };
        let pattern: Pattern = first.pattern;
        let cost: f64 = members.iter().map(|r| r.scored.base.monetary).sum();
        let names: Vec<&str> = members.iter().map(|r| r.category()).collect();
        let _ = writeln!(
            out,
            "- **{} {}** (cluster {}, {} {}, cost {:.2}): {}",
            pattern,
            pattern.label(),
            cluster,
            members.len(),
            if members.len() == 1 {
                "category"
            } else {
                "categories"
            },
            cost,
            names.join(", ")
        );
    }
    out.push('\n');

    let _ = writeln!(out, "## Top 5 costliest\n");
    let mut by_cost: Vec<&RankedCategory> = ranked.iter().collect();
    by_cost.sort_by(|a, b| {
        b.scored
            .base
            .monetary
            .total_cmp(&a.scored.base.monetary)
            .then_with(|| a.category().cmp(b.category()))
    });
    for (i, r) in by_cost.iter().take(5).enumerate() {
        let share = if total_cost > 0.0 {
            100.0 * r.scored.base.monetary / total_cost
        } else {
            0.0
        };
        let _ = writeln!(
            out,
            "{}. {}: {:.2} ({:.1}% of total, {} failures)",
            i + 1,
            r.category(),
            r.scored.base.monetary,
            share,
            r.scored.base.frequency
        );
    }
    out.push('\n');

    if let Some(ev) = evolution {
        evolution_section(&mut out, ranked, ev);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyzer::CategoryRfm;
    use crate::ranker::rank_categories;

    #[test]
    fn empty_report() {
        let text = render_report(&[], None);
        assert!(text
            .lines()
            .any(|l| l == "No flaky failure categories found."));
    }

    #[test]
    fn single_category_table() {
        let ranked = rank_categories(
            &[CategoryRfm {
                category: "oom".into(),
                recency_days: 1.0,
                frequency: 2,
                monetary: 3.0,
            }],
            None,
            42,
        )
        .unwrap()
        .categories;
        let text = render_report(&ranked, None);
        let rows: Vec<&str> = text
            .lines()
            .skip_while(|l| !l.starts_with("| Rank"))
            .skip(2)
            .take_while(|l| l.starts_with('|'))
            .collect();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].starts_with("| 1 | oom |"));
    }

    #[test]
    fn sparkline_scales_to_peak() {
        assert_eq!(sparkline(&[0, 1, 4, 8]), " ▁▄█");
        assert_eq!(sparkline(&[3]), "█");
    }

    #[test]
    fn month_range_spans_year_end() {
        assert_eq!(
            months_between((2023, 11), (2024, 2)),
            [(2023, 11), (2023, 12), (2024, 1), (2024, 2)]
        );
        assert_eq!(parse_period("2024-13"), None);
    }
}
