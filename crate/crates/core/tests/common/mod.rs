#![allow(dead_code)]

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

/// Small seeded generator for oracle sweeps.
pub struct TestRng(Xoshiro256PlusPlus);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(Xoshiro256PlusPlus::seed_from_u64(seed))
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.0.next_u64() % n as u64) as usize
    }

    pub fn range(&mut self, lo: usize, hi_inclusive: usize) -> usize {
        lo + self.below(hi_inclusive - lo + 1)
    }

    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn pick<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Every assignment of `n` points to exactly `k` non-empty, canonically
/// labeled clusters (restricted growth strings).
pub fn partitions(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(
        i: usize,
        n: usize,
        k: usize,
        used: usize,
        cur: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if i == n {
            if used == k {
                out.push(cur.clone());
            }
            return;
        }
        if k - used > n - i {
            return;
        }
        for c in 0..=used.min(k - 1) {
            cur.push(c);
            go(i + 1, n, k, used.max(c + 1), cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, 0, &mut Vec::new(), &mut out);
    out
}

/// Within-cluster sum of squares of a partition, about each cluster mean.
pub fn partition_cost(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let d = points[0].len();
    let mut cost = 0.0;
    for c in 0..k {
        let members: Vec<&Vec<f64>> = points
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(p, _)| p)
            .collect();
        let m = members.len() as f64;
        for j in 0..d {
            let mean = members.iter().map(|p| p[j]).sum::<f64>() / m;
            cost += members.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>();
        }
    }
    cost
}

/// Brute-force optimal k-partition inertia.
pub fn optimal_inertia(points: &[Vec<f64>], k: usize) -> f64 {
    partitions(points.len(), k)
        .iter()
        .map(|l| partition_cost(points, l, k))
        .fold(f64::INFINITY, f64::min)
}

/// Silhouette straight from its definition.
pub fn silhouette_direct(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let k = labels.iter().max().unwrap() + 1;
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = labels.iter().filter(|&&l| l == labels[i]).count();
        if own == 1 {
            continue;
        }
        let mean_to = |c: usize| -> f64 {
            let (s, m) = (0..n)
                .filter(|&j| j != i && labels[j] == c)
                .fold((0.0, 0usize), |(s, m), j| {
                    (s + dist(&points[i], &points[j]), m + 1)
                });
            s / m as f64
        };
        let a = mean_to(labels[i]);
        let b = (0..k)
            .filter(|&c| c != labels[i])
            .map(mean_to)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

pub fn relative_error(got: f64, want: f64) -> f64 {
    if got == want {
        0.0
    } else {
        (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
    }
}
