//! k-means (Lloyd's algorithm, k-means++ seeding) with restarts, silhouette
//! scoring and silhouette-based selection of k.
//!
//! Reproducibility contract, so that ports can match results exactly:
//!
//! * Points are first put in a canonical order (lexicographic by coordinate,
//!   stable on ties). Coincident points are then merged into one weighted
//!   point, unless fewer than k distinct locations exist, in which case all
//!   points are kept with weight 1. Results depend only on the multiset of
//!   points, not on input order.
//! * Restart `r` draws from xoshiro256++ seeded through SplitMix64 with
//!   `seed + r` (wrapping). Uniform reals are `(next_u64 >> 11) * 2^-53`.
//! * Seeding is weighted k-means++: the first centroid is point
//!   `floor(u * m)`; each further centroid is the first point whose running
//!   sum of `weight * D²` exceeds `u * total`. When every point coincides
//!   with a centroid the draw falls back to `floor(u * m)`.
//! * Lloyd iterations stop once no centroid moves by `tol` or more.
//!   Assignment ties go to the lowest centroid index. An emptied cluster
//!   takes the point farthest from its centroid (lowest index on ties) among
//!   clusters with more than one member.
//! * After Lloyd, the best strictly improving single-point relocation is
//!   applied until none is left (Hartigan-style refinement).
//! * The run with the smallest inertia wins; ties keep the earlier restart.

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("k = {k} exceeds the number of points ({n})")]
    KTooLarge { k: usize, n: usize },
    #[error("k = {k} is invalid for {n} points")]
    InvalidK { k: usize, n: usize },
    #[error("cluster {0} has no points")]
    EmptyCluster(usize),
    #[error("need at least 3 points to select k, got {0}")]
    TooFewPoints(usize),
    #[error("point set is empty")]
    Empty,
    #[error("point {0} has the wrong dimension")]
    DimensionMismatch(usize),
    #[error("point {0} has a non-finite component")]
    NonFinite(usize),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
}

/// Finite points sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: Vec<Vec<f64>>,
    dim: usize,
}

impl PointSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self, ClusterError> {
        let dim = points.first().ok_or(ClusterError::Empty)?.len();
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(ClusterError::DimensionMismatch(i));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(ClusterError::NonFinite(i));
            }
        }
        Ok(PointSet { points, dim })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitParams {
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for FitParams {
    fn default() -> Self {
        FitParams {
            seed: 42,
            restarts: 10,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

impl FitParams {
    fn validate(&self) -> Result<(), ClusterError> {
        if self.restarts == 0 {
            return Err(ClusterError::NonPositive("restarts"));
        }
        if self.max_iter == 0 {
            return Err(ClusterError::NonPositive("max_iter"));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(ClusterError::NonPositive("tol"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub seed: u64,
    /// `None` when k = 1 or k = n.
    pub silhouette: Option<f64>,
}

/// One Lloyd run with its per-iteration inertia.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub inertia_history: Vec<f64>,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn uniform(rng: &mut Xoshiro256PlusPlus) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn pick_index(rng: &mut Xoshiro256PlusPlus, n: usize) -> usize {
    ((uniform(rng) * n as f64) as usize).min(n - 1)
}

/// Points the engine clusters: either distinct locations weighted by
/// multiplicity, or (when there are fewer distinct locations than k) every
/// input point with weight 1.
struct Weighted {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    /// Input indices represented by each engine point.
    members: Vec<Vec<usize>>,
}

impl Weighted {
    fn build(ps: &PointSet, k: usize) -> Self {
        let order = canonical_order(&ps.points);
        let mut w = Weighted {
            points: Vec::new(),
            weights: Vec::new(),
            members: Vec::new(),
        };
        for &i in &order {
            let p = &ps.points[i];
            if w.points.last() == Some(p) {
                *w.weights.last_mut().unwrap() += 1.0;
                w.members.last_mut().unwrap().push(i);
            } else {
                w.points.push(p.clone());
                w.weights.push(1.0);
                w.members.push(vec![i]);
            }
        }
        if w.points.len() < k {
            w.points = order.iter().map(|&i| ps.points[i].clone()).collect();
            w.weights = vec![1.0; order.len()];
            w.members = order.iter().map(|&i| vec![i]).collect();
        }
        w
    }

    fn len(&self) -> usize {
        self.points.len()
    }
}

fn kmeanspp(w: &Weighted, k: usize, rng: &mut Xoshiro256PlusPlus) -> Vec<Vec<f64>> {
    let n = w.len();
    let mut centroids = vec![w.points[pick_index(rng, n)].clone()];
    let mut d2: Vec<f64> = w
        .points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let weight = |i: usize| d2[i] * w.weights[i];
        let total: f64 = (0..n).map(weight).sum();
        let next = if total > 0.0 {
            let target = uniform(rng) * total;
            let mut cum = 0.0;
            let mut chosen = None;
            for i in 0..n {
                cum += weight(i);
                if weight(i) > 0.0 && cum > target {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave target >= cum; take the last positive weight
            chosen.unwrap_or_else(|| (0..n).rev().find(|&i| weight(i) > 0.0).expect("total > 0"))
        } else {
            pick_index(rng, n)
        };
        let c = w.points[next].clone();
        for (d, p) in d2.iter_mut().zip(&w.points) {
            *d = d.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(p, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn cluster_sizes(assign: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![0usize; k];
    for &a in assign {
        sizes[a] += 1;
    }
    sizes
}

fn repair_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assign: &mut [usize]) {
    loop {
        let sizes = cluster_sizes(assign, centroids.len());
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if sizes[assign[i]] < 2 {
                continue;
            }
            let d = squared_distance(p, &centroids[assign[i]]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let i = far.expect("k <= n leaves a cluster with a spare point");
        assign[i] = empty;
        centroids[empty] = points[i].clone();
    }
}

fn means(w: &Weighted, assign: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = w.points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut mass = vec![0.0; k];
    for ((p, &wt), &a) in w.points.iter().zip(&w.weights).zip(assign) {
        mass[a] += wt;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += wt * v;
        }
    }
    for (s, &m) in sums.iter_mut().zip(&mass) {
        for v in s.iter_mut() {
            *v /= m;
        }
    }
    sums
}

/// Per-cluster weighted sums. A cluster's inertia is `Σw|x|² - |S|²/W`, so
/// minimizing inertia means maximizing `Σ_c |S_c|²/W_c`.
struct Moments {
    sums: Vec<Vec<f64>>,
    mass: Vec<f64>,
    count: Vec<usize>,
}

impl Moments {
    fn of(w: &Weighted, assign: &[usize], k: usize) -> Self {
        let dim = w.points[0].len();
        let mut m = Moments {
            sums: vec![vec![0.0; dim]; k],
            mass: vec![0.0; k],
            count: vec![0; k],
        };
        for (i, &a) in assign.iter().enumerate() {
            m.shift(w, i, a, 1.0);
        }
        m
    }

    fn shift(&mut self, w: &Weighted, i: usize, c: usize, sign: f64) {
        self.mass[c] += sign * w.weights[i];
        if sign > 0.0 {
            self.count[c] += 1;
        } else {
            self.count[c] -= 1;
        }
        for (s, v) in self.sums[c].iter_mut().zip(&w.points[i]) {
            *s += sign * w.weights[i] * v;
        }
    }

    fn score(sum: &[f64], mass: f64) -> f64 {
        if mass > 0.0 {
            dot(sum, sum) / mass
        } else {
            0.0
        }
    }

    /// Score of cluster `c` after adding (`sign` = 1) or removing (`sign` =
    /// -1) point `i`.
    fn shifted_score(&self, w: &Weighted, i: usize, c: usize, sign: f64) -> f64 {
        let wt = sign * w.weights[i];
        let mass = self.mass[c] + wt;
        if mass <= 0.0 {
            return 0.0;
        }
        let sq: f64 = self.sums[c]
            .iter()
            .zip(&w.points[i])
            .map(|(s, v)| {
                let t = s + wt * v;
                t * t
            })
            .sum();
        sq / mass
    }

    /// Change in `Σ|S|²/W` from moving point `i` between clusters, or `None`
    /// if `from` would lose its last point.
    fn gain(&self, w: &Weighted, i: usize, from: usize, to: usize) -> Option<f64> {
        if self.count[from] < 2 {
            return None;
        }
        Some(
            self.shifted_score(w, i, from, -1.0) + self.shifted_score(w, i, to, 1.0)
                - Self::score(&self.sums[from], self.mass[from])
                - Self::score(&self.sums[to], self.mass[to]),
        )
    }
}

/// Local search after Lloyd converges: repeatedly applies the best strictly
/// improving single-point relocation (Hartigan-style). Returns whether
/// anything moved.
fn refine(w: &Weighted, centroids: &mut [Vec<f64>], assign: &mut [usize]) -> bool {
    let k = centroids.len();
    let mut m = Moments::of(w, assign, k);
    let total_sq: f64 = w
        .points
        .iter()
        .zip(&w.weights)
        .map(|(p, wt)| wt * dot(p, p))
        .sum();
    // improvements below this are rounding noise
    let eps = 1e-12 * total_sq.max(f64::MIN_POSITIVE);
    let mut moved = false;
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, &from) in assign.iter().enumerate() {
            for to in (0..k).filter(|&c| c != from) {
                if let Some(g) = m.gain(w, i, from, to) {
                    if g > eps && best.is_none_or(|(bg, _, _)| g > bg) {
                        best = Some((g, i, to));
                    }
                }
            }
        }
        let Some((_, i, to)) = best else {
            break;
        };
        m.shift(w, i, assign[i], -1.0);
        m.shift(w, i, to, 1.0);
        assign[i] = to;
        moved = true;
    }
    if moved {
        for (c, fresh) in means(w, assign, k).into_iter().enumerate() {
            centroids[c] = fresh;
        }
    }
    moved
}

fn weighted_inertia(w: &Weighted, centroids: &[Vec<f64>], assign: &[usize]) -> f64 {
    let mut s = Neumaier::default();
    for ((p, wt), &a) in w.points.iter().zip(&w.weights).zip(assign) {
        s.add(wt * squared_distance(p, &centroids[a]));
    }
    s.value()
}

#[derive(Default)]
struct Neumaier {
    total: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.total + x;
        self.comp += if self.total.abs() >= x.abs() {
            (self.total - t) + x
        } else {
            (x - t) + self.total
        };
        self.total = t;
    }

    fn value(&self) -> f64 {
        self.total + self.comp
    }
}

/// Sum of squared distances to the assigned centroid, compensated.
pub fn inertia(points: &[Vec<f64>], centroids: &[Vec<f64>], assign: &[usize]) -> f64 {
    let mut s = Neumaier::default();
    for (p, &a) in points.iter().zip(assign) {
        s.add(squared_distance(p, &centroids[a]));
    }
    s.value()
}

/// One run over engine points; assignments index engine points.
fn lloyd(
    w: &Weighted,
    k: usize,
    rng: &mut Xoshiro256PlusPlus,
    max_iter: usize,
    tol: f64,
) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>) {
    let mut centroids = kmeanspp(w, k, rng);
    let mut assign = vec![0usize; w.len()];
    let mut history = Vec::new();
    for _ in 0..max_iter {
        for (a, p) in assign.iter_mut().zip(&w.points) {
            *a = nearest(p, &centroids);
        }
        repair_empty(&w.points, &mut centroids, &mut assign);
        let updated = means(w, &assign, k);
        let shift = updated
            .iter()
            .zip(&centroids)
            .map(|(a, b)| distance(a, b))
            .fold(0.0, f64::max);
        centroids = updated;
        history.push(weighted_inertia(w, &centroids, &assign));
        if shift < tol {
            break;
        }
    }
    if refine(w, &mut centroids, &mut assign) {
        history.push(weighted_inertia(w, &centroids, &assign));
    }
    (centroids, assign, history)
}

/// Permutation putting points in canonical (lexicographic, stable) order.
fn canonical_order(points: &[Vec<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .iter()
            .zip(&points[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Runs every restart and returns each trace, in restart order, with
/// assignments in input order.
pub fn restart_traces(
    ps: &PointSet,
    k: usize,
    params: &FitParams,
) -> Result<Vec<RunTrace>, ClusterError> {
    params.validate()?;
    let n = ps.len();
    if k == 0 {
        return Err(ClusterError::InvalidK { k, n });
    }
    if k > n {
        return Err(ClusterError::KTooLarge { k, n });
    }
    let w = Weighted::build(ps, k);
    Ok((0..params.restarts)
        .map(|r| {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(params.seed.wrapping_add(r as u64));
            let (centroids, engine_assign, history) =
                lloyd(&w, k, &mut rng, params.max_iter, params.tol);
            let mut assignments = vec![0; n];
            for (e, members) in w.members.iter().enumerate() {
                for &i in members {
                    assignments[i] = engine_assign[e];
                }
            }
            RunTrace {
                inertia: inertia(&ps.points, &centroids, &assignments),
                centroids,
                assignments,
                inertia_history: history,
            }
        })
        .collect())
}

/// Fits k clusters, keeping the restart with minimal inertia.
pub fn kmeans_fit(
    ps: &PointSet,
    k: usize,
    params: &FitParams,
) -> Result<ClusterModel, ClusterError> {
    let traces = restart_traces(ps, k, params)?;
    let mut best = 0;
    for (i, t) in traces.iter().enumerate() {
        if t.inertia < traces[best].inertia {
            best = i;
        }
    }
    let t = traces.into_iter().nth(best).expect("restarts >= 1");
    let silhouette = if k >= 2 && k < ps.len() {
        Some(silhouette(ps, &t.assignments)?)
    } else {
        None
    };
    Ok(ClusterModel {
        k,
        centroids: t.centroids,
        assignments: t.assignments,
        inertia: t.inertia,
        seed: params.seed,
        silhouette,
    })
}

/// Mean silhouette over all points. Requires 2 <= k <= n-1 with no empty
/// cluster, where k is one more than the largest label.
pub fn silhouette(ps: &PointSet, assignments: &[usize]) -> Result<f64, ClusterError> {
    let n = ps.len();
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    if assignments.len() != n || k < 2 || k + 1 > n {
        return Err(ClusterError::InvalidK { k, n });
    }
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    if let Some(c) = sizes.iter().position(|&s| s == 0) {
        return Err(ClusterError::EmptyCluster(c));
    }

    // dist_sum[i][c]: total distance from point i to members of cluster c
    let mut dist_sum = vec![vec![0.0f64; k]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = distance(&ps.points[i], &ps.points[j]);
            dist_sum[i][assignments[j]] += d;
            dist_sum[j][assignments[i]] += d;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        let own = assignments[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = dist_sum[i][own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| dist_sum[i][c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Fits every k in `k_min..=k_max` (default upper bound `min(8, n - 1)`) and
/// returns the k with the highest silhouette; ties go to the smaller k.
pub fn select_k(
    ps: &PointSet,
    k_min: usize,
    k_max: Option<usize>,
    params: &FitParams,
) -> Result<(usize, ClusterModel), ClusterError> {
    let n = ps.len();
    if n < 3 {
        return Err(ClusterError::TooFewPoints(n));
    }
    let k_max = k_max.unwrap_or(8.min(n - 1));
    if k_min < 2 || k_min > k_max {
        return Err(ClusterError::InvalidK { k: k_min, n });
    }
    if k_max > n - 1 {
        return Err(ClusterError::InvalidK { k: k_max, n });
    }
    let mut best: Option<ClusterModel> = None;
    for k in k_min..=k_max {
        let m = kmeans_fit(ps, k, params)?;
        let s = m.silhouette.expect("2 <= k < n");
        if best
            .as_ref()
            .is_none_or(|b| s > b.silhouette.expect("2 <= k < n"))
        {
            best = Some(m);
        }
    }
    let m = best.expect("nonempty range");
    Ok((m.k, m))
}
