//! Lloyd's k-means with k-means++ seeding.
//!
//! Distances are squared Euclidean computed in `f64`; centroids are stored
//! as `f32`. Ties between equidistant centroids go to the lowest index.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_MAX_ITERS: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub k: usize,
    pub dim: usize,
    /// Row-major `k x dim`.
    pub centroids: Vec<f32>,
    pub assignment: Vec<usize>,
    pub sse: f64,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

/// State after one assignment or update step, recorded by [`train_traced`].
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub centroids: Vec<f32>,
    pub assignment: Vec<usize>,
}

#[inline]
pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// Index of the nearest centroid, lowest index on ties.
pub fn nearest(point: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

pub fn sse(points: &[f32], dim: usize, centroids: &[f32], assignment: &[usize]) -> f64 {
    points
        .chunks_exact(dim)
        .zip(assignment)
        .map(|(p, &a)| sq_dist(p, &centroids[a * dim..(a + 1) * dim]))
        .sum()
}

/// k-means++ seeding: first center uniform, the rest sampled with
/// probability proportional to squared distance to the closest chosen center.
pub fn kmeanspp_seeds<R: Rng>(points: &[f32], dim: usize, k: usize, rng: &mut R) -> Vec<f32> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.extend_from_slice(row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), row(pick)));
        }
    }
    centroids
}

fn validate(points: &[f32], dim: usize, k: usize) -> Result<usize> {
    if dim == 0 || points.is_empty() {
        return Err(Error::Empty("k-means input".into()));
    }
    if !points.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: points.len() % dim,
        });
    }
    let n = points.len() / dim;
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::TooFewPoints { k, n });
    }
    if let Some(i) = points.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i / dim));
    }
    Ok(n)
}

/// Nearest-centroid assignment followed by empty-cluster repair: while a
/// cluster is empty, the point farthest from its centroid (taken from a
/// cluster with more than one member) moves there and becomes its centroid.
fn assign(points: &[f32], dim: usize, centroids: &mut [f32], k: usize) -> Vec<usize> {
    let n = points.len() / dim;
    let mut assignment = Vec::with_capacity(n);
    let mut dist = Vec::with_capacity(n);
    let mut sizes = vec![0usize; k];
    for p in points.chunks_exact(dim) {
        let (c, d) = nearest(p, centroids, dim);
        assignment.push(c);
        dist.push(d);
        sizes[c] += 1;
    }
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let mut far = None;
        for i in 0..n {
            if sizes[assignment[i]] > 1 && far.is_none_or(|(_, d)| dist[i] > d) {
                far = Some((i, dist[i]));
            }
        }
        // k <= n guarantees a donor cluster exists.
        let (i, _) = far.expect("a cluster with more than one point");
        sizes[assignment[i]] -= 1;
        sizes[empty] += 1;
        assignment[i] = empty;
        dist[i] = 0.0;
        centroids[empty * dim..(empty + 1) * dim].copy_from_slice(&points[i * dim..(i + 1) * dim]);
    }
    assignment
}

fn update(points: &[f32], dim: usize, assignment: &[usize], k: usize) -> Vec<f32> {
    let mut sums = vec![0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.chunks_exact(dim).zip(assignment) {
        counts[a] += 1;
        for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
            *s += f64::from(v);
        }
    }
    sums.chunks_exact(dim)
        .zip(&counts)
        .flat_map(|(s, &c)| s.iter().map(move |&v| (v / c.max(1) as f64) as f32))
        .collect()
}

fn run(
    points: &[f32],
    dim: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
    mut trace: Option<&mut Vec<Snapshot>>,
) -> Result<KMeansResult> {
    validate(points, dim, k)?;
    let mut r = rng::stream(seed, "kmeans/seeds", k as u64);
    let mut centroids = kmeanspp_seeds(points, dim, k, &mut r);
    let mut assignment = assign(points, dim, &mut centroids, k);
    if let Some(t) = trace.as_deref_mut() {
        t.push(Snapshot {
            centroids: centroids.clone(),
            assignment: assignment.clone(),
        });
    }
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        centroids = update(points, dim, &assignment, k);
        if let Some(t) = trace.as_deref_mut() {
            t.push(Snapshot {
                centroids: centroids.clone(),
                assignment: assignment.clone(),
            });
        }
        let next = assign(points, dim, &mut centroids, k);
        if let Some(t) = trace.as_deref_mut() {
            t.push(Snapshot {
                centroids: centroids.clone(),
                assignment: next.clone(),
            });
        }
        let done = next == assignment;
        assignment = next;
        if done {
            break;
        }
    }
    let sse = sse(points, dim, &centroids, &assignment);
    Ok(KMeansResult {
        k,
        dim,
        centroids,
        assignment,
        sse,
        iterations,
    })
}

/// Cluster row-major `points` into `k` non-empty clusters.
pub fn train(points: &[f32], dim: usize, k: usize, max_iters: usize, seed: u64) -> Result<KMeansResult> {
    run(points, dim, k, max_iters, seed, None)
}

/// Like [`train`], also returning the state after every assignment and
/// update step (the first snapshot is the seeding assignment).
pub fn train_traced(
    points: &[f32],
    dim: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<(KMeansResult, Vec<Snapshot>)> {
    let mut trace = Vec::new();
    let res = run(points, dim, k, max_iters, seed, Some(&mut trace))?;
    Ok((res, trace))
}
