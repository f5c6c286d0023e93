//! Lloyd's k-means with k-means++ seeding.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, Streams};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// `K x d` centroid matrix.
    pub centroids: Array2<f64>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Objective after every assignment step, in order.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 16,
            max_iters: 100,
            tol: 1e-9,
            seed: 0,
        }
    }
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn centroid(&self, c: usize) -> Array1<f64> {
        self.centroids.row(c).to_owned()
    }

    /// Point indices per cluster, each list in increasing order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    pub fn nearest(&self, point: ArrayView1<f64>) -> usize {
        nearest_centroid(self.centroids.view(), point).0
    }
}

/// Closest centroid under squared Euclidean distance; ties go to the lower id.
pub fn nearest_cluster(model: &ClusterModel, embedding: &Array1<f64>) -> Result<usize> {
    if embedding.len() != model.centroids.ncols() {
        return Err(Error::Shape(format!(
            "embedding has dimension {}, centroids {}",
            embedding.len(),
            model.centroids.ncols()
        )));
    }
    Ok(model.nearest(embedding.view()))
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(centroids: ArrayView2<f64>, p: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(row, p);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init<R: Rng>(points: ArrayView2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // fall back to the farthest point if rounding walked off the end
            if d2[chosen] == 0.0 {
                chosen = argmax(&d2);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    centroids
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn assign(points: ArrayView2<f64>, centroids: &Array2<f64>, assignment: &mut [usize]) -> f64 {
    let mut objective = 0.0;
    for (i, row) in points.rows().into_iter().enumerate() {
        let (c, d) = nearest_centroid(centroids.view(), row);
        assignment[i] = c;
        objective += d;
    }
    objective
}

fn count_distinct(points: ArrayView2<f64>, cap: usize) -> usize {
    let mut distinct: Vec<ArrayView1<f64>> = Vec::new();
    for row in points.rows() {
        if !distinct.contains(&row) {
            distinct.push(row);
            if distinct.len() >= cap {
                break;
            }
        }
    }
    distinct.len()
}

/// k-means over the rows of `points`.
///
/// The objective is recorded after every assignment step and is
/// non-increasing. Clusters that lose all members are re-seeded at the point
/// farthest from its current centroid. Iteration stops after `max_iters`
/// updates or when the objective improves by less than `tol`.
pub fn kmeans(points: ArrayView2<f64>, cfg: &KMeansConfig) -> Result<ClusterModel> {
    let n = points.nrows();
    let k = cfg.k;
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if !(cfg.tol >= 0.0) {
        return Err(Error::InvalidConfig("tol must be non-negative".into()));
    }
    if k > n {
        return Err(Error::Insufficient(format!("k = {k} exceeds {n} points")));
    }
    if count_distinct(points, k) < k {
        return Err(Error::Insufficient(format!("fewer than k = {k} distinct points")));
    }

    let mut rng = Streams::new(cfg.seed).stream(Purpose::Clustering, 0, k as u64);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignment = vec![0usize; n];
    let mut trace = Vec::new();
    let mut objective = assign(points, &centroids, &mut assignment);
    trace.push(objective);

    for _ in 0..cfg.max_iters {
        update_centroids(points, &mut centroids, &mut assignment);
        let next = assign(points, &centroids, &mut assignment);
        debug_assert!(
            next <= objective * (1.0 + 1e-12) + 1e-300,
            "k-means objective increased: {objective} -> {next}"
        );
        trace.push(next);
        let improvement = objective - next;
        objective = next;
        if improvement <= cfg.tol {
            break;
        }
    }

    Ok(ClusterModel {
        centroids,
        assignment,
        inertia: objective,
        objective_trace: trace,
    })
}

fn update_centroids(points: ArrayView2<f64>, centroids: &mut Array2<f64>, assignment: &mut [usize]) {
    let k = centroids.nrows();
    let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
    let mut counts = vec![0usize; k];
    // fixed point order keeps the reduction deterministic
    for (i, row) in points.rows().into_iter().enumerate() {
        let c = assignment[i];
        counts[c] += 1;
        let mut s = sums.row_mut(c);
        s += &row;
    }
    for c in 0..k {
        if counts[c] > 0 {
            let mean = &sums.row(c) / counts[c] as f64;
            centroids.row_mut(c).assign(&mean);
        }
    }
    let mut taken: Vec<usize> = Vec::new();
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        // empty cluster: move it onto the farthest point, which then becomes
        // its own member
        let dist: Vec<f64> = points
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                if taken.contains(&i) || counts[assignment[i]] <= 1 {
                    f64::NEG_INFINITY
                } else {
                    sq_dist(row, centroids.row(assignment[i]))
                }
            })
            .collect();
        let far = argmax(&dist);
        if dist[far] == f64::NEG_INFINITY {
            continue;
        }
        taken.push(far);
        counts[assignment[far]] -= 1;
        assignment[far] = c;
        counts[c] = 1;
        centroids.row_mut(c).assign(&points.row(far));
    }
}
