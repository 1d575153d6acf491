//! Lloyd's k-means with k-means++ seeding, used to group keypoint vectors.
//!
//! Input points are sorted by id before fitting, so the result depends only
//! on the set of `(id, point)` pairs and the seed, never on input order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::CandidateId;
use crate::error::{Error, Result};
use crate::linalg::squared_distance;
use crate::rng::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 8,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub centroids: Vec<Vec<f64>>,
    /// `(point id, cluster index)`, sorted by id.
    pub assignments: Vec<(CandidateId, usize)>,
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia of the seeding followed by the inertia after each Lloyd iteration.
    pub inertia_trace: Vec<f64>,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn cluster_of(&self, id: CandidateId) -> Option<usize> {
        self.assignments
            .binary_search_by_key(&id, |&(pid, _)| pid)
            .ok()
            .map(|i| self.assignments[i].1)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &(_, c) in &self.assignments {
            sizes[c] += 1;
        }
        sizes
    }
}

/// Nearest centroid; ties go to the lowest index.
fn nearest(centroids: &[Vec<f64>], point: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(c, point);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign_all(centroids: &[Vec<f64>], points: &[&[f64]]) -> (Vec<usize>, Vec<f64>) {
    points.iter().map(|p| nearest(centroids, p)).unzip()
}

/// k-means++: first centre uniform, then proportional to squared distance.
fn kmeanspp(points: &[&[f64]], k: usize, rng: &mut crate::rng::SeededRng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just short of `target`.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // Every remaining point coincides with a centre.
            chosen.iter().position(|&c| !c).unwrap()
        };
        chosen[next] = true;
        centroids.push(points[next].to_vec());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Fits `k` clusters to `points` with Lloyd's algorithm.
///
/// Stops when no centroid moves by `tol` or more (Euclidean), or after
/// `max_iter` iterations. A cluster left empty by an update is re-seeded at
/// the point farthest from its assigned centroid.
pub fn kmeans_fit(
    points: &[(CandidateId, Vec<f64>)],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<Clustering> {
    if points.is_empty() {
        return Err(Error::InsufficientData(
            "k-means needs at least one point".into(),
        ));
    }
    if k < 1 {
        return Err(Error::config("clustering.k", "must be at least 1"));
    }
    if k > points.len() {
        return Err(Error::InsufficientData(format!(
            "k-means with k = {k} needs at least {k} points, got {}",
            points.len()
        )));
    }
    let dim = points[0].1.len();
    if let Some((_, p)) = points.iter().find(|(_, p)| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            what: "k-means point",
            expected: dim,
            got: p.len(),
        });
    }

    let mut sorted: Vec<&(CandidateId, Vec<f64>)> = points.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    let ids: Vec<CandidateId> = sorted.iter().map(|(id, _)| *id).collect();
    let xs: Vec<&[f64]> = sorted.iter().map(|(_, p)| p.as_slice()).collect();

    let mut rng = seeded_rng(seed);
    let mut centroids = kmeanspp(&xs, k, &mut rng);
    let (mut labels, mut dists) = assign_all(&centroids, &xs);
    let mut trace = vec![dists.iter().sum::<f64>()];
    let mut iterations_run = 0;

    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in xs.iter().zip(&labels) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        let mut updated: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .zip(&centroids)
            .map(|((s, &n), old)| {
                if n == 0 {
                    old.clone()
                } else {
                    s.into_iter().map(|v| v / n as f64).collect()
                }
            })
            .collect();
        let mut taken = vec![false; xs.len()];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..xs.len())
                .filter(|&i| !taken[i])
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                taken[i] = true;
                updated[c] = xs[i].to_vec();
            }
        }
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        (labels, dists) = assign_all(&centroids, &xs);
        trace.push(dists.iter().sum());
        iterations_run += 1;
        if shift < tol {
            break;
        }
    }

    Ok(Clustering {
        centroids,
        assignments: ids.into_iter().zip(labels).collect(),
        inertia: dists.iter().sum(),
        iterations_run,
        inertia_trace: trace,
    })
}

/// Index of the nearest centroid, ties to the lowest index.
pub fn kmeans_assign(clustering: &Clustering, point: &[f64]) -> Result<usize> {
    let dim = clustering.centroids.first().map_or(0, Vec::len);
    if point.len() != dim {
        return Err(Error::DimensionMismatch {
            what: "k-means query",
            expected: dim,
            got: point.len(),
        });
    }
    Ok(nearest(&clustering.centroids, point).0)
}
