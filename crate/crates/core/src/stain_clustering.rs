//! K-means over flattened stain bases, producing pseudo-domain labels.
//!
//! Labels are 1-based and canonical: the first sample is always in cluster 1,
//! the next sample in a new cluster gets 2, and so on.

use crate::stain_separation::{stream_rng, StainBasis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const MAX_LLOYD_ITERS: usize = 100;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ClusterError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("batch of {samples} bases is smaller than k = {k}")]
    TooFewSamples { samples: usize, k: usize },
    #[error("basis {index} has {got} stains, expected {expected}")]
    MismatchedStains {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("cluster model has no centroids")]
    Unfitted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    /// `k` vectors of length `3·r`, indexed by label − 1.
    pub centroids: Vec<Vec<f64>>,
    /// Per-sample label in `1..=k`.
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration.
    pub inertia_trace: Vec<f64>,
}

/// Wire form of the per-sample labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelsJson {
    pub k: usize,
    pub labels: Vec<usize>,
}

impl ClusterModel {
    pub fn labels_json(&self) -> LabelsJson {
        LabelsJson {
            k: self.k,
            labels: self.labels.clone(),
        }
    }

    /// Sample indices per cluster, indexed by label − 1.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l - 1].push(i);
        }
        out
    }
}

impl LabelsJson {
    pub fn parse(text: &str) -> Result<Self, String> {
        let parsed: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if parsed.k == 0 {
            return Err("k must be ≥ 1".into());
        }
        if let Some(bad) = parsed.labels.iter().find(|&&l| l == 0 || l > parsed.k) {
            return Err(format!("label {bad} outside 1..={}", parsed.k));
        }
        Ok(parsed)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

pub fn kmeans_fit(bases: &[StainBasis], k: usize, seed: u64) -> Result<ClusterModel, ClusterError> {
    let points = flatten_all(bases)?;
    kmeans_points(&points, k, seed)
}

fn flatten_all(bases: &[StainBasis]) -> Result<Vec<Vec<f64>>, ClusterError> {
    let expected = bases.first().map_or(0, StainBasis::stains);
    bases
        .iter()
        .enumerate()
        .map(|(index, b)| {
            if b.stains() != expected {
                Err(ClusterError::MismatchedStains {
                    index,
                    expected,
                    got: b.stains(),
                })
            } else {
                Ok(b.flatten())
            }
        })
        .collect()
}

/// Lloyd's algorithm with k-means++ seeding on raw feature vectors.
pub fn kmeans_points(points: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel, ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    let n = points.len();
    if n < k {
        return Err(ClusterError::TooFewSamples { samples: n, k });
    }
    let dim = points[0].len();
    if let Some(index) = points.iter().position(|p| p.len() != dim) {
        return Err(ClusterError::MismatchedStains {
            index,
            expected: dim / 3,
            got: points[index].len() / 3,
        });
    }

    let mut rng = stream_rng(seed, 0);
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let mut assignment: Vec<usize> = vec![usize::MAX; n];
    let mut trace = Vec::new();

    for _ in 0..MAX_LLOYD_ITERS {
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        let mut next = next;
        repair_empty(points, &centroids, &mut next, k);
        let changed = next != assignment;
        assignment = next;
        centroids = means(points, &assignment, k, dim);
        trace.push(inertia(points, &assignment, &centroids));
        if !changed {
            break;
        }
    }

    // Canonical relabelling by first appearance.
    let mut remap = vec![usize::MAX; k];
    let mut next_label = 0;
    for &a in &assignment {
        if remap[a] == usize::MAX {
            remap[a] = next_label;
            next_label += 1;
        }
    }
    let mut ordered = vec![Vec::new(); k];
    for (old, &new) in remap.iter().enumerate() {
        ordered[new] = centroids[old].clone();
    }
    let labels = assignment.iter().map(|&a| remap[a] + 1).collect();
    let inertia = *trace.last().expect("at least one Lloyd iteration");
    Ok(ClusterModel {
        k,
        centroids: ordered,
        labels,
        inertia,
        inertia_trace: trace,
    })
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // Rounding can run past the last positive weight.
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(pick);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[pick]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Gives every empty cluster the point farthest from its centroid, taken from
/// a cluster that keeps at least one other member.
fn repair_empty(points: &[Vec<f64>], centroids: &[Vec<f64>], assignment: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignment.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let a = assignment[i];
            if counts[a] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[a]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        match far {
            Some(i) => assignment[i] = empty,
            None => return,
        }
    }
}

fn means(points: &[Vec<f64>], assignment: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|x| *x /= c as f64);
        }
    }
    sums
}

fn inertia(points: &[Vec<f64>], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

/// Label of the nearest centroid, ties toward the smaller label.
pub fn assign(model: &ClusterModel, basis: &StainBasis) -> Result<usize, ClusterError> {
    assign_point(model, &basis.flatten())
}

pub fn assign_point(model: &ClusterModel, point: &[f64]) -> Result<usize, ClusterError> {
    let first = model.centroids.first().ok_or(ClusterError::Unfitted)?;
    if first.len() != point.len() {
        return Err(ClusterError::MismatchedStains {
            index: 0,
            expected: first.len() / 3,
            got: point.len() / 3,
        });
    }
    Ok(nearest(point, &model.centroids).0 + 1)
}
