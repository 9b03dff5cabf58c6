//! Independent reference implementations and seeded generators shared by the
//! integration tests.
#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::Rng;
use sada_core::imaging::{from_optical_density, OpticalDensity, RgbImage, DEFAULT_ILLUMINATION};
use sada_core::stain_separation::stream_rng;

pub fn random_image(seed: u64, width: usize, height: usize, min: u8) -> RgbImage {
    let mut rng = stream_rng(seed, 0);
    let data = (0..3 * width * height).map(|_| rng.random_range(min..=255)).collect();
    RgbImage::new(width, height, data).unwrap()
}

fn unit3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Two-stain tissue: a hematoxylin-like and an eosin-like colour (jittered
/// per image), smooth blob densities, no noise beyond 8-bit quantisation.
pub fn stained_image(seed: u64, width: usize, height: usize) -> RgbImage {
    let mut rng = stream_rng(seed, 1);
    let mut jitter = |v: [f64; 3]| unit3(v.map(|x| x * rng.random_range(0.8..1.25)));
    let w = [jitter([0.65, 0.70, 0.29]), jitter([0.07, 0.99, 0.11])];
    let blobs: Vec<(f64, f64, f64, usize)> = (0..6)
        .map(|i| {
            (
                rng.random_range(0.0..width as f64),
                rng.random_range(0.0..height as f64),
                rng.random_range(2.0..0.3 * width as f64),
                i % 2,
            )
        })
        .collect();
    let n = width * height;
    let mut od = Array2::zeros((3, n));
    for p in 0..n {
        let (x, y) = ((p % width) as f64, (p / width) as f64);
        let mut h = [0.05, 0.1];
        for &(cx, cy, r, s) in &blobs {
            let d2 = ((x - cx).powi(2) + (y - cy).powi(2)) / (r * r);
            h[s] += 1.2 * (-d2).exp();
        }
        for c in 0..3 {
            od[[c, p]] = w[0][c] * h[0] + w[1][c] * h[1];
        }
    }
    from_optical_density(&OpticalDensity::new(width, height, od).unwrap(), DEFAULT_ILLUMINATION).unwrap()
}

/// Planted non-negative factors with separated stains: a quarter of the
/// pixels carry only the first stain, a quarter only the second.
pub fn planted_rank2(seed: u64, pixels: usize) -> (Array2<f64>, Array2<f64>) {
    let mut rng = stream_rng(seed, 2);
    let mut jitter = |v: [f64; 3]| unit3(v.map(|x| x * rng.random_range(0.8..1.25)));
    let cols = [jitter([0.65, 0.70, 0.29]), jitter([0.07, 0.99, 0.11])];
    let w = Array2::from_shape_fn((3, 2), |(c, j)| cols[j][c]);
    let mut rng = stream_rng(seed, 3);
    let h = Array2::from_shape_fn((2, pixels), |(j, p)| {
        let v = rng.random_range(0.2..1.5);
        match (p % 4, j) {
            (0, 1) | (1, 0) => 0.0,
            _ => v,
        }
    });
    (w, h)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm > 0.1 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Random unit embeddings; labels cover classes `0..c` (each label drawn uniformly).
pub fn random_disc_batch(seed: u64, n: usize, k: usize, c: usize, d: usize) -> (Array2<f64>, Array3<f64>, Vec<usize>) {
    let mut rng = stream_rng(seed, 4);
    let mut z = Array2::zeros((n, d));
    let mut z_t = Array3::zeros((n, k - 1, d));
    for i in 0..n {
        let v = unit_vector(&mut rng, d);
        for j in 0..d {
            z[[i, j]] = v[j];
        }
        for t in 0..k - 1 {
            let v = unit_vector(&mut rng, d);
            for j in 0..d {
                z_t[[i, t, j]] = v[j];
            }
        }
    }
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    (z, z_t, labels)
}

/// Direct double loop over anchors and positives.
pub fn disc_oracle(z: &Array2<f64>, z_t: &Array3<f64>, labels: &[usize], tau: f64, with_transformed: bool) -> f64 {
    let n = z.nrows();
    let t = z_t.shape()[1];
    let raw = |i: usize| z.row(i).to_vec();
    let tr = |i: usize, v: usize| (0..z.ncols()).map(|j| z_t[[i, v, j]]).collect::<Vec<f64>>();
    let mut total = 0.0;
    for i in 0..n {
        let mut anchor = raw(i);
        for v in 0..t {
            for (a, b) in anchor.iter_mut().zip(tr(i, v)) {
                *a += b;
            }
        }
        let norm = dot(&anchor, &anchor).sqrt();
        let anchor: Vec<f64> = anchor.iter().map(|a| a / norm).collect();

        let mut denom = 0.0;
        for m in 0..n {
            denom += (dot(&anchor, &raw(m)) / tau).exp();
            if with_transformed {
                for v in 0..t {
                    denom += (dot(&anchor, &tr(m, v)) / tau).exp();
                }
            }
        }
        let mut positives = Vec::new();
        for j in 0..n {
            if labels[j] == labels[i] {
                positives.push(raw(j));
                for v in 0..t {
                    positives.push(tr(j, v));
                }
            }
        }
        let mut term = 0.0;
        for p in &positives {
            term += ((dot(&anchor, p) / tau).exp() / denom).ln();
        }
        total += -term / positives.len() as f64;
    }
    total
}

/// Smallest within-cluster sum of squares over every assignment of the
/// points to `k` non-empty clusters, with the optimal partition as 0-based
/// labels in first-appearance order.
pub fn exhaustive_kmeans(points: &[Vec<f64>], k: usize) -> (f64, Vec<usize>) {
    let n = points.len();
    let mut labels = vec![0usize; n];
    let mut best = (f64::INFINITY, Vec::new());
    loop {
        let mut used = vec![false; k];
        labels.iter().for_each(|&l| used[l] = true);
        if used.iter().all(|&u| u) {
            let cost = partition_cost(points, &labels, k);
            if cost < best.0 - 1e-12 {
                best = (cost, canonical(&labels));
            }
        }
        let mut i = 0;
        while i < n && labels[i] == k - 1 {
            labels[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
        labels[i] += 1;
    }
}

pub fn partition_cost(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let d = points[0].len();
    let mut cost = 0.0;
    for c in 0..k {
        let members: Vec<&Vec<f64>> = points.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
        if members.is_empty() {
            continue;
        }
        let mut centre = vec![0.0; d];
        for m in &members {
            for j in 0..d {
                centre[j] += m[j] / members.len() as f64;
            }
        }
        for m in &members {
            for j in 0..d {
                cost += (m[j] - centre[j]).powi(2);
            }
        }
    }
    cost
}

/// Relabels by order of first appearance, starting at 0.
pub fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// Two tight groups of `n` points in `d` dimensions whose centres are
/// `separation` times the group radius apart. Returns points and group ids.
pub fn two_groups(seed: u64, n: usize, d: usize, separation: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = stream_rng(seed, 5);
    let radius = 0.01;
    let centre_a: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = dot(&dir, &dir).sqrt();
    dir.iter_mut().for_each(|x| *x *= separation * radius / norm);
    let centre_b: Vec<f64> = centre_a.iter().zip(&dir).map(|(a, b)| a + b).collect();
    let mut points = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for i in 0..n {
        let g = if i == 0 { 0 } else if i == 1 { 1 } else { rng.random_range(0..2) };
        let centre = if g == 0 { &centre_a } else { &centre_b };
        let offset: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let on = dot(&offset, &offset).sqrt().max(1e-12);
        let r = rng.random_range(0.0..radius) / on;
        points.push(centre.iter().zip(&offset).map(|(c, o)| c + o * r).collect());
        groups.push(g);
    }
    (points, groups)
}

/// F1 scores recomputed from a confusion matrix by the textbook formulas.
pub fn naive_f1(confusion: &[Vec<u64>]) -> (f64, f64) {
    let c = confusion.len();
    let total: u64 = confusion.iter().flatten().sum();
    let mut diag = 0;
    let mut macro_sum = 0.0;
    for i in 0..c {
        let tp = confusion[i][i];
        diag += tp;
        let fn_: u64 = confusion[i].iter().sum::<u64>() - tp;
        let fp: u64 = (0..c).map(|r| confusion[r][i]).sum::<u64>() - tp;
        let denom = 2 * tp + fp + fn_;
        macro_sum += if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    }
    (diag as f64 / total as f64, macro_sum / c as f64)
}

/// Exact non-negative least squares for a 3×2 basis, one pixel at a time.
pub fn nnls_two_stains(w: &Array2<f64>, od: &Array2<f64>) -> Array2<f64> {
    let (a, b) = (w.column(0).to_vec(), w.column(1).to_vec());
    let (aa, bb, ab) = (dot(&a, &a), dot(&b, &b), dot(&a, &b));
    let det = aa * bb - ab * ab;
    let mut h = Array2::zeros((2, od.ncols()));
    for p in 0..od.ncols() {
        let v = od.column(p).to_vec();
        let (av, bv) = (dot(&a, &v), dot(&b, &v));
        let x = (bb * av - ab * bv) / det;
        let y = (aa * bv - ab * av) / det;
        let (x, y) = if x >= 0.0 && y >= 0.0 {
            (x, y)
        } else {
            let only_a = (av / aa).max(0.0);
            let only_b = (bv / bb).max(0.0);
            let res = |x: f64, y: f64| (0..3).map(|c| (v[c] - a[c] * x - b[c] * y).powi(2)).sum::<f64>();
            if res(only_a, 0.0) <= res(0.0, only_b) { (only_a, 0.0) } else { (0.0, only_b) }
        };
        h[[0, p]] = x;
        h[[1, p]] = y;
    }
    h
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}
