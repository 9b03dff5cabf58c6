//! Sparse non-negative factorization of optical density into a stain basis
//! and per-pixel stain densities, `V ≈ W H`.
//!
//! The solver minimises `½‖V − WH‖²_F + λ Σ|H|` with multiplicative updates.
//! W columns are kept at unit norm by rescaling after each W step, with the
//! inverse scale pushed into the rows of H. The sparse objective fits the
//! basis only; the returned densities are the non-negative least-squares
//! solution for every pixel against that basis.

use crate::imaging::OpticalDensity;
use crate::matrix_csv::{parse_matrix_csv, write_matrix_csv, MatrixCsvError};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const EPS: f64 = 1e-12;
const UNIT_NORM_TOL: f64 = 1e-9;
/// Smallest step fraction tried before a W update is skipped.
const MIN_W_STEP: f64 = 1.0 / 1024.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SnmfError {
    #[error("invalid SNMF configuration: {0}")]
    Config(String),
    #[error("need at least {stains} pixels for {stains} stains, got {pixels}")]
    TooFewPixels { pixels: usize, stains: usize },
    #[error("optical density contains a non-finite or negative value")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("stain basis column {column} is not a unit-norm non-negative vector")]
    Basis { column: usize },
    #[error("density maps must be finite and non-negative")]
    Density,
    #[error(transparent)]
    Csv(#[from] MatrixCsvError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnmfConfig {
    /// Number of stain components `r`, at most 3.
    pub stains: usize,
    /// L1 sparsity weight on the density maps.
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop once the relative objective change drops below this.
    pub tol: f64,
    pub seed: u64,
    /// Pixels whose mean OD is below this are left out of basis fitting.
    pub od_mask_threshold: f64,
}

impl Default for SnmfConfig {
    fn default() -> Self {
        Self {
            stains: 2,
            lambda: 0.1,
            max_iters: 200,
            tol: 1e-6,
            seed: 0,
            od_mask_threshold: 0.15,
        }
    }
}

impl SnmfConfig {
    pub fn validate(&self) -> Result<(), SnmfError> {
        if self.stains == 0 {
            return Err(SnmfError::Config("r must be ≥ 1".into()));
        }
        if self.stains > 3 {
            return Err(SnmfError::Config("r must be ≤ 3".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(SnmfError::Config("lambda must be finite and ≥ 0".into()));
        }
        if self.max_iters == 0 {
            return Err(SnmfError::Config("max_iters must be ≥ 1".into()));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(SnmfError::Config("tol must be > 0".into()));
        }
        if !self.od_mask_threshold.is_finite() {
            return Err(SnmfError::Config("od_mask_threshold must be finite".into()));
        }
        Ok(())
    }
}

/// A 3×r matrix of unit-norm, non-negative stain colour vectors in OD space.
#[derive(Debug, Clone, PartialEq)]
pub struct StainBasis(Array2<f64>);

impl StainBasis {
    pub fn new(matrix: Array2<f64>) -> Result<Self, SnmfError> {
        if matrix.nrows() != 3 || matrix.ncols() == 0 || matrix.ncols() > 3 {
            return Err(SnmfError::Shape(format!(
                "stain basis must be 3×r with 1 ≤ r ≤ 3, got {}×{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        for (j, col) in matrix.columns().into_iter().enumerate() {
            let norm = col.dot(&col).sqrt();
            if col.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (norm - 1.0).abs() > UNIT_NORM_TOL
            {
                return Err(SnmfError::Basis { column: j });
            }
        }
        Ok(Self(matrix))
    }

    /// Normalises each column to unit length before validating.
    pub fn from_columns(matrix: Array2<f64>) -> Result<Self, SnmfError> {
        let mut m = matrix;
        for mut col in m.columns_mut() {
            let norm = col.dot(&col).sqrt();
            if norm > 0.0 {
                col /= norm;
            }
        }
        Self::new(m)
    }

    pub fn stains(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    /// Column-major flattening, the feature vector used for stain clustering.
    pub fn flatten(&self) -> Vec<f64> {
        self.0.t().iter().copied().collect()
    }

    pub fn to_csv(&self) -> String {
        write_matrix_csv(&self.0)
    }

    pub fn from_csv(text: &str) -> Result<Self, SnmfError> {
        Self::new(parse_matrix_csv(text)?)
    }
}

/// An r×n matrix of non-negative stain concentrations.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMaps(Array2<f64>);

impl DensityMaps {
    pub fn new(matrix: Array2<f64>) -> Result<Self, SnmfError> {
        if matrix.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SnmfError::Density);
        }
        Ok(Self(matrix))
    }

    pub fn stains(&self) -> usize {
        self.0.nrows()
    }

    pub fn pixel_count(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn to_csv(&self) -> String {
        write_matrix_csv(&self.0)
    }

    pub fn from_csv(text: &str) -> Result<Self, SnmfError> {
        Self::new(parse_matrix_csv(text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StainDecomposition {
    pub basis: StainBasis,
    pub density: DensityMaps,
    /// Objective per iteration of the joint basis fit, on the masked pixels.
    pub objective_trace: Vec<f64>,
    /// Least-squares residual `½‖V − WH‖²` per iteration of the density solve
    /// over all pixels, W fixed.
    pub density_trace: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

impl StainDecomposition {
    pub fn new(
        basis: StainBasis,
        density: DensityMaps,
        width: usize,
        height: usize,
    ) -> Result<Self, SnmfError> {
        if basis.stains() != density.stains() || density.pixel_count() != width * height {
            return Err(SnmfError::Shape(format!(
                "basis 3×{} and density {}×{} do not fit a {width}×{height} image",
                basis.stains(),
                density.stains(),
                density.pixel_count()
            )));
        }
        Ok(Self {
            basis,
            density,
            objective_trace: Vec::new(),
            density_trace: Vec::new(),
            width,
            height,
        })
    }

    pub fn iterations(&self) -> usize {
        self.objective_trace.len().saturating_sub(1)
    }
}

/// `½‖V − WH‖²_F + λ Σ|H|` for raw matrices.
pub fn objective(v: ArrayView2<f64>, w: ArrayView2<f64>, h: ArrayView2<f64>, lambda: f64) -> f64 {
    let residual = &v - &w.dot(&h);
    0.5 * residual.iter().map(|r| r * r).sum::<f64>() + lambda * h.iter().map(|x| x.abs()).sum::<f64>()
}

pub fn snmf_objective(
    od: &OpticalDensity,
    dec: &StainDecomposition,
    lambda: f64,
) -> Result<f64, SnmfError> {
    if dec.density.pixel_count() != od.pixel_count() || dec.basis.stains() != dec.density.stains() {
        return Err(SnmfError::Shape(
            "decomposition does not match the optical density".into(),
        ));
    }
    Ok(objective(
        od.values().view(),
        dec.basis.matrix().view(),
        dec.density.matrix().view(),
        lambda,
    ))
}

/// `W · H` as an optical density image.
pub fn reconstruct(dec: &StainDecomposition) -> Result<OpticalDensity, SnmfError> {
    if dec.basis.stains() != dec.density.stains() {
        return Err(SnmfError::Shape(format!(
            "basis has {} stains, density has {}",
            dec.basis.stains(),
            dec.density.stains()
        )));
    }
    let v = dec.basis.matrix().dot(dec.density.matrix());
    OpticalDensity::new(dec.width, dec.height, v)
        .map_err(|e| SnmfError::Shape(e.to_string()))
}

/// Root-mean-square difference between `V` and `W H`, over all 3n entries.
pub fn reconstruction_rmse(od: &OpticalDensity, dec: &StainDecomposition) -> Result<f64, SnmfError> {
    let wh = reconstruct(dec)?;
    if wh.pixel_count() != od.pixel_count() {
        return Err(SnmfError::Shape("pixel counts differ".into()));
    }
    let sq: f64 = (od.values() - wh.values()).iter().map(|d| d * d).sum();
    Ok((sq / (3 * od.pixel_count()) as f64).sqrt())
}

/// Seeded RNG for one stream of a seed; streams are independent per image index.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Factorises a single image's optical density using RNG stream 0.
pub fn fit_snmf(od: &OpticalDensity, cfg: &SnmfConfig) -> Result<StainDecomposition, SnmfError> {
    fit_snmf_stream(od, cfg, 0)
}

/// Factorises `od` drawing the initialisation from RNG stream `stream` of `cfg.seed`.
pub fn fit_snmf_stream(
    od: &OpticalDensity,
    cfg: &SnmfConfig,
    stream: u64,
) -> Result<StainDecomposition, SnmfError> {
    let (w, h, objective_trace, density_trace) = factorize(od.values().view(), cfg, stream)?;
    Ok(StainDecomposition {
        basis: StainBasis(w),
        density: DensityMaps(h),
        objective_trace,
        density_trace,
        width: od.width(),
        height: od.height(),
    })
}

type Factors = (Array2<f64>, Array2<f64>, Vec<f64>, Vec<f64>);

fn factorize(v: ArrayView2<f64>, cfg: &SnmfConfig, stream: u64) -> Result<Factors, SnmfError> {
    cfg.validate()?;
    let r = cfg.stains;
    if v.nrows() != 3 {
        return Err(SnmfError::Shape(format!("expected 3 rows, got {}", v.nrows())));
    }
    let n = v.ncols();
    if n < r {
        return Err(SnmfError::TooFewPixels {
            pixels: n,
            stains: r,
        });
    }
    if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(SnmfError::NonFinite);
    }

    let mut mask: Vec<usize> = (0..n)
        .filter(|&p| v.column(p).sum() / 3.0 >= cfg.od_mask_threshold)
        .collect();
    if mask.len() < r {
        mask = (0..n).collect();
    }
    let vm = v.select(Axis(1), &mask);

    let mut rng = stream_rng(cfg.seed, stream);
    let mut w = Array2::from_shape_simple_fn((3, r), || rng.random_range(0.1..1.0));
    normalize_columns(&mut w, None);
    let mut h = Array2::from_shape_simple_fn((r, mask.len()), || rng.random_range(0.1..1.0));

    let mut trace = vec![objective(vm.view(), w.view(), h.view(), cfg.lambda)];
    for _ in 0..cfg.max_iters {
        update_h(vm.view(), w.view(), &mut h, cfg.lambda);
        let after_h = objective(vm.view(), w.view(), h.view(), cfg.lambda);
        update_w(vm.view(), &mut w, &mut h, cfg.lambda, after_h);
        let obj = objective(vm.view(), w.view(), h.view(), cfg.lambda);
        let prev = *trace.last().expect("trace starts non-empty");
        trace.push(obj);
        if relative_change(prev, obj) < cfg.tol {
            break;
        }
    }

    // Non-negative least squares for every pixel against the fitted basis.
    let mut full = least_squares_start(v, w.view());
    let mut density_trace = vec![objective(v, w.view(), full.view(), 0.0)];
    for _ in 0..cfg.max_iters {
        update_h(v, w.view(), &mut full, 0.0);
        let obj = objective(v, w.view(), full.view(), 0.0);
        let prev = *density_trace.last().expect("trace starts non-empty");
        density_trace.push(obj);
        if relative_change(prev, obj) < cfg.tol {
            break;
        }
    }

    let totals: Vec<f64> = full.rows().into_iter().map(|row| row.sum()).collect();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]));
    let w = w.select(Axis(1), &order);
    let full = full.select(Axis(0), &order);
    Ok((w, full, trace, density_trace))
}

fn relative_change(prev: f64, cur: f64) -> f64 {
    (prev - cur).abs() / prev.abs().max(f64::MIN_POSITIVE)
}

/// `H ← H ⊙ WᵀV ⊘ (WᵀWH + λ + ε)`
fn update_h(v: ArrayView2<f64>, w: ArrayView2<f64>, h: &mut Array2<f64>, lambda: f64) {
    let num = w.t().dot(&v);
    let den = w.t().dot(&w).dot(&*h);
    ndarray::Zip::from(h)
        .and(&num)
        .and(&den)
        .for_each(|h, &n, &d| *h *= n / (d + lambda + EPS));
}

/// `W ← W ⊙ VHᵀ ⊘ (WHHᵀ + λ·W·diag(ΣH) + ε)`, then unit-normalise the columns
/// of W and scale the rows of H to compensate.
///
/// Moving a column norm into H changes the L1 term, so with unit-norm columns
/// the objective in W alone is `½‖V − WH‖² + λ Σ_j ‖w_j‖ Σ_p H_jp`. The extra
/// denominator term is the multiplicative step for that objective, which the
/// renormalisation then leaves unchanged. If rounding still makes the step
/// worse than `current`, it is shrunk toward the old W, and skipped entirely
/// below [`MIN_W_STEP`].
fn update_w(
    v: ArrayView2<f64>,
    w: &mut Array2<f64>,
    h: &mut Array2<f64>,
    lambda: f64,
    current: f64,
) {
    let hht = h.dot(&h.t());
    let num = v.dot(&h.t());
    let mut den = w.dot(&hht);
    if lambda > 0.0 {
        let row_sums = h.sum_axis(Axis(1));
        for ((c, j), d) in den.indexed_iter_mut() {
            *d += lambda * row_sums[j] * w[[c, j]];
        }
    }
    let mut target = w.clone();
    ndarray::Zip::from(&mut target)
        .and(&num)
        .and(&den)
        .for_each(|x, &n, &d| *x *= n / (d + EPS));

    let mut step = 1.0;
    loop {
        let mut cand_w = &*w + &((&target - &*w) * step);
        let mut cand_h = h.clone();
        normalize_columns(&mut cand_w, Some((&mut cand_h, w.view())));
        if objective(v, cand_w.view(), cand_h.view(), lambda) <= current {
            *w = cand_w;
            *h = cand_h;
            return;
        }
        step *= 0.5;
        if step < MIN_W_STEP {
            return;
        }
    }
}

/// Scales W columns to unit norm, multiplying the matching H rows by the old
/// norm. A column that has collapsed to zero is restored from `previous`.
fn normalize_columns(
    w: &mut Array2<f64>,
    mut compensate: Option<(&mut Array2<f64>, ArrayView2<f64>)>,
) {
    for j in 0..w.ncols() {
        let norm = w.column(j).dot(&w.column(j)).sqrt();
        if norm > 1e-150 && norm.is_finite() {
            w.column_mut(j).mapv_inplace(|x| x / norm);
            if let Some((h, _)) = compensate.as_mut() {
                h.row_mut(j).mapv_inplace(|x| x * norm);
            }
        } else if let Some((_, prev)) = compensate.as_ref() {
            w.column_mut(j).assign(&prev.column(j));
        } else {
            w.column_mut(j).fill(1.0 / 3f64.sqrt());
        }
    }
}

/// Unconstrained least-squares densities with negatives floored, used to seed
/// the multiplicative density solve.
fn least_squares_start(v: ArrayView2<f64>, w: ArrayView2<f64>) -> Array2<f64> {
    const FLOOR: f64 = 1e-6;
    let r = w.ncols();
    let n = v.ncols();
    let gram = w.t().dot(&w);
    let rhs = w.t().dot(&v);
    let mut out = Array2::from_elem((r, n), 0.5);
    if let Some(inv) = invert_small(&gram) {
        let sol = inv.dot(&rhs);
        ndarray::Zip::from(&mut out)
            .and(&sol)
            .for_each(|o, &s| *o = if s.is_finite() { s.max(FLOOR) } else { 0.5 });
    }
    out
}

/// Gauss-Jordan inverse for r ≤ 3; `None` if numerically singular.
fn invert_small(m: &Array2<f64>) -> Option<Array2<f64>> {
    let r = m.nrows();
    let mut a = ndarray::concatenate![Axis(1), m.view(), Array2::eye(r).view()];
    let scale = m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    for col in 0..r {
        let pivot = (col..r).max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))?;
        if a[[pivot, col]].abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            return None;
        }
        if pivot != col {
            for k in 0..2 * r {
                a.swap([pivot, k], [col, k]);
            }
        }
        let p = a[[col, col]];
        a.row_mut(col).mapv_inplace(|x| x / p);
        let pivot_row: Array1<f64> = a.row(col).to_owned();
        for i in 0..r {
            if i != col {
                let f = a[[i, col]];
                a.row_mut(i).scaled_add(-f, &pivot_row);
            }
        }
    }
    Some(a.slice(s![.., r..]).to_owned())
}
