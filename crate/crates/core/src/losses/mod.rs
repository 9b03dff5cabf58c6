//! Representation and classification losses with analytic gradients.
//!
//! * [`local_align_loss`] pulls the unit-normalised feature-map vectors of a
//!   raw sample toward those of its re-stained views, location by location.
//! * [`disc_loss`] is a supervised contrastive loss whose anchors are the
//!   re-normalised means of each sample's raw and re-stained embeddings.
//! * [`softmax_cross_entropy`] trains the classification head.
//!
//! Every loss returns a [`LossResult`] whose gradients are keyed by input name.

mod gradcheck;

pub use gradcheck::{builtin_grad_checks, finite_diff_check, GradCheckOptions, GradCheckReport};

use crate::layers::{relu, relu_backward, Linear, LinearGrad};
use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayView4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Norms below this are treated as zero.
pub const MIN_NORM: f64 = 1e-12;
/// Probability floor inside the cross-entropy logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

pub const RAW_MAPS: &str = "E";
pub const TRANSFORMED_MAPS: &str = "E_t";
pub const RAW_EMBEDDINGS: &str = "z";
pub const TRANSFORMED_EMBEDDINGS: &str = "z_t";
pub const PROBS: &str = "probs";
pub const LOGITS: &str = "logits";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("vector norm below {MIN_NORM} at {0}")]
    ZeroNorm(String),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("invalid probabilities in row {0}")]
    Probabilities(usize),
    #[error("embedding {0} is not unit norm")]
    NotUnitNorm(usize),
    #[error("loss is not finite: {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grads: BTreeMap<&'static str, ArrayD<f64>>,
}

impl LossResult {
    pub fn grad(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.grads.get(name)
    }

    fn check_finite(self, what: &str) -> Result<Self, LossError> {
        if self.value.is_finite() && self.grads.values().all(|g| g.iter().all(|v| v.is_finite())) {
            Ok(self)
        } else {
            Err(LossError::NonFinite(what.to_string()))
        }
    }
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

// ---------------------------------------------------------------------------
// Local alignment

/// Sum over samples and locations of the mean squared distance between the
/// unit-normalised raw vector and each unit-normalised transformed vector.
///
/// `raw` is `(N, P, D)`; `transformed` is `(N, T, P, D)` with `T = k − 1 ≥ 1`.
/// Gradients are returned under [`RAW_MAPS`] and [`TRANSFORMED_MAPS`].
pub fn local_align_loss(raw: ArrayView3<f64>, transformed: ArrayView4<f64>) -> Result<LossResult, LossError> {
    let (n, p, d) = raw.dim();
    let (nt, t, pt, dt) = transformed.dim();
    if (nt, pt, dt) != (n, p, d) {
        return Err(LossError::Shape(format!(
            "raw maps {:?} and transformed maps {:?} disagree",
            raw.dim(),
            transformed.dim()
        )));
    }
    if t == 0 {
        return Err(LossError::Shape("need at least one transformed view (k ≥ 2)".into()));
    }
    let weight = 1.0 / t as f64;
    let mut value = 0.0;
    let mut g_raw = Array3::<f64>::zeros((n, p, d));
    let mut g_tr = ndarray::Array4::<f64>::zeros((n, t, p, d));
    for i in 0..n {
        for loc in 0..p {
            let e = raw.slice(ndarray::s![i, loc, ..]);
            let ne = norm(e);
            if ne < MIN_NORM {
                return Err(LossError::ZeroNorm(format!("E[{i}, {loc}]")));
            }
            let u = &e / ne;
            for view in 0..t {
                let f = transformed.slice(ndarray::s![i, view, loc, ..]);
                let nf = norm(f);
                if nf < MIN_NORM {
                    return Err(LossError::ZeroNorm(format!("E_t[{i}, {view}, {loc}]")));
                }
                let v = &f / nf;
                let cos = u.dot(&v);
                value += weight * (2.0 - 2.0 * cos);
                // d/de ‖u − v‖² = −2 (v − u cos) / ‖e‖, symmetric for f.
                let ge = (&v - &(&u * cos)) * (-2.0 * weight / ne);
                let gf = (&u - &(&v * cos)) * (-2.0 * weight / nf);
                let mut slot = g_raw.slice_mut(ndarray::s![i, loc, ..]);
                slot += &ge;
                g_tr.slice_mut(ndarray::s![i, view, loc, ..]).assign(&gf);
            }
        }
    }
    let mut grads = BTreeMap::new();
    grads.insert(RAW_MAPS, g_raw.into_dyn());
    grads.insert(TRANSFORMED_MAPS, g_tr.into_dyn());
    LossResult { value, grads }.check_finite("local alignment")
}

/// Two affine layers with a rectifier between, applied per spatial location.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalProjector {
    pub hidden: Linear,
    pub output: Linear,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ProjectorCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorGrad {
    pub hidden: LinearGrad,
    pub output: LinearGrad,
}

impl LocalProjector {
    /// `D_b → D_b → D_e`.
    pub fn new(channels: usize, embed: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::new(channels, channels, rng),
            output: Linear::new(channels, embed, rng),
        }
    }

    /// Projects rows of `features` (one row per sample-location).
    pub fn forward(&self, features: ArrayView2<f64>) -> (Array2<f64>, ProjectorCache) {
        let pre = self.hidden.forward(features);
        let act = relu(&pre);
        let out = self.output.forward(act.view());
        (
            out,
            ProjectorCache {
                input: features.to_owned(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &ProjectorCache, grad_out: ArrayView2<f64>) -> (ProjectorGrad, Array2<f64>) {
        let (g_out, mut g_act) = self.output.backward(cache.act.view(), grad_out);
        relu_backward(&cache.pre, &mut g_act);
        let (g_hidden, g_in) = self.hidden.backward(cache.input.view(), g_act.view());
        (
            ProjectorGrad {
                hidden: g_hidden,
                output: g_out,
            },
            g_in,
        )
    }

    pub fn apply(&mut self, grad: &ProjectorGrad, lr: f64) {
        self.hidden.apply(&grad.hidden, lr);
        self.output.apply(&grad.output, lr);
    }
}

// ---------------------------------------------------------------------------
// Domain-invariant supervised contrastive loss

/// Which embeddings form the softmax denominator of [`disc_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorScope {
    /// The N raw embeddings only.
    #[default]
    RawOnly,
    /// Raw and transformed embeddings.
    RawAndTransformed,
}

/// Unit-norm embeddings of a batch: `z` is `(N, D)`, `z_t` is `(N, T, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    z: Array2<f64>,
    z_t: Array3<f64>,
    labels: Vec<usize>,
    tau: f64,
}

impl EmbeddingBatch {
    pub const UNIT_TOL: f64 = 1e-6;

    pub fn new(z: Array2<f64>, z_t: Array3<f64>, labels: Vec<usize>, tau: f64) -> Result<Self, LossError> {
        check_disc_shapes(z.view(), z_t.view(), &labels, tau)?;
        let rows = z.rows().into_iter().chain(z_t.rows());
        for (i, row) in rows.enumerate() {
            if (norm(row) - 1.0).abs() > Self::UNIT_TOL {
                return Err(LossError::NotUnitNorm(i));
            }
        }
        Ok(Self { z, z_t, labels, tau })
    }

    /// L2-normalises every embedding before building the batch.
    pub fn normalized(mut z: Array2<f64>, mut z_t: Array3<f64>, labels: Vec<usize>, tau: f64) -> Result<Self, LossError> {
        for (i, mut row) in z.rows_mut().into_iter().chain(z_t.rows_mut()).enumerate() {
            let n = norm(row.view());
            if n < MIN_NORM {
                return Err(LossError::ZeroNorm(format!("embedding {i}")));
            }
            row /= n;
        }
        Self::new(z, z_t, labels, tau)
    }

    pub fn z(&self) -> &Array2<f64> {
        &self.z
    }

    pub fn z_t(&self) -> &Array3<f64> {
        &self.z_t
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

fn check_disc_shapes(z: ArrayView2<f64>, z_t: ArrayView3<f64>, labels: &[usize], tau: f64) -> Result<(), LossError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(LossError::Temperature(tau));
    }
    let (n, d) = z.dim();
    if n < 2 {
        return Err(LossError::TooFewSamples { needed: 2, got: n });
    }
    let (nt, _, dt) = z_t.dim();
    if nt != n || dt != d || labels.len() != n {
        return Err(LossError::Shape(format!(
            "z {:?}, z_t {:?}, {} labels",
            z.dim(),
            z_t.dim(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn disc_loss(batch: &EmbeddingBatch, scope: DenominatorScope) -> Result<LossResult, LossError> {
    disc_loss_raw(batch.z.view(), batch.z_t.view(), &batch.labels, batch.tau, scope)
}

/// [`disc_loss`] on unchecked embeddings, for gradient checks and training.
///
/// For anchor `a_i = m_i / ‖m_i‖` with `m_i` the mean of `z_i` and its `T`
/// transformed embeddings, the positives are every raw and transformed
/// embedding of the same class (including sample `i`'s own), and
///
/// `L = Σ_i −1/|P_i| Σ_{p ∈ P_i} log( exp(a_i·p/τ) / Σ_{c ∈ C} exp(a_i·c/τ) )`
///
/// where `C` is given by `scope`.
pub fn disc_loss_raw(
    z: ArrayView2<f64>,
    z_t: ArrayView3<f64>,
    labels: &[usize],
    tau: f64,
    scope: DenominatorScope,
) -> Result<LossResult, LossError> {
    check_disc_shapes(z, z_t, labels, tau)?;
    let (n, d) = z.dim();
    let t = z_t.dim().1;
    let k = (t + 1) as f64;

    // Every embedding as one row: raw first, then transformed in (i, view) order.
    let mut all = Array2::<f64>::zeros((n * (t + 1), d));
    all.slice_mut(ndarray::s![..n, ..]).assign(&z);
    for i in 0..n {
        for view in 0..t {
            all.row_mut(n + i * t + view).assign(&z_t.slice(ndarray::s![i, view, ..]));
        }
    }
    let owner = |row: usize| if row < n { row } else { (row - n) / t };
    let candidates = match scope {
        DenominatorScope::RawOnly => n,
        DenominatorScope::RawAndTransformed => all.nrows(),
    };

    let mut value = 0.0;
    let mut g_all = Array2::<f64>::zeros(all.raw_dim());
    for i in 0..n {
        let mut mean = z.row(i).to_owned();
        for view in 0..t {
            mean += &z_t.slice(ndarray::s![i, view, ..]);
        }
        mean /= k;
        let m_norm = norm(mean.view());
        if m_norm < MIN_NORM {
            return Err(LossError::ZeroNorm(format!("anchor {i}")));
        }
        let anchor = &mean / m_norm;

        let logits: Array1<f64> = all.slice(ndarray::s![..candidates, ..]).dot(&anchor) / tau;
        let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum_exp.ln();

        let positives: Vec<usize> = (0..all.nrows()).filter(|&r| labels[owner(r)] == labels[i]).collect();
        let inv_pos = 1.0 / positives.len() as f64;
        let mut pos_sum = Array1::<f64>::zeros(d);
        for &r in &positives {
            pos_sum += &all.row(r);
        }
        value += lse - inv_pos * pos_sum.dot(&anchor) / tau;

        // ∂/∂anchor
        let mut g_anchor = &pos_sum * (-inv_pos / tau);
        for c in 0..candidates {
            let w = (logits[c] - lse).exp();
            g_anchor.scaled_add(w / tau, &all.row(c));
            g_all.row_mut(c).scaled_add(w / tau, &anchor);
        }
        for &r in &positives {
            g_all.row_mut(r).scaled_add(-inv_pos / tau, &anchor);
        }
        // through the normalisation and the mean
        let radial = anchor.dot(&g_anchor);
        let g_mean = (&g_anchor - &(&anchor * radial)) / m_norm;
        g_all.row_mut(i).scaled_add(1.0 / k, &g_mean);
        for view in 0..t {
            g_all.row_mut(n + i * t + view).scaled_add(1.0 / k, &g_mean);
        }
    }

    let g_z = g_all.slice(ndarray::s![..n, ..]).to_owned();
    let g_zt = g_all
        .slice(ndarray::s![n.., ..])
        .to_owned()
        .into_shape_with_order((n, t, d))
        .expect("rows are laid out sample-major");
    let mut grads = BTreeMap::new();
    grads.insert(RAW_EMBEDDINGS, g_z.into_dyn());
    grads.insert(TRANSFORMED_EMBEDDINGS, g_zt.into_dyn());
    LossResult { value, grads }.check_finite("contrastive")
}

// ---------------------------------------------------------------------------
// Cross-entropy

/// Row-wise softmax.
pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<(), LossError> {
    if labels.len() != rows {
        return Err(LossError::Shape(format!("{rows} rows but {} labels", labels.len())));
    }
    if rows == 0 {
        return Err(LossError::TooFewSamples { needed: 1, got: 0 });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(LossError::Label { label, classes });
    }
    Ok(())
}

/// Mean negative log-likelihood of the true labels, with the probability
/// clamped to [`PROB_FLOOR`] inside the logarithm. Gradient is with respect
/// to `probs` under [`PROBS`].
pub fn cross_entropy(probs: ArrayView2<f64>, labels: &[usize]) -> Result<LossResult, LossError> {
    let (rows, classes) = probs.dim();
    check_labels(labels, rows, classes)?;
    for (i, row) in probs.rows().into_iter().enumerate() {
        if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (row.sum() - 1.0).abs() > 1e-6 {
            return Err(LossError::Probabilities(i));
        }
    }
    let scale = 1.0 / rows as f64;
    let mut value = 0.0;
    let mut grad = Array2::<f64>::zeros((rows, classes));
    for (i, &y) in labels.iter().enumerate() {
        let p = probs[[i, y]];
        value -= scale * p.max(PROB_FLOOR).ln();
        if p >= PROB_FLOOR {
            grad[[i, y]] = -scale / p;
        }
    }
    let mut grads = BTreeMap::new();
    grads.insert(PROBS, grad.into_dyn());
    LossResult { value, grads }.check_finite("cross-entropy")
}

/// Cross-entropy of `softmax(logits)`; the gradient with respect to the logits
/// is `(softmax − onehot) / N`.
pub fn softmax_cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<LossResult, LossError> {
    let (rows, classes) = logits.dim();
    check_labels(labels, rows, classes)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite("logits".into()));
    }
    let probs = softmax(logits);
    let ce = cross_entropy(probs.view(), labels)?;
    let mut grad = probs;
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] -= 1.0;
    }
    grad /= rows as f64;
    let mut grads = BTreeMap::new();
    grads.insert(LOGITS, grad.into_dyn());
    Ok(LossResult { value: ce.value, grads })
}

// ---------------------------------------------------------------------------

/// `disc + β · la`; gradients of inputs shared by both terms are summed.
pub fn rep_loss(disc: &LossResult, la: &LossResult, beta: f64) -> Result<LossResult, LossError> {
    if !(disc.value.is_finite() && la.value.is_finite() && beta.is_finite()) {
        return Err(LossError::NonFinite("representation loss inputs".into()));
    }
    let mut grads = disc.grads.clone();
    for (&name, g) in &la.grads {
        let scaled = g * beta;
        match grads.get_mut(name) {
            Some(existing) if existing.shape() == g.shape() => *existing += &scaled,
            Some(_) => return Err(LossError::Shape(format!("gradient {name} differs in shape"))),
            None => {
                grads.insert(name, scaled);
            }
        }
    }
    Ok(LossResult {
        value: disc.value + beta * la.value,
        grads,
    })
}
