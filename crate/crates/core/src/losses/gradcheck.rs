//! Central-difference verification of analytic gradients.

use super::{
    disc_loss_raw, local_align_loss, rep_loss, softmax_cross_entropy, DenominatorScope, LossError, LossResult,
    LOGITS, RAW_EMBEDDINGS, RAW_MAPS, TRANSFORMED_EMBEDDINGS, TRANSFORMED_MAPS,
};
use crate::stain_separation::stream_rng;
use ndarray::{Array2, Array3, Array4, ArrayD, Ix2, Ix3, Ix4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates sampled across all inputs; every coordinate is checked when
    /// there are fewer.
    pub coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            coords: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss_name: String,
    pub max_rel_err: f64,
    pub n_coords: usize,
    pub seed: u64,
}

/// Largest `|analytic − numeric| / max(1e-8, |numeric|)` over sampled
/// coordinates, with `numeric` the central difference of `f`. Returns that
/// error and the number of coordinates checked.
pub fn finite_diff_check<F>(
    f: F,
    inputs: &[ArrayD<f64>],
    analytic: &[ArrayD<f64>],
    opts: &GradCheckOptions,
) -> Result<(f64, usize), LossError>
where
    F: Fn(&[ArrayD<f64>]) -> Result<f64, LossError>,
{
    if inputs.len() != analytic.len() || inputs.iter().zip(analytic).any(|(x, g)| x.shape() != g.shape()) {
        return Err(LossError::Shape("analytic gradients do not match the inputs".into()));
    }
    let sizes: Vec<usize> = inputs.iter().map(|x| x.len()).collect();
    let total: usize = sizes.iter().sum();
    let picks: Vec<usize> = if total <= opts.coords {
        (0..total).collect()
    } else {
        let mut rng = stream_rng(opts.seed, 3);
        let mut v = rand::seq::index::sample(&mut rng, total, opts.coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut work: Vec<ArrayD<f64>> = inputs.iter().cloned().map(standard_layout).collect();
    let analytic: Vec<ArrayD<f64>> = analytic.iter().cloned().map(standard_layout).collect();
    let mut max_rel: f64 = 0.0;
    for &flat in &picks {
        let (which, offset) = locate(&sizes, flat);
        let orig = work[which].as_slice().expect("standard layout")[offset];
        work[which].as_slice_mut().expect("standard layout")[offset] = orig + opts.epsilon;
        let plus = f(&work)?;
        work[which].as_slice_mut().expect("standard layout")[offset] = orig - opts.epsilon;
        let minus = f(&work)?;
        work[which].as_slice_mut().expect("standard layout")[offset] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(LossError::NonFinite(format!("perturbed coordinate {flat}")));
        }
        let numeric = (plus - minus) / (2.0 * opts.epsilon);
        let exact = analytic[which].as_slice().expect("standard layout")[offset];
        max_rel = max_rel.max((exact - numeric).abs() / numeric.abs().max(1e-8));
    }
    Ok((max_rel, picks.len()))
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (i, &s) in sizes.iter().enumerate() {
        if flat < s {
            return (i, flat);
        }
        flat -= s;
    }
    unreachable!("coordinate within total size")
}

fn standard_layout(x: ArrayD<f64>) -> ArrayD<f64> {
    x.as_standard_layout().into_owned()
}

fn unit_rows<R: Rng>(rng: &mut R, shape: &[usize]) -> ArrayD<f64> {
    let mut x: ArrayD<f64> = ArrayD::from_shape_simple_fn(shape, || StandardNormal.sample(rng));
    for mut lane in x.lanes_mut(ndarray::Axis(shape.len() - 1)) {
        let n = lane.dot(&lane).sqrt();
        lane /= n;
    }
    x
}

fn as4(x: &ArrayD<f64>) -> Result<Array4<f64>, LossError> {
    x.clone().into_dimensionality::<Ix4>().map_err(|e| LossError::Shape(e.to_string()))
}
fn as3(x: &ArrayD<f64>) -> Result<Array3<f64>, LossError> {
    x.clone().into_dimensionality::<Ix3>().map_err(|e| LossError::Shape(e.to_string()))
}
fn as2(x: &ArrayD<f64>) -> Result<Array2<f64>, LossError> {
    x.clone().into_dimensionality::<Ix2>().map_err(|e| LossError::Shape(e.to_string()))
}

fn grads_of(res: &LossResult, names: &[&str]) -> Vec<ArrayD<f64>> {
    names.iter().map(|n| standard_layout(res.grads[n].clone())).collect()
}

/// Checks every loss on seeded random inputs: local alignment, the contrastive
/// loss under both denominator scopes, softmax cross-entropy, and their
/// weighted sum.
pub fn builtin_grad_checks(seed: u64) -> Result<Vec<GradCheckReport>, LossError> {
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let mut rng = stream_rng(seed, 4);
    let mut reports = Vec::new();
    let mut push = |name: &str, (max_rel_err, n_coords): (f64, usize)| {
        reports.push(GradCheckReport {
            loss_name: name.to_string(),
            max_rel_err,
            n_coords,
            seed,
        })
    };

    // local alignment: N=4, k=3, 3×3 locations, D_e=8
    let e = unit_rows(&mut rng, &[4, 9, 8]).mapv(|v| v * 1.7);
    let e_t = unit_rows(&mut rng, &[4, 2, 9, 8]);
    let la_fn = |x: &[ArrayD<f64>]| -> Result<f64, LossError> {
        Ok(local_align_loss(as3(&x[0])?.view(), as4(&x[1])?.view())?.value)
    };
    let la_inputs = [e.clone(), e_t.clone()];
    let la = local_align_loss(as3(&e)?.view(), as4(&e_t)?.view())?;
    push(
        "local_align",
        finite_diff_check(la_fn, &la_inputs, &grads_of(&la, &[RAW_MAPS, TRANSFORMED_MAPS]), &opts)?,
    );

    // contrastive: N=6, k=3, D=16, three classes, τ=0.5
    let z = unit_rows(&mut rng, &[6, 16]);
    let z_t = unit_rows(&mut rng, &[6, 2, 16]);
    let labels = vec![0, 1, 2, 0, 1, 0];
    let tau = 0.5;
    for (name, scope) in [
        ("disc", DenominatorScope::RawOnly),
        ("disc_all_candidates", DenominatorScope::RawAndTransformed),
    ] {
        let f = |x: &[ArrayD<f64>]| -> Result<f64, LossError> {
            Ok(disc_loss_raw(as2(&x[0])?.view(), as3(&x[1])?.view(), &labels, tau, scope)?.value)
        };
        let res = disc_loss_raw(as2(&z)?.view(), as3(&z_t)?.view(), &labels, tau, scope)?;
        push(
            name,
            finite_diff_check(
                f,
                &[z.clone(), z_t.clone()],
                &grads_of(&res, &[RAW_EMBEDDINGS, TRANSFORMED_EMBEDDINGS]),
                &opts,
            )?,
        );
    }

    // cross-entropy through softmax: 50 samples, 5 classes
    let logits = ArrayD::from_shape_simple_fn(vec![50, 5], || rng.random_range(-3.0..3.0));
    let ce_labels: Vec<usize> = (0..50).map(|_| rng.random_range(0..5)).collect();
    let ce_fn = |x: &[ArrayD<f64>]| -> Result<f64, LossError> {
        Ok(softmax_cross_entropy(as2(&x[0])?.view(), &ce_labels)?.value)
    };
    let ce = softmax_cross_entropy(as2(&logits)?.view(), &ce_labels)?;
    push(
        "cross_entropy_softmax",
        finite_diff_check(ce_fn, std::slice::from_ref(&logits), &grads_of(&ce, &[LOGITS]), &opts)?,
    );

    // representation loss over all four inputs, β = 0.1
    let beta = 0.1;
    let rep_fn = |x: &[ArrayD<f64>]| -> Result<f64, LossError> {
        let d = disc_loss_raw(as2(&x[0])?.view(), as3(&x[1])?.view(), &labels, tau, DenominatorScope::RawOnly)?;
        let l = local_align_loss(as3(&x[2])?.view(), as4(&x[3])?.view())?;
        Ok(rep_loss(&d, &l, beta)?.value)
    };
    let d = disc_loss_raw(as2(&z)?.view(), as3(&z_t)?.view(), &labels, tau, DenominatorScope::RawOnly)?;
    let rep = rep_loss(&d, &la, beta)?;
    push(
        "rep",
        finite_diff_check(
            rep_fn,
            &[z, z_t, e, e_t],
            &grads_of(&rep, &[RAW_EMBEDDINGS, TRANSFORMED_EMBEDDINGS, RAW_MAPS, TRANSFORMED_MAPS]),
            &opts,
        )?,
    );
    Ok(reports)
}
