//! Two-stage training, the cross-entropy baseline, and prediction.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, Axis, Ix2};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{patch_len, patch_rows, stack_rows, EncoderError, EncoderGrad, PatchLinearEncoder};
use crate::augmentation::{transforms_from_decompositions, AugmentError};
use crate::imaging::{to_optical_density, ImagingError, RgbImage, DEFAULT_ILLUMINATION};
use crate::layers::Linear;
use crate::losses::{
    disc_loss, local_align_loss, rep_loss, softmax_cross_entropy, DenominatorScope, EmbeddingBatch, LocalProjector, ProjectorGrad,
    LossError, LossResult, LOGITS, MIN_NORM, RAW_EMBEDDINGS, RAW_MAPS, TRANSFORMED_EMBEDDINGS, TRANSFORMED_MAPS,
};
use crate::stain_separation::{stream_rng, StainDecomposition};

const INIT_STREAM: u64 = 10;
const STAGE1_STREAM: u64 = 11;
const STAGE2_STREAM: u64 = 12;
const ERM_STREAM: u64 = 13;
const FEATURE_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{stage}: non-finite loss at step {step}")]
    NonFinite { stage: &'static str, step: usize },
    #[error("training set has {got} images, batch needs {batch}")]
    TooFewImages { got: usize, batch: usize },
    #[error("training set has {images} images but {labels} labels / {decompositions} decompositions")]
    Mismatch {
        images: usize,
        labels: usize,
        decompositions: usize,
    },
    #[error("label {label} outside 0..{classes}")]
    Label { label: usize, classes: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Steps for each stage and for the baseline.
    pub steps: usize,
    pub batch_size: usize,
    /// Stage-1 step size.
    pub learning_rate: f64,
    /// Stage-2 classifier step size.
    pub classifier_learning_rate: f64,
    /// Baseline step size for the whole network.
    pub erm_learning_rate: f64,
    pub k: usize,
    pub beta: f64,
    pub tau: f64,
    pub grid: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub local_dim: usize,
    pub denominator: DenominatorScope,
    /// Stage 1 updates only the projectors when set.
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 32,
            learning_rate: 5e-5,
            classifier_learning_rate: 5e-5,
            erm_learning_rate: 5e-5,
            k: 3,
            beta: 0.1,
            tau: 0.1,
            grid: 4,
            feature_dim: 16,
            embed_dim: 16,
            local_dim: 128,
            denominator: DenominatorScope::RawOnly,
            freeze_backbone: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.to_string()));
        let rates = [self.learning_rate, self.classifier_learning_rate, self.erm_learning_rate];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return bad("learning rates must be finite and ≥ 0");
        }
        if self.k < 2 {
            return bad("k must be ≥ 2");
        }
        if self.batch_size < self.k.max(2) {
            return bad("batch_size must be ≥ max(k, 2)");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be finite and ≥ 0");
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad("tau must be finite and > 0");
        }
        if self.grid == 0 || self.feature_dim == 0 || self.embed_dim == 0 || self.local_dim == 0 {
            return bad("grid and layer widths must be positive");
        }
        Ok(())
    }
}

/// Images with cached patch rows and (for stage 1) stain decompositions.
#[derive(Debug, Clone)]
pub struct TrainSet<'a> {
    pub patches: Vec<Array2<f64>>,
    pub labels: Vec<usize>,
    pub decompositions: Vec<&'a StainDecomposition>,
    pub classes: usize,
    pub patch_len: usize,
}

impl<'a> TrainSet<'a> {
    pub fn new(
        images: &[&RgbImage],
        labels: Vec<usize>,
        decompositions: Vec<&'a StainDecomposition>,
        classes: usize,
        grid: usize,
    ) -> Result<Self, TrainError> {
        if images.len() != labels.len() || (!decompositions.is_empty() && decompositions.len() != images.len()) {
            return Err(TrainError::Mismatch {
                images: images.len(),
                labels: labels.len(),
                decompositions: decompositions.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TrainError::Label { label, classes });
        }
        let patches = image_patches(images, grid)?;
        let len = images.first().map_or(0, |i| patch_len(i.width(), i.height(), grid));
        Ok(Self {
            patches,
            labels,
            decompositions,
            classes,
            patch_len: len,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn image_patches(images: &[&RgbImage], grid: usize) -> Result<Vec<Array2<f64>>, TrainError> {
    images
        .iter()
        .map(|img| Ok(patch_rows(&to_optical_density(img, DEFAULT_ILLUMINATION)?, grid)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Model {
    pub encoder: PatchLinearEncoder,
    pub local: LocalProjector,
}

/// Random layers centred on the mean training patch.
pub fn init_encoder(set: &TrainSet, cfg: &TrainConfig, seed: u64) -> PatchLinearEncoder {
    let mut rng = stream_rng(seed, INIT_STREAM);
    let mut enc = PatchLinearEncoder::new(set.patch_len, cfg.grid, cfg.feature_dim, cfg.embed_dim, &mut rng);
    let rows: usize = set.patches.iter().map(|p| p.nrows()).sum();
    if rows > 0 {
        let total = set
            .patches
            .iter()
            .fold(Array1::zeros(set.patch_len), |acc, p| acc + p.sum_axis(Axis(0)));
        enc.offset = total / rows as f64;
    }
    enc
}

fn draw_batch(rng: &mut impl Rng, set: &TrainSet, batch: usize) -> Result<Vec<usize>, TrainError> {
    if set.len() < batch {
        return Err(TrainError::TooFewImages { got: set.len(), batch });
    }
    Ok(sample(rng, set.len(), batch).into_vec())
}

fn grad2(res: &LossResult, key: &str, rows: usize) -> Array2<f64> {
    let g = res.grad(key).expect("loss provides gradient");
    let cols = g.len() / rows.max(1);
    g.as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, cols))
        .expect("contiguous gradient")
}

/// Representation learning with `disc + β·local_align` on raw images and
/// their stain transforms. Returns the model and per-step loss.
pub fn train_stage1(set: &TrainSet, cfg: &TrainConfig, seed: u64) -> Result<(Stage1Model, Vec<f64>), TrainError> {
    cfg.validate()?;
    if set.decompositions.len() != set.len() {
        return Err(TrainError::Mismatch {
            images: set.len(),
            labels: set.len(),
            decompositions: set.decompositions.len(),
        });
    }
    let mut encoder = init_encoder(set, cfg, seed);
    let mut local = LocalProjector::new(cfg.feature_dim, cfg.local_dim, &mut stream_rng(seed, INIT_STREAM + 100));
    let mut rng = stream_rng(seed, STAGE1_STREAM);
    let n = cfg.batch_size;
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let idx = draw_batch(&mut rng, set, n)?;
        let aug_seed: u64 = rng.random();
        let decs: Vec<&StainDecomposition> = idx.iter().map(|&i| set.decompositions[i]).collect();
        let transforms = transforms_from_decompositions(&decs, cfg.k, aug_seed, DEFAULT_ILLUMINATION)?;
        let mut blocks: Vec<Array2<f64>> = idx.iter().map(|&i| set.patches[i].clone()).collect();
        for per_image in &transforms.samples {
            for s in per_image {
                blocks.push(patch_rows(&to_optical_density(&s.image, DEFAULT_ILLUMINATION)?, cfg.grid)?);
            }
        }
        let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
        let (value, grads) = stage1_objective(&encoder, &local, stack_rows(&blocks), labels, cfg)?;
        if !value.is_finite() {
            return Err(TrainError::NonFinite { stage: "stage 1", step });
        }
        curve.push(value);
        encoder.projector.apply(&grads.encoder.projector, cfg.learning_rate);
        local.apply(&grads.local, cfg.learning_rate);
        if !cfg.freeze_backbone {
            encoder.patch.apply(&grads.encoder.patch, cfg.learning_rate);
        }
        if !encoder.is_finite() {
            return Err(TrainError::NonFinite { stage: "stage 1", step });
        }
    }
    Ok((Stage1Model { encoder, local }, curve))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Grad {
    pub encoder: EncoderGrad,
    pub local: ProjectorGrad,
}

/// `disc + β·local_align` and its parameter gradients for one batch. `patches`
/// holds the `n` raw images followed by their `k − 1` transforms each,
/// sample-major.
pub fn stage1_objective(
    encoder: &PatchLinearEncoder,
    local: &LocalProjector,
    patches: Array2<f64>,
    labels: Vec<usize>,
    cfg: &TrainConfig,
) -> Result<(f64, Stage1Grad), TrainError> {
    let (n, t, p) = (labels.len(), cfg.k - 1, encoder.positions());
    let cache = encoder.forward_features(patches)?;
    let (y, z) = encoder.embed(cache.pooled.view());
    let dz = z.ncols();
    let z_raw = z.slice(s![..n, ..]).to_owned();
    let z_t = z.slice(s![n.., ..]).to_owned().into_shape_with_order((n, t, dz)).expect("sample-major rows");
    let disc = disc_loss(&EmbeddingBatch::new(z_raw, z_t, labels, cfg.tau)?, cfg.denominator)?;

    let (e, local_cache) = local.forward(cache.maps.view());
    let de = e.ncols();
    let mut e_raw = e.slice(s![..n * p, ..]).to_owned().into_shape_with_order((n, p, de)).expect("rows");
    let mut e_t = e.slice(s![n * p.., ..]).to_owned().into_shape_with_order((n, t, p, de)).expect("rows");
    let skipped = mask_degenerate(&mut e_raw, &mut e_t);
    let mut la = local_align_loss(e_raw.view(), e_t.view())?;
    for &(i, q) in &skipped {
        for (key, axis) in [(RAW_MAPS, 1), (TRANSFORMED_MAPS, 2)] {
            if let Some(g) = la.grads.get_mut(key) {
                g.index_axis_mut(Axis(0), i).index_axis_mut(Axis(axis - 1), q).fill(0.0);
            }
        }
    }
    let rep = rep_loss(&disc, &la, cfg.beta)?;

    let g_z = ndarray::concatenate(
        Axis(0),
        &[grad2(&rep, RAW_EMBEDDINGS, n).view(), grad2(&rep, TRANSFORMED_EMBEDDINGS, n * t).view()],
    )
    .expect("embedding widths agree");
    let g_e = ndarray::concatenate(
        Axis(0),
        &[grad2(&rep, RAW_MAPS, n * p).view(), grad2(&rep, TRANSFORMED_MAPS, n * t * p).view()],
    )
    .expect("map widths agree");
    let (g_proj, g_pooled) = encoder.embed_backward(cache.pooled.view(), &y, &z, g_z.view());
    let (g_local, g_maps) = local.backward(&local_cache, g_e.view());
    let g_patch = encoder.features_backward(&cache, g_pooled.view(), Some(g_maps.view()));
    Ok((
        rep.value,
        Stage1Grad {
            encoder: EncoderGrad {
                patch: g_patch,
                projector: g_proj,
            },
            local: g_local,
        },
    ))
}

/// Locations where a raw or transformed local embedding has (near) zero norm
/// have no direction to align; they are replaced by identical unit vectors so
/// they add nothing, and their gradients are zeroed by the caller.
fn mask_degenerate(e_raw: &mut Array3<f64>, e_t: &mut Array4<f64>) -> Vec<(usize, usize)> {
    let tiny = |v: ArrayView1<f64>| v.dot(&v).sqrt() < MIN_NORM;
    let (n, p, _) = e_raw.dim();
    let mut skipped = Vec::new();
    for i in 0..n {
        for q in 0..p {
            let bad = tiny(e_raw.slice(s![i, q, ..]))
                || (0..e_t.dim().1).any(|t| tiny(e_t.slice(s![i, t, q, ..])));
            if bad {
                e_raw.slice_mut(s![i, q, ..]).fill(0.0);
                e_raw[[i, q, 0]] = 1.0;
                let mut lanes = e_t.slice_mut(s![i, .., q, ..]);
                lanes.fill(0.0);
                lanes.column_mut(0).fill(1.0);
                skipped.push((i, q));
            }
        }
    }
    skipped
}

/// Mean-pooled backbone features, one row per image.
pub fn pooled_features(encoder: &PatchLinearEncoder, patches: &[Array2<f64>]) -> Result<Array2<f64>, TrainError> {
    let mut out = Array2::zeros((patches.len(), encoder.features()));
    for (c, chunk) in patches.chunks(FEATURE_CHUNK).enumerate() {
        let cache = encoder.forward_features(stack_rows(chunk))?;
        let start = c * FEATURE_CHUNK;
        out.slice_mut(s![start..start + chunk.len(), ..]).assign(&cache.pooled);
    }
    Ok(out)
}

fn ce_step(
    classifier: &Linear,
    x: ArrayView2<f64>,
    labels: &[usize],
) -> Result<(LossResult, crate::layers::LinearGrad, Array2<f64>), TrainError> {
    let logits = classifier.forward(x);
    let ce = softmax_cross_entropy(logits.view(), labels)?;
    let g = ce
        .grad(LOGITS)
        .expect("logit gradient")
        .view()
        .into_dimensionality::<Ix2>()
        .expect("2-d logits")
        .to_owned();
    let (grad, grad_x) = classifier.backward(x, g.view());
    Ok((ce, grad, grad_x))
}

/// Affine softmax classifier on frozen pooled features, fit in standardized
/// feature coordinates.
pub fn train_stage2(
    encoder: &PatchLinearEncoder,
    set: &TrainSet,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Linear, Vec<f64>), TrainError> {
    cfg.validate()?;
    let raw = pooled_features(encoder, &set.patches)?;
    let (mean, scale) = standardizer(&raw);
    let feats = (&raw - &mean) / &scale;
    let mut classifier = Linear::zeros(encoder.features(), set.classes);
    let mut rng = stream_rng(seed, STAGE2_STREAM);
    let mut curve = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch_size.min(set.len());
    for step in 0..cfg.steps {
        let idx = draw_batch(&mut rng, set, batch)?;
        let x = feats.select(Axis(0), &idx);
        let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
        let (ce, grad, _) = ce_step(&classifier, x.view(), &labels)?;
        if !ce.value.is_finite() {
            return Err(TrainError::NonFinite { stage: "stage 2", step });
        }
        curve.push(ce.value);
        classifier.apply(&grad, cfg.classifier_learning_rate);
    }
    // fold the standardization back in: W' = W / σ, b' = b − W' μ
    classifier.weight /= &scale;
    classifier.bias -= &classifier.weight.dot(&mean);
    Ok((classifier, curve))
}

/// Per-feature mean and standard deviation; constant features get unit scale.
fn standardizer(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
    let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    (mean, scale)
}

/// End-to-end cross-entropy training of the same backbone, no augmentation.
pub fn train_erm(
    set: &TrainSet,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(PatchLinearEncoder, Linear, Vec<f64>), TrainError> {
    cfg.validate()?;
    let mut encoder = init_encoder(set, cfg, seed);
    let mut classifier = Linear::zeros(cfg.feature_dim, set.classes);
    let mut rng = stream_rng(seed, ERM_STREAM);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = draw_batch(&mut rng, set, cfg.batch_size)?;
        let cache = encoder.forward_features(stack_rows(idx.iter().map(|&i| &set.patches[i])))?;
        let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
        let (ce, grad, g_pooled) = ce_step(&classifier, cache.pooled.view(), &labels)?;
        if !ce.value.is_finite() {
            return Err(TrainError::NonFinite { stage: "erm", step });
        }
        curve.push(ce.value);
        let g_patch = encoder.features_backward(&cache, g_pooled.view(), None);
        classifier.apply(&grad, cfg.erm_learning_rate);
        encoder.patch.apply(&g_patch, cfg.erm_learning_rate);
    }
    Ok((encoder, classifier, curve))
}

/// Arg-max class per image; ties go to the smaller index.
pub fn predict(
    encoder: &PatchLinearEncoder,
    classifier: &Linear,
    patches: &[Array2<f64>],
) -> Result<Vec<usize>, TrainError> {
    let logits = classifier.forward(pooled_features(encoder, patches)?.view());
    Ok(logits
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect())
}
