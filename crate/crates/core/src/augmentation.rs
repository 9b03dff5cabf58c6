//! Stain-based augmentation: re-render each image of a mini-batch with the
//! stain basis of a donor drawn from every other stain cluster.

use crate::imaging::{intensity_from_density, to_optical_density, ImagingError, RgbImage};
use crate::stain_clustering::{kmeans_fit, ClusterError, ClusterModel};
use crate::stain_separation::{
    fit_snmf_stream, stream_rng, DensityMaps, SnmfConfig, SnmfError, StainBasis, StainDecomposition,
};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Percentiles below this are treated as an empty stain channel.
pub const PERCENTILE_FLOOR: f64 = 1e-8;
const DONOR_STREAM: u64 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AugmentError {
    #[error("cannot take a percentile of an empty row")]
    EmptyRow,
    #[error("stain count mismatch: {0}")]
    StainMismatch(String),
    #[error("density has {got} pixels, image is {width}x{height}")]
    PixelCount {
        got: usize,
        width: usize,
        height: usize,
    },
    #[error("batch of {batch} images is smaller than k = {k}")]
    BatchTooSmall { batch: usize, k: usize },
    #[error("image {index}: {source}")]
    Decompose { index: usize, source: SnmfError },
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// 99th percentile by nearest rank: the element at 1-based rank ⌈0.99·m⌉ of
/// the sorted row.
pub fn row_percentile99(row: &[f64]) -> Result<f64, AugmentError> {
    if row.is_empty() {
        return Err(AugmentError::EmptyRow);
    }
    let m = row.len();
    let rank = (99 * m).div_ceil(100).max(1);
    let mut sorted = row.to_vec();
    let (_, nth, _) = sorted.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*nth)
}

/// Per-row 99th percentiles of a density matrix.
pub fn density_percentiles(h: &DensityMaps) -> Result<Vec<f64>, AugmentError> {
    h.matrix()
        .rows()
        .into_iter()
        .map(|row| row_percentile99(&row.to_vec()))
        .collect()
}

/// Scales each row of `h_src` so its 99th percentile matches that of `h_tgt`.
/// Rows whose source percentile is below [`PERCENTILE_FLOOR`] are left as is.
pub fn normalize_density(h_src: &DensityMaps, h_tgt: &DensityMaps) -> Result<DensityMaps, AugmentError> {
    if h_src.stains() != h_tgt.stains() {
        return Err(AugmentError::StainMismatch(format!(
            "source has {} stains, target has {}",
            h_src.stains(),
            h_tgt.stains()
        )));
    }
    scale_rows(h_src, &density_percentiles(h_src)?, &density_percentiles(h_tgt)?)
}

fn scale_rows(h_src: &DensityMaps, p_src: &[f64], p_tgt: &[f64]) -> Result<DensityMaps, AugmentError> {
    let mut out = h_src.matrix().clone();
    for (j, mut row) in out.rows_mut().into_iter().enumerate() {
        if p_src[j] >= PERCENTILE_FLOOR {
            let factor = p_tgt[j] / p_src[j];
            row.mapv_inplace(|x| x * factor);
        }
    }
    DensityMaps::new(out).map_err(|e| AugmentError::StainMismatch(e.to_string()))
}

/// `x0 · exp(−W_t · Norm(H_src, H_tgt))`, quantised to 8 bits.
pub fn restain(
    h_src: &DensityMaps,
    h_tgt: &DensityMaps,
    w_tgt: &StainBasis,
    x0: f64,
    width: usize,
    height: usize,
) -> Result<RgbImage, AugmentError> {
    if h_tgt.stains() != h_src.stains() {
        return Err(AugmentError::StainMismatch(format!(
            "source has {} stains, target has {}",
            h_src.stains(),
            h_tgt.stains()
        )));
    }
    restain_with_percentiles(
        h_src,
        &density_percentiles(h_src)?,
        &density_percentiles(h_tgt)?,
        w_tgt,
        x0,
        width,
        height,
    )
}

fn restain_with_percentiles(
    h_src: &DensityMaps,
    p_src: &[f64],
    p_tgt: &[f64],
    w_tgt: &StainBasis,
    x0: f64,
    width: usize,
    height: usize,
) -> Result<RgbImage, AugmentError> {
    if w_tgt.stains() != h_src.stains() || p_tgt.len() != h_src.stains() {
        return Err(AugmentError::StainMismatch(format!(
            "basis has {} stains, density has {}",
            w_tgt.stains(),
            h_src.stains()
        )));
    }
    if h_src.pixel_count() != width * height {
        return Err(AugmentError::PixelCount {
            got: h_src.pixel_count(),
            width,
            height,
        });
    }
    if !(x0.is_finite() && x0 >= 1.0) {
        return Err(ImagingError::Illumination(x0).into());
    }
    let normed = scale_rows(h_src, p_src, p_tgt)?;
    let od = w_tgt.matrix().dot(normed.matrix());
    let mut data = Vec::with_capacity(3 * width * height);
    for p in 0..od.ncols() {
        for c in 0..3 {
            data.push(intensity_from_density(od[[c, p]], x0));
        }
    }
    Ok(RgbImage::new(width, height, data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub source_index: usize,
    /// Batch index of the donor whose basis and density scale were used.
    pub target_index: usize,
    pub source_cluster: usize,
    pub donor_cluster: usize,
    pub image: RgbImage,
}

/// Manifest row describing one augmented sample without its pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DonorChoice {
    pub source_index: usize,
    pub target_index: usize,
    pub source_cluster: usize,
    pub donor_cluster: usize,
}

impl From<&AugmentedSample> for DonorChoice {
    fn from(s: &AugmentedSample) -> Self {
        Self {
            source_index: s.source_index,
            target_index: s.target_index,
            source_cluster: s.source_cluster,
            donor_cluster: s.donor_cluster,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchTransforms {
    pub clusters: ClusterModel,
    /// `k − 1` samples per raw image, ordered by ascending donor cluster.
    pub samples: Vec<Vec<AugmentedSample>>,
}

/// Decomposes every image; image `i` uses RNG stream `i` of `cfg.seed`.
pub fn decompose_batch(images: &[RgbImage], cfg: &SnmfConfig, x0: f64) -> Result<Vec<StainDecomposition>, AugmentError> {
    images
        .par_iter()
        .enumerate()
        .map(|(index, img)| {
            let od = to_optical_density(img, x0)?;
            fit_snmf_stream(&od, cfg, index as u64).map_err(|source| AugmentError::Decompose { index, source })
        })
        .collect()
}

/// Full batch pipeline: decompose, cluster the stain bases, then re-stain each
/// image once per foreign cluster.
pub fn generate_batch_transforms(
    images: &[RgbImage],
    k: usize,
    snmf_cfg: &SnmfConfig,
    seed: u64,
) -> Result<BatchTransforms, AugmentError> {
    check_batch(images.len(), k)?;
    snmf_cfg
        .validate()
        .map_err(|source| AugmentError::Decompose { index: 0, source })?;
    let decs = decompose_batch(images, snmf_cfg, crate::imaging::DEFAULT_ILLUMINATION)?;
    let refs: Vec<&StainDecomposition> = decs.iter().collect();
    transforms_from_decompositions(&refs, k, seed, crate::imaging::DEFAULT_ILLUMINATION)
}

fn check_batch(batch: usize, k: usize) -> Result<(), AugmentError> {
    if k == 0 {
        return Err(ClusterError::ZeroK.into());
    }
    if batch < k {
        return Err(AugmentError::BatchTooSmall { batch, k });
    }
    Ok(())
}

/// Clustering, donor draw, and re-staining over already decomposed images.
pub fn transforms_from_decompositions(
    decs: &[&StainDecomposition],
    k: usize,
    seed: u64,
    x0: f64,
) -> Result<BatchTransforms, AugmentError> {
    check_batch(decs.len(), k)?;
    let bases: Vec<StainBasis> = decs.iter().map(|d| d.basis.clone()).collect();
    let clusters = kmeans_fit(&bases, k, seed)?;
    let members = clusters.members();
    let percentiles = decs
        .iter()
        .map(|d| density_percentiles(&d.density))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rng = stream_rng(seed, DONOR_STREAM);
    let mut plan = Vec::with_capacity(decs.len());
    for (i, &own) in clusters.labels.iter().enumerate() {
        let donors: Vec<(usize, usize)> = (1..=k)
            .filter(|&c| c != own)
            .map(|c| {
                let pool = &members[c - 1];
                (c, pool[rng.random_range(0..pool.len())])
            })
            .collect();
        plan.push((i, own, donors));
    }

    let samples = plan
        .into_par_iter()
        .map(|(i, own, donors)| {
            let src = decs[i];
            donors
                .into_iter()
                .map(|(cluster, t)| {
                    let image = restain_with_percentiles(
                        &src.density,
                        &percentiles[i],
                        &percentiles[t],
                        &decs[t].basis,
                        x0,
                        src.width,
                        src.height,
                    )?;
                    Ok(AugmentedSample {
                        source_index: i,
                        target_index: t,
                        source_cluster: own,
                        donor_cluster: cluster,
                        image,
                    })
                })
                .collect::<Result<Vec<_>, AugmentError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BatchTransforms { clusters, samples })
}
