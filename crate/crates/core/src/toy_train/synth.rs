//! Procedural stained-cell images: class sets the nucleus shape, domain sets
//! the stain tint.

use ndarray::{array, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::imaging::{from_optical_density, OpticalDensity, RgbImage, DEFAULT_ILLUMINATION};
use crate::stain_separation::stream_rng;

/// Hematoxylin and eosin OD signatures before tinting.
pub fn reference_stains() -> Array2<f64> {
    array![[0.65, 0.07], [0.70, 0.99], [0.29, 0.11]]
}

pub const MIN_IMAGE_SIZE: usize = 8;
const DOMAIN_STREAM_BASE: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("need at least 3 domains, got {0}")]
    TooFewDomains(usize),
    #[error("imbalance ratio {0} must be a positive integer")]
    Ratio(u32),
    #[error("domain {0}: tint entries must be finite and > 0")]
    Tint(usize),
    #[error("domain {0}: noise must be finite and ≥ 0")]
    Noise(usize),
    #[error("domain {domain} has {got} class shapes, expected {expected}")]
    ShapeCount { domain: usize, got: usize, expected: usize },
    #[error("image size {0} is below {MIN_IMAGE_SIZE}")]
    Size(usize),
    #[error("n_per_class must be positive")]
    Empty,
}

/// Nucleus geometry; radii are in pixels of a 32-pixel image and scale with size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassShape {
    pub radius: f64,
    pub eccentricity: f64,
    pub lobes: u32,
    /// Stripe frequency across the nucleus, radians per pixel; 0 for none.
    pub texture_freq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDomainSpec {
    pub id: usize,
    pub tint: [f64; 3],
    pub noise: f64,
    pub shapes: Vec<ClassShape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub size: usize,
    pub n_per_class: usize,
    pub class_ratios: Vec<u32>,
    /// σ of the per-image log-normal jitter applied to each tint entry.
    pub tint_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 32,
            n_per_class: 12,
            class_ratios: vec![10, 5, 2, 1, 1],
            tint_jitter: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub domain: usize,
    pub images: Vec<RgbImage>,
    pub labels: Vec<usize>,
}

pub fn default_shapes() -> Vec<ClassShape> {
    let shape = |radius, eccentricity, lobes, texture_freq| ClassShape {
        radius,
        eccentricity,
        lobes,
        texture_freq,
    };
    vec![
        shape(4.0, 0.0, 1, 0.0),
        shape(6.5, 0.0, 1, 0.0),
        shape(5.0, 0.7, 1, 0.0),
        shape(3.2, 0.0, 3, 0.0),
        shape(5.5, 0.2, 1, 1.6),
    ]
}

/// Three domains with clearly separated stain tints.
pub fn default_domains() -> Vec<SynthDomainSpec> {
    [[1.0, 1.0, 1.0], [0.55, 1.0, 1.6], [1.5, 0.9, 0.55]]
        .into_iter()
        .enumerate()
        .map(|(id, tint)| SynthDomainSpec {
            id,
            tint,
            noise: 0.02,
            shapes: default_shapes(),
        })
        .collect()
}

pub fn class_counts(cfg: &SynthConfig) -> Vec<usize> {
    cfg.class_ratios.iter().map(|&r| r as usize * cfg.n_per_class).collect()
}

pub fn validate(domains: &[SynthDomainSpec], cfg: &SynthConfig) -> Result<(), SynthError> {
    let classes = cfg.class_ratios.len();
    if classes < 2 {
        return Err(SynthError::TooFewClasses(classes));
    }
    if domains.len() < 3 {
        return Err(SynthError::TooFewDomains(domains.len()));
    }
    if let Some(&r) = cfg.class_ratios.iter().find(|&&r| r == 0) {
        return Err(SynthError::Ratio(r));
    }
    if cfg.size < MIN_IMAGE_SIZE {
        return Err(SynthError::Size(cfg.size));
    }
    if cfg.n_per_class == 0 {
        return Err(SynthError::Empty);
    }
    for d in domains {
        if !d.tint.iter().all(|t| t.is_finite() && *t > 0.0) {
            return Err(SynthError::Tint(d.id));
        }
        if !(d.noise.is_finite() && d.noise >= 0.0) {
            return Err(SynthError::Noise(d.id));
        }
        if d.shapes.len() != classes {
            return Err(SynthError::ShapeCount {
                domain: d.id,
                got: d.shapes.len(),
                expected: classes,
            });
        }
    }
    Ok(())
}

/// Images are grouped by class in label order; domain `d` draws from its own
/// RNG stream so adding a domain leaves the others unchanged.
pub fn synth_dataset(domains: &[SynthDomainSpec], cfg: &SynthConfig, seed: u64) -> Result<Vec<DomainData>, SynthError> {
    validate(domains, cfg)?;
    let stains = reference_stains();
    let counts = class_counts(cfg);
    Ok(domains
        .iter()
        .map(|spec| {
            let mut rng = stream_rng(seed, DOMAIN_STREAM_BASE + spec.id as u64);
            let mut images = Vec::new();
            let mut labels = Vec::new();
            for (class, &count) in counts.iter().enumerate() {
                for _ in 0..count {
                    images.push(render_cell(spec, &spec.shapes[class], &stains, cfg, &mut rng));
                    labels.push(class);
                }
            }
            DomainData {
                domain: spec.id,
                images,
                labels,
            }
        })
        .collect())
}

/// Two-row density map (hematoxylin, eosin) for one cell.
pub fn cell_density(shape: &ClassShape, size: usize, rng: &mut impl Rng) -> Array2<f64> {
    let scale = size as f64 / 32.0;
    let c = (size as f64 - 1.0) / 2.0;
    let (cx, cy) = (c + rng.random_range(-2.0..=2.0) * scale, c + rng.random_range(-2.0..=2.0) * scale);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (cos, sin) = (theta.cos(), theta.sin());
    let r = shape.radius * scale;
    let squash = (1.0 - shape.eccentricity.clamp(0.0, 0.95)).sqrt();
    let (a, b) = (r / squash, r * squash);
    let lobes = shape.lobes.max(1);
    let centers: Vec<(f64, f64)> = if lobes == 1 {
        vec![(0.0, 0.0)]
    } else {
        (0..lobes)
            .map(|l| {
                let phi = 2.0 * std::f64::consts::PI * l as f64 / lobes as f64;
                (1.1 * r * phi.cos(), 1.1 * r * phi.sin())
            })
            .collect()
    };
    let body = 11.5 * scale;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (nuc_level, cyto_level) = (rng.random_range(0.9..1.2), rng.random_range(0.45..0.65));

    let mut h = Array2::zeros((2, size * size));
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // rotate into the cell frame
            let (u, v) = (dx * cos + dy * sin, -dx * sin + dy * cos);
            let inside = centers.iter().any(|&(ou, ov)| {
                let (du, dv) = (u - ou, v - ov);
                (du / a).powi(2) + (dv / b).powi(2) <= 1.0
            });
            let p = y * size + x;
            if inside {
                let stripes = if shape.texture_freq > 0.0 {
                    0.55 + 0.45 * (shape.texture_freq * u / scale + phase).sin()
                } else {
                    1.0
                };
                h[[0, p]] = nuc_level * stripes * rng.random_range(0.9..1.1);
                h[[1, p]] = rng.random_range(0.0..0.04);
            } else if (dx * dx + dy * dy).sqrt() <= body {
                h[[1, p]] = cyto_level * rng.random_range(0.9..1.1);
            } else {
                h[[1, p]] = rng.random_range(0.0..0.03);
            }
        }
    }
    h
}

fn render_cell(
    spec: &SynthDomainSpec,
    shape: &ClassShape,
    stains: &Array2<f64>,
    cfg: &SynthConfig,
    rng: &mut impl Rng,
) -> RgbImage {
    let h = cell_density(shape, cfg.size, rng);
    let jitter = Normal::new(0.0, cfg.tint_jitter.max(0.0)).expect("finite σ");
    let tint: Vec<f64> = spec.tint.iter().map(|t| t * jitter.sample(rng).exp()).collect();
    let mut od = stains.dot(&h);
    for (c, mut row) in od.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| {
            let n: f64 = StandardNormal.sample(rng);
            (tint[c] * v + spec.noise * n).max(0.0)
        });
    }
    let od = OpticalDensity::new(cfg.size, cfg.size, od).expect("non-negative finite density");
    from_optical_density(&od, DEFAULT_ILLUMINATION).expect("valid illumination")
}
