//! Leave-one-domain-out comparison of two-stage training against the baseline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{confusion_matrix, f1_scores, MetricsError};
use super::synth::{default_domains, synth_dataset, SynthConfig, SynthDomainSpec, SynthError};
use super::train::{image_patches, predict, train_erm, train_stage1, train_stage2, TrainConfig, TrainError, TrainSet};
use crate::augmentation::{decompose_batch, AugmentError};
use crate::imaging::{RgbImage, DEFAULT_ILLUMINATION};
use crate::layers::Linear;
use crate::losses::DenominatorScope;
use crate::stain_separation::{SnmfConfig, StainDecomposition};

use super::encoder::PatchLinearEncoder;
use ndarray::Array2;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub data: SynthConfig,
    /// Decomposition settings; the seed is replaced by each run seed.
    pub snmf: SnmfConfig,
    pub domains: Vec<SynthDomainSpec>,
    /// Every `n`-th image of each class in a training domain is held back for
    /// the in-domain test split.
    pub in_domain_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            train: TrainConfig::default(),
            data: SynthConfig::default(),
            snmf: SnmfConfig::default(),
            domains: default_domains(),
            in_domain_every: 5,
        }
    }
}

impl ExperimentConfig {
    /// Step sizes retuned for the toy encoder and plain SGD, 2000 steps per
    /// stage. Transformed samples also enter the contrastive denominator.
    pub fn toy() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            train: TrainConfig {
                steps: 2000,
                learning_rate: 0.03,
                classifier_learning_rate: 0.1,
                erm_learning_rate: 1.0,
                denominator: DenominatorScope::RawAndTransformed,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.train.validate()?;
        super::synth::validate(&self.domains, &self.data)?;
        self.snmf
            .validate()
            .map_err(|e| ExperimentError::Config(format!("snmf: {e}")))?;
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("seeds must not be empty".into()));
        }
        if self.in_domain_every < 2 {
            return Err(ExperimentError::Config("in_domain_every must be ≥ 2".into()));
        }
        let largest = super::synth::class_counts(&self.data).into_iter().max().unwrap_or(0);
        if largest < self.in_domain_every {
            return Err(ExperimentError::Config(format!(
                "in-domain split would be empty: largest class has {largest} images per domain, in_domain_every is {}",
                self.in_domain_every
            )));
        }
        if self.data.size % self.train.grid != 0 {
            return Err(ExperimentError::Config(format!(
                "image size {} is not divisible by grid {}",
                self.data.size, self.train.grid
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub confusion: Vec<Vec<u64>>,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub per_class: Vec<f64>,
}

impl Evaluation {
    pub fn from_predictions(predicted: &[usize], truth: &[usize], classes: usize) -> Result<Self, MetricsError> {
        let confusion = confusion_matrix(predicted, truth, classes)?;
        let s = f1_scores(&confusion)?;
        Ok(Self {
            confusion,
            f1_micro: s.f1_micro,
            f1_macro: s.f1_macro,
            per_class: s.per_class,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sada,
    Erm,
}

/// One trained model scored on the held-out domain (flattened) and on the
/// in-domain test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub held_out_domain: usize,
    pub seed: u64,
    /// Empty for the baseline.
    pub stage1_loss: Vec<f64>,
    /// Classifier loss; for the baseline, its only loss.
    pub stage2_loss: Vec<f64>,
    #[serde(flatten)]
    pub held_out: Evaluation,
    pub in_domain: Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub held_out_domain: usize,
    pub sada: TrainReport,
    pub erm: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub folds: Vec<FoldReport>,
    pub sada_mean_f1_macro: f64,
    pub erm_mean_f1_macro: f64,
    pub sada_mean_in_domain_f1_micro: f64,
    pub erm_mean_in_domain_f1_micro: f64,
}

impl SeedReport {
    pub fn sada_at_least_erm(&self) -> bool {
        self.sada_mean_f1_macro >= self.erm_mean_f1_macro
    }
}

struct Split {
    train: Vec<usize>,
    in_domain: Vec<usize>,
    held_out: Vec<usize>,
}

fn split(domains: &[usize], labels: &[usize], held_out: usize, every: usize, classes: usize) -> Split {
    let mut seen = vec![vec![0usize; classes]; domains.iter().max().map_or(0, |d| d + 1)];
    let mut s = Split {
        train: Vec::new(),
        in_domain: Vec::new(),
        held_out: Vec::new(),
    };
    for (i, (&d, &y)) in domains.iter().zip(labels).enumerate() {
        let rank = seen[d][y];
        seen[d][y] += 1;
        if d == held_out {
            s.held_out.push(i);
        } else if rank % every == every - 1 {
            s.in_domain.push(i);
        } else {
            s.train.push(i);
        }
    }
    s
}

struct Pool {
    images: Vec<RgbImage>,
    labels: Vec<usize>,
    domains: Vec<usize>,
    decompositions: Vec<StainDecomposition>,
    patches: Vec<Array2<f64>>,
}

fn evaluate(
    pool: &Pool,
    encoder: &PatchLinearEncoder,
    classifier: &Linear,
    idx: &[usize],
    classes: usize,
) -> Result<Evaluation, ExperimentError> {
    let patches: Vec<Array2<f64>> = idx.iter().map(|&i| pool.patches[i].clone()).collect();
    let pred = predict(encoder, classifier, &patches)?;
    let truth: Vec<usize> = idx.iter().map(|&i| pool.labels[i]).collect();
    Ok(Evaluation::from_predictions(&pred, &truth, classes)?)
}

fn run_fold(
    pool: &Pool,
    cfg: &ExperimentConfig,
    held_out: usize,
    seed: u64,
    classes: usize,
) -> Result<FoldReport, ExperimentError> {
    let sp = split(&pool.domains, &pool.labels, held_out, cfg.in_domain_every, classes);
    let images: Vec<&RgbImage> = sp.train.iter().map(|&i| &pool.images[i]).collect();
    let set = TrainSet::new(
        &images,
        sp.train.iter().map(|&i| pool.labels[i]).collect(),
        sp.train.iter().map(|&i| &pool.decompositions[i]).collect(),
        classes,
        cfg.train.grid,
    )?;

    let (model, stage1_loss) = train_stage1(&set, &cfg.train, seed)?;
    let (head, stage2_loss) = train_stage2(&model.encoder, &set, &cfg.train, seed)?;
    let sada = TrainReport {
        method: Method::Sada,
        held_out_domain: held_out,
        seed,
        stage1_loss,
        stage2_loss,
        held_out: evaluate(pool, &model.encoder, &head, &sp.held_out, classes)?,
        in_domain: evaluate(pool, &model.encoder, &head, &sp.in_domain, classes)?,
    };

    let (encoder, head, loss) = train_erm(&set, &cfg.train, seed)?;
    let erm = TrainReport {
        method: Method::Erm,
        held_out_domain: held_out,
        seed,
        stage1_loss: Vec::new(),
        stage2_loss: loss,
        held_out: evaluate(pool, &encoder, &head, &sp.held_out, classes)?,
        in_domain: evaluate(pool, &encoder, &head, &sp.in_domain, classes)?,
    };
    Ok(FoldReport {
        held_out_domain: held_out,
        sada,
        erm,
    })
}

/// Trains both methods once per held-out domain. Images are decomposed once
/// per seed and shared by all folds; folds run in parallel.
pub fn loo_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<SeedReport, ExperimentError> {
    cfg.validate()?;
    let classes = cfg.data.class_ratios.len();
    let data = synth_dataset(&cfg.domains, &cfg.data, seed)?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut domains = Vec::new();
    for (d, set) in data.into_iter().enumerate() {
        domains.extend(std::iter::repeat_n(d, set.images.len()));
        labels.extend(set.labels);
        images.extend(set.images);
    }
    let snmf = SnmfConfig { seed, ..cfg.snmf.clone() };
    let decompositions = decompose_batch(&images, &snmf, DEFAULT_ILLUMINATION)?;
    let refs: Vec<&RgbImage> = images.iter().collect();
    let patches = image_patches(&refs, cfg.train.grid)?;
    let pool = Pool {
        images,
        labels,
        domains,
        decompositions,
        patches,
    };

    let folds = (0..cfg.domains.len())
        .into_par_iter()
        .map(|d| run_fold(&pool, cfg, d, seed, classes))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = |f: &dyn Fn(&FoldReport) -> f64| folds.iter().map(f).sum::<f64>() / folds.len() as f64;
    Ok(SeedReport {
        seed,
        sada_mean_f1_macro: mean(&|f| f.sada.held_out.f1_macro),
        erm_mean_f1_macro: mean(&|f| f.erm.held_out.f1_macro),
        sada_mean_in_domain_f1_micro: mean(&|f| f.sada.in_domain.f1_micro),
        erm_mean_in_domain_f1_micro: mean(&|f| f.erm.in_domain.f1_micro),
        folds,
    })
}
