use ndarray::Array2;
use rand::Rng;
use sada_core::augmentation::decompose_batch;
use sada_core::imaging::{RgbImage, DEFAULT_ILLUMINATION};
use sada_core::losses::softmax;
use sada_core::stain_separation::{stream_rng, SnmfConfig, StainDecomposition};
use sada_core::toy_train::synth::default_domains;
use sada_core::toy_train::train::{init_encoder, pooled_features};
use sada_core::toy_train::*;

struct Toy {
    images: Vec<RgbImage>,
    labels: Vec<usize>,
    decs: Vec<StainDecomposition>,
}

impl Toy {
    fn new(n_per_class: usize, seed: u64) -> Self {
        let cfg = SynthConfig {
            size: 16,
            n_per_class,
            class_ratios: vec![1, 1],
            ..SynthConfig::default()
        };
        let mut domains = default_domains();
        for d in &mut domains {
            d.shapes.truncate(2);
        }
        let data = synth_dataset(&domains, &cfg, seed).unwrap();
        let images: Vec<RgbImage> = data.iter().flat_map(|d| d.images.clone()).collect();
        let labels: Vec<usize> = data.iter().flat_map(|d| d.labels.clone()).collect();
        let snmf = SnmfConfig { max_iters: 40, seed, ..SnmfConfig::default() };
        let decs = decompose_batch(&images, &snmf, DEFAULT_ILLUMINATION).unwrap();
        Self { images, labels, decs }
    }

    fn set(&self, grid: usize) -> TrainSet<'_> {
        let refs: Vec<&RgbImage> = self.images.iter().collect();
        TrainSet::new(&refs, self.labels.clone(), self.decs.iter().collect(), 2, grid).unwrap()
    }
}

fn small() -> TrainConfig {
    TrainConfig {
        steps: 5,
        batch_size: 6,
        learning_rate: 0.01,
        classifier_learning_rate: 0.1,
        erm_learning_rate: 0.5,
        feature_dim: 8,
        embed_dim: 6,
        local_dim: 6,
        ..TrainConfig::default()
    }
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let toy = Toy::new(2, 1);
    let set = toy.set(4);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        classifier_learning_rate: 0.0,
        erm_learning_rate: 0.0,
        ..small()
    };
    let start = init_encoder(&set, &cfg, 7);
    let (model, curve) = train_stage1(&set, &cfg, 7).unwrap();
    assert_eq!(curve.len(), cfg.steps);
    assert_eq!(model.encoder, start);

    let (enc, classifier, _) = train_erm(&set, &cfg, 7).unwrap();
    assert_eq!(enc, start);
    assert!(classifier.weight.iter().chain(classifier.bias.iter()).all(|v| *v == 0.0));
}

#[test]
fn training_is_deterministic_per_seed() {
    let toy = Toy::new(2, 2);
    let set = toy.set(4);
    let cfg = small();
    let (a, ca) = train_stage1(&set, &cfg, 3).unwrap();
    let (b, cb) = train_stage1(&set, &cfg, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    let (c, _) = train_stage1(&set, &cfg, 4).unwrap();
    assert_ne!(a.encoder, c.encoder);

    let (ea, la, _) = train_erm(&set, &cfg, 3).unwrap();
    let (eb, lb, _) = train_erm(&set, &cfg, 3).unwrap();
    assert_eq!(ea, eb);
    assert_eq!(la, lb);
}

#[test]
fn projector_only_training_reduces_disc_loss() {
    let (images, labels) = stain_separable_images();
    let snmf = SnmfConfig { max_iters: 40, ..SnmfConfig::default() };
    let decs = decompose_batch(&images, &snmf, DEFAULT_ILLUMINATION).unwrap();
    let refs: Vec<&RgbImage> = images.iter().collect();
    let set = TrainSet::new(&refs, labels, decs.iter().collect(), 2, 4).unwrap();
    let cfg = TrainConfig {
        steps: 200,
        batch_size: 8,
        k: 2,
        beta: 0.0,
        learning_rate: 0.02,
        feature_dim: 32,
        embed_dim: 16,
        freeze_backbone: true,
        ..small()
    };
    let start = init_encoder(&set, &cfg, 5);
    let (model, curve) = train_stage1(&set, &cfg, 5).unwrap();
    assert_eq!(model.encoder.patch, start.patch);
    assert_ne!(model.encoder.projector, start.projector);
    let tail = mean(&curve[curve.len() - 20..]);
    assert!(tail < 0.9 * curve[0], "{} -> {tail}", curve[0]);
    // below the value for identical embeddings, N ln N
    assert!(tail < 8.0 * 8f64.ln());
}

/// Three tints, two classes: hematoxylin-dominant versus eosin-dominant
/// tissue with a smooth density gradient.
fn stain_separable_images() -> (Vec<RgbImage>, Vec<usize>) {
    let stains = [[0.65, 0.70, 0.29], [0.07, 0.99, 0.11]];
    let tints = [[1.0, 1.0, 1.0], [0.9, 1.0, 1.1], [1.1, 0.95, 0.9]];
    let mut rng = stream_rng(11, 0);
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for tint in tints {
        for i in 0..8 {
            let label = i % 2;
            let (hema, eosin) = if label == 0 { (0.9, 0.1) } else { (0.1, 0.7) };
            let mut data = Vec::with_capacity(16 * 16 * 3);
            for y in 0..16 {
                for x in 0..16 {
                    let ramp = 0.6 + 0.8 * (x + y) as f64 / 30.0;
                    let h = hema * ramp * rng.random_range(0.8..1.2);
                    let e = eosin * (2.0 - ramp) * rng.random_range(0.8..1.2);
                    for c in 0..3 {
                        let od = tint[c] * (stains[0][c] * h + stains[1][c] * e);
                        data.push((255.0 * (-od).exp()).round() as u8);
                    }
                }
            }
            images.push(RgbImage::new(16, 16, data).unwrap());
            labels.push(label);
        }
    }
    (images, labels)
}

/// Patch rows whose first channel is shifted by class.
fn separable_set(labels: &[usize], classes: usize, seed: u64) -> TrainSet<'static> {
    let mut rng = stream_rng(seed, 0);
    let patches = labels
        .iter()
        .map(|&l| {
            Array2::from_shape_fn((4, 12), |(_, c)| {
                let base = if c % 3 == 0 { 0.3 + 0.8 * l as f64 } else { 0.5 };
                base + rng.random_range(-0.05..0.05)
            })
        })
        .collect();
    TrainSet {
        patches,
        labels: labels.to_vec(),
        decompositions: Vec::new(),
        classes,
        patch_len: 12,
    }
}

#[test]
fn stage2_separates_and_leaves_encoder_alone() {
    let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
    let set = separable_set(&labels, 2, 1);
    let cfg = TrainConfig { steps: 500, grid: 2, ..small() };
    let encoder = init_encoder(&set, &cfg, 2);
    let before = encoder.fingerprint();
    let (classifier, curve) = train_stage2(&encoder, &set, &cfg, 2).unwrap();
    assert_eq!(encoder.fingerprint(), before);
    assert!(curve.last().unwrap() < &curve[0]);
    let pred = predict(&encoder, &classifier, &set.patches).unwrap();
    assert_eq!(accuracy(&pred, &labels), 1.0);
}

#[test]
fn stage2_edge_cases() {
    let labels = vec![0; 12];
    let set = separable_set(&labels, 3, 2);
    let cfg = TrainConfig { steps: 200, grid: 2, ..small() };
    let encoder = init_encoder(&set, &cfg, 0);
    let (classifier, _) = train_stage2(&encoder, &set, &cfg, 0).unwrap();
    assert!(predict(&encoder, &classifier, &set.patches).unwrap().iter().all(|&p| p == 0));

    let idle = TrainConfig { steps: 0, ..cfg };
    let (classifier, curve) = train_stage2(&encoder, &set, &idle, 0).unwrap();
    assert!(curve.is_empty());
    let logits = classifier.forward(pooled_features(&encoder, &set.patches).unwrap().view());
    for p in softmax(logits.view()) {
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn erm_fits_in_domain_data() {
    let toy = Toy::new(12, 4);
    let n = toy.images.len();
    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) = (0..n).partition(|i| i % 4 != 0);
    let pick = |idx: &[usize]| -> (Vec<&RgbImage>, Vec<usize>) {
        (idx.iter().map(|&i| &toy.images[i]).collect(), idx.iter().map(|&i| toy.labels[i]).collect())
    };
    let (train_imgs, train_labels) = pick(&train_idx);
    let (test_imgs, test_labels) = pick(&test_idx);
    let set = TrainSet::new(&train_imgs, train_labels, Vec::new(), 2, 4).unwrap();
    let cfg = TrainConfig { steps: 300, batch_size: 16, ..small() };
    let (encoder, classifier, curve) = train_erm(&set, &cfg, 1).unwrap();
    assert!(mean(&curve[curve.len() - 20..]) < mean(&curve[..20]));
    let test = TrainSet::new(&test_imgs, test_labels.clone(), Vec::new(), 2, 4).unwrap();
    let pred = predict(&encoder, &classifier, &test.patches).unwrap();
    let acc = accuracy(&pred, &test_labels);
    assert!(acc >= 0.9, "in-domain accuracy {acc}");
}

#[test]
fn leave_one_out_covers_every_domain() {
    let mut cfg = ExperimentConfig::toy();
    cfg.seeds = vec![0];
    cfg.train = TrainConfig { steps: 10, batch_size: 8, ..small() };
    cfg.data = SynthConfig {
        size: 16,
        n_per_class: 3,
        class_ratios: vec![2, 1],
        ..SynthConfig::default()
    };
    for d in &mut cfg.domains {
        d.shapes.truncate(2);
    }
    cfg.snmf.max_iters = 30;
    let report = loo_experiment(&cfg, 0).unwrap();
    let held: Vec<usize> = report.folds.iter().map(|f| f.held_out_domain).collect();
    assert_eq!(held, [0, 1, 2]);
    for fold in &report.folds {
        for run in [&fold.sada, &fold.erm] {
            let total: u64 = run.held_out.confusion.iter().flatten().sum();
            assert_eq!(total, 9);
            assert_eq!(run.held_out_domain, fold.held_out_domain);
        }
        assert_eq!(fold.sada.method, Method::Sada);
        assert_eq!(fold.sada.stage1_loss.len(), 10);
        assert_eq!(fold.erm.method, Method::Erm);
    }
    assert_eq!(report, loo_experiment(&cfg, 0).unwrap());
}
