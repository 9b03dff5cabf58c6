mod common;

use common::*;
use ndarray::{Array2, Axis};
use rand::Rng;
use sada_core::augmentation::{
    density_percentiles, generate_batch_transforms, normalize_density, restain, row_percentile99,
};
use sada_core::imaging::{from_optical_density, to_optical_density, OpticalDensity, RgbImage, DEFAULT_ILLUMINATION};
use sada_core::losses::{disc_loss, DenominatorScope, EmbeddingBatch};
use sada_core::stain_clustering::{assign_point, kmeans_points};
use sada_core::stain_separation::{
    fit_snmf, fit_snmf_stream, objective, reconstruction_rmse, stream_rng, DensityMaps, SnmfConfig,
};
use sada_core::toy_train::{confusion_matrix, f1_scores};

const SCOPES: [(DenominatorScope, bool); 2] =
    [(DenominatorScope::RawOnly, false), (DenominatorScope::RawAndTransformed, true)];

#[test]
fn disc_matches_double_loop() {
    let mut rng = stream_rng(100, 0);
    for case in 0..200u64 {
        let n = rng.random_range(2..=8);
        let k = rng.random_range(1..=3);
        let c = rng.random_range(1..=4);
        let tau = [0.1, 0.5, 1.0][case as usize % 3];
        let (z, z_t, labels) = random_disc_batch(case, n, k, c, 5);
        let batch = EmbeddingBatch::new(z.clone(), z_t.clone(), labels.clone(), tau).unwrap();
        for (scope, wide) in SCOPES {
            let got = disc_loss(&batch, scope).unwrap().value;
            let want = disc_oracle(&z, &z_t, &labels, tau, wide);
            assert!((got - want).abs() <= 1e-10, "case {case} {scope:?}: {got} vs {want}");
        }
    }
}

#[test]
fn disc_is_permutation_invariant() {
    for case in 0..20u64 {
        let (z, z_t, labels) = random_disc_batch(case, 7, 3, 3, 4);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let pz = z.select(Axis(0), &perm);
        let pzt = z_t.select(Axis(0), &perm);
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        for (scope, _) in SCOPES {
            let a = disc_loss(&EmbeddingBatch::new(z.clone(), z_t.clone(), labels.clone(), 0.3).unwrap(), scope).unwrap();
            let b = disc_loss(&EmbeddingBatch::new(pz.clone(), pzt.clone(), pl.clone(), 0.3).unwrap(), scope).unwrap();
            assert!((a.value - b.value).abs() < 1e-12);
        }
    }
}

#[test]
fn kmeans_inertia_never_increases() {
    let mut rng = stream_rng(101, 0);
    for seed in 0..100u64 {
        let n = rng.random_range(3..40);
        let k = rng.random_range(1..=n.min(5));
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..6).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let model = kmeans_points(&points, k, seed).unwrap();
        for pair in model.inertia_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "seed {seed}: {:?}", model.inertia_trace);
        }
        let labels: Vec<usize> = model.labels.iter().map(|l| l - 1).collect();
        assert!((partition_cost(&points, &labels, k) - model.inertia).abs() < 1e-9);
        let mut seen = model.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen, (1..=k).collect::<Vec<_>>());
    }
}

#[test]
fn kmeans_recovers_separated_groups() {
    for seed in 0..50u64 {
        let n = 4 + seed as usize % 5;
        let (points, groups) = two_groups(seed, n, 6, 10.0);
        let model = kmeans_points(&points, 2, seed).unwrap();
        let got: Vec<usize> = model.labels.iter().map(|l| l - 1).collect();
        assert_eq!(canonical(&got), canonical(&groups), "seed {seed}");
        let (best, partition) = exhaustive_kmeans(&points, 2);
        assert_eq!(canonical(&got), partition);
        assert!((model.inertia - best).abs() < 1e-12);
    }
}

#[test]
fn kmeans_matches_exhaustive_search_on_small_clustered_sets() {
    let mut rng = stream_rng(102, 0);
    for seed in 0..30u64 {
        let k = 2 + seed as usize % 2;
        let n = rng.random_range(k + 2..=8);
        let centres: Vec<Vec<f64>> = (0..k).map(|_| (0..3).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let points: Vec<Vec<f64>> = (0..n)
            .map(|i| centres[i % k].iter().map(|c| c + rng.random_range(-0.05..0.05)).collect())
            .collect();
        let model = kmeans_points(&points, k, seed).unwrap();
        let (best, partition) = exhaustive_kmeans(&points, k);
        let got: Vec<usize> = model.labels.iter().map(|l| l - 1).collect();
        assert!((model.inertia - best).abs() < 1e-9, "seed {seed}");
        assert_eq!(canonical(&got), partition);
    }
}

#[test]
fn assign_matches_linear_scan() {
    let mut rng = stream_rng(103, 0);
    let points: Vec<Vec<f64>> = (0..30).map(|_| (0..6).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let model = kmeans_points(&points, 4, 0).unwrap();
    for _ in 0..200 {
        let q: Vec<f64> = (0..6).map(|_| rng.random_range(-0.5..1.5)).collect();
        let dist = |c: &Vec<f64>| c.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let mut best = 0;
        for (j, c) in model.centroids.iter().enumerate() {
            if dist(c) < dist(&model.centroids[best]) {
                best = j;
            }
        }
        assert_eq!(assign_point(&model, &q).unwrap(), best + 1);
    }
}

#[test]
fn planted_rank_two_is_recovered() {
    for seed in 0..10 {
        let (w, h) = planted_rank2(seed, 400);
        let od = OpticalDensity::new(20, 20, w.dot(&h)).unwrap();
        let cfg = SnmfConfig { lambda: 0.0, seed, ..SnmfConfig::default() };
        let dec = fit_snmf(&od, &cfg).unwrap();
        let rmse = reconstruction_rmse(&od, &dec).unwrap();
        assert!(rmse < 1e-3, "seed {seed}: {rmse}");
    }
}

#[test]
fn snmf_traces_never_increase() {
    for run in 0..50u64 {
        let od = if run % 2 == 0 {
            to_optical_density(&stained_image(run, 16, 16), DEFAULT_ILLUMINATION).unwrap()
        } else {
            to_optical_density(&random_image(run, 12, 12, 1), DEFAULT_ILLUMINATION).unwrap()
        };
        let cfg = SnmfConfig {
            stains: 1 + run as usize % 3,
            lambda: [0.0, 0.1, 0.5][run as usize % 3],
            seed: run,
            ..SnmfConfig::default()
        };
        let dec = fit_snmf_stream(&od, &cfg, run).unwrap();
        for trace in [&dec.objective_trace, &dec.density_trace] {
            for pair in trace.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-9, "run {run}");
            }
        }
        let final_h = objective(od.values().view(), dec.basis.matrix().view(), dec.density.matrix().view(), 0.0);
        assert!((final_h - dec.density_trace.last().unwrap()).abs() <= 1e-9 * final_h.max(1.0));
    }
}

fn max_abs_diff(a: &RgbImage, b: &RgbImage) -> Vec<u8> {
    a.data().iter().zip(b.data()).map(|(x, y)| x.abs_diff(*y)).collect()
}

/// Without the sparsity term the fitted basis spans the data; with it the
/// basis is pulled inside the data cone and saturated pixels drift.
#[test]
fn own_stain_restain_is_the_identity() {
    for seed in 0..20 {
        let img = stained_image(seed, 24, 24);
        let od = to_optical_density(&img, DEFAULT_ILLUMINATION).unwrap();
        let dec = fit_snmf(&od, &SnmfConfig { seed, lambda: 0.0, ..SnmfConfig::default() }).unwrap();
        let out = restain(&dec.density, &dec.density, &dec.basis, DEFAULT_ILLUMINATION, 24, 24).unwrap();
        let diffs = max_abs_diff(&img, &out);
        let pixels_ok = diffs.chunks(3).filter(|px| px.iter().all(|&d| d <= 1)).count();
        assert!(pixels_ok as f64 >= 0.99 * 576.0, "seed {seed}: {pixels_ok}/576 within ±1");
    }
}

#[test]
fn normalization_matches_target_percentiles() {
    let mut rng = stream_rng(104, 0);
    for _ in 0..100 {
        let r = rng.random_range(1..=3);
        let n = rng.random_range(1..200);
        let mut draw = |zero_row: Option<usize>| {
            Array2::from_shape_fn((r, n), |(j, _)| if Some(j) == zero_row { 0.0 } else { rng.random_range(0.0..3.0) })
        };
        let src = DensityMaps::new(draw(None)).unwrap();
        let tgt = DensityMaps::new(draw(Some(0))).unwrap();
        let out = normalize_density(&src, &tgt).unwrap();
        let (ps, pt, po) = (
            density_percentiles(&src).unwrap(),
            density_percentiles(&tgt).unwrap(),
            density_percentiles(&out).unwrap(),
        );
        for j in 0..r {
            if ps[j] >= 1e-8 {
                assert!((po[j] - pt[j]).abs() <= 1e-9, "{} vs {}", po[j], pt[j]);
            } else {
                assert_eq!(out.matrix().row(j), src.matrix().row(j));
            }
        }
    }
}

#[test]
fn percentile_is_nearest_rank() {
    let mut rng = stream_rng(105, 0);
    for _ in 0..200 {
        let m: usize = rng.random_range(1..300);
        let row: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..10.0)).collect();
        let mut sorted = row.clone();
        sorted.sort_by(f64::total_cmp);
        let rank = (99 * m).div_ceil(100);
        assert_eq!(row_percentile99(&row).unwrap(), sorted[rank - 1]);
    }
}

#[test]
fn darker_targets_darken_every_pixel() {
    let img = stained_image(7, 16, 16);
    let dec = fit_snmf(&to_optical_density(&img, DEFAULT_ILLUMINATION).unwrap(), &SnmfConfig::default()).unwrap();
    let doubled = DensityMaps::new(dec.density.matrix() * 2.0).unwrap();
    let base = restain(&dec.density, &dec.density, &dec.basis, DEFAULT_ILLUMINATION, 16, 16).unwrap();
    let dark = restain(&dec.density, &doubled, &dec.basis, DEFAULT_ILLUMINATION, 16, 16).unwrap();
    assert!(base.data().iter().zip(dark.data()).all(|(b, d)| d <= b));
    assert!(base.data() != dark.data());
}

/// Four images, two clearly different stain families.
fn two_tint_batch() -> Vec<RgbImage> {
    (0..4)
        .map(|i| {
            let img = stained_image(40 + i, 16, 16);
            if i % 2 == 0 {
                return img;
            }
            let od = to_optical_density(&img, DEFAULT_ILLUMINATION).unwrap();
            let mut v = od.values().clone();
            v.row_mut(0).mapv_inplace(|x| x * 0.3);
            v.row_mut(2).mapv_inplace(|x| x * 3.0);
            from_optical_density(&OpticalDensity::new(16, 16, v).unwrap(), DEFAULT_ILLUMINATION).unwrap()
        })
        .collect()
}

#[test]
fn two_families_swap_stains() {
    let batch = two_tint_batch();
    let out = generate_batch_transforms(&batch, 2, &SnmfConfig::default(), 3).unwrap();
    assert_eq!(out.clusters.labels, [1, 2, 1, 2]);
    for (i, samples) in out.samples.iter().enumerate() {
        assert_eq!(samples.len(), 1);
        let s = &samples[0];
        assert_eq!(s.source_index, i);
        assert_ne!(s.donor_cluster, s.source_cluster);
        assert_eq!(s.target_index % 2, 1 - i % 2);
    }
    let again = generate_batch_transforms(&batch, 2, &SnmfConfig::default(), 3).unwrap();
    assert_eq!(out, again);
}

#[test]
fn thirty_two_images_get_two_transforms_each() {
    let batch: Vec<RgbImage> = (0..32).map(|i| stained_image(200 + i, 12, 12)).collect();
    let out = generate_batch_transforms(&batch, 3, &SnmfConfig { max_iters: 60, ..SnmfConfig::default() }, 9).unwrap();
    for (i, samples) in out.samples.iter().enumerate() {
        let own = out.clusters.labels[i];
        let donors: Vec<usize> = samples.iter().map(|s| s.donor_cluster).collect();
        let expected: Vec<usize> = (1..=3).filter(|&c| c != own).collect();
        assert_eq!(donors, expected);
        for s in samples {
            assert_eq!(out.clusters.labels[s.target_index], s.donor_cluster);
            assert_eq!((s.image.width(), s.image.height()), (12, 12));
        }
    }
}

#[test]
fn restained_structure_survives_redecomposition() {
    let batch = two_tint_batch();
    let cfg = SnmfConfig::default();
    let out = generate_batch_transforms(&batch, 2, &cfg, 5).unwrap();
    let decs: Vec<_> = batch
        .iter()
        .map(|img| fit_snmf(&to_optical_density(img, DEFAULT_ILLUMINATION).unwrap(), &cfg).unwrap())
        .collect();
    for samples in &out.samples {
        for s in samples {
            let (src, donor) = (&decs[s.source_index], &decs[s.target_index]);
            let expected = normalize_density(&src.density, &donor.density).unwrap();
            let od = to_optical_density(&s.image, DEFAULT_ILLUMINATION).unwrap();
            let h = nnls_two_stains(donor.basis.matrix(), od.values());
            for j in 0..2 {
                let r = pearson(&h.row(j).to_vec(), &expected.matrix().row(j).to_vec());
                assert!(r > 0.99, "stain {j}: r = {r}");
            }
        }
    }
}

#[test]
fn micro_f1_is_accuracy() {
    let mut rng = stream_rng(106, 0);
    for _ in 0..1000 {
        let c = rng.random_range(1..=6);
        let confusion: Vec<Vec<u64>> = (0..c).map(|_| (0..c).map(|_| rng.random_range(0..20)).collect()).collect();
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            continue;
        }
        let s = f1_scores(&confusion).unwrap();
        let (micro, macro_) = naive_f1(&confusion);
        assert!((s.f1_micro - micro).abs() < 1e-12);
        assert!((s.f1_macro - macro_).abs() < 1e-12);
    }
    let truth = [0, 0, 1, 2, 2, 2];
    let pred = [0, 1, 1, 2, 0, 2];
    let s = f1_scores(&confusion_matrix(&pred, &truth, 3).unwrap()).unwrap();
    assert!((s.f1_micro - 4.0 / 6.0).abs() < 1e-12);
}

