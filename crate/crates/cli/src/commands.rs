//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sada_core::augmentation::{generate_batch_transforms, AugmentError, DonorChoice};
use sada_core::imaging::{
    decode_ppm, encode_ppm, from_optical_density, to_optical_density, PpmError, RgbImage, DEFAULT_ILLUMINATION,
};
use sada_core::losses::builtin_grad_checks;
use sada_core::stain_clustering::ClusterError;
use sada_core::stain_separation::{fit_snmf, reconstruct, reconstruction_rmse, SnmfConfig, SnmfError};
use sada_core::toy_train::{
    loo_experiment, loss_curve_csv, parse_labels, Evaluation, ExperimentConfig, ExperimentError, SeedReport,
    TrainError,
};

use crate::output::{ensure_dir, json_bytes, read_bytes, read_text, CliError, Staged, JSON_VERSION};

/// Gradient checks above this relative error fail the `grad-check` command.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "sada", version, about = "Stain-aware augmentation, losses and toy training")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Factor one P6 image into a stain basis and density maps.
    Decompose(DecomposeArgs),
    /// Re-stain every image of a batch with donors from the other stain clusters.
    Augment(AugmentArgs),
    /// Run the leave-one-domain-out toy experiment described by a JSON config.
    TrainToy(TrainToyArgs),
    /// Verify every analytic loss gradient against central differences.
    GradCheck(GradCheckArgs),
    /// Score predicted labels against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct SnmfFlags {
    /// Number of stains r (1..=3).
    #[arg(long, default_value_t = 2)]
    stains: usize,
    /// L1 sparsity weight on the density maps.
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

impl SnmfFlags {
    fn config(&self, seed: u64) -> Result<SnmfConfig, CliError> {
        let cfg = SnmfConfig {
            stains: self.stains,
            lambda: self.lambda,
            max_iters: self.iters,
            tol: self.tol,
            seed,
            ..SnmfConfig::default()
        };
        cfg.validate().map_err(snmf_error)?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct DecomposeArgs {
    image: PathBuf,
    #[command(flatten)]
    snmf: SnmfFlags,
    #[arg(long)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    /// Directory of .ppm images; lexicographic file order is batch order.
    dir: PathBuf,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[command(flatten)]
    snmf: SnmfFlags,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainToyArgs {
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    predictions: PathBuf,
    truth: PathBuf,
    /// Number of classes; defaults to one more than the largest label seen.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Decompose(a) => decompose(a),
        Command::Augment(a) => augment(a),
        Command::TrainToy(a) => train_toy(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Eval(a) => eval(a),
    }
}

fn snmf_error(e: SnmfError) -> CliError {
    match e {
        SnmfError::Config(msg) => CliError::Usage(msg),
        SnmfError::TooFewPixels { .. } | SnmfError::Shape(_) | SnmfError::Csv(_) => CliError::Usage(e.to_string()),
        other => CliError::Numeric(other.to_string()),
    }
}

fn load_image(path: &Path) -> Result<RgbImage, CliError> {
    let bytes = read_bytes(path)?;
    decode_ppm(&bytes).map_err(|e| match e {
        PpmError::Io(source) => CliError::io(path, source),
        other => CliError::Usage(format!("{}: {other}", path.display())),
    })
}

#[derive(Serialize)]
struct DecomposeStats {
    version: u32,
    seed: u64,
    stains: usize,
    lambda: f64,
    iterations: usize,
    objective_trace_len: usize,
    density_trace_len: usize,
    final_objective: Option<f64>,
    /// Root-mean-square OD residual over all pixels and channels.
    rmse: f64,
}

fn decompose(a: DecomposeArgs) -> Result<(), CliError> {
    let cfg = a.snmf.config(a.seed)?;
    let img = load_image(&a.image)?;
    ensure_dir(&a.out)?;
    let od = to_optical_density(&img, DEFAULT_ILLUMINATION).map_err(|e| CliError::Usage(e.to_string()))?;
    let dec = fit_snmf(&od, &cfg).map_err(snmf_error)?;
    let rmse = reconstruction_rmse(&od, &dec).map_err(snmf_error)?;
    let recon = reconstruct(&dec).map_err(snmf_error)?;
    let recon_img =
        from_optical_density(&recon, DEFAULT_ILLUMINATION).map_err(|e| CliError::Numeric(e.to_string()))?;
    let stats = DecomposeStats {
        version: JSON_VERSION,
        seed: a.seed,
        stains: cfg.stains,
        lambda: cfg.lambda,
        iterations: dec.iterations(),
        objective_trace_len: dec.objective_trace.len(),
        density_trace_len: dec.density_trace.len(),
        final_objective: dec.objective_trace.last().copied(),
        rmse,
    };
    let mut staged = Staged::new(&a.out);
    staged.add("W.csv", dec.basis.to_csv().as_bytes())?;
    staged.add("H.csv", dec.density.to_csv().as_bytes())?;
    staged.add("reconstruction.ppm", &encode_ppm(&recon_img))?;
    staged.add_json("stats.json", &stats)?;
    staged.commit()
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    #[serde(flatten)]
    choice: DonorChoice,
}

#[derive(Serialize)]
struct Manifest {
    version: u32,
    seed: u64,
    k: usize,
    inputs: Vec<String>,
    /// 1-based stain cluster of each input, in input order.
    clusters: Vec<usize>,
    samples: Vec<ManifestEntry>,
}

fn batch_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let is_ppm = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
        if is_ppm && path.is_file() {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

fn augment_error(e: AugmentError) -> CliError {
    match e {
        AugmentError::BatchTooSmall { .. } | AugmentError::Cluster(ClusterError::ZeroK) => CliError::Usage(e.to_string()),
        AugmentError::Decompose { index, source } => match snmf_error(source) {
            CliError::Usage(m) => CliError::Usage(format!("image {index}: {m}")),
            other => CliError::Numeric(format!("image {index}: {other}")),
        },
        AugmentError::StainMismatch(_) | AugmentError::PixelCount { .. } => CliError::Usage(e.to_string()),
        other => CliError::Numeric(other.to_string()),
    }
}

fn augment(a: AugmentArgs) -> Result<(), CliError> {
    let cfg = a.snmf.config(a.seed)?;
    if a.k == 0 {
        return Err(CliError::Usage("k must be ≥ 1".into()));
    }
    let files = batch_files(&a.dir)?;
    if files.len() < a.k {
        return Err(CliError::Usage(format!(
            "{} has {} images, need at least k = {}",
            a.dir.display(),
            files.len(),
            a.k
        )));
    }
    ensure_dir(&a.out)?;
    let images = files.iter().map(|f| load_image(f)).collect::<Result<Vec<_>, _>>()?;
    let batch = generate_batch_transforms(&images, a.k, &cfg, a.seed).map_err(augment_error)?;

    let mut staged = Staged::new(&a.out);
    let mut samples = Vec::new();
    for s in batch.samples.iter().flatten() {
        let file = format!("aug_{}_{}.ppm", s.source_index, s.donor_cluster);
        staged.add(&file, &encode_ppm(&s.image))?;
        samples.push(ManifestEntry {
            file,
            choice: DonorChoice::from(s),
        });
    }
    let manifest = Manifest {
        version: JSON_VERSION,
        seed: a.seed,
        k: a.k,
        inputs: files
            .iter()
            .map(|f| f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
            .collect(),
        clusters: batch.clusters.labels.clone(),
        samples,
    };
    staged.add_json("manifest.json", &manifest)?;
    staged.commit()
}

#[derive(Serialize)]
struct TrainToyReport<'a> {
    version: u32,
    config: &'a ExperimentConfig,
    /// Seeds where the held-out F1-macro, averaged over folds, is at least
    /// the baseline's.
    sada_at_least_erm: usize,
    runs: Vec<SeedReport>,
}

fn parse_experiment(text: &str) -> Result<ExperimentConfig, CliError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    if value.get("seeds").is_none() {
        return Err(CliError::Usage("config: missing field `seeds`".into()));
    }
    let mut merged = serde_json::to_value(ExperimentConfig::toy()).expect("preset serializes");
    overlay(&mut merged, value);
    serde_path_to_error::deserialize(merged).map_err(|e| CliError::Usage(format!("config: {}: {}", e.path(), e.inner())))
}

/// Objects merge key by key; anything else replaces the preset value.
fn overlay(base: &mut serde_json::Value, user: serde_json::Value) {
    match (base, user) {
        (serde_json::Value::Object(b), serde_json::Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn experiment_error(e: ExperimentError) -> CliError {
    match e {
        ExperimentError::Train(TrainError::NonFinite { .. } | TrainError::Loss(_)) => CliError::Numeric(e.to_string()),
        ExperimentError::Augment(inner) => augment_error(inner),
        ExperimentError::Metrics(_) => CliError::Numeric(e.to_string()),
        other => CliError::Usage(other.to_string()),
    }
}

fn train_toy(a: TrainToyArgs) -> Result<(), CliError> {
    let cfg = parse_experiment(&read_text(&a.config)?)?;
    cfg.validate().map_err(experiment_error)?;
    ensure_dir(&a.out)?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for (i, &seed) in cfg.seeds.iter().enumerate() {
        runs.push(loo_experiment(&cfg, seed).map_err(experiment_error)?);
        eprintln!("seed {seed} done ({}/{})", i + 1, cfg.seeds.len());
    }
    let mut staged = Staged::new(&a.out);
    for run in &runs {
        for fold in &run.folds {
            let stem = format!("loss_seed{}_heldout{}", run.seed, fold.held_out_domain);
            staged.add(&format!("{stem}_sada_stage1.csv"), loss_curve_csv(&fold.sada.stage1_loss).as_bytes())?;
            staged.add(&format!("{stem}_sada_stage2.csv"), loss_curve_csv(&fold.sada.stage2_loss).as_bytes())?;
            staged.add(&format!("{stem}_erm.csv"), loss_curve_csv(&fold.erm.stage2_loss).as_bytes())?;
        }
    }
    let report = TrainToyReport {
        version: JSON_VERSION,
        config: &cfg,
        sada_at_least_erm: runs.iter().filter(|r| r.sada_at_least_erm()).count(),
        runs,
    };
    staged.add_json("report.json", &report)?;
    staged.commit()
}

#[derive(Serialize)]
struct GradCheckOutput {
    version: u32,
    tolerance: f64,
    passed: bool,
    reports: Vec<sada_core::losses::GradCheckReport>,
}

fn grad_check(a: GradCheckArgs) -> Result<(), CliError> {
    let reports = builtin_grad_checks(a.seed).map_err(|e| CliError::Numeric(e.to_string()))?;
    let passed = reports.iter().all(|r| r.max_rel_err < GRAD_TOLERANCE);
    let out = GradCheckOutput {
        version: JSON_VERSION,
        tolerance: GRAD_TOLERANCE,
        passed,
        reports,
    };
    emit(&out, a.out.as_deref())?;
    if passed {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check exceeded {GRAD_TOLERANCE}")))
    }
}

#[derive(Serialize)]
struct EvalOutput {
    version: u32,
    n: usize,
    #[serde(flatten)]
    scores: Evaluation,
}

fn labels_from(path: &Path) -> Result<Vec<usize>, CliError> {
    parse_labels(&read_text(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let pred = labels_from(&a.predictions)?;
    let truth = labels_from(&a.truth)?;
    if pred.len() != truth.len() {
        return Err(CliError::Usage(format!(
            "{} predictions but {} ground-truth labels",
            pred.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(CliError::Usage("no labels to evaluate".into()));
    }
    let seen = pred.iter().chain(&truth).max().map_or(0, |m| m + 1);
    let classes = a.classes.unwrap_or(seen);
    let scores = Evaluation::from_predictions(&pred, &truth, classes).map_err(|e| CliError::Usage(e.to_string()))?;
    emit(
        &EvalOutput {
            version: JSON_VERSION,
            n: truth.len(),
            scores,
        },
        a.out.as_deref(),
    )
}

/// Prints JSON to stdout and, when asked, writes the same bytes to a file.
fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    let text = json_bytes(value);
    if let Some(path) = out {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        ensure_dir(dir)?;
        let name = path
            .file_name()
            .ok_or_else(|| CliError::Usage(format!("{} is not a file path", path.display())))?;
        let mut staged = Staged::new(dir);
        staged.add(&name.to_string_lossy(), text.as_bytes())?;
        staged.commit()?;
    }
    print!("{text}");
    Ok(())
}
