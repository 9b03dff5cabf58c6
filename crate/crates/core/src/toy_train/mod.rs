//! Desk-scale two-stage training on synthetic multi-domain cell images.

pub mod encoder;
pub mod experiment;
pub mod metrics;
pub mod synth;
pub mod train;

pub use encoder::PatchLinearEncoder;
pub use experiment::{loo_experiment, Evaluation, ExperimentConfig, ExperimentError, FoldReport, Method, SeedReport, TrainReport};
pub use metrics::{confusion_matrix, f1_scores, parse_labels, F1Scores, LabelParseError, MetricsError};
pub use synth::{synth_dataset, ClassShape, DomainData, SynthConfig, SynthDomainSpec, SynthError};
pub use train::{predict, train_erm, train_stage1, train_stage2, Stage1Model, TrainConfig, TrainError, TrainSet};

/// `step,value` rows, one per recorded step.
pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("step,value\n");
    for (i, v) in curve.iter().enumerate() {
        out.push_str(&format!("{i},{v:e}\n"));
    }
    out
}
