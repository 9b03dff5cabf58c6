//! Confusion matrices and F1 scores.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("confusion matrix is empty or all zero")]
    Empty,
    #[error("confusion matrix is not square")]
    NotSquare,
    #[error("label {label} outside 0..{classes}")]
    Label { label: usize, classes: usize },
    #[error("{predicted} predictions for {truth} labels")]
    Length { predicted: usize, truth: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub per_class: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: expected a non-negative integer label, found {text:?}")]
pub struct LabelParseError {
    pub line: usize,
    pub text: String,
}

/// One integer label per line. Blank lines are ignored and a single
/// identifier header line (e.g. `label`) may precede the values.
pub fn parse_labels(text: &str) -> Result<Vec<usize>, LabelParseError> {
    let mut labels = Vec::new();
    let mut first = true;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        match line.parse::<usize>() {
            Ok(v) => labels.push(v),
            Err(_) if first && is_identifier(line) => {}
            Err(_) => {
                return Err(LabelParseError {
                    line: i + 1,
                    text: line.chars().take(40).collect(),
                })
            }
        }
        first = false;
    }
    Ok(labels)
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Rows are true classes, columns predictions.
pub fn confusion_matrix(predicted: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Vec<u64>>, MetricsError> {
    if predicted.len() != truth.len() {
        return Err(MetricsError::Length {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        for label in [p, t] {
            if label >= classes {
                return Err(MetricsError::Label { label, classes });
            }
        }
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn f1_scores(confusion: &[Vec<u64>]) -> Result<F1Scores, MetricsError> {
    let c = confusion.len();
    if confusion.iter().any(|row| row.len() != c) {
        return Err(MetricsError::NotSquare);
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let per_class: Vec<f64> = (0..c)
        .map(|j| {
            let tp = confusion[j][j] as f64;
            let predicted: u64 = confusion.iter().map(|row| row[j]).sum();
            let actual: u64 = confusion[j].iter().sum();
            let precision = ratio(tp, predicted as f64);
            let recall = ratio(tp, actual as f64);
            ratio(2.0 * precision * recall, precision + recall)
        })
        .collect();
    let trace: u64 = (0..c).map(|j| confusion[j][j]).sum();
    Ok(F1Scores {
        // global precision = global recall = accuracy for single-label data
        f1_micro: trace as f64 / total as f64,
        f1_macro: per_class.iter().sum::<f64>() / c as f64,
        per_class,
    })
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}
