//! Answer scoring: mean relative accuracy for numeric answers and
//! exact/letter matching for multiple choice.

use serde::{Deserialize, Serialize};

/// Confidence thresholds 0.50, 0.55, ..., 0.95, in percent.
pub const MRA_THRESHOLDS_PERCENT: [u32; 10] = [50, 55, 60, 65, 70, 75, 80, 85, 90, 95];

/// Relative errors this close to a threshold boundary count as equal to it,
/// so decimal inputs such as (1.2, 1.0) land on the mathematically exact side.
const BOUNDARY_EPS: f64 = 1e-9;

#[derive(thiserror::Error, Debug, PartialEq)]
pub enum MetricError {
    #[error("ground truth must be positive, got {0}")]
    InvalidTruth(f64),
    #[error("ground truth answer is empty")]
    EmptyTruth,
    #[error("{predictions} predictions but {truths} ground-truth answers")]
    AlignmentError { predictions: usize, truths: usize },
    #[error("item {item}: cannot parse ground truth {value:?} as a number")]
    BadNumber { item: usize, value: String },
}

pub fn mra_thresholds() -> [f64; 10] {
    MRA_THRESHOLDS_PERCENT.map(|p| p as f64 / 100.0)
}

/// `(1/10) Σ_θ 1[|ŷ − y| / y < 1 − θ]`.
pub fn mra(prediction: f64, truth: f64) -> Result<f64, MetricError> {
    if !(truth > 0.0) || !truth.is_finite() {
        return Err(MetricError::InvalidTruth(truth));
    }
    if !prediction.is_finite() {
        return Ok(0.0);
    }
    let rel = (prediction - truth).abs() / truth;
    let hits = MRA_THRESHOLDS_PERCENT
        .iter()
        .filter(|&&p| {
            let bound = (100 - p) as f64 / 100.0;
            rel < bound - BOUNDARY_EPS
        })
        .count();
    Ok(hits as f64 / 10.0)
}

/// Leading option letter `A`-`D` followed by end of text or a non-alphanumeric separator.
pub fn option_letter(text: &str) -> Option<char> {
    let mut chars = text.trim().chars();
    let first = chars.next()?.to_ascii_uppercase();
    if !('A'..='D').contains(&first) {
        return None;
    }
    match chars.next() {
        None => Some(first),
        Some(c) if !c.is_alphanumeric() => Some(first),
        _ => None,
    }
}

/// 1 when the case-folded, trimmed texts are equal or both start with the
/// same option letter.
pub fn mca_accuracy(prediction: &str, truth: &str) -> Result<u8, MetricError> {
    let truth_norm = truth.trim().to_lowercase();
    if truth_norm.is_empty() {
        return Err(MetricError::EmptyTruth);
    }
    if prediction.trim().to_lowercase() == truth_norm {
        return Ok(1);
    }
    match (option_letter(prediction), option_letter(truth)) {
        (Some(a), Some(b)) if a == b => Ok(1),
        _ => Ok(0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerKind {
    Mca,
    Na,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub kind: AnswerKind,
    pub count: usize,
    pub items: Vec<f64>,
    pub mean: f64,
}

/// Scores aligned prediction/truth lists. Unparseable numeric predictions
/// score 0; unparseable truths are an error.
pub fn score_answers<S: AsRef<str>>(predictions: &[S], truths: &[S], kind: AnswerKind) -> Result<ScoreReport, MetricError> {
    if predictions.len() != truths.len() {
        return Err(MetricError::AlignmentError {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    let items = predictions
        .iter()
        .zip(truths)
        .enumerate()
        .map(|(i, (p, t))| match kind {
            AnswerKind::Mca => mca_accuracy(p.as_ref(), t.as_ref()).map(f64::from),
            AnswerKind::Na => {
                let truth: f64 = t.as_ref().trim().parse().map_err(|_| MetricError::BadNumber {
                    item: i,
                    value: t.as_ref().to_string(),
                })?;
                match p.as_ref().trim().parse::<f64>() {
                    Ok(pred) => mra(pred, truth),
                    Err(_) => {
                        mra(0.0, truth)?;
                        Ok(0.0)
                    }
                }
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mean = if items.is_empty() {
        0.0
    } else {
        items.iter().sum::<f64>() / items.len() as f64
    };
    Ok(ScoreReport {
        kind,
        count: items.len(),
        items,
        mean,
    })
}
