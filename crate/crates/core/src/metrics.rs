//! ROC construction, the ROC-derived fitness, and ensemble prediction.
//!
//! Proton is the positive class. The fitness of a curve is the maximum of
//! TPR/sqrt(FPR) over its points; points with FPR = 0 are excluded so a
//! single lucky threshold cannot yield infinite fitness. All curve math is
//! 64-bit regardless of trainer precision.

use std::fmt;

use thiserror::Error;

use crate::datasets::ClassLabel;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("confidences and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("ROC undefined: only class {0} present")]
    SingleClass(ClassLabel),
    #[error("ensemble needs at least one model")]
    NoModels,
}

/// One ROC operating point: predict proton iff confidence >= threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Ordered ROC curve; thresholds descend, rates are non-decreasing, and the
/// final point is always (1, 1) since the lowest threshold accepts everything.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// CSV export consumed by the report tooling: `threshold,fpr,tpr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            out.push_str(&format!("{:.6},{:.6},{:.6}\n", p.threshold, p.fpr, p.tpr));
        }
        out
    }
}

/// Scalar fitness. `INVALID` marks failed or unbuildable individuals and
/// compares below every valid value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fitness(f64);

impl Fitness {
    pub const INVALID: Fitness = Fitness(-1.0);

    pub fn valid(value: f64) -> Fitness {
        assert!(value >= 0.0 && value.is_finite(), "invalid fitness {value}");
        Fitness(value)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_valid(self) -> bool {
        self.0 >= 0.0
    }
}

impl PartialOrd for Fitness {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.0.total_cmp(&other.0))
    }
}

impl fmt::Display for Fitness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            write!(f, "{:.2}", self.0)
        } else {
            write!(f, "invalid")
        }
    }
}

/// What an evaluation recorded alongside the fitness.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub accuracy: f64,
    pub epochs: u32,
    /// Real elapsed training time; informational only.
    pub wall_seconds: f64,
    /// Deterministic compute-model time that budget enforcement used.
    pub virtual_seconds: f64,
}

/// Build the ROC curve from per-event proton confidences.
///
/// Thresholds are the descending unique confidence values; at each one the
/// events with confidence >= threshold are predicted proton.
pub fn roc_curve(
    proton_confidences: &[f64],
    labels: &[ClassLabel],
) -> Result<RocCurve, MetricsError> {
    if proton_confidences.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(
            proton_confidences.len(),
            labels.len(),
        ));
    }
    if proton_confidences.is_empty() {
        return Err(MetricsError::Empty);
    }
    let protons = labels.iter().filter(|&&l| l == ClassLabel::Proton).count();
    let gammas = labels.len() - protons;
    if protons == 0 {
        return Err(MetricsError::SingleClass(ClassLabel::Gamma));
    }
    if gammas == 0 {
        return Err(MetricsError::SingleClass(ClassLabel::Proton));
    }

    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| proton_confidences[b].total_cmp(&proton_confidences[a]));

    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = proton_confidences[order[i]];
        // consume every event tied at this confidence before emitting a point
        while i < order.len() && proton_confidences[order[i]] == threshold {
            match labels[order[i]] {
                ClassLabel::Proton => tp += 1,
                ClassLabel::Gamma => fp += 1,
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / gammas as f64,
            tpr: tp as f64 / protons as f64,
        });
    }
    Ok(RocCurve { points })
}

/// max TPR(x)/sqrt(FPR(x)) over the curve, excluding FPR = 0 points.
pub fn fitness_from_roc(roc: &RocCurve) -> Fitness {
    let best = roc
        .points
        .iter()
        .filter(|p| p.fpr > 0.0)
        .map(|p| p.tpr / p.fpr.sqrt())
        .fold(f64::NEG_INFINITY, f64::max);
    if best.is_finite() {
        Fitness::valid(best)
    } else {
        // unreachable for curves built by roc_curve (they end at (1,1));
        // fall back to the final point's TPR
        Fitness::valid(roc.points.last().map(|p| p.tpr).unwrap_or(0.0))
    }
}

/// Fraction of events whose argmax class matches the label; confidence ties
/// resolve to gamma (the negative class).
pub fn accuracy(proton_confidences: &[f64], labels: &[ClassLabel]) -> f64 {
    let correct = proton_confidences
        .iter()
        .zip(labels)
        .filter(|(&c, &l)| {
            let predicted = if c > 0.5 {
                ClassLabel::Proton
            } else {
                ClassLabel::Gamma
            };
            predicted == l
        })
        .count();
    correct as f64 / labels.len().max(1) as f64
}

/// Average per-event (gamma, proton) confidence pairs over voters.
pub fn average_confidences(per_model: &[Vec<(f64, f64)>]) -> Result<Vec<(f64, f64)>, MetricsError> {
    if per_model.is_empty() {
        return Err(MetricsError::NoModels);
    }
    let n_events = per_model[0].len();
    let mut out = vec![(0.0, 0.0); n_events];
    for preds in per_model {
        debug_assert_eq!(preds.len(), n_events);
        for (acc, &(g, p)) in out.iter_mut().zip(preds) {
            acc.0 += g;
            acc.1 += p;
        }
    }
    let k = per_model.len() as f64;
    for acc in &mut out {
        acc.0 /= k;
        acc.1 /= k;
    }
    Ok(out)
}

/// Predicted class from an averaged confidence pair; ties go to gamma.
pub fn ensemble_class(confidences: (f64, f64)) -> ClassLabel {
    if confidences.1 > confidences.0 {
        ClassLabel::Proton
    } else {
        ClassLabel::Gamma
    }
}
