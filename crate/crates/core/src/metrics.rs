//! Per-class precision/recall/F1, support-weighted F1, confusion counts, and
//! mean absolute error for the regression head.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassScore>,
    pub weighted_f1: f64,
    /// confusion[gold][pred]
    pub confusion: Vec<Vec<usize>>,
    pub mae: Option<Vec<f64>>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn score_classification(
    preds: &[usize],
    golds: &[usize],
    num_classes: usize,
) -> Result<MetricsReport> {
    if preds.len() != golds.len() {
        return Err(Error::Data(format!(
            "prediction/gold length mismatch: {} vs {}",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("nothing to score".into()));
    }
    if let Some(&bad) = preds.iter().chain(golds).find(|&&l| l >= num_classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }

    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &g) in preds.iter().zip(golds) {
        confusion[g][p] += 1;
    }
    let mut per_class = Vec::with_capacity(num_classes);
    let mut weighted = 0.0;
    let mut correct = 0usize;
    for c in 0..num_classes {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..num_classes).map(|g| confusion[g][c]).sum();
        let precision = ratio(tp as f64, predicted as f64);
        let recall = ratio(tp as f64, support as f64);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        weighted += support as f64 * f1;
        correct += tp;
        per_class.push(ClassScore {
            precision,
            recall,
            f1,
            support,
        });
    }
    Ok(MetricsReport {
        accuracy: correct as f64 / preds.len() as f64,
        per_class,
        weighted_f1: weighted / preds.len() as f64,
        confusion,
        mae: None,
    })
}

/// MAE per attribute over parallel prediction/gold vectors.
pub fn score_regression(preds: &[Vec<f64>], golds: &[Vec<f64>]) -> Result<Vec<f64>> {
    if preds.len() != golds.len() {
        return Err(Error::Data(format!(
            "prediction/gold length mismatch: {} vs {}",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("nothing to score".into()));
    }
    let width = preds[0].len();
    let mut sums = vec![0.0; width];
    for (p, g) in preds.iter().zip(golds) {
        if p.len() != width || g.len() != width {
            return Err(Error::Data(format!(
                "attribute count mismatch: expected {width}, found {}/{}",
                p.len(),
                g.len()
            )));
        }
        for a in 0..width {
            sums[a] += (p[a] - g[a]).abs();
        }
    }
    let n = preds.len() as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}
