//! Accuracy reports and gate-score histograms.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy_fraction(probs: &Tensor, labels: &[usize]) -> f64 {
    assert_eq!(probs.rows(), labels.len());
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax_row(probs.row(i)) == l)
        .count();
    correct as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scenario: String,
    pub model: String,
    pub seed: u64,
    pub accuracy: f64,
    pub n_eval: usize,
    /// (correct, total) per class.
    pub per_class: Vec<(usize, usize)>,
}

impl EvalReport {
    pub fn csv_header() -> &'static str {
        "scenario,model,seed,accuracy,n_eval,per_class"
    }

    pub fn csv_row(&self) -> String {
        let mut per_class = String::new();
        for (c, (correct, total)) in self.per_class.iter().enumerate() {
            if c > 0 {
                per_class.push(';');
            }
            let _ = write!(per_class, "{c}:{correct}/{total}");
        }
        format!(
            "{},{},{},{:.6},{},{}",
            self.scenario, self.model, self.seed, self.accuracy, self.n_eval, per_class
        )
    }
}

/// Builds a report from aligned predictions and labels.
pub fn evaluate(
    probs: &Tensor,
    labels: &[usize],
    n_classes: usize,
    scenario: &str,
    model: &str,
    seed: u64,
) -> Result<EvalReport> {
    if labels.is_empty() {
        return Err(Error::Config("evaluate: empty node subset".into()));
    }
    if probs.rows() != labels.len() {
        return Err(Error::Dim { op: "evaluate", lhs: probs.shape(), rhs: (labels.len(), 1) });
    }
    let mut per_class = vec![(0usize, 0usize); n_classes];
    let mut correct = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].1 += 1;
        if argmax_row(probs.row(i)) == l {
            per_class[l].0 += 1;
            correct += 1;
        }
    }
    Ok(EvalReport {
        scenario: scenario.into(),
        model: model.into(),
        seed,
        accuracy: correct as f64 / labels.len() as f64,
        n_eval: labels.len(),
        per_class,
    })
}

/// Mean and sample standard deviation (n - 1); std is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n > 0);
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub const ALPHA_BINS: usize = 20;

/// Histogram of per-node gate scores over [0, 1].
#[derive(Clone, Debug)]
pub struct AlphaHistogram {
    pub counts: [usize; ALPHA_BINS],
    pub mean: f64,
    pub n: usize,
    pub model: String,
    pub dataset: String,
}

impl AlphaHistogram {
    /// Bins an n x 1 alpha column; alpha = 1 lands in the last bin.
    pub fn from_alphas(alphas: &Tensor, model: &str, dataset: &str) -> Self {
        let mut counts = [0usize; ALPHA_BINS];
        let mut sum = 0.0;
        for i in 0..alphas.rows() {
            let a = alphas.get(i, 0).clamp(0.0, 1.0);
            let bin = ((a * ALPHA_BINS as f64) as usize).min(ALPHA_BINS - 1);
            counts[bin] += 1;
            sum += a;
        }
        let n = alphas.rows();
        AlphaHistogram {
            counts,
            mean: if n > 0 { sum / n as f64 } else { 0.0 },
            n,
            model: model.into(),
            dataset: dataset.into(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# model={} dataset={} n={} mean_alpha={:.6}", self.model, self.dataset, self.n, self.mean);
        let _ = writeln!(out, "bin_lo,bin_hi,count");
        for (b, &count) in self.counts.iter().enumerate() {
            let lo = b as f64 / ALPHA_BINS as f64;
            let hi = (b + 1) as f64 / ALPHA_BINS as f64;
            let _ = writeln!(out, "{lo:.2},{hi:.2},{count}");
        }
        out
    }
}
