//! Classification scores, prototype quality measures and seed statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::prototypes::{distance, CausalLibrary, DistanceKind, SpuriousLibrary};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub acc: f64,
    pub bacc: f64,
    pub macro_f1: f64,
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub seed: u64,
    pub acc: f64,
    pub bacc: f64,
    pub f1: f64,
    pub nmi: f64,
    pub purity: f64,
    pub div: f64,
}

/// Accuracy, balanced accuracy and macro-F1.
///
/// Classes absent from `labels` are left out of the balanced-accuracy mean.
/// Macro-F1 averages over classes that occur in `labels` or `preds`; a class
/// with no true positives scores 0.
pub fn classification_metrics(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<ClassificationMetrics> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    if let Some(bad) = preds.iter().chain(labels).find(|&&c| c >= num_classes) {
        return Err(Error::Contract(format!("class id {bad} >= {num_classes}")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    let mut predicted = vec![0usize; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        support[y] += 1;
        predicted[p] += 1;
        if p == y {
            tp[y] += 1;
        }
    }
    let n = labels.len() as f64;
    let acc = tp.iter().sum::<usize>() as f64 / n;
    let recalls: Vec<f64> = (0..num_classes)
        .filter(|&c| support[c] > 0)
        .map(|c| tp[c] as f64 / support[c] as f64)
        .collect();
    let bacc = recalls.iter().sum::<f64>() / recalls.len() as f64;
    let f1s: Vec<f64> = (0..num_classes)
        .filter(|&c| support[c] > 0 || predicted[c] > 0)
        .map(|c| {
            let denom = (support[c] + predicted[c]) as f64;
            if tp[c] == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom
            }
        })
        .collect();
    let macro_f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
    Ok(ClassificationMetrics { acc, bacc, macro_f1 })
}

/// Mean over prototypes of the fraction of its `n_neighbors` nearest
/// latents that carry the prototype's class. Distance ties go to the lower
/// sample index.
pub fn prototype_purity(lib: &CausalLibrary, latents: &Tensor, labels: &[usize], n_neighbors: usize) -> Result<f64> {
    if lib.is_empty() {
        return Err(Error::Contract("purity of an empty library".into()));
    }
    if latents.rows() != labels.len() {
        return Err(Error::Contract("latents and labels must align".into()));
    }
    if n_neighbors == 0 || n_neighbors > labels.len() {
        return Err(Error::Contract(format!(
            "n_neighbors {n_neighbors} outside 1..={}",
            labels.len()
        )));
    }
    let mut total = 0.0;
    for k in 0..lib.len() {
        let p = lib.prototypes.row(k);
        let mut order: Vec<(f64, usize)> = (0..labels.len())
            .map(|i| distance(latents.row(i), p, DistanceKind::Squared).map(|d| (d, i)))
            .collect::<Result<_>>()?;
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let hits = order[..n_neighbors]
            .iter()
            .filter(|(_, i)| labels[*i] == lib.class_of[k])
            .count();
        total += hits as f64 / n_neighbors as f64;
    }
    Ok(total / lib.len() as f64)
}

/// Index of the nearest spurious prototype for each row (ties to the lowest index).
pub fn hard_assignments(zs: &Tensor, lib: &SpuriousLibrary) -> Result<Vec<usize>> {
    (0..zs.rows())
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for m in 0..lib.len() {
                let d = distance(zs.row(i), lib.prototypes.row(m), DistanceKind::Squared)?;
                if d < best.1 {
                    best = (m, d);
                }
            }
            Ok(best.0)
        })
        .collect()
}

/// Shannon entropy (nats) of a histogram of counts.
pub fn entropy_of_counts(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// Entropy (nats) of the hard assignment histogram of `zs` over the library.
pub fn spurious_diversity(zs: &Tensor, lib: &SpuriousLibrary) -> Result<f64> {
    if zs.rows() == 0 {
        return Err(Error::Contract("diversity of an empty set".into()));
    }
    let mut counts = vec![0usize; lib.len()];
    for m in hard_assignments(zs, lib)? {
        counts[m] += 1;
    }
    Ok(entropy_of_counts(&counts))
}

/// Two-sided paired t-test p-value.
///
/// When the differences have zero variance the statistic is undefined; the
/// p-value is then 0 if any difference is nonzero and 1 otherwise.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Contract(format!(
            "paired test needs two series of equal length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(if d.iter().any(|&v| v != 0.0) { 0.0 } else { 1.0 });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::numeric("t-test", e.to_string()))?;
    Ok((2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
