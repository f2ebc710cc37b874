//! Detection quality and distribution separation.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("need at least {needed} values per sample, got {got}")]
    TooFewValues { needed: usize, got: usize },
    #[error("pooled variance is zero; effect size undefined")]
    ZeroPooledVariance,
}

/// Confusion counts with corrupted samples as the positive class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
    /// Separation of a per-sample statistic between corrupt and clean cohorts.
    pub cohens_d: Option<f64>,
    pub wasserstein: Option<f64>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl DetectionReport {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision == 0.0 || recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let tnr = ratio(tn, tn + fp);
        Self {
            tp,
            fp,
            tn,
            fn_,
            precision,
            recall,
            f1,
            balanced_accuracy: (recall + tnr) / 2.0,
            cohens_d: None,
            wasserstein: None,
        }
    }

    pub fn evaluated(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Fills the separation fields from a per-sample statistic split by `mask`.
    /// Fields stay `None` where a cohort is too small or degenerate.
    pub fn with_separation(mut self, statistic: &[f64], mask: &[bool]) -> Self {
        let (corrupt, clean) = split_cohorts(statistic, mask);
        self.cohens_d = cohens_d(&corrupt, &clean).ok();
        self.wasserstein = wasserstein_1d(&corrupt, &clean).ok();
        self
    }
}

/// Values with `mask` set, then values with it unset.
pub fn split_cohorts(values: &[f64], mask: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let mut corrupt = Vec::new();
    let mut clean = Vec::new();
    for (&v, &m) in values.iter().zip(mask) {
        if m {
            corrupt.push(v);
        } else {
            clean.push(v);
        }
    }
    (corrupt, clean)
}

/// Scores flagged indices against the corruption mask over all samples.
pub fn score_detection(flags: &[usize], mask: &[bool]) -> DetectionReport {
    let mut flagged = vec![false; mask.len()];
    for &i in flags {
        flagged[i] = true;
    }
    let mut counts = [0usize; 4];
    for (&f, &m) in flagged.iter().zip(mask) {
        counts[usize::from(f) * 2 + usize::from(m)] += 1;
    }
    let [tn, fn_, fp, tp] = counts;
    DetectionReport::from_counts(tp, fp, tn, fn_)
}

/// Scores only the samples listed in `evaluated`; other flags are ignored.
pub fn score_detection_subset(flags: &[usize], mask: &[bool], evaluated: &[usize]) -> DetectionReport {
    let mut flagged = vec![false; mask.len()];
    for &i in flags {
        flagged[i] = true;
    }
    let sub_flags: Vec<usize> = evaluated
        .iter()
        .enumerate()
        .filter(|&(_, &i)| flagged[i])
        .map(|(j, _)| j)
        .collect();
    let sub_mask: Vec<bool> = evaluated.iter().map(|&i| mask[i]).collect();
    score_detection(&sub_flags, &sub_mask)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Bessel-corrected sample variance.
fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

/// `|mean(a) - mean(b)|` over the pooled standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    let smallest = a.len().min(b.len());
    if smallest < 2 {
        return Err(MetricsError::TooFewValues {
            needed: 2,
            got: smallest,
        });
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = ((na - 1.0) * variance(a) + (nb - 1.0) * variance(b)) / (na + nb - 2.0);
    if !(pooled > 0.0) {
        return Err(MetricsError::ZeroPooledVariance);
    }
    Ok((mean(a) - mean(b)).abs() / pooled.sqrt())
}

/// First-order Wasserstein distance between two empirical distributions:
/// `∫₀¹ |F_a⁻¹(u) - F_b⁻¹(u)| du`.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    let smallest = a.len().min(b.len());
    if smallest == 0 {
        return Err(MetricsError::TooFewValues { needed: 1, got: 0 });
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    // Walk the merged quantile breakpoints i/n and j/m using integer
    // cross-multiplication so the steps are exact.
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos = 0usize; // current quantile in units of 1/(n·m)
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) * m;
        let next_b = (j + 1) * n;
        let next = next_a.min(next_b);
        total += (next - pos) as f64 * (a[i] - b[j]).abs();
        pos = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    Ok(total / (n * m) as f64)
}

/// Mean, sample standard deviation and standard error of a set of trial values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub sem: f64,
}

impl Aggregate {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len();
        let mean = if n == 0 { 0.0 } else { self::mean(&values) };
        let std = if n < 2 { 0.0 } else { variance(&values).sqrt() };
        Self {
            sem: if n == 0 { 0.0 } else { std / (n as f64).sqrt() },
            values,
            mean,
            std,
        }
    }
}
