//! Synthetic label-noise injection.
//!
//! Noise is independent of the features. A corrupted label always differs
//! from the clean one.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledDataset;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorruptionError {
    #[error("corruption rate must lie in [0, 1), got {0}")]
    Rate(f64),
    #[error("invalid transition matrix: {0}")]
    Transition(String),
    #[error("input already carries corrupted labels")]
    AlreadyCorrupted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    /// Exactly `round(ηN)` samples flipped, each to a uniformly drawn other class.
    Uniform,
    /// Per-sample draws from a symmetric transition matrix (`η/(K-1)` off the
    /// diagonal unless one is given).
    Symmetric,
    /// Per-sample draws from an arbitrary zero-diagonal transition matrix.
    Asymmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub mode: CorruptionMode,
    #[serde(default)]
    pub eta: f64,
    /// `transition[y][ŷ]` is the probability that clean label `y` becomes `ŷ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn uniform(eta: f64, seed: u64) -> Self {
        Self {
            mode: CorruptionMode::Uniform,
            eta,
            transition: None,
            seed,
        }
    }

    pub fn asymmetric(transition: Vec<Vec<f64>>, seed: u64) -> Self {
        Self {
            mode: CorruptionMode::Asymmetric,
            eta: 0.0,
            transition: Some(transition),
            seed,
        }
    }

    /// Resolves the transition matrix used by the per-sample modes.
    fn transition_matrix(&self, k: usize) -> Result<Vec<Vec<f64>>, CorruptionError> {
        let matrix = match (&self.transition, self.mode) {
            (Some(m), _) => m.clone(),
            (None, CorruptionMode::Symmetric) => {
                check_rate(self.eta)?;
                let off = self.eta / (k - 1) as f64;
                (0..k)
                    .map(|y| (0..k).map(|j| if j == y { 0.0 } else { off }).collect())
                    .collect()
            }
            (None, _) => {
                return Err(CorruptionError::Transition(
                    "asymmetric mode requires a transition matrix".into(),
                ))
            }
        };
        validate_transition(&matrix, k)?;
        if self.mode == CorruptionMode::Symmetric {
            for (y, row) in matrix.iter().enumerate() {
                for j in 0..y {
                    if row[j] != matrix[j][y] {
                        return Err(CorruptionError::Transition(format!(
                            "symmetric mode needs transition[{y}][{j}] == transition[{j}][{y}]"
                        )));
                    }
                }
            }
        }
        Ok(matrix)
    }
}

fn check_rate(eta: f64) -> Result<(), CorruptionError> {
    if !(0.0..1.0).contains(&eta) {
        return Err(CorruptionError::Rate(eta));
    }
    Ok(())
}

fn validate_transition(m: &[Vec<f64>], k: usize) -> Result<(), CorruptionError> {
    if m.len() != k || m.iter().any(|row| row.len() != k) {
        return Err(CorruptionError::Transition(format!("expected a {k}x{k} matrix")));
    }
    for (y, row) in m.iter().enumerate() {
        if row[y] != 0.0 {
            return Err(CorruptionError::Transition(format!("nonzero diagonal at row {y}")));
        }
        if row.iter().any(|&v| !(v >= 0.0)) {
            return Err(CorruptionError::Transition(format!("negative entry in row {y}")));
        }
        let total: f64 = row.iter().sum();
        if !(0.0..1.0).contains(&total) {
            return Err(CorruptionError::Transition(format!(
                "row {y} flip probability {total} outside [0, 1)"
            )));
        }
    }
    Ok(())
}

/// Returns a copy of `data` with observed labels corrupted per `spec`.
pub fn corrupt(data: &LabeledDataset, spec: &CorruptionSpec) -> Result<LabeledDataset, CorruptionError> {
    if data.corrupted_mask.iter().any(|&m| m) {
        return Err(CorruptionError::AlreadyCorrupted);
    }
    let k = data.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut observed = data.clean_labels.clone();

    match spec.mode {
        CorruptionMode::Uniform => {
            check_rate(spec.eta)?;
            let n = data.len();
            let count = (spec.eta * n as f64).round() as usize;
            let mut chosen = index::sample(&mut rng, n, count).into_vec();
            // Flip in index order so the target draws do not depend on sampling order.
            chosen.sort_unstable();
            for i in chosen {
                let y = observed[i];
                let offset = rng.random_range(1..k);
                observed[i] = (y + offset) % k;
            }
        }
        CorruptionMode::Symmetric | CorruptionMode::Asymmetric => {
            let matrix = spec.transition_matrix(k)?;
            for label in observed.iter_mut() {
                let row = &matrix[*label];
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (target, &prob) in row.iter().enumerate() {
                    acc += prob;
                    if u < acc {
                        *label = target;
                        break;
                    }
                }
            }
        }
    }

    let mut out = data.clone();
    out.set_observed(observed, k);
    Ok(out)
}

/// Empirical noise rates recovered from a dataset's mask.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RealizedRates {
    pub overall: f64,
    /// Fraction of clean-class-`y` samples whose label was flipped.
    pub per_class: Vec<f64>,
    /// `flips[y][ŷ]` counts samples with clean label `y` observed as `ŷ ≠ y`.
    pub flips: Vec<Vec<usize>>,
}

pub fn realized_rates(data: &LabeledDataset) -> RealizedRates {
    let k = data.num_classes();
    let mut flips = vec![vec![0usize; k]; k];
    let mut class_totals = vec![0usize; k];
    for i in 0..data.len() {
        let y = data.clean_labels[i];
        class_totals[y] += 1;
        if data.corrupted_mask[i] {
            flips[y][data.observed_labels[i]] += 1;
        }
    }
    let flipped: usize = flips.iter().flatten().sum();
    let per_class = flips
        .iter()
        .zip(&class_totals)
        .map(|(row, &total)| {
            if total == 0 {
                0.0
            } else {
                row.iter().sum::<usize>() as f64 / total as f64
            }
        })
        .collect();
    RealizedRates {
        overall: if data.is_empty() {
            0.0
        } else {
            flipped as f64 / data.len() as f64
        },
        per_class,
        flips,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean(n: usize, k: usize) -> LabeledDataset {
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        LabeledDataset::new((0..n).map(|i| i as f64).collect(), 1, labels, k).unwrap()
    }

    #[test]
    fn uniform_exact_count() {
        let out = corrupt(&clean(10, 3), &CorruptionSpec::uniform(0.2, 4)).unwrap();
        assert_eq!(out.corrupted_mask.iter().filter(|&&m| m).count(), 2);
        let out = corrupt(&clean(1000, 4), &CorruptionSpec::uniform(0.3, 4)).unwrap();
        assert_eq!(realized_rates(&out).overall, 0.3);
    }

    #[test]
    fn zero_rate_is_identity() {
        let d = clean(50, 5);
        let out = corrupt(&d, &CorruptionSpec::uniform(0.0, 1)).unwrap();
        assert_eq!(out, d);
        assert!(out.corrupted_mask.iter().all(|&m| !m));
    }

    #[test]
    fn rejects_bad_specs() {
        let d = clean(10, 3);
        assert_eq!(
            corrupt(&d, &CorruptionSpec::uniform(1.0, 0)).unwrap_err(),
            CorruptionError::Rate(1.0)
        );
        assert!(corrupt(&d, &CorruptionSpec::uniform(-0.1, 0)).is_err());
        let diag = vec![vec![0.1, 0.0, 0.0], vec![0.0; 3], vec![0.0; 3]];
        assert!(matches!(
            corrupt(&d, &CorruptionSpec::asymmetric(diag, 0)),
            Err(CorruptionError::Transition(_))
        ));
        let heavy = vec![vec![0.0, 0.6, 0.5], vec![0.0; 3], vec![0.0; 3]];
        assert!(corrupt(&d, &CorruptionSpec::asymmetric(heavy, 0)).is_err());
        let once = corrupt(&d, &CorruptionSpec::uniform(0.3, 0)).unwrap();
        assert_eq!(
            corrupt(&once, &CorruptionSpec::uniform(0.3, 0)).unwrap_err(),
            CorruptionError::AlreadyCorrupted
        );
    }

    #[test]
    fn asymmetric_follows_transition() {
        let t = vec![vec![0.0, 0.5, 0.0], vec![0.0; 3], vec![0.0; 3]];
        let out = corrupt(&clean(3000, 3), &CorruptionSpec::asymmetric(t, 2)).unwrap();
        let r = realized_rates(&out);
        assert_eq!(r.flips[1], vec![0, 0, 0]);
        assert_eq!(r.flips[2], vec![0, 0, 0]);
        assert_eq!(r.flips[0][2], 0);
        assert!((r.per_class[0] - 0.5).abs() < 0.05, "{:?}", r.per_class);
    }

    #[test]
    fn symmetric_mode_checks_symmetry() {
        let d = clean(30, 3);
        let spec = CorruptionSpec {
            mode: CorruptionMode::Symmetric,
            eta: 0.0,
            transition: Some(vec![vec![0.0, 0.2, 0.0], vec![0.1, 0.0, 0.0], vec![0.0; 3]]),
            seed: 0,
        };
        assert!(corrupt(&d, &spec).is_err());
        let spec = CorruptionSpec {
            mode: CorruptionMode::Symmetric,
            eta: 0.3,
            transition: None,
            seed: 5,
        };
        let out = corrupt(&clean(6000, 3), &spec).unwrap();
        assert!((realized_rates(&out).overall - 0.3).abs() < 0.03);
    }

    #[test]
    fn realized_rates_counts() {
        let d = clean(6, 2);
        let r = realized_rates(&d);
        assert_eq!(r.overall, 0.0);
        assert_eq!(r.flips, vec![vec![0, 0], vec![0, 0]]);

        let mut all = d.clone();
        let observed = d.clean_labels.iter().map(|&y| if y == 0 { 1 } else { y }).collect();
        all.set_observed(observed, 2);
        let r = realized_rates(&all);
        assert_eq!(r.per_class[0], 1.0);
        assert_eq!(r.flips[0][1], 3);
    }

    #[test]
    fn deterministic() {
        let d = clean(200, 4);
        let spec = CorruptionSpec::uniform(0.25, 77);
        assert_eq!(corrupt(&d, &spec).unwrap(), corrupt(&d, &spec).unwrap());
    }
}
