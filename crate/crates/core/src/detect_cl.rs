//! Confident Learning: out-of-fold probabilities, the confident joint, and
//! pruning by class (PBC), by noise rate (PBNR) or both.
//!
//! Counting rule: the threshold of class `j` is the mean of `p_j` over samples
//! labelled `j`. A sample labelled `i` counts into `C[i][j*]` where `j*` is the
//! class with the highest probability among those whose threshold it meets
//! (lowest index on ties). Samples meeting no threshold are not counted.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{FoldPlan, LabeledDataset};
use crate::exec::{derive_seed, Execution};
use crate::net::{NetConfig, Network};
use crate::training::{predict_probs, train_rows, ProbMatrix, TrainConfig, TrainError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("unknown pruning method `{0}` (expected pbc, pbnr or both)")]
    UnknownMethod(String),
    #[error("label {label} at row {row} out of range for {num_classes} classes")]
    Label {
        row: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("{0} probability rows but {1} labels")]
    Length(usize, usize),
    #[error("fold plan covers {0} samples but the dataset has {1}")]
    Plan(usize, usize),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: TrainError,
    },
    #[error("AUM: {0}")]
    Aum(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMethod {
    Pbc,
    Pbnr,
    #[default]
    Both,
}

impl fmt::Display for PruneMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneMethod::Pbc => "pbc",
            PruneMethod::Pbnr => "pbnr",
            PruneMethod::Both => "both",
        })
    }
}

impl FromStr for PruneMethod {
    type Err = DetectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pbc" | "prune_by_class" => Ok(PruneMethod::Pbc),
            "pbnr" | "prune_by_noise_rate" => Ok(PruneMethod::Pbnr),
            "both" => Ok(PruneMethod::Both),
            _ => Err(DetectError::UnknownMethod(s.to_string())),
        }
    }
}

/// Probabilities where row `i` came from a model that never trained on sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutOfFoldProbs {
    pub probs: ProbMatrix,
    /// Fold whose held-out model predicted each row.
    pub source_fold: Vec<usize>,
    /// `(fold, class)` pairs where the class had no training samples.
    pub missing_classes: Vec<(usize, usize)>,
}

/// Trains one fresh model per fold on the other folds and predicts the held-out fold.
pub fn out_of_fold_probs(
    data: &LabeledDataset,
    plan: &FoldPlan,
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
    exec: Execution,
) -> Result<OutOfFoldProbs, DetectError> {
    if plan.assignments.len() != data.len() {
        return Err(DetectError::Plan(plan.assignments.len(), data.len()));
    }
    let k = net_cfg.num_classes;
    let folds: Vec<usize> = (0..plan.num_folds).collect();
    let per_fold = exec.try_map(folds, |fold| {
        let train_idx = plan.train_indices(fold);
        let predict_idx = plan.predict_indices(fold);
        let mut present = vec![false; k];
        for &i in &train_idx {
            if let Some(p) = present.get_mut(data.observed_labels[i]) {
                *p = true;
            }
        }
        let missing: Vec<(usize, usize)> = (0..k).filter(|&c| !present[c]).map(|c| (fold, c)).collect();
        for &(_, c) in &missing {
            log::warn!("fold {fold}: class {c} absent from the training portion");
        }

        let fold_net = NetConfig {
            init_seed: derive_seed(net_cfg.init_seed, fold as u64),
            ..net_cfg.clone()
        };
        let fold_train = TrainConfig {
            shuffle_seed: derive_seed(train_cfg.shuffle_seed, fold as u64),
            ..train_cfg.clone()
        };
        let wrap = |source: TrainError| DetectError::Fold { fold, source };
        let net = Network::init(&fold_net).map_err(|e| wrap(e.into()))?;
        let trained = train_rows(net, data, &train_idx, &fold_train).map_err(wrap)?;
        let features: Vec<f64> = predict_idx.iter().flat_map(|&i| data.row(i).iter().copied()).collect();
        let probs = predict_probs(&trained.net, &features).map_err(|e| wrap(e.into()))?;
        Ok::<_, DetectError>((predict_idx, probs, missing))
    })?;

    let mut values = vec![0.0; data.len() * k];
    let mut source_fold = vec![0; data.len()];
    let mut missing_classes = Vec::new();
    for (fold, (idx, probs, missing)) in per_fold.into_iter().enumerate() {
        for (row, &i) in probs.rows().zip(&idx) {
            values[i * k..(i + 1) * k].copy_from_slice(row);
            source_fold[i] = fold;
        }
        missing_classes.extend(missing);
    }
    Ok(OutOfFoldProbs {
        probs: ProbMatrix::from_flat(values, k),
        source_fold,
        missing_classes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidentJoint {
    /// Per-class mean self-confidence; `None` for classes with no samples.
    pub thresholds: Vec<Option<f64>>,
    /// `counts[i][j]`: samples labelled `i` confidently belonging to `j`.
    pub counts: Vec<Vec<usize>>,
}

impl ConfidentJoint {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Classes whose threshold is undefined.
    pub fn undefined_classes(&self) -> Vec<usize> {
        (0..self.thresholds.len())
            .filter(|&j| self.thresholds[j].is_none())
            .collect()
    }

    /// `C / ΣC`, for reporting only.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        let total = self.total().max(1) as f64;
        self.counts
            .iter()
            .map(|row| row.iter().map(|&c| c as f64 / total).collect())
            .collect()
    }

    pub fn off_diagonal(&self, class: usize) -> usize {
        self.counts[class]
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != class)
            .map(|(_, &c)| c)
            .sum()
    }
}

fn check_labels(probs: &ProbMatrix, labels: &[usize]) -> Result<(), DetectError> {
    if probs.len() != labels.len() {
        return Err(DetectError::Length(probs.len(), labels.len()));
    }
    let k = probs.num_classes();
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(DetectError::Label {
            row,
            label,
            num_classes: k,
        });
    }
    Ok(())
}

pub fn estimate_confident_joint(probs: &ProbMatrix, labels: &[usize]) -> Result<ConfidentJoint, DetectError> {
    check_labels(probs, labels)?;
    let k = probs.num_classes();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (row, &l) in probs.rows().zip(labels) {
        sums[l] += row[l];
        counts[l] += 1;
    }
    let thresholds: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    for j in (0..k).filter(|&j| thresholds[j].is_none()) {
        log::info!("class {j} has no samples; its threshold is undefined");
    }

    let mut joint = vec![vec![0usize; k]; k];
    for (row, &l) in probs.rows().zip(labels) {
        if let Some(j) = confident_class(row, &thresholds) {
            joint[l][j] += 1;
        }
    }
    Ok(ConfidentJoint {
        thresholds,
        counts: joint,
    })
}

fn confident_class(row: &[f64], thresholds: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, (&p, t)) in row.iter().zip(thresholds).enumerate() {
        let Some(t) = t else { continue };
        if p >= *t && best.is_none_or(|b| p > row[b]) {
            best = Some(j);
        }
    }
    best
}

/// Detected indices (ascending) for each proposal method.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Proposals {
    pub pbc: Vec<usize>,
    pub pbnr: Vec<usize>,
    pub both: Vec<usize>,
}

impl Proposals {
    pub fn get(&self, method: PruneMethod) -> &[usize] {
        match method {
            PruneMethod::Pbc => &self.pbc,
            PruneMethod::Pbnr => &self.pbnr,
            PruneMethod::Both => &self.both,
        }
    }
}

/// Sorts `members` by `key` (descending when `descending`), ties broken by index,
/// and returns the first `take`.
fn top_by(members: &[usize], take: usize, descending: bool, key: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut ranked = members.to_vec();
    ranked.sort_by(|&a, &b| {
        let ord = key(a).total_cmp(&key(b));
        let ord = if descending { ord.reverse() } else { ord };
        ord.then(a.cmp(&b))
    });
    ranked.truncate(take);
    ranked
}

pub fn prune_all(joint: &ConfidentJoint, probs: &ProbMatrix, labels: &[usize]) -> Result<Proposals, DetectError> {
    check_labels(probs, labels)?;
    let k = probs.num_classes();
    if joint.num_classes() != k {
        return Err(DetectError::Length(joint.num_classes(), k));
    }
    let mut by_class = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let mut pbc = Vec::new();
    let mut pbnr = Vec::new();
    for (i, members) in by_class.iter().enumerate() {
        pbc.extend(top_by(members, joint.off_diagonal(i), false, |s| probs.row(s)[i]));
        for j in (0..k).filter(|&j| j != i) {
            let take = joint.counts[i][j];
            if take > 0 {
                pbnr.extend(top_by(members, take, true, |s| probs.row(s)[j] - probs.row(s)[i]));
            }
        }
    }
    pbc.sort_unstable();
    pbnr.sort_unstable();
    pbnr.dedup();
    let both = pbc.iter().copied().filter(|i| pbnr.binary_search(i).is_ok()).collect();
    Ok(Proposals { pbc, pbnr, both })
}

pub fn prune(
    joint: &ConfidentJoint,
    probs: &ProbMatrix,
    labels: &[usize],
    method: PruneMethod,
) -> Result<Vec<usize>, DetectError> {
    Ok(prune_all(joint, probs, labels)?.get(method).to_vec())
}

/// Observed-label probability per row.
pub fn self_confidence(probs: &ProbMatrix, labels: &[usize]) -> Vec<f64> {
    probs.rows().zip(labels).map(|(row, &l)| row[l]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn six_rows() -> (ProbMatrix, Vec<usize>) {
        let rows = vec![
            vec![0.9, 0.1],
            vec![0.8, 0.2],
            vec![0.2, 0.8],
            vec![0.1, 0.9],
            vec![0.3, 0.7],
            vec![0.7, 0.3],
        ];
        (ProbMatrix::from_rows(rows, 2), vec![0, 0, 0, 1, 1, 1])
    }

    #[test]
    fn six_row_joint() {
        // t0 = (0.9+0.8+0.2)/3 = 0.6333, t1 = (0.9+0.7+0.3)/3 = 0.6333.
        // Row 2 (labelled 0) is confidently 1; row 5 (labelled 1) confidently 0.
        let (probs, labels) = six_rows();
        let joint = estimate_confident_joint(&probs, &labels).unwrap();
        assert_eq!(joint.counts, vec![vec![2, 1], vec![1, 2]]);
        let props = prune_all(&joint, &probs, &labels).unwrap();
        assert_eq!(props.pbc, vec![2, 5]);
        assert_eq!(props.pbnr, vec![2, 5]);
        assert_eq!(props.both, vec![2, 5]);
    }

    #[test]
    fn one_hot_predictions_give_diagonal() {
        let labels = vec![0, 1, 2, 1, 0];
        let rows = labels
            .iter()
            .map(|&l| (0..3).map(|j| if j == l { 1.0 } else { 0.0 }).collect())
            .collect();
        let probs = ProbMatrix::from_rows(rows, 3);
        let joint = estimate_confident_joint(&probs, &labels).unwrap();
        assert_eq!(joint.counts, vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        for m in [PruneMethod::Pbc, PruneMethod::Pbnr, PruneMethod::Both] {
            assert!(prune(&joint, &probs, &labels, m).unwrap().is_empty());
        }
    }

    #[test]
    fn uniform_rows_tie_to_class_zero() {
        let probs = ProbMatrix::from_rows(vec![vec![0.25; 4]; 8], 4);
        let labels = vec![0, 1, 2, 3, 0, 1, 2, 3];
        let joint = estimate_confident_joint(&probs, &labels).unwrap();
        for (i, row) in joint.counts.iter().enumerate() {
            assert_eq!(row, &vec![2, 0, 0, 0], "row {i}");
        }
    }

    #[test]
    fn absent_class_threshold_undefined() {
        let probs = ProbMatrix::from_rows(vec![vec![0.6, 0.1, 0.3], vec![0.2, 0.1, 0.7]], 3);
        let joint = estimate_confident_joint(&probs, &[0, 2]).unwrap();
        assert_eq!(joint.undefined_classes(), vec![1]);
        assert_eq!(joint.counts[0], vec![1, 0, 0]);
        assert_eq!(joint.counts[2], vec![0, 0, 1]);
    }

    #[test]
    fn input_validation() {
        let (probs, _) = six_rows();
        assert!(matches!(
            estimate_confident_joint(&probs, &[0, 1]),
            Err(DetectError::Length(6, 2))
        ));
        assert!(matches!(
            estimate_confident_joint(&probs, &[0, 0, 0, 1, 1, 2]),
            Err(DetectError::Label { row: 5, .. })
        ));
        assert!(matches!(
            "cleanlab".parse::<PruneMethod>(),
            Err(DetectError::UnknownMethod(_))
        ));
        assert_eq!("BOTH".parse::<PruneMethod>().unwrap(), PruneMethod::Both);
    }

    #[test]
    fn normalized_joint_sums_to_one() {
        let (probs, labels) = six_rows();
        let q = estimate_confident_joint(&probs, &labels).unwrap().normalized();
        let total: f64 = q.iter().flatten().sum();
        assert!((total - 1.0).abs() < 1e-15);
    }
}
