//! Labelled datasets: synthetic generation, CSV ingestion and stratified folds.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset specification: {0}")]
    Spec(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("unknown label `{label}` at row {row}")]
    UnknownLabel { row: usize, label: String },
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Features with clean labels, observed (possibly corrupted) labels and the
/// ground-truth corruption mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    feature_dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    pub clean_labels: Vec<usize>,
    pub observed_labels: Vec<usize>,
    pub corrupted_mask: Vec<bool>,
    /// Names for classes `0..num_classes`, when the data came from text labels.
    pub label_names: Option<Vec<String>>,
}

impl LabeledDataset {
    /// A clean dataset: observed labels equal clean labels.
    pub fn new(
        features: Vec<f64>,
        feature_dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        Self::with_observed(features, feature_dim, labels.clone(), labels, num_classes)
    }

    pub fn with_observed(
        features: Vec<f64>,
        feature_dim: usize,
        clean_labels: Vec<usize>,
        observed_labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        if feature_dim == 0 {
            return Err(DataError::Spec("feature_dim must be >= 1".into()));
        }
        if features.len() != feature_dim * clean_labels.len() {
            return Err(DataError::Spec(format!(
                "{} feature values do not form {} rows of width {}",
                features.len(),
                clean_labels.len(),
                feature_dim
            )));
        }
        if clean_labels.len() != observed_labels.len() {
            return Err(DataError::Spec("clean and observed label counts differ".into()));
        }
        if let Some(&bad) = clean_labels.iter().chain(&observed_labels).find(|&&l| l >= num_classes) {
            return Err(DataError::Spec(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        let corrupted_mask = clean_labels.iter().zip(&observed_labels).map(|(c, o)| c != o).collect();
        Ok(Self {
            feature_dim,
            num_classes,
            features,
            clean_labels,
            observed_labels,
            corrupted_mask,
            label_names: None,
        })
    }

    pub fn len(&self) -> usize {
        self.clean_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean_labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Replaces the observed labels, recomputing the corruption mask.
    pub(crate) fn set_observed(&mut self, observed: Vec<usize>, num_classes: usize) {
        self.corrupted_mask = self.clean_labels.iter().zip(&observed).map(|(c, o)| c != o).collect();
        self.observed_labels = observed;
        self.num_classes = num_classes;
    }

    pub(crate) fn set_num_classes(&mut self, num_classes: usize) {
        self.num_classes = num_classes;
    }

    /// Count of samples per observed label.
    pub fn observed_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.observed_labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Isotropic Gaussian blobs, one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    pub class_center_separation: f64,
    pub within_class_spread: f64,
    pub seed: u64,
}

/// Four 16-dimensional blobs, 500 samples each. With CE and clean labels a
/// small MLP reaches roughly 0.93 held-out accuracy.
impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            samples_per_class: 500,
            feature_dim: 16,
            class_center_separation: 4.0,
            within_class_spread: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes < 2 {
            return Err(DataError::Spec("num_classes must be >= 2".into()));
        }
        if self.samples_per_class == 0 {
            return Err(DataError::Spec("samples_per_class must be >= 1".into()));
        }
        if self.num_classes > self.feature_dim {
            return Err(DataError::Spec(format!(
                "num_classes ({}) must not exceed feature_dim ({})",
                self.num_classes, self.feature_dim
            )));
        }
        if !(self.class_center_separation > 0.0) || !(self.within_class_spread > 0.0) {
            return Err(DataError::Spec("separation and spread must be > 0".into()));
        }
        Ok(())
    }

    /// Class centers: `±sep/2` on axis 0 for two classes, otherwise
    /// `sep/√2 · e_k`, so every pair of centers is `sep` apart.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        let sep = self.class_center_separation;
        (0..self.num_classes)
            .map(|k| {
                let mut c = vec![0.0; self.feature_dim];
                if self.num_classes == 2 {
                    c[0] = if k == 0 { -sep / 2.0 } else { sep / 2.0 };
                } else {
                    c[k] = sep / std::f64::consts::SQRT_2;
                }
                c
            })
            .collect()
    }
}

/// Samples are laid out class by class: rows `k·n .. (k+1)·n` belong to class `k`.
pub fn generate_blobs(spec: &SyntheticSpec) -> Result<LabeledDataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.within_class_spread).map_err(|e| DataError::Spec(e.to_string()))?;
    let n = spec.num_classes * spec.samples_per_class;
    let mut features = Vec::with_capacity(n * spec.feature_dim);
    let mut labels = Vec::with_capacity(n);
    for (k, center) in spec.centers().iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            features.extend(center.iter().map(|&c| c + noise.sample(&mut rng)));
            labels.push(k);
        }
    }
    LabeledDataset::new(features, spec.feature_dim, labels, spec.num_classes)
}

/// Column layout and label vocabulary for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsvSchema {
    /// Known label names; labels outside this list are rejected. When absent
    /// the vocabulary is built from the file.
    pub label_names: Option<Vec<String>>,
    /// Whether a `clean_label` column must be present.
    pub require_clean_label: bool,
}

pub const LABEL_COLUMN: &str = "label";
pub const CLEAN_LABEL_COLUMN: &str = "clean_label";

/// Reads `f0..f{r-1}, label[, clean_label]`.
///
/// Label vocabulary: if every label is a non-negative integer the labels are
/// used as class indices directly (`K = max + 1`); otherwise distinct names
/// are sorted lexicographically and numbered in that order.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<LabeledDataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<LabeledDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);

    let label_col =
        column(LABEL_COLUMN).ok_or_else(|| DataError::Schema(format!("missing required column `{LABEL_COLUMN}`")))?;
    let clean_col = column(CLEAN_LABEL_COLUMN);
    if schema.require_clean_label && clean_col.is_none() {
        return Err(DataError::Schema(format!(
            "missing required column `{CLEAN_LABEL_COLUMN}`"
        )));
    }
    let mut feature_cols = Vec::new();
    while let Some(c) = column(&format!("f{}", feature_cols.len())) {
        feature_cols.push(c);
    }
    if feature_cols.is_empty() {
        return Err(DataError::Schema("missing feature column `f0`".into()));
    }
    let expected_width = feature_cols.len() + 1 + usize::from(clean_col.is_some());
    if headers.len() != expected_width {
        return Err(DataError::Schema(format!(
            "unexpected columns: expected f0..f{}, `{LABEL_COLUMN}`{}; got {:?}",
            feature_cols.len() - 1,
            if clean_col.is_some() { ", `clean_label`" } else { "" },
            headers.iter().collect::<Vec<_>>()
        )));
    }

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    let mut raw_clean = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| DataError::Row {
            row,
            message: e.to_string(),
        })?;
        if record.len() != expected_width {
            return Err(DataError::Row {
                row,
                message: format!("expected {expected_width} fields, found {}", record.len()),
            });
        }
        for &c in &feature_cols {
            let v: f64 = record[c].parse().map_err(|_| DataError::Row {
                row,
                message: format!("non-numeric feature `{}` in column `{}`", &record[c], &headers[c]),
            })?;
            features.push(v);
        }
        raw_labels.push(record[label_col].to_string());
        if let Some(c) = clean_col {
            raw_clean.push(record[c].to_string());
        }
    }

    let vocab = match &schema.label_names {
        Some(names) => LabelVocab::from_names(names.clone()),
        None => LabelVocab::infer(raw_labels.iter().chain(&raw_clean)),
    };
    let lookup = |labels: &[String]| -> Result<Vec<usize>, DataError> {
        labels
            .iter()
            .enumerate()
            .map(|(row, l)| {
                vocab
                    .index(l)
                    .ok_or_else(|| DataError::UnknownLabel { row, label: l.clone() })
            })
            .collect()
    };
    let observed = lookup(&raw_labels)?;
    let clean = if clean_col.is_some() {
        lookup(&raw_clean)?
    } else {
        observed.clone()
    };
    let num_classes = vocab.names.len().max(2);
    let mut data = LabeledDataset::with_observed(features, feature_cols.len(), clean, observed, num_classes)?;
    data.label_names = Some(vocab.names);
    Ok(data)
}

struct LabelVocab {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl LabelVocab {
    fn from_names(names: Vec<String>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, index }
    }

    fn infer<'a>(labels: impl Iterator<Item = &'a String>) -> Self {
        let distinct: BTreeSet<&String> = labels.collect();
        let numeric: Option<Vec<usize>> = distinct.iter().map(|l| l.parse::<usize>().ok()).collect();
        match numeric {
            Some(ids) if !ids.is_empty() && ids.iter().all(|&i| i < 1 << 20) => {
                let k = ids.iter().max().map_or(0, |m| m + 1);
                Self::from_names((0..k).map(|i| i.to_string()).collect())
            }
            _ => Self::from_names(distinct.into_iter().cloned().collect()),
        }
    }

    fn index(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }
}

pub fn save_csv(data: &LabeledDataset, path: impl AsRef<Path>, with_clean: bool) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    write_csv(data, std::io::BufWriter::new(file), with_clean)
}

pub fn write_csv<W: Write>(data: &LabeledDataset, writer: W, with_clean: bool) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..data.feature_dim()).map(|j| format!("f{j}")).collect();
    header.push(LABEL_COLUMN.into());
    if with_clean {
        header.push(CLEAN_LABEL_COLUMN.into());
    }
    wtr.write_record(&header)?;
    let name = |l: usize| match &data.label_names {
        Some(names) => names[l].clone(),
        None => l.to_string(),
    };
    for i in 0..data.len() {
        let mut record: Vec<String> = data.row(i).iter().map(|v| v.to_string()).collect();
        record.push(name(data.observed_labels[i]));
        if with_clean {
            record.push(name(data.clean_labels[i]));
        }
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Stratified k-fold assignment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldPlan {
    pub num_folds: usize,
    pub assignments: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn predict_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_folds];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Stratifies on observed labels: each class is shuffled and the classes are
/// dealt round-robin into folds as one continuous sequence, so both total and
/// per-class fold sizes differ by at most one.
pub fn make_folds(data: &LabeledDataset, num_folds: usize, seed: u64) -> Result<FoldPlan, DataError> {
    if num_folds < 2 {
        return Err(DataError::Spec(format!("num_folds must be >= 2, got {num_folds}")));
    }
    let n = data.len();
    if n < num_folds * data.num_classes() {
        return Err(DataError::TooFewSamples(format!(
            "{n} samples cannot fill {num_folds} folds over {} classes",
            data.num_classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class = vec![Vec::new(); data.num_classes()];
    for (i, &l) in data.observed_labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut assignments = vec![0; n];
    let mut position = 0;
    for members in &mut by_class {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            assignments[i] = position % num_folds;
            position += 1;
        }
    }
    Ok(FoldPlan {
        num_folds,
        assignments,
        seed,
    })
}
