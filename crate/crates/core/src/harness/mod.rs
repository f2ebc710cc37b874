//! Experiment runs behind the command-line tool: corrupt, detect, sweep and trace.
//!
//! Each trial seed derives its own corruption, fold, initialization, shuffle
//! and threshold-sample seeds, so a config file fully determines every output.
//! Results are ordered by (grid point, seed) whatever the execution mode.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

pub use config::{
    CorruptionConfig, CsvSource, DatasetConfig, DetectorConfig, ExperimentConfig, NetworkConfig, SweepConfig,
    SweepPoint, TrainSection, TrialSeeds,
};

use crate::corruption::corrupt;
use crate::data::{generate_blobs, load_csv, make_folds, CsvSchema, LabeledDataset};
use crate::detect_aum::run_aum;
use crate::detect_cl::{estimate_confident_joint, out_of_fold_probs, prune_all, self_confidence, PruneMethod};
use crate::exec::Execution;
use crate::metrics::{
    cohens_d, score_detection, score_detection_subset, split_cohorts, wasserstein_1d, Aggregate, DetectionReport,
};
use crate::net::Network;
use crate::training::{
    gradient_cohort_summary, probability_cohort_summary, train, EpochCohorts, EpochTrace, Instrumentation,
};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{stage} failed (seed {seed}): {source}")]
    Stage {
        stage: &'static str,
        seed: u64,
        #[source]
        source: BoxError,
    },
    #[error("loading dataset: {0}")]
    Dataset(#[source] BoxError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: BoxError,
    },
}

impl Error {
    /// True when the fault lies in the configuration rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }

    fn io(path: &Path, source: impl Into<BoxError>) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source: source.into(),
        }
    }
}

fn stage<E: Into<BoxError>>(stage: &'static str, seed: u64) -> impl FnOnce(E) -> Error {
    move |e| Error::Stage {
        stage,
        seed,
        source: e.into(),
    }
}

/// The clean (or file-provided) dataset of an experiment.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<LabeledDataset, Error> {
    match &cfg.dataset {
        DatasetConfig::Synthetic(spec) => generate_blobs(spec).map_err(|e| Error::Config(e.to_string())),
        DatasetConfig::Csv(src) => {
            let schema = CsvSchema {
                label_names: src.label_names.clone(),
                require_clean_label: false,
            };
            load_csv(&src.path, &schema).map_err(|e| Error::Dataset(format!("{}: {e}", src.path.display()).into()))
        }
    }
}

/// Applies the configured corruption. A dataset whose file already records
/// flipped labels is used as it is.
pub fn corrupt_dataset(
    cfg: &ExperimentConfig,
    data: &LabeledDataset,
    seeds: &TrialSeeds,
) -> Result<LabeledDataset, Error> {
    if data.corrupted_mask.iter().any(|&m| m) {
        log::info!("dataset already carries corrupted labels; skipping injection");
        return Ok(data.clone());
    }
    corrupt(data, &cfg.corruption.spec(seeds.corruption)).map_err(stage("corruption", seeds.trial))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ProposalCounts {
    pub pbc: usize,
    pub pbnr: usize,
    pub both: usize,
}

/// Detector-specific results of one trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "detector", rename_all = "lowercase")]
pub enum TrialDetail {
    Cl {
        proposals: ProposalCounts,
        /// Classes whose confidence threshold was undefined.
        undefined_classes: Vec<usize>,
        #[serde(skip)]
        self_confidence: Vec<f64>,
        #[serde(skip)]
        flags: [Vec<bool>; 3],
    },
    Aum {
        threshold: f64,
        threshold_samples: usize,
        #[serde(skip)]
        aum: Vec<f64>,
        #[serde(skip)]
        is_threshold: Vec<bool>,
        #[serde(skip)]
        flagged: Vec<bool>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub seeds: TrialSeeds,
    pub report: DetectionReport,
    #[serde(flatten)]
    pub detail: TrialDetail,
    #[serde(skip)]
    pub observed_labels: Vec<usize>,
    #[serde(skip)]
    pub corrupted_mask: Vec<bool>,
}

fn index_mask(n: usize, indices: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; n];
    for &i in indices {
        mask[i] = true;
    }
    mask
}

/// Corrupt, detect and score for one trial seed.
pub fn run_trial(
    cfg: &ExperimentConfig,
    clean: &LabeledDataset,
    seed: u64,
    exec: Execution,
) -> Result<TrialOutcome, Error> {
    let seeds = TrialSeeds::derive(seed);
    let data = corrupt_dataset(cfg, clean, &seeds)?;
    let n = data.len();
    let net_cfg = cfg.net_config(data.feature_dim(), data.num_classes(), seeds.init);
    let train_cfg = cfg.train_config(cfg.loss, seeds.shuffle);
    let mask = &data.corrupted_mask;

    let (report, detail) = match &cfg.detector {
        DetectorConfig::Cl { method, folds } => {
            let plan = make_folds(&data, *folds, seeds.folds).map_err(stage("fold assignment", seed))?;
            let oof = out_of_fold_probs(&data, &plan, &net_cfg, &train_cfg, exec).map_err(stage("training", seed))?;
            let joint =
                estimate_confident_joint(&oof.probs, &data.observed_labels).map_err(stage("confident joint", seed))?;
            let proposals = prune_all(&joint, &oof.probs, &data.observed_labels).map_err(stage("pruning", seed))?;
            let counts = ProposalCounts {
                pbc: proposals.pbc.len(),
                pbnr: proposals.pbnr.len(),
                both: proposals.both.len(),
            };
            log::debug!(
                "seed {seed}: proposals pbc={} pbnr={} both={}",
                counts.pbc,
                counts.pbnr,
                counts.both
            );
            let confidence = self_confidence(&oof.probs, &data.observed_labels);
            let report = score_detection(proposals.get(*method), mask).with_separation(&confidence, mask);
            let flags =
                [PruneMethod::Pbc, PruneMethod::Pbnr, PruneMethod::Both].map(|m| index_mask(n, proposals.get(m)));
            let detail = TrialDetail::Cl {
                proposals: counts,
                undefined_classes: joint.undefined_classes(),
                self_confidence: confidence,
                flags,
            };
            (report, detail)
        }
        DetectorConfig::Aum { threshold_fraction } => {
            let run = run_aum(
                &data,
                *threshold_fraction,
                seeds.threshold_samples,
                &net_cfg,
                &train_cfg,
            )
            .map_err(stage("AUM training", seed))?;
            let evaluated = run.evaluated();
            let aum = &run.detection.aum;
            let eval_aum: Vec<f64> = evaluated.iter().map(|&i| aum[i]).collect();
            let eval_mask: Vec<bool> = evaluated.iter().map(|&i| mask[i]).collect();
            let report =
                score_detection_subset(&run.detection.flagged, mask, &evaluated).with_separation(&eval_aum, &eval_mask);
            let detail = TrialDetail::Aum {
                threshold: run.detection.threshold,
                threshold_samples: run.tracker.threshold_samples().len(),
                aum: aum.clone(),
                is_threshold: (0..n).map(|i| run.tracker.is_threshold(i)).collect(),
                flagged: index_mask(n, &run.detection.flagged),
            };
            (report, detail)
        }
    };
    Ok(TrialOutcome {
        seeds,
        report,
        detail,
        observed_labels: data.observed_labels.clone(),
        corrupted_mask: data.corrupted_mask.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricAggregates {
    pub f1: Aggregate,
    pub balanced_accuracy: Aggregate,
    pub precision: Aggregate,
    pub recall: Aggregate,
}

impl MetricAggregates {
    pub fn from_reports<'a>(reports: impl Iterator<Item = &'a DetectionReport> + Clone) -> Self {
        let agg = |f: fn(&DetectionReport) -> f64| Aggregate::from_values(reports.clone().map(f).collect());
        Self {
            f1: agg(|r| r.f1),
            balanced_accuracy: agg(|r| r.balanced_accuracy),
            precision: agg(|r| r.precision),
            recall: agg(|r| r.recall),
        }
    }
}

/// The JSON document written by `detect`. Contains no timestamps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectReport {
    pub config: ExperimentConfig,
    pub trials: Vec<TrialOutcome>,
    /// Mean, sample standard deviation (`std`) and standard error (`sem`) over trials.
    pub aggregate: MetricAggregates,
}

impl DetectReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn run_detect(cfg: &ExperimentConfig, exec: Execution) -> Result<DetectReport, Error> {
    cfg.validate()?;
    let clean = load_dataset(cfg)?;
    let trials = exec.try_map(cfg.seeds.clone(), |seed| run_trial(cfg, &clean, seed, exec))?;
    Ok(DetectReport {
        config: cfg.clone(),
        aggregate: MetricAggregates::from_reports(trials.iter().map(|t| &t.report)),
        trials,
    })
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), Error> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut wtr = csv::Writer::from_writer(std::io::BufWriter::new(file));
    for row in rows {
        wtr.serialize(row).map_err(|e| Error::io(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct ClRow {
    sample_index: usize,
    observed_label: usize,
    self_confidence: f64,
    flagged_pbc: bool,
    flagged_pbnr: bool,
    flagged_both: bool,
    is_corrupt: bool,
}

#[derive(Serialize)]
struct AumRow {
    sample_index: usize,
    aum: f64,
    is_threshold_sample: bool,
    flagged: bool,
    is_corrupt: bool,
}

/// Writes `report.json` plus one per-sample CSV per trial; returns the written paths.
pub fn write_detect(report: &DetectReport, out: &Path) -> Result<Vec<PathBuf>, Error> {
    create_dir(out)?;
    let mut written = Vec::new();
    let path = out.join("report.json");
    write_file(&path, &report.to_json())?;
    written.push(path);
    for t in &report.trials {
        let seed = t.seeds.trial;
        let mask = &t.corrupted_mask;
        match &t.detail {
            TrialDetail::Cl {
                self_confidence, flags, ..
            } => {
                let path = out.join(format!("detections_seed{seed}.csv"));
                write_rows(
                    &path,
                    (0..mask.len()).map(|i| ClRow {
                        sample_index: i,
                        observed_label: t.observed_labels[i],
                        self_confidence: self_confidence[i],
                        flagged_pbc: flags[0][i],
                        flagged_pbnr: flags[1][i],
                        flagged_both: flags[2][i],
                        is_corrupt: mask[i],
                    }),
                )?;
                written.push(path);
            }
            TrialDetail::Aum {
                aum,
                is_threshold,
                flagged,
                ..
            } => {
                let path = out.join(format!("aum_seed{seed}.csv"));
                write_rows(
                    &path,
                    (0..mask.len()).map(|i| AumRow {
                        sample_index: i,
                        aum: aum[i],
                        is_threshold_sample: is_threshold[i],
                        flagged: flagged[i],
                        is_corrupt: mask[i],
                    }),
                )?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param_name: &'static str,
    pub param_value: f64,
    pub eta: f64,
    pub seed: u64,
    pub f1: f64,
    pub balanced_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPointSummary {
    #[serde(flatten)]
    pub point: SweepPoint,
    pub aggregate: MetricAggregates,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub config: ExperimentConfig,
    pub points: Vec<SweepPointSummary>,
    #[serde(skip)]
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// The point with the highest mean F1 among those on `param_name` at `eta`
    /// (earliest point on ties).
    pub fn best(&self, param_name: &str, eta: f64) -> Option<&SweepPointSummary> {
        self.points
            .iter()
            .filter(|p| p.point.param_name == param_name && p.point.eta == eta)
            .fold(None, |best: Option<&SweepPointSummary>, p| match best {
                Some(b) if b.aggregate.f1.mean >= p.aggregate.f1.mean => Some(b),
                _ => Some(p),
            })
    }

    pub fn point(&self, param_name: &str, param_value: f64, eta: f64) -> Option<&SweepPointSummary> {
        self.points
            .iter()
            .find(|p| p.point.param_name == param_name && p.point.param_value == param_value && p.point.eta == eta)
    }
}

/// Every (grid point, seed) pair as an independent job.
pub fn run_sweep(cfg: &ExperimentConfig, exec: Execution) -> Result<SweepReport, Error> {
    cfg.validate()?;
    if cfg.sweep.is_empty() {
        return Err(Error::Config("sweep needs at least one non-empty grid".into()));
    }
    let clean = load_dataset(cfg)?;
    let points = cfg.sweep.points(cfg.corruption.eta);
    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| cfg.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let reports = exec.try_map(jobs.clone(), |(p, seed)| {
        let point_cfg = cfg.at_point(&points[p]);
        run_trial(&point_cfg, &clean, seed, Execution::Sequential).map(|t| t.report)
    })?;

    let rows: Vec<SweepRow> = jobs
        .iter()
        .zip(&reports)
        .map(|(&(p, seed), r)| SweepRow {
            param_name: points[p].param_name,
            param_value: points[p].param_value,
            eta: points[p].eta,
            seed,
            f1: r.f1,
            balanced_accuracy: r.balanced_accuracy,
            precision: r.precision,
            recall: r.recall,
        })
        .collect();
    let per_point = cfg.seeds.len();
    let summaries = points
        .iter()
        .zip(reports.chunks(per_point))
        .map(|(point, chunk)| SweepPointSummary {
            point: *point,
            aggregate: MetricAggregates::from_reports(chunk.iter()),
        })
        .collect();
    Ok(SweepReport {
        config: cfg.clone(),
        points: summaries,
        rows,
    })
}

pub fn write_sweep(report: &SweepReport, out: &Path) -> Result<Vec<PathBuf>, Error> {
    create_dir(out)?;
    let csv_path = out.join("sweep.csv");
    write_rows(&csv_path, &report.rows)?;
    let json_path = out.join("sweep.json");
    write_file(
        &json_path,
        &serde_json::to_string_pretty(report).expect("sweep report serializes"),
    )?;
    Ok(vec![csv_path, json_path])
}

/// Distance between the corrupt and clean cohorts of one statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Separation {
    pub cohens_d: Option<f64>,
    pub wasserstein: Option<f64>,
}

impl Separation {
    pub fn of(values: &[f64], mask: &[bool]) -> Self {
        let (corrupt, clean) = split_cohorts(values, mask);
        Self {
            cohens_d: cohens_d(&corrupt, &clean).ok(),
            wasserstein: wasserstein_1d(&corrupt, &clean).ok(),
        }
    }
}

/// One instrumented training run on the whole corrupted dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRun {
    pub seeds: TrialSeeds,
    pub gradient_cohorts: Vec<EpochCohorts>,
    pub probability_cohorts: Vec<EpochCohorts>,
    /// Final-epoch logit margin.
    pub final_margin_separation: Separation,
    /// Margin averaged over epochs (AUM without threshold samples).
    pub mean_margin_separation: Separation,
    #[serde(skip)]
    pub trace: EpochTrace,
    #[serde(skip)]
    pub corrupted_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceReport {
    pub config: ExperimentConfig,
    pub runs: Vec<TraceRun>,
}

pub fn trace_trial(cfg: &ExperimentConfig, clean: &LabeledDataset, seed: u64) -> Result<TraceRun, Error> {
    let seeds = TrialSeeds::derive(seed);
    let data = corrupt_dataset(cfg, clean, &seeds)?;
    let net_cfg = cfg.net_config(data.feature_dim(), data.num_classes(), seeds.init);
    let mut train_cfg = cfg.train_config(cfg.loss, seeds.shuffle);
    train_cfg.instrument = Instrumentation::all();
    let net = Network::init(&net_cfg).map_err(stage("network init", seed))?;
    let outcome = train(net, &data, &train_cfg).map_err(stage("training", seed))?;
    let trace = outcome.trace;
    let mask = data.corrupted_mask;
    let epochs = trace.margin.len() as f64;
    let mean_margin: Vec<f64> = (0..data.observed_labels.len())
        .map(|i| trace.margin.iter().map(|m| m[i]).sum::<f64>() / epochs)
        .collect();
    Ok(TraceRun {
        seeds,
        gradient_cohorts: gradient_cohort_summary(&trace, &mask).map_err(stage("cohort summary", seed))?,
        probability_cohorts: probability_cohort_summary(&trace, &mask).map_err(stage("cohort summary", seed))?,
        final_margin_separation: Separation::of(trace.margin.last().map_or(&[][..], Vec::as_slice), &mask),
        mean_margin_separation: Separation::of(&mean_margin, &mask),
        trace,
        corrupted_mask: mask,
    })
}

pub fn run_trace(cfg: &ExperimentConfig, exec: Execution) -> Result<TraceReport, Error> {
    cfg.validate()?;
    let clean = load_dataset(cfg)?;
    let runs = exec.try_map(cfg.seeds.clone(), |seed| trace_trial(cfg, &clean, seed))?;
    Ok(TraceReport {
        config: cfg.clone(),
        runs,
    })
}

#[derive(Serialize)]
struct TraceRow {
    epoch: usize,
    sample_index: usize,
    p_label: f64,
    grad_p: f64,
    margin: f64,
    is_corrupt: bool,
}

/// Writes `trace_seed{s}.csv` (epochs × N rows) per run and `trace_summary.json`.
pub fn write_trace(report: &TraceReport, out: &Path) -> Result<Vec<PathBuf>, Error> {
    create_dir(out)?;
    let mut written = Vec::new();
    for run in &report.runs {
        let path = out.join(format!("trace_seed{}.csv", run.seeds.trial));
        let t = &run.trace;
        let rows = (0..t.epochs()).flat_map(|e| {
            (0..t.num_samples).map(move |i| TraceRow {
                epoch: e + 1,
                sample_index: i,
                p_label: t.p_label[e][i],
                grad_p: t.grad_p[e][i],
                margin: t.margin[e][i],
                is_corrupt: run.corrupted_mask[i],
            })
        });
        write_rows(&path, rows)?;
        written.push(path);
    }
    let path = out.join("trace_summary.json");
    write_file(
        &path,
        &serde_json::to_string_pretty(report).expect("trace report serializes"),
    )?;
    written.push(path);
    Ok(written)
}

/// Writes `corrupted_seed{s}.csv` per seed, keeping the clean label column.
pub fn write_corrupt(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, Error> {
    cfg.validate()?;
    let clean = load_dataset(cfg)?;
    create_dir(out)?;
    let mut written = Vec::new();
    for &seed in &cfg.seeds {
        let data = corrupt_dataset(cfg, &clean, &TrialSeeds::derive(seed))?;
        let path = out.join(format!("corrupted_seed{seed}.csv"));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut buf = std::io::BufWriter::new(file);
        crate::data::write_csv(&data, &mut buf, true).map_err(|e| Error::io(&path, e))?;
        buf.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
