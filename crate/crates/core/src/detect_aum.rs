//! Area Under the Margin.
//!
//! A sample's margin at one epoch is its observed-label logit minus the largest
//! other logit; its AUM is the average margin over epochs. A small set of
//! threshold samples is relabelled to an extra fake class `K`, and the 99th
//! percentile (nearest rank) of their AUMs becomes the flagging threshold.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::LabeledDataset;
use crate::detect_cl::DetectError;
use crate::net::{NetConfig, Network};
use crate::training::{logit_margin, train, Instrumentation, TrainConfig};

pub const DEFAULT_THRESHOLD_FRACTION: f64 = 0.02;
pub const THRESHOLD_PERCENTILE: f64 = 0.99;

/// Relabels `round(fraction · N)` uniformly chosen samples to the fake class `K`.
///
/// The returned dataset has `K + 1` classes; threshold indices are ascending.
pub fn assign_threshold_samples(
    data: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, Vec<usize>), DetectError> {
    if !(fraction > 0.0 && fraction < 0.5) {
        return Err(DetectError::Aum(format!(
            "threshold fraction must lie in (0, 0.5), got {fraction}"
        )));
    }
    let n = data.len();
    let count = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = index::sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();

    let fake = data.num_classes();
    let mut out = data.clone();
    out.set_num_classes(fake + 1);
    for &i in &chosen {
        out.observed_labels[i] = fake;
    }
    Ok((out, chosen))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AumTracker {
    sums: Vec<f64>,
    epochs_observed: usize,
    threshold_samples: Vec<usize>,
    is_threshold: Vec<bool>,
    fake_class: usize,
}

impl AumTracker {
    /// `threshold_samples` must hold indices below `num_samples`.
    pub fn new(num_samples: usize, threshold_samples: Vec<usize>, fake_class: usize) -> Self {
        let mut is_threshold = vec![false; num_samples];
        for &i in &threshold_samples {
            is_threshold[i] = true;
        }
        Self {
            sums: vec![0.0; num_samples],
            epochs_observed: 0,
            threshold_samples,
            is_threshold,
            fake_class,
        }
    }

    pub fn epochs_observed(&self) -> usize {
        self.epochs_observed
    }

    pub fn fake_class(&self) -> usize {
        self.fake_class
    }

    pub fn threshold_samples(&self) -> &[usize] {
        &self.threshold_samples
    }

    pub fn is_threshold(&self, i: usize) -> bool {
        self.is_threshold[i]
    }

    /// Adds one epoch of margins. `logits[i]` and `labels[i]` belong to sample `i`.
    pub fn record_margins(&mut self, logits: &[Vec<f64>], labels: &[usize]) -> Result<(), DetectError> {
        let margins = logits
            .iter()
            .zip(labels)
            .map(|(z, &l)| {
                if z.len() != self.fake_class + 1 && z.len() != self.fake_class {
                    return Err(DetectError::Aum(format!(
                        "expected {} or {} logits, got {}",
                        self.fake_class,
                        self.fake_class + 1,
                        z.len()
                    )));
                }
                if l >= z.len() {
                    return Err(DetectError::Aum(format!("label {l} outside {} logits", z.len())));
                }
                Ok(logit_margin(z, l))
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.record_epoch_margins(&margins)
    }

    /// Adds one epoch of precomputed margins.
    pub fn record_epoch_margins(&mut self, margins: &[f64]) -> Result<(), DetectError> {
        if margins.len() != self.sums.len() {
            return Err(DetectError::Aum(format!(
                "expected {} margins, got {}",
                self.sums.len(),
                margins.len()
            )));
        }
        for (s, m) in self.sums.iter_mut().zip(margins) {
            *s += m;
        }
        self.epochs_observed += 1;
        Ok(())
    }

    pub fn aum(&self) -> Vec<f64> {
        let e = self.epochs_observed.max(1) as f64;
        self.sums.iter().map(|s| s / e).collect()
    }

    pub fn detect(&self) -> Result<AumDetection, DetectError> {
        if self.epochs_observed == 0 {
            return Err(DetectError::Aum("no epochs recorded".into()));
        }
        if self.threshold_samples.is_empty() {
            return Err(DetectError::Aum("threshold sample set is empty".into()));
        }
        let aum = self.aum();
        let threshold_aums: Vec<f64> = self.threshold_samples.iter().map(|&i| aum[i]).collect();
        let threshold = nearest_rank_percentile(&threshold_aums, THRESHOLD_PERCENTILE);
        let flagged = (0..aum.len())
            .filter(|&i| !self.is_threshold[i] && aum[i] <= threshold)
            .collect();
        Ok(AumDetection {
            aum,
            threshold,
            flagged,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AumDetection {
    pub aum: Vec<f64>,
    pub threshold: f64,
    /// Non-threshold samples with `AUM <= threshold`, ascending.
    pub flagged: Vec<usize>,
}

/// Everything produced by one AUM training run.
#[derive(Debug, Clone)]
pub struct AumRun {
    pub tracker: AumTracker,
    pub detection: AumDetection,
}

impl AumRun {
    /// Indices of samples that are not threshold samples, ascending.
    pub fn evaluated(&self) -> Vec<usize> {
        (0..self.detection.aum.len())
            .filter(|&i| !self.tracker.is_threshold(i))
            .collect()
    }
}

/// Adds threshold samples, trains a `K + 1`-output network on every sample and
/// flags by AUM. `net_cfg.num_classes` is the real class count `K`.
///
/// Margins come from the end-of-epoch evaluation pass.
pub fn run_aum(
    data: &LabeledDataset,
    fraction: f64,
    threshold_seed: u64,
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
) -> Result<AumRun, DetectError> {
    let (relabelled, threshold_samples) = assign_threshold_samples(data, fraction, threshold_seed)?;
    let fake_class = data.num_classes();
    let widened = NetConfig {
        num_classes: fake_class + 1,
        ..net_cfg.clone()
    };
    let cfg = TrainConfig {
        instrument: Instrumentation {
            record_logit_margins: true,
            ..train_cfg.instrument
        },
        ..train_cfg.clone()
    };
    let net = Network::init(&widened).map_err(|e| DetectError::Train(e.into()))?;
    let outcome = train(net, &relabelled, &cfg)?;
    let mut tracker = AumTracker::new(data.len(), threshold_samples, fake_class);
    for margins in &outcome.trace.margin {
        tracker.record_epoch_margins(margins)?;
    }
    let detection = tracker.detect()?;
    Ok(AumRun { tracker, detection })
}

/// The `ceil(q · n)`-th smallest value.
pub fn nearest_rank_percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}
