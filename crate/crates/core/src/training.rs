//! Mini-batch training with Adam, loss scheduling and per-epoch instrumentation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledDataset;
use crate::losses::{scheduled_loss, LossError, LossKind, LossSpec};
use crate::net::{NetError, Network, Tape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(
        "training diverged at epoch {epoch}, batch {batch}: loss {loss} (loss kind {kind}, lr {learning_rate}, params {param_checksum:016x})"
    )]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        kind: LossKind,
        learning_rate: f64,
        param_checksum: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Instrumentation {
    pub record_prob_per_epoch: bool,
    pub record_grad_per_epoch: bool,
    pub record_logit_margins: bool,
}

impl Instrumentation {
    pub fn all() -> Self {
        Self {
            record_prob_per_epoch: true,
            record_grad_per_epoch: true,
            record_logit_margins: true,
        }
    }

    pub fn any(&self) -> bool {
        self.record_prob_per_epoch || self.record_grad_per_epoch || self.record_logit_margins
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `(epoch, factor)`: from that 1-based epoch on, the rate is multiplied by `factor`.
    pub lr_decay: Vec<(usize, f64)>,
    pub loss: LossSpec,
    pub shuffle_seed: u64,
    pub instrument: Instrumentation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            learning_rate: 1e-3,
            lr_decay: Vec::new(),
            loss: LossSpec::ce(),
            shuffle_seed: 0,
            instrument: Instrumentation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            ));
        }
        let mut last = 0;
        for &(epoch, factor) in &self.lr_decay {
            if epoch <= last || epoch > self.epochs {
                return bad(format!(
                    "lr_decay epochs must be strictly increasing within 1..={}, got {epoch}",
                    self.epochs
                ));
            }
            if !(factor > 0.0 && factor.is_finite()) {
                return bad(format!("lr_decay factor must be > 0, got {factor}"));
            }
            last = epoch;
        }
        self.loss.validate()?;
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.lr_decay
            .iter()
            .filter(|(e, _)| epoch >= *e)
            .fold(self.learning_rate, |lr, (_, f)| lr * f)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], learning_rate: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Per-epoch, per-sample values captured by an end-of-epoch evaluation pass.
///
/// Each enabled series holds `epochs` rows of `num_samples` values; sample
/// `j` is the `j`-th training row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpochTrace {
    pub num_samples: usize,
    /// Loss kind that drove the updates of each epoch.
    pub loss_kinds: Vec<LossKind>,
    /// Mean minibatch loss seen during each epoch.
    pub epoch_loss: Vec<f64>,
    pub p_label: Vec<Vec<f64>>,
    pub grad_p: Vec<Vec<f64>>,
    pub margin: Vec<Vec<f64>>,
}

impl EpochTrace {
    pub fn epochs(&self) -> usize {
        self.loss_kinds.len()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Network,
    pub trace: EpochTrace,
}

/// Trains on every sample of `data` using its observed labels.
pub fn train(net: Network, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let rows: Vec<usize> = (0..data.len()).collect();
    train_rows(net, data, &rows, cfg)
}

/// Trains on the listed rows of `data`.
pub fn train_rows(
    mut net: Network,
    data: &LabeledDataset,
    rows: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.feature_dim() != net.input_dim() {
        return Err(NetError::Dimension {
            expected: net.input_dim(),
            got: data.feature_dim(),
        }
        .into());
    }
    if let Some(&bad) = rows
        .iter()
        .map(|&i| &data.observed_labels[i])
        .find(|&&l| l >= net.num_classes())
    {
        return Err(TrainError::Config(format!(
            "label {bad} out of range for a {}-class network",
            net.num_classes()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = rows.to_vec();
    let mut adam = Adam::new(net.num_params());
    let mut grads = net.gradients();
    let mut tape = Tape::new();
    let l1_mask = (cfg.loss.l1_weight > 0.0).then(|| net.weight_mask());
    let mut trace = EpochTrace {
        num_samples: rows.len(),
        ..Default::default()
    };

    for epoch in 1..=cfg.epochs {
        let kind = scheduled_loss(&cfg.loss, epoch);
        let lr = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;

        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            grads.fill_zero();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let label = data.observed_labels[i];
                let pred = net.forward_cached(data.row(i), &mut tape)?;
                let eval = cfg.loss.evaluate_as(kind, &pred.probs, label)?;
                batch_loss += eval.value;
                net.backward(&tape, &eval.grad_logits, &mut grads)?;
            }
            if !batch_loss.is_finite() || grads.values.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged {
                    epoch,
                    batch,
                    loss: batch_loss,
                    kind,
                    learning_rate: lr,
                    param_checksum: net.checksum(),
                });
            }
            loss_sum += batch_loss;
            grads.scale(1.0 / chunk.len() as f64);
            if let Some(mask) = &l1_mask {
                for ((g, &w), &is_weight) in grads.values.iter_mut().zip(net.params()).zip(mask) {
                    if is_weight && w != 0.0 {
                        *g += cfg.loss.l1_weight * w.signum();
                    }
                }
            }
            adam.step(net.params_mut(), &grads.values, lr);
        }

        trace.loss_kinds.push(kind);
        trace.epoch_loss.push(if rows.is_empty() {
            0.0
        } else {
            loss_sum / rows.len() as f64
        });
        if cfg.instrument.any() {
            record_epoch(&net, data, rows, &cfg.loss, kind, &cfg.instrument, &mut trace)?;
        }
    }
    Ok(TrainOutcome { net, trace })
}

fn record_epoch(
    net: &Network,
    data: &LabeledDataset,
    rows: &[usize],
    loss: &LossSpec,
    kind: LossKind,
    instrument: &Instrumentation,
    trace: &mut EpochTrace,
) -> Result<(), TrainError> {
    let mut probs = Vec::with_capacity(rows.len());
    let mut grads = Vec::with_capacity(rows.len());
    let mut margins = Vec::with_capacity(rows.len());
    for &i in rows {
        let label = data.observed_labels[i];
        let pred = net.forward(data.row(i))?;
        if instrument.record_prob_per_epoch {
            probs.push(pred.probs[label]);
        }
        if instrument.record_grad_per_epoch {
            grads.push(loss.evaluate_as(kind, &pred.probs, label)?.grad_p);
        }
        if instrument.record_logit_margins {
            margins.push(logit_margin(&pred.logits, label));
        }
    }
    if instrument.record_prob_per_epoch {
        trace.p_label.push(probs);
    }
    if instrument.record_grad_per_epoch {
        trace.grad_p.push(grads);
    }
    if instrument.record_logit_margins {
        trace.margin.push(margins);
    }
    Ok(())
}

/// `z_label - max_{k != label} z_k`.
pub fn logit_margin(logits: &[f64], label: usize) -> f64 {
    let other = logits
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != label)
        .map(|(_, &z)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    logits[label] - other
}

/// Row-major `N x K` class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    num_classes: usize,
    values: Vec<f64>,
}

impl ProbMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, num_classes: usize) -> Self {
        assert!(rows.iter().all(|r| r.len() == num_classes), "ragged probability rows");
        Self {
            num_classes,
            values: rows.into_iter().flatten().collect(),
        }
    }

    pub fn from_flat(values: Vec<f64>, num_classes: usize) -> Self {
        assert!(num_classes > 0 && values.len().is_multiple_of(num_classes));
        Self { num_classes, values }
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.num_classes)
    }
}

/// Class probabilities for every row of a flat, row-major feature buffer.
pub fn predict_probs(net: &Network, features: &[f64]) -> Result<ProbMatrix, NetError> {
    let d = net.input_dim();
    if !features.len().is_multiple_of(d) {
        return Err(NetError::Dimension {
            expected: d,
            got: features.len() % d,
        });
    }
    let mut values = Vec::with_capacity(features.len() / d * net.num_classes());
    for x in features.chunks_exact(d) {
        values.extend(net.forward(x)?.probs);
    }
    Ok(ProbMatrix::from_flat(values, net.num_classes()))
}

/// Box-plot summary of one cohort at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortStats {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Most extreme values within 1.5·IQR of the quartiles.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub positive_fraction: f64,
    pub zero_fraction: f64,
    pub negative_fraction: f64,
}

impl CohortStats {
    /// `None` for an empty cohort.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let q1 = quantile_sorted(&sorted, 0.25);
        let q3 = quantile_sorted(&sorted, 0.75);
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let frac = |f: &dyn Fn(f64) -> bool| sorted.iter().filter(|&&v| f(v)).count() as f64 / n;
        Some(Self {
            count: sorted.len(),
            mean: sorted.iter().sum::<f64>() / n,
            min: sorted[0],
            q1,
            median: quantile_sorted(&sorted, 0.5),
            q3,
            max: sorted[sorted.len() - 1],
            whisker_low: sorted.iter().copied().find(|&v| v >= lo_fence).unwrap_or(sorted[0]),
            whisker_high: sorted
                .iter()
                .rev()
                .copied()
                .find(|&v| v <= hi_fence)
                .unwrap_or(sorted[0]),
            positive_fraction: frac(&|v| v > 0.0),
            zero_fraction: frac(&|v| v == 0.0),
            negative_fraction: frac(&|v| v < 0.0),
        })
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochCohorts {
    pub epoch: usize,
    pub loss_kind: LossKind,
    pub corrupt: Option<CohortStats>,
    pub clean: Option<CohortStats>,
}

/// Splits each epoch's values by the ground-truth corruption mask.
pub fn cohort_summary(
    series: &[Vec<f64>],
    loss_kinds: &[LossKind],
    mask: &[bool],
) -> Result<Vec<EpochCohorts>, TrainError> {
    series
        .iter()
        .enumerate()
        .map(|(e, values)| {
            if values.len() != mask.len() {
                return Err(TrainError::Config(format!(
                    "mask has {} entries but the trace has {} samples",
                    mask.len(),
                    values.len()
                )));
            }
            type Tagged = Vec<(f64, bool)>;
            let (corrupt, clean): (Tagged, Tagged) =
                values.iter().copied().zip(mask.iter().copied()).partition(|&(_, m)| m);
            let strip = |v: Tagged| v.into_iter().map(|(x, _)| x).collect::<Vec<_>>();
            Ok(EpochCohorts {
                epoch: e + 1,
                loss_kind: loss_kinds[e],
                corrupt: CohortStats::from_values(&strip(corrupt)),
                clean: CohortStats::from_values(&strip(clean)),
            })
        })
        .collect()
}

/// Box-plot statistics of `∂L/∂p_ỹ` per epoch for corrupt and clean samples.
pub fn gradient_cohort_summary(trace: &EpochTrace, mask: &[bool]) -> Result<Vec<EpochCohorts>, TrainError> {
    if trace.grad_p.is_empty() {
        return Err(TrainError::Config("gradient instrumentation was not enabled".into()));
    }
    cohort_summary(&trace.grad_p, &trace.loss_kinds, mask)
}

/// Same as [`gradient_cohort_summary`] for the observed-label probability.
pub fn probability_cohort_summary(trace: &EpochTrace, mask: &[bool]) -> Result<Vec<EpochCohorts>, TrainError> {
    if trace.p_label.is_empty() {
        return Err(TrainError::Config("probability instrumentation was not enabled".into()));
    }
    cohort_summary(&trace.p_label, &trace.loss_kinds, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, SyntheticSpec};
    use crate::net::{Activation, NetConfig};

    fn blobs(spread: f64) -> LabeledDataset {
        generate_blobs(&SyntheticSpec {
            num_classes: 3,
            samples_per_class: 60,
            feature_dim: 4,
            class_center_separation: 4.0,
            within_class_spread: spread,
            seed: 1,
        })
        .unwrap()
    }

    fn net(hidden: Vec<usize>) -> Network {
        Network::init(&NetConfig {
            input_dim: 4,
            hidden_dims: hidden,
            num_classes: 3,
            activation: Activation::Relu,
            init_seed: 3,
        })
        .unwrap()
    }

    fn cfg(loss: LossSpec, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: lr,
            loss,
            shuffle_seed: 5,
            instrument: Instrumentation::all(),
            ..Default::default()
        }
    }

    fn accuracy(net: &Network, data: &LabeledDataset) -> f64 {
        let probs = predict_probs(net, data.features()).unwrap();
        let hits = probs
            .rows()
            .zip(&data.clean_labels)
            .filter(|(row, &y)| row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 == y)
            .count();
        hits as f64 / data.len() as f64
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let n = net(vec![8]);
        let data = blobs(1.0);
        let out = train(n.clone(), &data, &cfg(LossSpec::ce(), 0.0)).unwrap();
        assert_eq!(out.net.params(), n.params());
        let first = &out.trace.p_label[0];
        assert!(out.trace.p_label.iter().all(|e| e == first));
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = blobs(0.05);
        let out = train(net(vec![]), &data, &cfg(LossSpec::ce(), 0.05)).unwrap();
        assert!(accuracy(&out.net, &data) > 0.99);
    }

    #[test]
    fn full_cutoff_never_updates() {
        let n = net(vec![8]);
        let out = train(n.clone(), &blobs(1.0), &cfg(LossSpec::piecewise_zero(1.0, 0), 0.1)).unwrap();
        assert_eq!(out.net.params(), n.params());
    }

    #[test]
    fn schedule_recorded_per_epoch() {
        let out = train(net(vec![4]), &blobs(1.0), &cfg(LossSpec::piecewise_zero(0.05, 1), 0.01)).unwrap();
        assert_eq!(out.trace.loss_kinds[0], LossKind::CrossEntropy);
        assert!(out.trace.loss_kinds[1..].iter().all(|&k| k == LossKind::PiecewiseZero));
        assert_eq!(out.trace.grad_p.len(), 10);
        assert!(out.trace.margin.iter().all(|m| m.len() == 180));
    }

    #[test]
    fn training_is_deterministic() {
        let a = train(net(vec![6]), &blobs(1.0), &cfg(LossSpec::blurry(0.3), 0.01)).unwrap();
        let b = train(net(vec![6]), &blobs(1.0), &cfg(LossSpec::blurry(0.3), 0.01)).unwrap();
        assert_eq!(a.net.checksum(), b.net.checksum());
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn divergence_is_reported() {
        let mut features = blobs(1.0).features().to_vec();
        features[5] = f64::NAN;
        let data = LabeledDataset::new(features, 4, blobs(1.0).clean_labels, 3).unwrap();
        let err = train(net(vec![8]), &data, &cfg(LossSpec::ce(), 0.01)).unwrap_err();
        assert!(matches!(err, TrainError::Diverged { epoch: 1, .. }), "{err}");
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(LossSpec::ce(), 0.01);
        c.lr_decay = vec![(5, 0.1), (3, 0.1)];
        assert!(c.validate().is_err());
        c.lr_decay = vec![(11, 0.1)];
        assert!(c.validate().is_err());
        c.lr_decay = vec![(5, 0.1), (8, 0.5)];
        assert!(c.validate().is_ok());
        assert_eq!(c.learning_rate_at(4), 0.01);
        assert!((c.learning_rate_at(5) - 0.001).abs() < 1e-18);
        assert!((c.learning_rate_at(9) - 0.0005).abs() < 1e-18);
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn predict_probs_consistent_with_forward() {
        let n = net(vec![5]);
        let data = blobs(1.0);
        let probs = predict_probs(&n, data.features()).unwrap();
        assert_eq!(probs.len(), data.len());
        assert_eq!(probs.row(7), n.forward(data.row(7)).unwrap().probs.as_slice());
        assert!(probs.rows().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-9));
        let zero = Network::zeros(n.config()).unwrap();
        assert!(predict_probs(&zero, data.features())
            .unwrap()
            .rows()
            .all(|r| r.iter().all(|&p| p == 1.0 / 3.0)));
        assert!(predict_probs(&n, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn margins() {
        assert_eq!(logit_margin(&[2.0, 0.5, -1.0], 0), 1.5);
        assert_eq!(logit_margin(&[2.0, 0.5, -1.0], 2), -3.0);
        assert_eq!(logit_margin(&[1.0, 1.0, 0.0], 1), 0.0);
    }

    #[test]
    fn cohort_stats() {
        let s = CohortStats::from_values(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (2.0, 3.0, 4.0));
        assert_eq!(s.whisker_high, 4.0);
        assert_eq!(s.max, 100.0);
        assert!(CohortStats::from_values(&[]).is_none());

        let trace = EpochTrace {
            num_samples: 3,
            loss_kinds: vec![LossKind::CrossEntropy],
            grad_p: vec![vec![-1.0, -2.0, 0.0]],
            ..Default::default()
        };
        let summary = gradient_cohort_summary(&trace, &[false, false, false]).unwrap();
        assert!(summary[0].corrupt.is_none());
        assert_eq!(summary[0].clean.as_ref().unwrap().count, 3);
        assert!(gradient_cohort_summary(&trace, &[false]).is_err());
        assert!(probability_cohort_summary(&trace, &[false; 3]).is_err());
    }
}
