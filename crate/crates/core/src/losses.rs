//! Per-sample classification losses on softmax probabilities.
//!
//! Every loss reports its value along with gradients in probability space
//! and in logit space. Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]`
//! before any logarithm.
//!
//! | kind | value |
//! |------|-------|
//! | CE   | `-ln p` |
//! | FL   | `-(1-p)^γ ln p` |
//! | GCE  | `(1 - p^q) / q` |
//! | BL   | `-p^γ ln p` |
//! | PZ   | `0` if `p <= c`, else `-ln p` |
//! | ANL  | `α · normalized + β · normalized-negative` |
//!
//! where `p` is the probability of the observed label.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROB_FLOOR: f64 = 1e-12;

/// Lower probability bound inside the normalized-negative term of ANL; its
/// negative log is the loss ceiling `A`.
pub const ANL_MIN_PROB: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("invalid loss parameter: {0}")]
    Parameter(String),
    #[error("unknown loss kind `{0}`")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "ce")]
    CrossEntropy,
    #[serde(rename = "fl")]
    Focal,
    #[serde(rename = "gce")]
    Generalized,
    #[serde(rename = "anl_ce")]
    ActiveNegativeCe,
    #[serde(rename = "anl_fl")]
    ActiveNegativeFl,
    #[serde(rename = "bl")]
    Blurry,
    #[serde(rename = "pz")]
    PiecewiseZero,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::CrossEntropy,
        LossKind::Focal,
        LossKind::Generalized,
        LossKind::ActiveNegativeCe,
        LossKind::ActiveNegativeFl,
        LossKind::Blurry,
        LossKind::PiecewiseZero,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "ce",
            LossKind::Focal => "fl",
            LossKind::Generalized => "gce",
            LossKind::ActiveNegativeCe => "anl_ce",
            LossKind::ActiveNegativeFl => "anl_fl",
            LossKind::Blurry => "bl",
            LossKind::PiecewiseZero => "pz",
        }
    }

    pub fn is_anl(self) -> bool {
        matches!(self, LossKind::ActiveNegativeCe | LossKind::ActiveNegativeFl)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| LossError::UnknownKind(s.to_string()))
    }
}

/// Which base loss an ANL combination normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnlVariant {
    CrossEntropy,
    Focal,
}

/// A loss selector with all of its parameters.
///
/// Parameters not used by `kind` are ignored. `delay` is only consulted by
/// [`scheduled_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "PartialLossSpec")]
pub struct LossSpec {
    pub kind: LossKind,
    pub gamma: f64,
    pub cutoff: f64,
    pub q: f64,
    pub alpha: f64,
    pub beta: f64,
    pub l1_weight: f64,
    pub delay: usize,
}

/// Deserialized form: omitted parameters take the per-kind defaults of
/// [`LossSpec::new`].
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialLossSpec {
    kind: LossKind,
    gamma: Option<f64>,
    cutoff: Option<f64>,
    q: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    l1_weight: Option<f64>,
    delay: Option<usize>,
}

impl From<PartialLossSpec> for LossSpec {
    fn from(raw: PartialLossSpec) -> Self {
        let d = LossSpec::new(raw.kind);
        LossSpec {
            kind: raw.kind,
            gamma: raw.gamma.unwrap_or(d.gamma),
            cutoff: raw.cutoff.unwrap_or(d.cutoff),
            q: raw.q.unwrap_or(d.q),
            alpha: raw.alpha.unwrap_or(d.alpha),
            beta: raw.beta.unwrap_or(d.beta),
            l1_weight: raw.l1_weight.unwrap_or(d.l1_weight),
            delay: raw.delay.unwrap_or(d.delay),
        }
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        Self::new(LossKind::CrossEntropy)
    }
}

impl LossSpec {
    /// Defaults per kind: FL γ=2, BL γ=0.5, PZ c=0.05, GCE q=0.7, ANL α=β=1
    /// with L1 weight 1e-5.
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            gamma: match kind {
                LossKind::Focal | LossKind::ActiveNegativeFl => 2.0,
                LossKind::Blurry => 0.5,
                _ => 0.0,
            },
            cutoff: 0.05,
            q: 0.7,
            alpha: 1.0,
            beta: 1.0,
            l1_weight: if kind.is_anl() { 1e-5 } else { 0.0 },
            delay: 0,
        }
    }

    pub fn ce() -> Self {
        Self::new(LossKind::CrossEntropy)
    }

    pub fn focal(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::new(LossKind::Focal)
        }
    }

    pub fn gce(q: f64) -> Self {
        Self {
            q,
            ..Self::new(LossKind::Generalized)
        }
    }

    pub fn blurry(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::new(LossKind::Blurry)
        }
    }

    pub fn piecewise_zero(cutoff: f64, delay: usize) -> Self {
        Self {
            cutoff,
            delay,
            ..Self::new(LossKind::PiecewiseZero)
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let p = |msg: String| Err(LossError::Parameter(msg));
        match self.kind {
            LossKind::Focal | LossKind::Blurry | LossKind::ActiveNegativeFl
                if !(self.gamma >= 0.0 && self.gamma.is_finite()) =>
            {
                return p(format!("gamma must be a finite value >= 0, got {}", self.gamma));
            }
            LossKind::Generalized if !(self.q > 0.0 && self.q <= 1.0) => {
                return p(format!("q must lie in (0, 1], got {}", self.q));
            }
            LossKind::PiecewiseZero if !(0.0..=1.0).contains(&self.cutoff) => {
                return p(format!("cutoff must lie in [0, 1], got {}", self.cutoff));
            }
            _ => {}
        }
        if self.kind.is_anl() && !(self.alpha > 0.0 && self.beta > 0.0) {
            return p(format!(
                "alpha and beta must be > 0, got {} and {}",
                self.alpha, self.beta
            ));
        }
        if !(self.l1_weight >= 0.0) {
            return p(format!("l1_weight must be >= 0, got {}", self.l1_weight));
        }
        Ok(())
    }

    /// Evaluates the loss of `kind` using this spec's parameters.
    pub fn evaluate_as(&self, kind: LossKind, p: &[f64], label: usize) -> Result<LossEval, LossError> {
        match kind {
            LossKind::CrossEntropy => ce(p, label),
            LossKind::Focal => focal(p, label, self.gamma),
            LossKind::Generalized => gce(p, label, self.q),
            LossKind::Blurry => blurry(p, label, self.gamma),
            LossKind::PiecewiseZero => piecewise_zero(p, label, self.cutoff),
            LossKind::ActiveNegativeCe => anl(p, label, self.alpha, self.beta, AnlVariant::CrossEntropy, 0.0),
            LossKind::ActiveNegativeFl => anl(p, label, self.alpha, self.beta, AnlVariant::Focal, self.gamma),
        }
    }

    pub fn evaluate(&self, p: &[f64], label: usize) -> Result<LossEval, LossError> {
        self.evaluate_as(self.kind, p, label)
    }
}

/// Loss kind in force at a 1-based `epoch`: CE for the first `delay` epochs.
pub fn scheduled_loss(spec: &LossSpec, epoch: usize) -> LossKind {
    if epoch <= spec.delay {
        LossKind::CrossEntropy
    } else {
        spec.kind
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    /// Partial derivative with respect to the observed-label probability.
    pub grad_p: f64,
    /// Full derivative with respect to the probability vector.
    pub grad_probs: Vec<f64>,
    /// Derivative with respect to the logits, through the softmax Jacobian.
    pub grad_logits: Vec<f64>,
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

fn check_label(p: &[f64], label: usize) -> Result<(), LossError> {
    if label >= p.len() {
        return Err(LossError::LabelOutOfRange {
            label,
            num_classes: p.len(),
        });
    }
    Ok(())
}

/// `dL/dz_j = p_j (g_j - Σ_k g_k p_k)`
pub fn softmax_vjp(p: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(grad_probs).map(|(a, b)| a * b).sum();
    p.iter().zip(grad_probs).map(|(&pj, &gj)| pj * (gj - dot)).collect()
}

/// Builds a [`LossEval`] for losses that depend only on the observed-label probability.
fn single(p: &[f64], label: usize, value: f64, grad_p: f64) -> LossEval {
    let mut grad_probs = vec![0.0; p.len()];
    grad_probs[label] = grad_p;
    let py = p[label];
    let grad_logits = p
        .iter()
        .enumerate()
        .map(|(k, &pk)| {
            let jac = if k == label { py * (1.0 - pk) } else { -py * pk };
            grad_p * jac
        })
        .collect();
    LossEval {
        value,
        grad_p,
        grad_probs,
        grad_logits,
    }
}

fn zero_eval(k: usize) -> LossEval {
    LossEval {
        value: 0.0,
        grad_p: 0.0,
        grad_probs: vec![0.0; k],
        grad_logits: vec![0.0; k],
    }
}

pub fn ce(p: &[f64], label: usize) -> Result<LossEval, LossError> {
    check_label(p, label)?;
    let py = clamp_prob(p[label]);
    Ok(single(p, label, -py.ln(), -1.0 / py))
}

pub fn focal(p: &[f64], label: usize, gamma: f64) -> Result<LossEval, LossError> {
    check_label(p, label)?;
    if !(gamma >= 0.0) {
        return Err(LossError::Parameter(format!("focal gamma must be >= 0, got {gamma}")));
    }
    if gamma == 0.0 {
        return ce(p, label);
    }
    let py = clamp_prob(p[label]);
    let ln = py.ln();
    let w = (1.0 - py).powf(gamma);
    let grad = gamma * (1.0 - py).powf(gamma - 1.0) * ln - w / py;
    Ok(single(p, label, -w * ln, grad))
}

pub fn gce(p: &[f64], label: usize, q: f64) -> Result<LossEval, LossError> {
    check_label(p, label)?;
    if !(q > 0.0 && q <= 1.0) {
        return Err(LossError::Parameter(format!("gce q must lie in (0, 1], got {q}")));
    }
    let py = clamp_prob(p[label]);
    // expm1 keeps the small-q limit accurate.
    let value = -(q * py.ln()).exp_m1() / q;
    Ok(single(p, label, value, -py.powf(q - 1.0)))
}

pub fn blurry(p: &[f64], label: usize, gamma: f64) -> Result<LossEval, LossError> {
    check_label(p, label)?;
    if !(gamma >= 0.0) {
        return Err(LossError::Parameter(format!("blurry gamma must be >= 0, got {gamma}")));
    }
    if gamma == 0.0 {
        return ce(p, label);
    }
    let py = clamp_prob(p[label]);
    let ln = py.ln();
    let value = -py.powf(gamma) * ln;
    let grad = -py.powf(gamma - 1.0) * (gamma * ln + 1.0);
    Ok(single(p, label, value, grad))
}

/// Probability below which the blurry-loss gradient is positive.
pub fn blurry_stationary_point(gamma: f64) -> f64 {
    (-1.0 / gamma).exp()
}

pub fn piecewise_zero(p: &[f64], label: usize, cutoff: f64) -> Result<LossEval, LossError> {
    check_label(p, label)?;
    if !(0.0..=1.0).contains(&cutoff) {
        return Err(LossError::Parameter(format!(
            "piecewise-zero cutoff must lie in [0, 1], got {cutoff}"
        )));
    }
    if clamp_prob(p[label]) <= cutoff {
        return Ok(zero_eval(p.len()));
    }
    ce(p, label)
}

/// Base loss and its derivative as a function of one class probability.
fn base_loss(variant: AnlVariant, gamma: f64, p: f64) -> (f64, f64) {
    let ln = p.ln();
    match variant {
        AnlVariant::CrossEntropy => (-ln, -1.0 / p),
        AnlVariant::Focal if gamma == 0.0 => (-ln, -1.0 / p),
        AnlVariant::Focal => {
            let w = (1.0 - p).powf(gamma);
            (-w * ln, gamma * (1.0 - p).powf(gamma - 1.0) * ln - w / p)
        }
    }
}

/// Active-negative loss: `α · ℓ_y / Σ_k ℓ_k + β · (1 - (A - ℓ_y) / Σ_k (A - ℓ_k))`.
///
/// The normalized-negative term bounds each per-class loss by the ceiling
/// `A = ℓ(ANL_MIN_PROB)`, i.e. probabilities are clamped from below at
/// [`ANL_MIN_PROB`] inside that term.
pub fn anl(
    p: &[f64],
    label: usize,
    alpha: f64,
    beta: f64,
    variant: AnlVariant,
    gamma: f64,
) -> Result<LossEval, LossError> {
    check_label(p, label)?;
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(LossError::Parameter(format!(
            "anl alpha and beta must be > 0, got {alpha} and {beta}"
        )));
    }
    if !(gamma >= 0.0) {
        return Err(LossError::Parameter(format!("anl gamma must be >= 0, got {gamma}")));
    }
    let k = p.len();

    // Normalized term.
    let (norm_l, norm_d): (Vec<f64>, Vec<f64>) = p
        .iter()
        .map(|&pk| {
            let c = clamp_prob(pk);
            let (l, d) = base_loss(variant, gamma, c);
            (l, if c == pk { d } else { 0.0 })
        })
        .unzip();
    let s: f64 = norm_l.iter().sum();
    let normalized = norm_l[label] / s;

    // Normalized-negative term.
    let ceiling = base_loss(variant, gamma, ANL_MIN_PROB).0;
    let (neg_l, neg_d): (Vec<f64>, Vec<f64>) = p
        .iter()
        .map(|&pk| {
            let c = pk.clamp(ANL_MIN_PROB, 1.0 - PROB_FLOOR);
            let (l, d) = base_loss(variant, gamma, c);
            (l, if c == pk { d } else { 0.0 })
        })
        .unzip();
    let t: f64 = neg_l.iter().map(|l| ceiling - l).sum();
    let negative = 1.0 - (ceiling - neg_l[label]) / t;

    let grad_probs: Vec<f64> = (0..k)
        .map(|j| {
            let own = if j == label { 1.0 } else { 0.0 };
            let d_norm = (own * norm_d[label] * s - norm_l[label] * norm_d[j]) / (s * s);
            let d_neg = (own * neg_d[label] * t - (ceiling - neg_l[label]) * neg_d[j]) / (t * t);
            alpha * d_norm + beta * d_neg
        })
        .collect();
    let grad_logits = softmax_vjp(p, &grad_probs);
    Ok(LossEval {
        value: alpha * normalized + beta * negative,
        grad_p: grad_probs[label],
        grad_probs,
        grad_logits,
    })
}

/// Normalized loss alone: `ℓ_y / Σ_k ℓ_k`.
pub fn normalized_loss(p: &[f64], label: usize, variant: AnlVariant, gamma: f64) -> Result<f64, LossError> {
    check_label(p, label)?;
    let losses: Vec<f64> = p
        .iter()
        .map(|&pk| base_loss(variant, gamma, clamp_prob(pk)).0)
        .collect();
    Ok(losses[label] / losses.iter().sum::<f64>())
}
