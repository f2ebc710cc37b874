//! Brute-force reference implementations for tests.
//!
//! Nothing here calls into the library's loss, detection or metric code; each
//! routine is a direct re-derivation so a shared bug cannot hide.

#![allow(dead_code)]

use std::collections::HashSet;

#[derive(Debug, Clone, Copy)]
pub struct OracleTolerance {
    pub grad_rel_err: f64,
    pub metric_abs_err: f64,
}

impl Default for OracleTolerance {
    fn default() -> Self {
        Self {
            grad_rel_err: 1e-5,
            metric_abs_err: 1e-12,
        }
    }
}

/// Relative error with an absolute floor of 1 in the denominator's scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleLoss {
    Ce,
    Fl { gamma: f64 },
    Gce { q: f64 },
    Bl { gamma: f64 },
    Pz { cutoff: f64 },
    AnlCe { alpha: f64, beta: f64 },
    AnlFl { alpha: f64, beta: f64, gamma: f64 },
}

const FLOOR: f64 = 1e-12;
const ANL_FLOOR: f64 = 1e-7;

fn floor(p: f64) -> f64 {
    p.clamp(FLOOR, 1.0 - FLOOR)
}

fn fl_value(p: f64, gamma: f64) -> f64 {
    -(1.0 - p).powf(gamma) * p.ln()
}

fn anl_value(p: &[f64], y: usize, alpha: f64, beta: f64, base: impl Fn(f64) -> f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        let l = base(floor(pk));
        den += l;
        if k == y {
            num = l;
        }
    }
    let a = base(ANL_FLOOR);
    let mut neg_num = 0.0;
    let mut neg_den = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        let l = base(pk.clamp(ANL_FLOOR, 1.0 - FLOOR));
        neg_den += a - l;
        if k == y {
            neg_num = a - l;
        }
    }
    alpha * num / den + beta * (1.0 - neg_num / neg_den)
}

impl OracleLoss {
    pub fn value(&self, p: &[f64], y: usize) -> f64 {
        let py = floor(p[y]);
        match *self {
            OracleLoss::Ce => -py.ln(),
            OracleLoss::Fl { gamma } => fl_value(py, gamma),
            OracleLoss::Gce { q } => (1.0 - py.powf(q)) / q,
            OracleLoss::Bl { gamma } => -py.powf(gamma) * py.ln(),
            OracleLoss::Pz { cutoff } => {
                if py <= cutoff {
                    0.0
                } else {
                    -py.ln()
                }
            }
            OracleLoss::AnlCe { alpha, beta } => anl_value(p, y, alpha, beta, |v| -v.ln()),
            OracleLoss::AnlFl { alpha, beta, gamma } => anl_value(p, y, alpha, beta, |v| fl_value(v, gamma)),
        }
    }

    /// Value as a function of logits through an independent softmax.
    pub fn value_from_logits(&self, z: &[f64], y: usize) -> f64 {
        self.value(&naive_softmax(z), y)
    }
}

/// Central difference of the loss in `p_y`, other probabilities held fixed.
pub fn fd_gradient(loss: OracleLoss, p: &[f64], y: usize, step: f64) -> f64 {
    let mut hi = p.to_vec();
    let mut lo = p.to_vec();
    hi[y] += step;
    lo[y] -= step;
    (loss.value(&hi, y) - loss.value(&lo, y)) / (2.0 * step)
}

/// Central differences of `f` over every coordinate of `x`.
pub fn fd_vector(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let hi = f(&probe);
            probe[i] = orig - step;
            let lo = f(&probe);
            probe[i] = orig;
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

pub fn naive_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Dense MLP forward pass over flat parameters laid out per layer as a
/// row-major `out x in` weight block followed by `out` biases.
pub fn naive_mlp_logits(params: &[f64], dims: &[usize], relu: bool, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let mut offset = 0;
    for l in 0..dims.len() - 1 {
        let (n_in, n_out) = (dims[l], dims[l + 1]);
        let mut next = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let mut s = params[offset + n_in * n_out + o];
            for i in 0..n_in {
                s += params[offset + o * n_in + i] * a[i];
            }
            next.push(s);
        }
        offset += n_in * n_out + n_out;
        if l + 2 < dims.len() {
            for v in next.iter_mut() {
                *v = if relu { v.max(0.0) } else { v.tanh() };
            }
        }
        a = next;
    }
    a
}

pub fn brute_thresholds(probs: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<Option<f64>> {
    (0..k)
        .map(|j| {
            let vals: Vec<f64> = (0..labels.len())
                .filter(|&i| labels[i] == j)
                .map(|i| probs[i][j])
                .collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        })
        .collect()
}

/// Literal application of the counting rule, one sample and one class at a time.
pub fn brute_confident_joint(probs: &[Vec<f64>], labels: &[usize], thresholds: &[Option<f64>]) -> Vec<Vec<usize>> {
    let k = thresholds.len();
    let mut c = vec![vec![0usize; k]; k];
    for (i, row) in probs.iter().enumerate() {
        let confident: Vec<usize> = (0..k)
            .filter(|&j| matches!(thresholds[j], Some(t) if row[j] >= t))
            .collect();
        if confident.is_empty() {
            continue;
        }
        let top = confident.iter().map(|&j| row[j]).fold(f64::MIN, f64::max);
        let chosen = *confident.iter().find(|&&j| row[j] == top).unwrap();
        c[labels[i]][chosen] += 1;
    }
    c
}

/// Repeatedly extracts the best remaining candidate: smallest key when
/// `lowest`, else largest; equal keys go to the smaller index.
fn select(candidates: &[usize], take: usize, lowest: bool, key: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut left: Vec<usize> = candidates.to_vec();
    let mut out = Vec::new();
    while out.len() < take && !left.is_empty() {
        let mut best_pos = 0;
        for pos in 1..left.len() {
            let (a, b) = (key(left[pos]), key(left[best_pos]));
            let better = if lowest { a < b } else { a > b };
            if better || (a == b && left[pos] < left[best_pos]) {
                best_pos = pos;
            }
        }
        out.push(left.remove(best_pos));
    }
    out
}

/// `(pbc, pbnr, both)` as ascending index lists.
pub fn brute_prune(probs: &[Vec<f64>], labels: &[usize], joint: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let k = joint.len();
    let mut pbc = HashSet::new();
    let mut pbnr = HashSet::new();
    for i in 0..k {
        let members: Vec<usize> = (0..labels.len()).filter(|&s| labels[s] == i).collect();
        let off: usize = (0..k).filter(|&j| j != i).map(|j| joint[i][j]).sum();
        pbc.extend(select(&members, off, true, |s| probs[s][i]));
        for j in 0..k {
            if j != i && joint[i][j] > 0 {
                pbnr.extend(select(&members, joint[i][j], false, |s| probs[s][j] - probs[s][i]));
            }
        }
    }
    let sorted = |s: &HashSet<usize>| {
        let mut v: Vec<usize> = s.iter().copied().collect();
        v.sort();
        v
    };
    let both: HashSet<usize> = pbc.intersection(&pbnr).copied().collect();
    (sorted(&pbc), sorted(&pbnr), sorted(&both))
}

/// `(tp, fp, tn, fn)` by set membership.
pub fn brute_metrics(flags: &[usize], mask: &[bool]) -> (usize, usize, usize, usize) {
    let flagged: HashSet<usize> = flags.iter().copied().collect();
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (i, &corrupt) in mask.iter().enumerate() {
        match (flagged.contains(&i), corrupt) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    (tp, fp, tn, fn_)
}

/// `∫ |F_a(x) - F_b(x)| dx` over the merged support (CDF form).
pub fn naive_wasserstein(a: &[f64], b: &[f64]) -> f64 {
    let mut pts: Vec<f64> = a.iter().chain(b).copied().collect();
    pts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let cdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
    pts.windows(2)
        .map(|w| (cdf(a, w[0]) - cdf(b, w[0])).abs() * (w[1] - w[0]))
        .sum()
}
