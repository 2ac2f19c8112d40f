//! Objective terms: pairwise ranking, cross-view alignment, the two routing
//! regularizers, and their weighted composition.
//!
//! Each term has a plain reference form over slices and a tape form used in
//! training. Tests check one against the other.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autograd::{entropy, logsumexp, softplus, Tape, Var};
use crate::scalar::Scalar;

/// Normalization floor for cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

pub fn bpr_loss(pos: &[f64], neg: &[f64]) -> f64 {
    assert_eq!(pos.len(), neg.len(), "bpr needs aligned score lists");
    pos.iter().zip(neg).map(|(&p, &n)| softplus(n - p)).sum()
}

fn normalized(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

/// One-directional InfoNCE averaged over rows: row `k` of `a` must pick row
/// `k` of `b` among all rows of `b`.
pub fn info_nce(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let (a, b) = (normalized(a), normalized(b));
    let n = a.len();
    let mut total = 0.0;
    for (k, x) in a.iter().enumerate() {
        let logits: Vec<f64> = b.iter().map(|y| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / tau).collect();
        total += logsumexp(&logits) - logits[k];
    }
    total / n as f64
}

/// Symmetric user-and-item alignment of the two views over deduplicated
/// batch users and items. Zero when there is nothing to contrast against.
pub fn view_contrastive_loss(
    users_a: &[Vec<f64>],
    users_b: &[Vec<f64>],
    items_a: &[Vec<f64>],
    items_b: &[Vec<f64>],
    tau: f64,
) -> f64 {
    if users_a.len() <= 1 && items_a.len() <= 1 {
        warn!("contrastive batch has a single user and item; term set to zero");
        return 0.0;
    }
    let ab = info_nce(users_a, users_b, tau) + info_nce(items_a, items_b, tau);
    let ba = info_nce(users_b, users_a, tau) + info_nce(items_b, items_a, tau);
    0.5 * (ab + ba)
}

pub fn coverage_loss(mean: &[f64]) -> f64 {
    let u = 1.0 / mean.len() as f64;
    mean.iter().map(|&p| (p - u) * (p - u)).sum()
}

pub fn confidence_loss<'a>(routings: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for pi in routings {
        sum += entropy(pi);
        n += 1;
    }
    assert!(n > 0, "confidence loss over an empty batch");
    sum / n as f64
}

/// Coefficients of the weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ctr: f64,
    pub cov: f64,
    pub conf: f64,
    pub l2: f64,
}

/// Raw (unweighted) terms plus the weights that combine them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bpr: f64,
    pub ctr: f64,
    pub cov: f64,
    pub conf: f64,
    pub l2: f64,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(bpr: f64, ctr: f64, cov: f64, conf: f64, l2: f64, weights: LossWeights) -> Self {
        let total = bpr + weights.ctr * ctr + weights.cov * cov + weights.conf * conf + weights.l2 * l2;
        Self {
            bpr,
            ctr,
            cov,
            conf,
            l2,
            weights,
            total,
        }
    }
}

pub fn bpr_on_tape<T: Scalar>(tape: &mut Tape<T>, pos: Var, neg: Var, mean: bool) -> Var {
    let diff = tape.sub(neg, pos);
    let sp = tape.softplus(diff);
    let s = tape.sum_all(sp);
    if mean {
        let n = tape.value(pos).rows().max(1);
        tape.scale(s, T::one() / T::from_usize(n).unwrap())
    } else {
        s
    }
}

fn info_nce_on_tape<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, tau: T) -> Var {
    let sim = tape.matmul_t(a, b);
    let logits = tape.scale(sim, T::one() / tau);
    let lse = tape.logsumexp_rows(logits);
    let pos = tape.diag(logits);
    let per = tape.sub(lse, pos);
    let s = tape.sum_all(per);
    let n = tape.value(a).rows();
    tape.scale(s, T::one() / T::from_usize(n).unwrap())
}

/// Tape form of [`view_contrastive_loss`]. Inputs are raw (unnormalized) rows
/// of the two views for the deduplicated batch users and items. Returns
/// `None` when the batch has a single user and a single item.
pub fn contrastive_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    users_a: Var,
    users_b: Var,
    items_a: Var,
    items_b: Var,
    tau: T,
) -> Option<Var> {
    if tape.value(users_a).rows() <= 1 && tape.value(items_a).rows() <= 1 {
        warn!("contrastive batch has a single user and item; term set to zero");
        return None;
    }
    let eps = T::of(COSINE_EPS);
    let [ua, ub, ia, ib] = [users_a, users_b, items_a, items_b].map(|v| tape.row_normalize(v, eps));
    let terms = [
        info_nce_on_tape(tape, ua, ub, tau),
        info_nce_on_tape(tape, ia, ib, tau),
        info_nce_on_tape(tape, ub, ua, tau),
        info_nce_on_tape(tape, ib, ia, tau),
    ];
    let s = terms[1..].iter().fold(terms[0], |acc, &t| tape.add(acc, t));
    Some(tape.scale(s, T::of(0.5)))
}

/// `Σ_e (π̄_e − 1/E)²` with `π̄` the row mean of `pi`.
pub fn coverage_on_tape<T: Scalar>(tape: &mut Tape<T>, pi: Var) -> Var {
    let e = tape.value(pi).cols();
    let mean = tape.col_mean(pi);
    let centered = tape.add_scalar(mean, -T::one() / T::from_usize(e).unwrap());
    tape.sum_squares(centered)
}

pub fn confidence_on_tape<T: Scalar>(tape: &mut Tape<T>, pi: Var) -> Var {
    let h = tape.entropy_rows(pi);
    let n = tape.value(pi).rows();
    let s = tape.sum_all(h);
    tape.scale(s, T::one() / T::from_usize(n).unwrap())
}
