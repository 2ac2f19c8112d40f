//! Full-catalog top-N evaluation with training-item masking.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::InteractionSet;
use crate::error::{MagnetError, Result};
use crate::model::{Frozen, Model};
use crate::scalar::Scalar;

pub const DEFAULT_CUTOFFS: [usize; 2] = [10, 20];

/// Tokens scored per inference call.
const SCORE_CHUNK: usize = 8192;

/// Items ordered by descending score, ties to the smaller id, with `masked`
/// (sorted ascending) removed.
pub fn rank_items<T: Scalar>(scores: &[T], masked: &[usize]) -> Vec<usize> {
    let mut items: Vec<usize> = (0..scores.len()).filter(|i| masked.binary_search(i).is_err()).collect();
    items.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    items
}

/// Recall and NDCG of one ranking at one cutoff.
pub fn user_metrics(ranking: &[usize], positives: &[usize], n: usize) -> (f64, f64) {
    if positives.is_empty() {
        return (0.0, 0.0);
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (rank, item) in ranking.iter().take(n).enumerate() {
        if positives.contains(item) {
            hits += 1;
            dcg += 1.0 / ((rank + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..n.min(positives.len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    (hits as f64 / positives.len() as f64, dcg / idcg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cutoffs: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    /// Evaluated users, in ascending order.
    pub users: Vec<usize>,
    /// `[cutoff][user]`.
    pub per_user_recall: Vec<Vec<f64>>,
    pub per_user_ndcg: Vec<Vec<f64>>,
    /// Users with held-out positives but no training history.
    pub skipped: usize,
}

impl MetricReport {
    fn position(&self, n: usize) -> usize {
        self.cutoffs.iter().position(|&c| c == n).unwrap_or_else(|| panic!("cutoff {n} was not evaluated"))
    }

    pub fn recall_at(&self, n: usize) -> f64 {
        self.recall[self.position(n)]
    }

    pub fn ndcg_at(&self, n: usize) -> f64 {
        self.ndcg[self.position(n)]
    }

    /// `user,recall@N...,ndcg@N...` rows.
    pub fn per_user_csv(&self) -> String {
        let mut out = String::from("user");
        for c in &self.cutoffs {
            out.push_str(&format!(",recall@{c}"));
        }
        for c in &self.cutoffs {
            out.push_str(&format!(",ndcg@{c}"));
        }
        out.push('\n');
        for (k, u) in self.users.iter().enumerate() {
            out.push_str(&u.to_string());
            for col in self.per_user_recall.iter().chain(&self.per_user_ndcg) {
                out.push_str(&format!(",{}", col[k]));
            }
            out.push('\n');
        }
        out
    }
}

/// Aggregates per-user rankings. `rankings[k]` belongs to `users[k]`.
pub fn compute_metrics(users: &[usize], rankings: &[Vec<usize>], positives: &[Vec<usize>], cutoffs: &[usize]) -> MetricReport {
    let mut per_recall = vec![Vec::with_capacity(users.len()); cutoffs.len()];
    let mut per_ndcg = vec![Vec::with_capacity(users.len()); cutoffs.len()];
    for (ranking, pos) in rankings.iter().zip(positives) {
        for (c, &n) in cutoffs.iter().enumerate() {
            let (r, g) = user_metrics(ranking, pos, n);
            per_recall[c].push(r);
            per_ndcg[c].push(g);
        }
    }
    let mean = |v: &Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    MetricReport {
        cutoffs: cutoffs.to_vec(),
        recall: per_recall.iter().map(mean).collect(),
        ndcg: per_ndcg.iter().map(mean).collect(),
        users: users.to_vec(),
        per_user_recall: per_recall,
        per_user_ndcg: per_ndcg,
        skipped: 0,
    }
}

/// Held-out positives grouped by user; users without training history are
/// dropped and counted.
pub fn heldout_by_user(train: &InteractionSet, heldout: &[(usize, usize)]) -> (Vec<usize>, Vec<Vec<usize>>, usize) {
    let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); train.num_users()];
    for &(u, i) in heldout {
        by_user[u].push(i);
    }
    let (mut users, mut pos, mut skipped) = (Vec::new(), Vec::new(), 0);
    for (u, mut items) in by_user.into_iter().enumerate() {
        if items.is_empty() {
            continue;
        }
        if train.history(u).is_empty() {
            skipped += 1;
            continue;
        }
        items.sort_unstable();
        items.dedup();
        users.push(u);
        pos.push(items);
    }
    (users, pos, skipped)
}

fn evaluate_with(
    train: &InteractionSet,
    heldout: &[(usize, usize)],
    cutoffs: &[usize],
    mut scores_for: impl FnMut(&[usize]) -> Result<Vec<Vec<f64>>>,
) -> Result<MetricReport> {
    let (users, positives, skipped) = heldout_by_user(train, heldout);
    if users.is_empty() {
        return Err(MagnetError::Empty("no evaluable users in the held-out split".into()));
    }
    let max_n = cutoffs.iter().copied().max().unwrap_or(0);
    let per_chunk = (SCORE_CHUNK / train.num_items().max(1)).max(1);
    let mut rankings = Vec::with_capacity(users.len());
    for chunk in users.chunks(per_chunk) {
        for (u, scores) in chunk.iter().zip(scores_for(chunk)?) {
            let mut r = rank_items(&scores, train.history(*u));
            r.truncate(max_n);
            rankings.push(r);
        }
    }
    let mut report = compute_metrics(&users, &rankings, &positives, cutoffs);
    report.skipped = skipped;
    Ok(report)
}

/// Ranks the full catalog for every held-out user with the frozen model.
pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    frozen: &Frozen<T>,
    train: &InteractionSet,
    heldout: &[(usize, usize)],
    cutoffs: &[usize],
) -> Result<MetricReport> {
    let n = train.num_items();
    let mut scorer = model.scorer(frozen);
    evaluate_with(train, heldout, cutoffs, |users| {
        let us: Vec<usize> = users.iter().flat_map(|&u| std::iter::repeat_n(u, n)).collect();
        let is: Vec<usize> = users.iter().flat_map(|_| 0..n).collect();
        let y = scorer.score(&us, &is)?.y;
        Ok(y.chunks(n).map(|c| c.iter().map(|v| v.f64()).collect()).collect())
    })
}

/// Ranks every user's unseen items by training popularity.
pub fn popularity_baseline(train: &InteractionSet, heldout: &[(usize, usize)], cutoffs: &[usize]) -> Result<MetricReport> {
    let pop: Vec<f64> = train.item_degrees().iter().map(|&d| d as f64).collect();
    evaluate_with(train, heldout, cutoffs, |users| Ok(vec![pop.clone(); users.len()]))
}
