//! Retrieval quality metrics: Recall@K, NDCG@K and normalized entropy.

use std::collections::HashSet;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::error::{HillError, Result};

/// `|relevant ∩ top-k(recommended)| / |relevant|`, or `None` when there is
/// nothing relevant.
pub fn recall_at_k(relevant: &[u32], recommended: &[u32], k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let rel: HashSet<u32> = relevant.iter().copied().collect();
    let mut seen = HashSet::new();
    let hits = recommended.iter().take(k).filter(|i| rel.contains(i) && seen.insert(**i)).count();
    Some(hits as f64 / rel.len() as f64)
}

/// Binary-gain NDCG@K with 1-based positions and ideal DCG over
/// `min(k, |relevant|)` positions.
pub fn ndcg_at_k(relevant: &[u32], recommended: &[u32], k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let rel: HashSet<u32> = relevant.iter().copied().collect();
    let mut seen = HashSet::new();
    let dcg: f64 = recommended
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| rel.contains(i) && seen.insert(**i))
        .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(rel.len())).map(|pos| 1.0 / ((pos + 2) as f64).log2()).sum();
    if idcg == 0.0 {
        return Some(0.0);
    }
    Some(dcg / idcg)
}

/// Normalized entropy for labels in {-1, +1}: mean log loss divided by the
/// entropy of the empirical positive rate. Natural logarithms.
pub fn normalized_entropy(labels: &[i8], probabilities: &[f64]) -> Result<f64> {
    if labels.len() != probabilities.len() {
        return Err(HillError::DimensionMismatch { expected: labels.len(), actual: probabilities.len() });
    }
    if labels.iter().any(|&y| y != 1 && y != -1) {
        return Err(HillError::Domain("labels must be -1 or +1".into()));
    }
    if let Some(p) = probabilities.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(HillError::Domain(format!("probability {p} outside (0, 1)")));
    }
    let n = labels.len() as f64;
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(HillError::Domain("undefined NE: labels are all identical".into()));
    }
    let log_loss = -labels
        .iter()
        .zip(probabilities)
        .map(|(&y, &p)| {
            let y = f64::from(y);
            (1.0 + y) / 2.0 * p.ln() + (1.0 - y) / 2.0 * (1.0 - p).ln()
        })
        .sum::<f64>()
        / n;
    let ctr = positives as f64 / n;
    let background = -(ctr * ctr.ln() + (1.0 - ctr) * (1.0 - ctr).ln());
    Ok(log_loss / background)
}

/// Top-k retrieval for one user, with candidate exclusion.
pub trait Retriever: Sync {
    /// Best `k` items for `user`, skipping every id in `exclude` (sorted).
    fn retrieve(&self, user: u32, k: usize, exclude: &[u32]) -> Retrieval;
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Retrieval {
    pub items: Vec<u32>,
    /// Dot products performed to produce the list.
    pub scoring_calls: u64,
}

impl<F> Retriever for F
where
    F: Fn(u32, usize, &[u32]) -> Retrieval + Sync,
{
    fn retrieve(&self, user: u32, k: usize, exclude: &[u32]) -> Retrieval {
        self(user, k, exclude)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEval {
    pub user: u32,
    pub recall: f64,
    pub ndcg: f64,
    pub scoring_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
    pub users_evaluated: usize,
    pub mean_scoring_calls: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ne: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_user: Option<Vec<UserEval>>,
}

impl EvalReport {
    /// Per-user rows as CSV (`user,recall,ndcg,scoring_calls`).
    pub fn per_user_csv(&self) -> String {
        let mut out = String::from("user,recall,ndcg,scoring_calls\n");
        for u in self.per_user.iter().flatten() {
            out.push_str(&format!("{},{},{},{}\n", u.user, u.recall, u.ndcg, u.scoring_calls));
        }
        out
    }
}

/// Evaluates every user with a non-empty test set.
pub fn evaluate_retrieval<R: Retriever>(
    retriever: &R,
    dataset: &InteractionDataset,
    k: usize,
    keep_per_user: bool,
) -> Result<EvalReport> {
    let users = dataset.test_users();
    evaluate_users(retriever, dataset, &users, k, keep_per_user)
}

/// Evaluates the given users. Train positives are excluded from the
/// candidates; users with empty test sets are skipped. Per-user work runs in
/// parallel and is reduced in user order.
pub fn evaluate_users<R: Retriever>(
    retriever: &R,
    dataset: &InteractionDataset,
    users: &[u32],
    k: usize,
    keep_per_user: bool,
) -> Result<EvalReport> {
    let rows: Vec<UserEval> = users
        .par_iter()
        .filter_map(|&user| {
            let relevant = dataset.test(user);
            if relevant.is_empty() {
                debug!("user {user}: empty test set, skipped");
                return None;
            }
            let r = retriever.retrieve(user, k, dataset.train(user));
            Some(UserEval {
                user,
                recall: recall_at_k(relevant, &r.items, k)?,
                ndcg: ndcg_at_k(relevant, &r.items, k)?,
                scoring_calls: r.scoring_calls,
            })
        })
        .collect();
    if rows.is_empty() {
        return Err(HillError::Empty("no users with test interactions to evaluate".into()));
    }
    let n = rows.len() as f64;
    let (mut recall, mut ndcg, mut calls) = (0.0, 0.0, 0.0);
    for r in &rows {
        recall += r.recall;
        ndcg += r.ndcg;
        calls += r.scoring_calls as f64;
    }
    Ok(EvalReport {
        k,
        recall_at_k: recall / n,
        ndcg_at_k: ndcg / n,
        users_evaluated: rows.len(),
        mean_scoring_calls: calls / n,
        ne: None,
        per_user: keep_per_user.then_some(rows),
    })
}
