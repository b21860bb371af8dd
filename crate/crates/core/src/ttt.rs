//! Test-time training pairs `<user, index node>` drawn from the learned tree,
//! and the fine-tune-then-evaluate driver.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::error::{HillError, Result};
use crate::metrics::{evaluate_retrieval, EvalReport};
use crate::model::{finetune_with_pairs, FinetuneConfig, FinetuneReport, TwoTowerModel};
use crate::scalar::Scalar;
use crate::tree::{BeamRetriever, FlatRetriever, HierarchicalIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TttConfig {
    /// Intermediate levels traversed upward from the items.
    pub depth: usize,
    /// Minimum interest rate per traversed level, level 2 first.
    pub thresholds: Vec<f64>,
}

impl Default for TttConfig {
    fn default() -> Self {
        Self { depth: 2, thresholds: vec![0.8, 0.4] }
    }
}

impl TttConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.depth == 0 {
            p.push("ttt depth must be >= 1".to_string());
        }
        if self.thresholds.len() != self.depth {
            p.push(format!("{} thresholds given for depth {}", self.thresholds.len(), self.depth));
        }
        for t in &self.thresholds {
            if !(0.0..=1.0).contains(t) {
                p.push(format!("threshold {t} outside [0, 1]"));
            }
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TttPair {
    pub user: u32,
    pub level: usize,
    pub node: u32,
    pub interest_rate: f64,
}

/// Pairs ordered by `(user, level, node)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TttPairSet {
    pairs: Vec<TttPair>,
}

impl TttPairSet {
    pub fn from_pairs(mut pairs: Vec<TttPair>) -> Self {
        pairs.sort_by_key(|p| (p.user, p.level, p.node));
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TttPair> {
        self.pairs.iter()
    }

    pub fn as_slice(&self) -> &[TttPair] {
        &self.pairs
    }

    /// `(user, level, node)` keys, in order.
    pub fn keys(&self) -> Vec<(u32, usize, u32)> {
        self.pairs.iter().map(|p| (p.user, p.level, p.node)).collect()
    }

    /// True when every pair of `self` also occurs in `other`.
    pub fn is_subset_of(&self, other: &TttPairSet) -> bool {
        let theirs = other.keys();
        self.keys().iter().all(|k| theirs.binary_search(k).is_ok())
    }

    /// `user_id<TAB>level<TAB>node_id<TAB>interest_rate` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", p.user, p.level, p.node, p.interest_rate);
        }
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| HillError::io(path, e))
    }
}

/// `|interesting ∩ children| / |children|`; 0 for a childless node.
/// `interesting` must be sorted.
pub fn interest_rate(interesting: &[u32], children: &[u32]) -> f64 {
    if children.is_empty() {
        debug!("interest rate of a childless node taken as 0");
        return 0.0;
    }
    let hits = children.iter().filter(|c| interesting.binary_search(c).is_ok()).count();
    hits as f64 / children.len() as f64
}

/// Interest sets for levels `2..=max_level`, starting from the sorted
/// level-1 set `seeds`. Only parents of the level below are candidates.
fn interest_chain<T: Scalar>(
    index: &HierarchicalIndex<T>,
    seeds: &[u32],
    thresholds: &[f64],
    max_level: usize,
) -> Vec<Vec<(u32, f64)>> {
    let mut current: Vec<u32> = seeds.to_vec();
    let mut out = Vec::new();
    for level in 2..=max_level {
        let Some(lvl) = index.level(level) else { break };
        let mut candidates: Vec<u32> = if level == 2 {
            current.iter().filter_map(|&j| index.item_parent.get(j as usize).copied()).collect()
        } else {
            let below = index.level(level - 1).expect("lower level exists");
            current.iter().filter_map(|&k| below.parent.get(k as usize).copied().flatten()).collect()
        };
        candidates.sort_unstable();
        candidates.dedup();
        let threshold = thresholds[level - 2];
        let chosen: Vec<(u32, f64)> = candidates
            .into_iter()
            .map(|k| (k, interest_rate(&current, &lvl.children[k as usize])))
            .filter(|&(_, rate)| rate >= threshold)
            .collect();
        current = chosen.iter().map(|&(k, _)| k).collect();
        out.push(chosen);
    }
    out
}

/// `Int(u, n)`: train positives at level 1; above, the nodes among the
/// parents of `Int(u, n−1)` whose interest rate reaches `thresholds[n−2]`.
pub fn interest_set<T: Scalar>(
    dataset: &InteractionDataset,
    index: &HierarchicalIndex<T>,
    user: u32,
    level: usize,
    thresholds: &[f64],
) -> Result<Vec<u32>> {
    if level == 0 || level > index.num_levels() {
        return Err(HillError::Domain(format!("level {level} outside 1..={}", index.num_levels())));
    }
    if level == 1 {
        return Ok(dataset.train(user).to_vec());
    }
    if thresholds.len() < level - 1 {
        return Err(HillError::config(format!("{} thresholds for level {level}", thresholds.len())));
    }
    let chain = interest_chain(index, dataset.train(user), thresholds, level);
    Ok(chain.get(level - 2).map(|c| c.iter().map(|&(k, _)| k).collect()).unwrap_or_default())
}

fn check_config<T: Scalar>(index: &HierarchicalIndex<T>, cfg: &TttConfig) -> Result<()> {
    let mut problems = cfg.validate();
    let n = index.num_levels();
    if cfg.depth + 2 > n {
        problems.push(format!("ttt depth {} exceeds N-2 = {} for a {n}-level index", cfg.depth, n.saturating_sub(2)));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(HillError::InvalidConfig(problems))
    }
}

/// Pairs for every train user at levels `2..=1+depth`, seeded by the train
/// positives.
pub fn extract_pairs<T: Scalar>(
    dataset: &InteractionDataset,
    index: &HierarchicalIndex<T>,
    cfg: &TttConfig,
) -> Result<TttPairSet> {
    extract_pairs_from(index, dataset.train_sets(), cfg)
}

/// Like [`extract_pairs`] with explicit level-1 interest sets (sorted item
/// ids per user), e.g. retrieved items instead of train positives.
pub fn extract_pairs_from<T: Scalar>(
    index: &HierarchicalIndex<T>,
    seeds: &[Vec<u32>],
    cfg: &TttConfig,
) -> Result<TttPairSet> {
    check_config(index, cfg)?;
    let per_user: Vec<Vec<TttPair>> = seeds
        .par_iter()
        .enumerate()
        .map(|(u, items)| {
            interest_chain(index, items, &cfg.thresholds, cfg.depth + 1)
                .into_iter()
                .enumerate()
                .flat_map(|(i, lvl)| {
                    lvl.into_iter().map(move |(node, rate)| TttPair {
                        user: u as u32,
                        level: i + 2,
                        node,
                        interest_rate: rate,
                    })
                })
                .collect()
        })
        .collect();
    Ok(TttPairSet::from_pairs(per_user.into_iter().flatten().collect()))
}

/// Retrieval used to score a TTT run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Flat,
    Beam(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TttReport {
    pub pairs_extracted: usize,
    pub k: usize,
    pub recall_before: f64,
    pub recall_after: f64,
    pub ndcg_before: f64,
    pub ndcg_after: f64,
    pub finetune: FinetuneReport,
}

fn evaluate<T: Scalar>(
    model: &TwoTowerModel<T>,
    dataset: &InteractionDataset,
    index: &HierarchicalIndex<T>,
    k: usize,
    mode: EvalMode,
) -> Result<EvalReport> {
    let users = model.user_embeddings();
    match mode {
        EvalMode::Flat => {
            let items = model.item_embeddings();
            evaluate_retrieval(&FlatRetriever { users: &users, items: &items }, dataset, k, false)
        }
        EvalMode::Beam(beam) => evaluate_retrieval(&BeamRetriever { users: &users, index, beam }, dataset, k, false),
    }
}

/// Extracts pairs, fine-tunes the user side of `model` on them and reports
/// metrics before and after. The index is never modified.
pub fn run_ttt<T: Scalar>(
    model: &mut TwoTowerModel<T>,
    dataset: &InteractionDataset,
    index: &HierarchicalIndex<T>,
    cfg: &TttConfig,
    finetune: &FinetuneConfig,
    k: usize,
    mode: EvalMode,
) -> Result<(TttReport, TttPairSet)> {
    let pairs = extract_pairs(dataset, index, cfg)?;
    let report = run_ttt_with_pairs(model, dataset, index, &pairs, finetune, k, mode)?;
    Ok((report, pairs))
}

/// [`run_ttt`] on an already extracted pair set.
pub fn run_ttt_with_pairs<T: Scalar>(
    model: &mut TwoTowerModel<T>,
    dataset: &InteractionDataset,
    index: &HierarchicalIndex<T>,
    pairs: &TttPairSet,
    finetune: &FinetuneConfig,
    k: usize,
    mode: EvalMode,
) -> Result<TttReport> {
    let before = evaluate(model, dataset, index, k, mode)?;
    if pairs.is_empty() {
        warn!("no test-time training pairs qualified; metrics unchanged");
    }
    let ft = finetune_with_pairs(model, pairs, index, dataset, finetune)?;
    let after = if pairs.is_empty() { before.clone() } else { evaluate(model, dataset, index, k, mode)? };
    Ok(TttReport {
        pairs_extracted: pairs.len(),
        k,
        recall_before: before.recall_at_k,
        recall_after: after.recall_at_k,
        ndcg_before: before.ndcg_at_k,
        ndcg_after: after.ndcg_at_k,
        finetune: ft,
    })
}
