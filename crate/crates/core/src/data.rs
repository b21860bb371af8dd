//! User-item interaction data: ingestion, train/test splits, negative
//! sampling and mini-batch iteration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{HillError, Result};
use crate::rng::{self, tags, Rng};

/// On-disk layout of an interaction file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionFormat {
    /// One line per user: `user_id item_id item_id ...`
    Adjacency,
    /// One `user_id<TAB>item_id` pair per line.
    PairTsv,
}

impl FromStr for InteractionFormat {
    type Err = HillError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adjacency" => Ok(Self::Adjacency),
            "pair_tsv" | "tsv" => Ok(Self::PairTsv),
            other => Err(HillError::config(format!("unknown interaction format {other:?}"))),
        }
    }
}

/// Per-user positive item sets, split into train and test.
///
/// Item lists are sorted and duplicate free; user and item ids are dense
/// and 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    num_users: usize,
    num_items: usize,
    train: Vec<Vec<u32>>,
    test: Vec<Vec<u32>>,
}

/// One supervised example. `label` is 0 or 1 and `task` indexes the task
/// weight vector of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrainingExample {
    pub user: u32,
    pub item: u32,
    pub label: u8,
    pub task: u16,
}

impl TrainingExample {
    pub fn positive(user: u32, item: u32) -> Self {
        Self { user, item, label: 1, task: 0 }
    }

    pub fn negative(user: u32, item: u32) -> Self {
        Self { user, item, label: 0, task: 0 }
    }
}

impl InteractionDataset {
    /// Builds a dataset from per-user item lists, normalizing each list and
    /// checking every invariant.
    pub fn new(num_users: usize, num_items: usize, mut train: Vec<Vec<u32>>, mut test: Vec<Vec<u32>>) -> Result<Self> {
        if train.len() > num_users || test.len() > num_users {
            return Err(HillError::InvalidConfig(vec![format!("more user rows than num_users={num_users}")]));
        }
        train.resize(num_users, Vec::new());
        test.resize(num_users, Vec::new());
        let mut problems = Vec::new();
        for (u, (tr, te)) in train.iter_mut().zip(test.iter_mut()).enumerate() {
            tr.sort_unstable();
            tr.dedup();
            te.sort_unstable();
            te.dedup();
            if let Some(&max) = tr.last().into_iter().chain(te.last()).max() {
                if max as usize >= num_items {
                    problems.push(format!("user {u}: item {max} >= num_items={num_items}"));
                }
            }
            if !te.is_empty() && tr.is_empty() {
                problems.push(format!("user {u}: test items but empty train set"));
            }
            if te.iter().any(|i| tr.binary_search(i).is_ok()) {
                problems.push(format!("user {u}: train and test overlap"));
            }
        }
        if !problems.is_empty() {
            return Err(HillError::InvalidConfig(problems));
        }
        Ok(Self { num_users, num_items, train, test })
    }

    pub fn empty() -> Self {
        Self { num_users: 0, num_items: 0, train: Vec::new(), test: Vec::new() }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Sorted train positives of `user`; empty for unknown users.
    pub fn train(&self, user: u32) -> &[u32] {
        self.train.get(user as usize).map_or(&[], Vec::as_slice)
    }

    pub fn test(&self, user: u32) -> &[u32] {
        self.test.get(user as usize).map_or(&[], Vec::as_slice)
    }

    pub fn is_train_positive(&self, user: u32, item: u32) -> bool {
        self.train(user).binary_search(&item).is_ok()
    }

    pub fn num_train_interactions(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }

    pub fn num_test_interactions(&self) -> usize {
        self.test.iter().map(Vec::len).sum()
    }

    pub fn num_interactions(&self) -> usize {
        self.num_train_interactions() + self.num_test_interactions()
    }

    /// Users with a non-empty test set, ascending.
    pub fn test_users(&self) -> Vec<u32> {
        (0..self.num_users as u32).filter(|&u| !self.test(u).is_empty()).collect()
    }

    /// Users with a non-empty train set, ascending.
    pub fn train_users(&self) -> Vec<u32> {
        (0..self.num_users as u32).filter(|&u| !self.train(u).is_empty()).collect()
    }

    /// A copy whose test sets are the given ones (train untouched).
    pub fn with_test(&self, test: Vec<Vec<u32>>) -> Result<Self> {
        Self::new(self.num_users, self.num_items, self.train.clone(), test)
    }

    /// Up to `n` distinct users with test items, drawn uniformly and
    /// returned ascending.
    pub fn sample_test_users(&self, n: usize, seed: u64) -> Vec<u32> {
        let mut users = self.test_users();
        users.shuffle(&mut rng::stream(seed, tags::EVAL_SAMPLE));
        users.truncate(n);
        users.sort_unstable();
        users
    }

    /// `n` uniform draws from the items outside `train[user]`.
    ///
    /// Test positives are not excluded. Deterministic in `seed`.
    pub fn sample_negatives(&self, user: u32, count: usize, seed: u64) -> Result<Vec<u32>> {
        if user as usize >= self.num_users {
            return Err(HillError::IndexOutOfRange { kind: "user", id: user as usize, len: self.num_users });
        }
        let mut rng = rng::stream(seed, u64::from(user));
        let sampler = NegativeSampler::new(self, user)?;
        Ok((0..count).map(|_| sampler.draw(&mut rng)).collect())
    }

    /// Batches of epoch 0. Equivalent to `epoch_batches(.., 0)`.
    pub fn batch_iterator(
        &self,
        batch_size: usize,
        negatives_per_positive: usize,
        seed: u64,
    ) -> Result<EpochBatches<'_>> {
        self.epoch_batches(batch_size, negatives_per_positive, seed, 0)
    }

    /// Every train positive exactly once, in an order shuffled by
    /// `(seed, epoch)`. Each positive is followed by
    /// `negatives_per_positive` label-0 examples for the same user;
    /// `batch_size` counts positives only.
    pub fn epoch_batches(
        &self,
        batch_size: usize,
        negatives_per_positive: usize,
        seed: u64,
        epoch: u64,
    ) -> Result<EpochBatches<'_>> {
        if batch_size == 0 {
            return Err(HillError::config("batch_size must be >= 1"));
        }
        let mut rng = rng::stream(rng::derive_seed(seed, epoch), tags::TRAIN_EPOCH);
        let mut positives: Vec<(u32, u32)> =
            self.train.iter().enumerate().flat_map(|(u, items)| items.iter().map(move |&i| (u as u32, i))).collect();
        positives.shuffle(&mut rng);
        Ok(EpochBatches { dataset: self, positives, cursor: 0, batch_size, negatives_per_positive, rng })
    }
}

/// Uniform sampler over the complement of one user's train set.
pub(crate) struct NegativeSampler<'a> {
    positives: &'a [u32],
    num_items: usize,
    /// Explicit complement when positives cover most of the corpus.
    complement: Option<Vec<u32>>,
}

impl<'a> NegativeSampler<'a> {
    pub(crate) fn new(dataset: &'a InteractionDataset, user: u32) -> Result<Self> {
        let positives = dataset.train(user);
        let num_items = dataset.num_items;
        if positives.len() >= num_items {
            return Err(HillError::NoNegatives { user });
        }
        let complement = (positives.len() * 2 > num_items)
            .then(|| (0..num_items as u32).filter(|i| positives.binary_search(i).is_err()).collect());
        Ok(Self { positives, num_items, complement })
    }

    pub(crate) fn draw(&self, rng: &mut Rng) -> u32 {
        if let Some(c) = &self.complement {
            return c[rng.random_range(0..c.len())];
        }
        loop {
            let i = rng.random_range(0..self.num_items as u32);
            if self.positives.binary_search(&i).is_err() {
                return i;
            }
        }
    }
}

/// Iterator over one epoch of training batches.
pub struct EpochBatches<'a> {
    dataset: &'a InteractionDataset,
    positives: Vec<(u32, u32)>,
    cursor: usize,
    batch_size: usize,
    negatives_per_positive: usize,
    rng: Rng,
}

impl EpochBatches<'_> {
    pub fn num_batches(&self) -> usize {
        self.positives.len().div_ceil(self.batch_size)
    }
}

impl Iterator for EpochBatches<'_> {
    type Item = Vec<TrainingExample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.positives.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.positives.len());
        let mut batch = Vec::with_capacity((end - self.cursor) * (1 + self.negatives_per_positive));
        for &(user, item) in &self.positives[self.cursor..end] {
            batch.push(TrainingExample::positive(user, item));
            if self.negatives_per_positive > 0 {
                // a user with a full-corpus train set contributes positives only
                if let Ok(sampler) = NegativeSampler::new(self.dataset, user) {
                    for _ in 0..self.negatives_per_positive {
                        batch.push(TrainingExample::negative(user, sampler.draw(&mut self.rng)));
                    }
                }
            }
        }
        self.cursor = end;
        Some(batch)
    }
}

/// Result of loading interaction files, including any id remapping.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: InteractionDataset,
    /// `user_remap[dense] = original` when user ids were densified.
    pub user_remap: Option<Vec<u64>>,
    pub item_remap: Option<Vec<u64>>,
    pub duplicates_removed: usize,
}

type RawRows = Vec<(u64, Vec<u64>)>;

fn parse_id(tok: &str, path: &Path, line: usize) -> Result<u64> {
    tok.parse::<u64>().map_err(|_| HillError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("invalid id {tok:?}"),
    })
}

fn read_raw(path: &Path, format: InteractionFormat) -> Result<RawRows> {
    let file = fs::File::open(path).map_err(|e| HillError::io(path, e))?;
    let mut rows = RawRows::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| HillError::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match format {
            InteractionFormat::Adjacency => {
                let mut toks = line.split_ascii_whitespace();
                let user = parse_id(toks.next().unwrap_or_default(), path, lineno)?;
                let items = toks.map(|t| parse_id(t, path, lineno)).collect::<Result<Vec<_>>>()?;
                rows.push((user, items));
            }
            InteractionFormat::PairTsv => {
                let mut toks = line.split('\t');
                let (Some(u), Some(i), None) = (toks.next(), toks.next(), toks.next()) else {
                    return Err(HillError::Parse {
                        path: path.to_path_buf(),
                        line: lineno,
                        message: "expected `user_id<TAB>item_id`".into(),
                    });
                };
                rows.push((parse_id(u.trim(), path, lineno)?, vec![parse_id(i.trim(), path, lineno)?]));
            }
        }
    }
    Ok(rows)
}

/// Dense id map for a set of raw ids. Ids are kept verbatim when they fit
/// in `u32` and at least half of `0..=max` is in use; otherwise they are
/// renumbered in ascending order.
fn build_id_map(ids: impl Iterator<Item = u64>) -> (usize, Option<BTreeMap<u64, u32>>) {
    let distinct: std::collections::BTreeSet<u64> = ids.collect();
    let Some(&max) = distinct.iter().next_back() else {
        return (0, None);
    };
    if max < u64::from(u32::MAX) && max < 2 * distinct.len() as u64 {
        return ((max + 1) as usize, None);
    }
    let map: BTreeMap<u64, u32> = distinct.iter().enumerate().map(|(d, &o)| (o, d as u32)).collect();
    (map.len(), Some(map))
}

fn remap(id: u64, map: &Option<BTreeMap<u64, u32>>) -> u32 {
    match map {
        Some(m) => m[&id],
        None => id as u32,
    }
}

fn write_remap(path: &Path, map: &BTreeMap<u64, u32>) -> Result<()> {
    let mut out = String::new();
    for (orig, dense) in map {
        let _ = writeln!(out, "{orig}\t{dense}");
    }
    fs::write(path, out).map_err(|e| HillError::io(path, e))
}

fn remap_path(path: &Path, what: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".{what}.remap.tsv"));
    path.with_file_name(name)
}

/// Loads a single interaction file as the train split.
pub fn load_interactions(path: impl AsRef<Path>, format: InteractionFormat) -> Result<LoadedDataset> {
    load_split(path, None::<&Path>, format)
}

/// Loads a train file and an optional test file sharing one id space.
///
/// Duplicate pairs are dropped (count logged). Test pairs that also occur
/// in train, and test sets of users without train items, are dropped with a
/// warning. When ids are remapped, `<file>.users.remap.tsv` and
/// `<file>.items.remap.tsv` are written next to the train file.
pub fn load_split(
    train_path: impl AsRef<Path>,
    test_path: Option<impl AsRef<Path>>,
    format: InteractionFormat,
) -> Result<LoadedDataset> {
    let train_path = train_path.as_ref();
    let train_raw = read_raw(train_path, format)?;
    let test_raw = match &test_path {
        Some(p) => read_raw(p.as_ref(), format)?,
        None => RawRows::new(),
    };
    let all_rows = || train_raw.iter().chain(test_raw.iter());
    let (num_users, user_map) = build_id_map(all_rows().map(|(u, _)| *u));
    let (num_items, item_map) = build_id_map(all_rows().flat_map(|(_, items)| items.iter().copied()));

    let mut duplicates = 0usize;
    let mut collect = |rows: &RawRows| {
        let mut sets = vec![Vec::new(); num_users];
        for (u, items) in rows {
            let list: &mut Vec<u32> = &mut sets[remap(*u, &user_map) as usize];
            list.extend(items.iter().map(|&i| remap(i, &item_map)));
        }
        for list in &mut sets {
            let before = list.len();
            list.sort_unstable();
            list.dedup();
            duplicates += before - list.len();
        }
        sets
    };
    let train = collect(&train_raw);
    let mut test = collect(&test_raw);

    let mut overlap = 0usize;
    let mut orphaned = 0usize;
    for (tr, te) in train.iter().zip(test.iter_mut()) {
        if tr.is_empty() && !te.is_empty() {
            orphaned += te.len();
            te.clear();
        }
        let before = te.len();
        te.retain(|i| tr.binary_search(i).is_err());
        overlap += before - te.len();
    }
    if duplicates > 0 {
        info!("{}: dropped {duplicates} duplicate interactions", train_path.display());
    }
    if overlap > 0 {
        warn!("{}: dropped {overlap} test interactions also present in train", train_path.display());
    }
    if orphaned > 0 {
        warn!("{}: dropped {orphaned} test interactions of users without train items", train_path.display());
    }

    if let Some(m) = &user_map {
        write_remap(&remap_path(train_path, "users"), m)?;
    }
    if let Some(m) = &item_map {
        write_remap(&remap_path(train_path, "items"), m)?;
    }
    let to_vec = |m: Option<BTreeMap<u64, u32>>| m.map(|m| m.into_keys().collect::<Vec<u64>>());
    Ok(LoadedDataset {
        dataset: InteractionDataset::new(num_users, num_items, train, test)?,
        user_remap: to_vec(user_map),
        item_remap: to_vec(item_map),
        duplicates_removed: duplicates,
    })
}

/// Writes per-user item lists in adjacency format, one line per user
/// (users without items get a bare id line).
pub fn write_adjacency(path: impl AsRef<Path>, sets: &[Vec<u32>]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| HillError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| HillError::io(path, e);
    for (u, items) in sets.iter().enumerate() {
        write!(w, "{u}").map_err(io)?;
        for i in items {
            write!(w, " {i}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_pair_tsv(path: impl AsRef<Path>, sets: &[Vec<u32>]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| HillError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (u, items) in sets.iter().enumerate() {
        for i in items {
            writeln!(w, "{u}\t{i}").map_err(|e| HillError::io(path, e))?;
        }
    }
    w.flush().map_err(|e| HillError::io(path, e))
}

impl InteractionDataset {
    pub fn train_sets(&self) -> &[Vec<u32>] {
        &self.train
    }

    pub fn test_sets(&self) -> &[Vec<u32>] {
        &self.test
    }
}
