//! First-order optimizers and the training / fine-tuning loops.

use std::collections::HashMap;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Gradients, ItemSide, Mlp, NodeEmbeddings, TwoTowerModel, WeightedExample};
use crate::data::{InteractionDataset, NegativeSampler, TrainingExample};
use crate::error::{HillError, Result};
use crate::linalg::Matrix;
use crate::rng::{self, tags};
use crate::scalar::Scalar;
use crate::ttt::TttPairSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam with per-row step counts for embedding tables (lazy updates of
    /// the rows present in a batch).
    Adam,
    /// Plain gradient descent.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 penalty coefficient added to the gradient of every updated parameter.
    pub l2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, l2: 0.0 }
    }
}

/// Which parameter groups an optimizer may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub user_side: bool,
    pub item_side: bool,
}

impl Trainable {
    pub const ALL: Self = Self { user_side: true, item_side: true };
    pub const USER_ONLY: Self = Self { user_side: true, item_side: false };
    pub const NONE: Self = Self { user_side: false, item_side: false };
}

#[derive(Debug, Clone)]
struct TableState<T> {
    m: Matrix<T>,
    v: Matrix<T>,
    steps: Vec<u32>,
}

impl<T: Scalar> TableState<T> {
    fn new(rows: usize, cols: usize, adam: bool) -> Self {
        if adam {
            Self { m: Matrix::zeros(rows, cols), v: Matrix::zeros(rows, cols), steps: vec![0; rows] }
        } else {
            Self { m: Matrix::zeros(0, cols), v: Matrix::zeros(0, cols), steps: Vec::new() }
        }
    }
}

/// Optimizer state bound to one model shape.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: OptimizerConfig,
    pub trainable: Trainable,
    users: TableState<T>,
    items: TableState<T>,
    user_mlp: Option<(Mlp<T>, Mlp<T>)>,
    item_mlp: Option<(Mlp<T>, Mlp<T>)>,
    dense_steps: u64,
}

struct AdamCoefs<T> {
    lr: T,
    b1: T,
    b2: T,
    eps: T,
    l2: T,
}

impl<T: Scalar> AdamCoefs<T> {
    #[inline]
    fn update(&self, t: i32, p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]) {
        let c1 = T::one() - self.b1.powi(t);
        let c2 = T::one() - self.b2.powi(t);
        for k in 0..p.len() {
            let gk = g[k] + self.l2 * p[k];
            m[k] = self.b1 * m[k] + (T::one() - self.b1) * gk;
            v[k] = self.b2 * v[k] + (T::one() - self.b2) * gk * gk;
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            p[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Adam over one dense parameter block with a shared step count.
#[derive(Debug, Clone)]
pub(crate) struct DenseAdam<T> {
    config: OptimizerConfig,
    m: Vec<T>,
    v: Vec<T>,
    steps: i32,
}

impl<T: Scalar> DenseAdam<T> {
    pub(crate) fn new(len: usize, config: OptimizerConfig) -> Self {
        Self { config, m: vec![T::zero(); len], v: vec![T::zero(); len], steps: 0 }
    }

    pub(crate) fn step(&mut self, params: &mut [T], grads: &[T]) {
        let c = &self.config;
        if c.kind == OptimizerKind::Sgd {
            sgd_update(T::lit(c.learning_rate), T::lit(c.l2), params, grads);
            return;
        }
        self.steps = self.steps.saturating_add(1);
        let coefs = AdamCoefs {
            lr: T::lit(c.learning_rate),
            b1: T::lit(c.beta1),
            b2: T::lit(c.beta2),
            eps: T::lit(c.epsilon),
            l2: T::lit(c.l2),
        };
        coefs.update(self.steps, params, grads, &mut self.m, &mut self.v);
    }
}

#[inline]
fn sgd_update<T: Scalar>(lr: T, l2: T, p: &mut [T], g: &[T]) {
    for (pk, &gk) in p.iter_mut().zip(g) {
        *pk -= lr * (gk + l2 * *pk);
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: &TwoTowerModel<T>, config: OptimizerConfig, trainable: Trainable) -> Self {
        let adam = config.kind == OptimizerKind::Adam;
        let d = model.dim();
        let moments = |m: &Mlp<T>| (m.zeros_like(), m.zeros_like());
        Self {
            users: TableState::new(if trainable.user_side { model.num_users() } else { 0 }, d, adam),
            items: TableState::new(if trainable.item_side { model.num_items() } else { 0 }, d, adam),
            user_mlp: model.user_mlp.as_ref().filter(|_| adam && trainable.user_side).map(moments),
            item_mlp: model.item_mlp.as_ref().filter(|_| adam && trainable.item_side).map(moments),
            config,
            trainable,
            dense_steps: 0,
        }
    }

    /// Applies one optimizer step for the trainable groups of `grads`.
    pub fn apply(&mut self, model: &mut TwoTowerModel<T>, grads: &Gradients<T>) {
        let c = &self.config;
        let coefs = AdamCoefs {
            lr: T::lit(c.learning_rate),
            b1: T::lit(c.beta1),
            b2: T::lit(c.beta2),
            eps: T::lit(c.epsilon),
            l2: T::lit(c.l2),
        };
        self.dense_steps += 1;
        let dense_t = self.dense_steps.min(i32::MAX as u64) as i32;
        let adam = c.kind == OptimizerKind::Adam;

        if self.trainable.user_side {
            apply_table(&coefs, adam, &mut model.user_table, &mut self.users, &grads.user_rows);
            if let (Some(p), Some(g)) = (model.user_mlp.as_mut(), grads.user_mlp.as_ref()) {
                apply_mlp(&coefs, dense_t, p, g, self.user_mlp.as_mut());
            }
        }
        if self.trainable.item_side {
            apply_table(&coefs, adam, &mut model.item_table, &mut self.items, &grads.item_rows);
            if let (Some(p), Some(g)) = (model.item_mlp.as_mut(), grads.item_mlp.as_ref()) {
                apply_mlp(&coefs, dense_t, p, g, self.item_mlp.as_mut());
            }
        }
    }

    /// Computes the objective on `examples` and applies one step. Returns the
    /// pre-step loss; a non-finite loss aborts without touching the model.
    pub fn step(
        &mut self,
        model: &mut TwoTowerModel<T>,
        examples: &[WeightedExample<'_, T>],
        normalizer: T,
        unsup_weight: T,
    ) -> Result<T> {
        let (loss, grads) = model.loss_and_gradients(examples, normalizer, unsup_weight)?;
        if !loss.is_finite() {
            return Err(HillError::Divergence(format!("non-finite loss {loss} after {} steps", self.dense_steps)));
        }
        self.apply(model, &grads);
        Ok(loss)
    }
}

fn apply_table<T: Scalar>(
    coefs: &AdamCoefs<T>,
    adam: bool,
    table: &mut Matrix<T>,
    state: &mut TableState<T>,
    rows: &std::collections::BTreeMap<u32, Vec<T>>,
) {
    for (&r, g) in rows {
        let r = r as usize;
        if adam {
            state.steps[r] = state.steps[r].saturating_add(1);
            let t = state.steps[r].min(i32::MAX as u32) as i32;
            coefs.update(t, table.row_mut(r), g, state.m.row_mut(r), state.v.row_mut(r));
        } else {
            sgd_update(coefs.lr, coefs.l2, table.row_mut(r), g);
        }
    }
}

fn apply_mlp<T: Scalar>(
    coefs: &AdamCoefs<T>,
    t: i32,
    p: &mut Mlp<T>,
    g: &Mlp<T>,
    state: Option<&mut (Mlp<T>, Mlp<T>)>,
) {
    let grads = g.params();
    match state {
        Some((m, v)) => {
            for (((pp, gg), mm), vv) in p.params_mut().into_iter().zip(grads).zip(m.params_mut()).zip(v.params_mut()) {
                coefs.update(t, pp, gg, mm, vv);
            }
        }
        None => {
            for (pp, gg) in p.params_mut().into_iter().zip(grads) {
                sgd_update(coefs.lr, coefs.l2, pp, gg);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Positives per mini-batch.
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    pub optimizer: OptimizerConfig,
    /// Weight of the distillation term; only used with teacher labels.
    pub unsup_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 1024,
            negatives_per_positive: 1,
            optimizer: OptimizerConfig::default(),
            unsup_weight: 0.0,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Mean objective per epoch, weighted by batch size.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Teacher soft labels keyed by `(user, item)`.
pub type SoftLabels<T> = HashMap<(u32, u32), T>;

/// Trains all parameters on mini-batches of train positives and sampled
/// negatives, minimizing the task-weighted cross-entropy.
pub fn train<T: Scalar>(
    model: &mut TwoTowerModel<T>,
    dataset: &InteractionDataset,
    config: &TrainConfig,
) -> Result<TrainingReport> {
    train_with(model, dataset, config, None, |_, _| {})
}

/// Like [`train`], adding the distillation term against teacher soft labels
/// for the `(user, item)` pairs present in `teacher`.
pub fn train_with_teacher<T: Scalar>(
    model: &mut TwoTowerModel<T>,
    dataset: &InteractionDataset,
    config: &TrainConfig,
    teacher: &SoftLabels<T>,
) -> Result<TrainingReport> {
    train_with(model, dataset, config, Some(teacher), |_, _| {})
}

/// Shared training loop. `augment` may append extra examples for each
/// primary example; they do not change the `1/S` normalization.
pub(crate) fn train_with<'a, T, F>(
    model: &mut TwoTowerModel<T>,
    dataset: &InteractionDataset,
    config: &TrainConfig,
    teacher: Option<&SoftLabels<T>>,
    mut augment: F,
) -> Result<TrainingReport>
where
    T: Scalar,
    F: FnMut(&TrainingExample, &mut Vec<WeightedExample<'a, T>>),
{
    if dataset.num_train_interactions() == 0 {
        return Err(HillError::Empty("training dataset has no interactions".into()));
    }
    if dataset.num_users() > model.num_users() || dataset.num_items() > model.num_items() {
        return Err(HillError::DimensionMismatch { expected: model.num_items(), actual: dataset.num_items() });
    }
    let mut trainer = Trainer::new(model, config.optimizer.clone(), Trainable::ALL);
    let unsup = T::lit(config.unsup_weight);
    let mut report = TrainingReport::default();
    let mut examples: Vec<WeightedExample<'a, T>> = Vec::new();
    for epoch in 0..config.epochs {
        let mut weighted = 0.0;
        let mut count = 0usize;
        let batches =
            dataset.epoch_batches(config.batch_size, config.negatives_per_positive, config.seed, epoch as u64)?;
        for batch in batches {
            examples.clear();
            for ex in &batch {
                let task = ex.task as usize;
                let weight = *model.task_weights.get(task).ok_or(HillError::IndexOutOfRange {
                    kind: "task",
                    id: task,
                    len: model.task_weights.len(),
                })?;
                examples.push(WeightedExample {
                    user: ex.user,
                    item: ItemSide::Item(ex.item),
                    label: T::lit(f64::from(ex.label)),
                    weight,
                    soft_label: teacher.and_then(|t| t.get(&(ex.user, ex.item)).copied()),
                });
                augment(ex, &mut examples);
            }
            let loss = trainer.step(model, &examples, T::lit(batch.len() as f64), unsup).map_err(|e| match e {
                HillError::Divergence(msg) => HillError::Divergence(format!("epoch {epoch}: {msg}")),
                other => other,
            })?;
            weighted += loss.as_f64() * batch.len() as f64;
            count += batch.len();
            report.steps += 1;
        }
        let mean = weighted / count.max(1) as f64;
        info!("epoch {epoch}: loss {mean:.6}");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Pairs per step; 0 means one full batch per epoch.
    pub batch_size: usize,
    /// Label-0 random items drawn per pair (outside the user's train set).
    pub negatives_per_pair: usize,
    pub pair_weight: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 1024,
            negatives_per_pair: 1,
            pair_weight: 1.0,
            optimizer: OptimizerConfig::default(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub pairs: usize,
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
}

/// Fine-tunes the user side of `model` on `<user, index node>` pairs with
/// label 1, using each node's scoring embedding as a frozen item-side vector.
///
/// The objective is normalized by the total example weight of each step, so
/// duplicating pairs and scaling their weight are equivalent.
pub fn finetune_with_pairs<T: Scalar, N: NodeEmbeddings<T>>(
    model: &mut TwoTowerModel<T>,
    pairs: &TttPairSet,
    nodes: &N,
    dataset: &InteractionDataset,
    config: &FinetuneConfig,
) -> Result<FinetuneReport> {
    let mut report = FinetuneReport { pairs: pairs.len(), ..Default::default() };
    if pairs.is_empty() {
        warn!("fine-tuning skipped: empty pair set");
        return Ok(report);
    }
    let mut targets = Vec::with_capacity(pairs.len());
    for p in pairs.iter() {
        if p.user as usize >= model.num_users() {
            return Err(HillError::IndexOutOfRange { kind: "user", id: p.user as usize, len: model.num_users() });
        }
        let emb = nodes.node_embedding(p.level, p.node).ok_or(HillError::IndexOutOfRange {
            kind: "index node",
            id: p.node as usize,
            len: 0,
        })?;
        targets.push((p.user, emb));
    }
    let mut trainer = Trainer::new(model, config.optimizer.clone(), Trainable::USER_ONLY);
    let weight = T::lit(config.pair_weight);
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let chunk = if config.batch_size == 0 { targets.len() } else { config.batch_size };
    let mut examples = Vec::new();
    for epoch in 0..config.epochs {
        let mut rng = rng::stream(rng::derive_seed(config.seed, epoch as u64), tags::FINETUNE);
        if config.batch_size != 0 {
            order.shuffle(&mut rng);
        }
        let (mut total, mut weight_sum) = (0.0, 0.0);
        for ids in order.chunks(chunk) {
            examples.clear();
            for &i in ids {
                let (user, emb) = targets[i];
                examples.push(WeightedExample {
                    user,
                    item: ItemSide::Fixed(emb),
                    label: T::one(),
                    weight,
                    soft_label: None,
                });
                if config.negatives_per_pair > 0 {
                    if let Ok(sampler) = NegativeSampler::new(dataset, user) {
                        for _ in 0..config.negatives_per_pair {
                            examples.push(WeightedExample {
                                user,
                                item: ItemSide::Item(sampler.draw(&mut rng)),
                                label: T::zero(),
                                weight,
                                soft_label: None,
                            });
                        }
                    }
                }
            }
            let norm = weight * T::lit(examples.len() as f64);
            let loss = trainer.step(model, &examples, norm, T::zero())?;
            total += loss.as_f64() * norm.as_f64();
            weight_sum += norm.as_f64();
            report.steps += 1;
        }
        report.epoch_losses.push(total / weight_sum.max(f64::MIN_POSITIVE));
    }
    Ok(report)
}
