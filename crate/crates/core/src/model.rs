//! Compact two-tower recommender: embedding tables with optional one-hidden
//! layer towers, dot-product scoring and the cross-entropy objectives used
//! for training, distillation and fine-tuning.

mod checkpoint;
mod optim;

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HillError, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::rng::{self, tags};
use crate::scalar::{bce_with_logit, logistic, Scalar};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{
    finetune_with_pairs, train, train_with_teacher, FinetuneConfig, FinetuneReport, OptimizerConfig, OptimizerKind,
    SoftLabels, TrainConfig, Trainable, Trainer, TrainingReport,
};
pub(crate) use optim::{train_with, DenseAdam};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Output embedding dimension of both towers.
    pub dim: usize,
    /// Hidden width of the tower MLPs; 0 disables them.
    pub hidden: usize,
    pub init_std: f64,
    pub num_tasks: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { dim: 64, hidden: 0, init_std: 0.1, num_tasks: 1, seed: 42 }
    }
}

/// One hidden layer tower, `d -> h -> d` with a rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct TowerCache<T> {
    input: Vec<T>,
    pre: Vec<T>,
}

impl<T: Scalar> Mlp<T> {
    fn init(dim: usize, hidden: usize, rng: &mut rng::Rng) -> Self {
        let he1 = Normal::new(0.0, (2.0 / dim as f64).sqrt()).expect("finite std");
        let he2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("finite std");
        let w1 = (0..hidden * dim).map(|_| T::lit(he1.sample(rng))).collect();
        let w2 = (0..dim * hidden).map(|_| T::lit(he2.sample(rng))).collect();
        Self {
            w1: Matrix::from_vec(hidden, dim, w1).expect("sized"),
            b1: vec![T::zero(); hidden],
            w2: Matrix::from_vec(dim, hidden, w2).expect("sized"),
            b2: vec![T::zero(); dim],
        }
    }

    fn forward(&self, x: &[T]) -> (Vec<T>, TowerCache<T>) {
        let pre: Vec<T> = self.w1.iter_rows().zip(&self.b1).map(|(w, &b)| dot(w, x) + b).collect();
        let act: Vec<T> = pre.iter().map(|&p| p.max(T::zero())).collect();
        let out = self.w2.iter_rows().zip(&self.b2).map(|(w, &b)| dot(w, &act) + b).collect();
        (out, TowerCache { input: x.to_vec(), pre })
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, cache: &TowerCache<T>, g_out: &[T], grads: &mut Mlp<T>) -> Vec<T> {
        let hidden = self.b1.len();
        let act: Vec<T> = cache.pre.iter().map(|&p| p.max(T::zero())).collect();
        let mut g_act = vec![T::zero(); hidden];
        for (o, &g) in g_out.iter().enumerate() {
            grads.b2[o] += g;
            axpy(g, &act, grads.w2.row_mut(o));
            axpy(g, self.w2.row(o), &mut g_act);
        }
        let mut g_in = vec![T::zero(); cache.input.len()];
        for (h, (&pre, &g)) in cache.pre.iter().zip(&g_act).enumerate().take(hidden) {
            if pre <= T::zero() {
                continue;
            }
            grads.b1[h] += g;
            axpy(g, &cache.input, grads.w1.row_mut(h));
            axpy(g, self.w1.row(h), &mut g_in);
        }
        g_in
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: vec![T::zero(); self.b1.len()],
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: vec![T::zero(); self.b2.len()],
        }
    }

    fn params(&self) -> [&[T]; 4] {
        [self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2]
    }

    fn params_mut(&mut self) -> [&mut [T]; 4] {
        [self.w1.as_mut_slice(), &mut self.b1, self.w2.as_mut_slice(), &mut self.b2]
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|x| x.is_finite()))
    }
}

/// Logit and probability of a user-item pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePrediction<T> {
    pub logit: T,
    pub probability: T,
}

impl<T: Scalar> ScorePrediction<T> {
    pub fn from_logit(logit: T) -> Self {
        Self { logit, probability: logistic(logit) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoTowerModel<T> {
    pub config: ModelConfig,
    pub user_table: Matrix<T>,
    pub item_table: Matrix<T>,
    pub user_mlp: Option<Mlp<T>>,
    pub item_mlp: Option<Mlp<T>>,
    pub task_weights: Vec<T>,
}

/// Source of fixed item-side vectors for `<user, index node>` training.
pub trait NodeEmbeddings<T> {
    /// Scoring embedding of `node` at tree `level` (levels start at 2).
    fn node_embedding(&self, level: usize, node: u32) -> Option<&[T]>;
}

/// Item side of an example: a trainable item or a frozen vector.
#[derive(Debug, Clone, Copy)]
pub enum ItemSide<'a, T> {
    Item(u32),
    Fixed(&'a [T]),
}

/// Example for the general objective
/// `(1/S) Σ weight·CE(label, p) + unsup_weight·(1/S) Σ CE(soft_label, p)`.
#[derive(Debug, Clone, Copy)]
pub struct WeightedExample<'a, T> {
    pub user: u32,
    pub item: ItemSide<'a, T>,
    pub label: T,
    pub weight: T,
    pub soft_label: Option<T>,
}

/// Sparse gradient of the model parameters.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub user_rows: BTreeMap<u32, Vec<T>>,
    pub item_rows: BTreeMap<u32, Vec<T>>,
    pub user_mlp: Option<Mlp<T>>,
    pub item_mlp: Option<Mlp<T>>,
}

/// Address of one scalar parameter, used for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRef {
    User {
        row: u32,
        col: usize,
    },
    Item {
        row: u32,
        col: usize,
    },
    /// `tensor` is 0..4 for w1, b1, w2, b2.
    UserMlp {
        tensor: usize,
        index: usize,
    },
    ItemMlp {
        tensor: usize,
        index: usize,
    },
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_for(model: &TwoTowerModel<T>) -> Self {
        Self {
            user_rows: BTreeMap::new(),
            item_rows: BTreeMap::new(),
            user_mlp: model.user_mlp.as_ref().map(Mlp::zeros_like),
            item_mlp: model.item_mlp.as_ref().map(Mlp::zeros_like),
        }
    }

    pub fn get(&self, p: ParamRef) -> T {
        match p {
            ParamRef::User { row, col } => self.user_rows.get(&row).map_or(T::zero(), |r| r[col]),
            ParamRef::Item { row, col } => self.item_rows.get(&row).map_or(T::zero(), |r| r[col]),
            ParamRef::UserMlp { tensor, index } => {
                self.user_mlp.as_ref().map_or(T::zero(), |m| m.params()[tensor][index])
            }
            ParamRef::ItemMlp { tensor, index } => {
                self.item_mlp.as_ref().map_or(T::zero(), |m| m.params()[tensor][index])
            }
        }
    }

    pub(crate) fn user_row(&mut self, row: u32, dim: usize) -> &mut Vec<T> {
        self.user_rows.entry(row).or_insert_with(|| vec![T::zero(); dim])
    }

    pub(crate) fn item_row(&mut self, row: u32, dim: usize) -> &mut Vec<T> {
        self.item_rows.entry(row).or_insert_with(|| vec![T::zero(); dim])
    }
}

impl<T: Scalar> TwoTowerModel<T> {
    /// Fresh model; table entries are drawn from `normal(0, init_std)` in the
    /// order user table, item table (row-major), then tower weights.
    pub fn new(num_users: usize, num_items: usize, config: ModelConfig) -> Result<Self> {
        let mut problems = Vec::new();
        if config.dim == 0 {
            problems.push("dim must be >= 1".to_string());
        }
        if config.num_tasks == 0 {
            problems.push("num_tasks must be >= 1".to_string());
        }
        if !(config.init_std.is_finite() && config.init_std >= 0.0) {
            problems.push(format!("init_std {} must be finite and >= 0", config.init_std));
        }
        if !problems.is_empty() {
            return Err(HillError::InvalidConfig(problems));
        }
        let d = config.dim;
        let mut rng = rng::stream(config.seed, tags::MODEL_INIT);
        let normal = Normal::new(0.0, config.init_std).expect("validated std");
        let mut table = |rows: usize| {
            let data = (0..rows * d).map(|_| T::lit(normal.sample(&mut rng))).collect();
            Matrix::from_vec(rows, d, data).expect("sized")
        };
        let user_table = table(num_users);
        let item_table = table(num_items);
        let (user_mlp, item_mlp) = if config.hidden > 0 {
            let u = Mlp::init(d, config.hidden, &mut rng);
            let i = Mlp::init(d, config.hidden, &mut rng);
            (Some(u), Some(i))
        } else {
            (None, None)
        };
        let task_weights = vec![T::one(); config.num_tasks];
        Ok(Self { config, user_table, item_table, user_mlp, item_mlp, task_weights })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn num_users(&self) -> usize {
        self.user_table.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item_table.rows()
    }

    fn check_user(&self, user: u32) -> Result<()> {
        if user as usize >= self.num_users() {
            return Err(HillError::IndexOutOfRange { kind: "user", id: user as usize, len: self.num_users() });
        }
        Ok(())
    }

    fn check_item(&self, item: u32) -> Result<()> {
        if item as usize >= self.num_items() {
            return Err(HillError::IndexOutOfRange { kind: "item", id: item as usize, len: self.num_items() });
        }
        Ok(())
    }

    pub(crate) fn user_forward(&self, user: u32) -> (Vec<T>, Option<TowerCache<T>>) {
        let row = self.user_table.row(user as usize);
        match &self.user_mlp {
            Some(m) => {
                let (out, cache) = m.forward(row);
                (out, Some(cache))
            }
            None => (row.to_vec(), None),
        }
    }

    pub(crate) fn item_forward(&self, item: u32) -> (Vec<T>, Option<TowerCache<T>>) {
        let row = self.item_table.row(item as usize);
        match &self.item_mlp {
            Some(m) => {
                let (out, cache) = m.forward(row);
                (out, Some(cache))
            }
            None => (row.to_vec(), None),
        }
    }

    /// Back-propagates `g_out` (gradient w.r.t. the user tower output).
    pub(crate) fn user_backward(
        &self,
        user: u32,
        cache: Option<&TowerCache<T>>,
        g_out: &[T],
        grads: &mut Gradients<T>,
    ) {
        let d = self.dim();
        match (&self.user_mlp, cache, grads.user_mlp.as_mut()) {
            (Some(m), Some(c), Some(gm)) => {
                let g_in = m.backward(c, g_out, gm);
                axpy(T::one(), &g_in, grads.user_row(user, d));
            }
            _ => axpy(T::one(), g_out, grads.user_row(user, d)),
        }
    }

    pub(crate) fn item_backward(
        &self,
        item: u32,
        cache: Option<&TowerCache<T>>,
        g_out: &[T],
        grads: &mut Gradients<T>,
    ) {
        let d = self.dim();
        match (&self.item_mlp, cache, grads.item_mlp.as_mut()) {
            (Some(m), Some(c), Some(gm)) => {
                let g_in = m.backward(c, g_out, gm);
                axpy(T::one(), &g_in, grads.item_row(item, d));
            }
            _ => axpy(T::one(), g_out, grads.item_row(item, d)),
        }
    }

    pub fn user_embedding(&self, user: u32) -> Result<Vec<T>> {
        self.check_user(user)?;
        Ok(self.user_forward(user).0)
    }

    pub fn item_embedding(&self, item: u32) -> Result<Vec<T>> {
        self.check_item(item)?;
        Ok(self.item_forward(item).0)
    }

    /// All user tower outputs, one row per user.
    pub fn user_embeddings(&self) -> Matrix<T> {
        match &self.user_mlp {
            None => self.user_table.clone(),
            Some(m) => tower_outputs(m, &self.user_table),
        }
    }

    pub fn item_embeddings(&self) -> Matrix<T> {
        match &self.item_mlp {
            None => self.item_table.clone(),
            Some(m) => tower_outputs(m, &self.item_table),
        }
    }

    pub fn score(&self, user: u32, item: u32) -> Result<ScorePrediction<T>> {
        let u = self.user_embedding(user)?;
        let v = self.item_embedding(item)?;
        Ok(ScorePrediction::from_logit(dot(&u, &v)))
    }

    /// Score against an arbitrary item-side vector (e.g. an index node).
    pub fn score_vector(&self, user: u32, item_vector: &[T]) -> Result<ScorePrediction<T>> {
        let u = self.user_embedding(user)?;
        if item_vector.len() != u.len() {
            return Err(HillError::DimensionMismatch { expected: u.len(), actual: item_vector.len() });
        }
        Ok(ScorePrediction::from_logit(dot(&u, item_vector)))
    }

    pub fn all_finite(&self) -> bool {
        self.user_table.all_finite()
            && self.item_table.all_finite()
            && self.user_mlp.as_ref().is_none_or(Mlp::all_finite)
            && self.item_mlp.as_ref().is_none_or(Mlp::all_finite)
    }

    pub fn param(&self, p: ParamRef) -> T {
        match p {
            ParamRef::User { row, col } => self.user_table.row(row as usize)[col],
            ParamRef::Item { row, col } => self.item_table.row(row as usize)[col],
            ParamRef::UserMlp { tensor, index } => self.user_mlp.as_ref().expect("user mlp").params()[tensor][index],
            ParamRef::ItemMlp { tensor, index } => self.item_mlp.as_ref().expect("item mlp").params()[tensor][index],
        }
    }

    pub fn set_param(&mut self, p: ParamRef, value: T) {
        match p {
            ParamRef::User { row, col } => self.user_table.row_mut(row as usize)[col] = value,
            ParamRef::Item { row, col } => self.item_table.row_mut(row as usize)[col] = value,
            ParamRef::UserMlp { tensor, index } => {
                self.user_mlp.as_mut().expect("user mlp").params_mut()[tensor][index] = value
            }
            ParamRef::ItemMlp { tensor, index } => {
                self.item_mlp.as_mut().expect("item mlp").params_mut()[tensor][index] = value
            }
        }
    }

    /// Sizes of the four tensors of a tower MLP (w1, b1, w2, b2).
    pub fn mlp_tensor_sizes(&self) -> Option<[usize; 4]> {
        self.user_mlp.as_ref().map(|m| m.params().map(<[T]>::len))
    }

    /// Value and gradient of the general objective over `examples`,
    /// normalized by `normalizer` (the sample count `S` for plain training).
    pub fn loss_and_gradients(
        &self,
        examples: &[WeightedExample<'_, T>],
        normalizer: T,
        unsup_weight: T,
    ) -> Result<(T, Gradients<T>)> {
        let mut grads = Gradients::zeros_for(self);
        let mut loss = T::zero();
        for ex in examples {
            self.check_user(ex.user)?;
            if let ItemSide::Item(i) = ex.item {
                self.check_item(i)?;
            }
            let (u, ucache) = self.user_forward(ex.user);
            let (v, vcache) = match ex.item {
                ItemSide::Item(i) => {
                    let (v, c) = self.item_forward(i);
                    (v, c)
                }
                ItemSide::Fixed(v) => {
                    if v.len() != u.len() {
                        return Err(HillError::DimensionMismatch { expected: u.len(), actual: v.len() });
                    }
                    (v.to_vec(), None)
                }
            };
            let z = dot(&u, &v);
            let p = logistic(z);
            let mut g_z = ex.weight * (p - ex.label);
            loss += ex.weight * bce_with_logit(z, ex.label);
            if let Some(soft) = ex.soft_label {
                loss += unsup_weight * bce_with_logit(z, soft);
                g_z += unsup_weight * (p - soft);
            }
            let g_z = g_z / normalizer;
            let g_u: Vec<T> = v.iter().map(|&x| g_z * x).collect();
            self.user_backward(ex.user, ucache.as_ref(), &g_u, &mut grads);
            if let ItemSide::Item(i) = ex.item {
                let g_v: Vec<T> = u.iter().map(|&x| g_z * x).collect();
                self.item_backward(i, vcache.as_ref(), &g_v, &mut grads);
            }
        }
        Ok((loss / normalizer, grads))
    }

    /// Objective value only (same definition as [`Self::loss_and_gradients`]).
    pub fn loss(&self, examples: &[WeightedExample<'_, T>], normalizer: T, unsup_weight: T) -> Result<T> {
        let mut loss = T::zero();
        for ex in examples {
            self.check_user(ex.user)?;
            let u = self.user_forward(ex.user).0;
            let v = match ex.item {
                ItemSide::Item(i) => {
                    self.check_item(i)?;
                    self.item_forward(i).0
                }
                ItemSide::Fixed(v) => v.to_vec(),
            };
            let z = dot(&u, &v);
            loss += ex.weight * bce_with_logit(z, ex.label);
            if let Some(soft) = ex.soft_label {
                loss += unsup_weight * bce_with_logit(z, soft);
            }
        }
        Ok(loss / normalizer)
    }
}

fn tower_outputs<T: Scalar>(m: &Mlp<T>, table: &Matrix<T>) -> Matrix<T> {
    use rayon::prelude::*;
    let rows: Vec<Vec<T>> = (0..table.rows()).into_par_iter().map(|r| m.forward(table.row(r)).0).collect();
    Matrix::from_rows(table.cols(), &rows).expect("tower output width")
}

fn check_open_unit<T: Scalar>(p: T) -> Result<()> {
    if p > T::zero() && p < T::one() {
        Ok(())
    } else {
        Err(HillError::Domain(format!("prediction {p} outside (0, 1)")))
    }
}

fn cross_entropy<T: Scalar>(y: T, p: T) -> T {
    // 0·log 0 is taken as 0 so hard labels need no clamping
    let pos = if y == T::zero() { T::zero() } else { y * p.ln() };
    let neg = if y == T::one() { T::zero() } else { (T::one() - y) * (T::one() - p).ln() };
    pos + neg
}

/// Weighted multi-task cross-entropy over an `S × T` prediction matrix.
///
/// Predictions must lie strictly inside (0, 1); no clamping is applied.
pub fn supervised_loss<T: Scalar>(predictions: &Matrix<T>, labels: &Matrix<T>, task_weights: &[T]) -> Result<T> {
    if predictions.rows() != labels.rows() || predictions.cols() != labels.cols() {
        return Err(HillError::DimensionMismatch {
            expected: predictions.rows() * predictions.cols(),
            actual: labels.rows() * labels.cols(),
        });
    }
    if task_weights.len() != predictions.cols() {
        return Err(HillError::DimensionMismatch { expected: predictions.cols(), actual: task_weights.len() });
    }
    if predictions.rows() == 0 {
        return Err(HillError::Empty("supervised loss over zero samples".into()));
    }
    let mut total = T::zero();
    for (p_row, y_row) in predictions.iter_rows().zip(labels.iter_rows()) {
        for ((&p, &y), &w) in p_row.iter().zip(y_row).zip(task_weights) {
            check_open_unit(p)?;
            if y != T::zero() && y != T::one() {
                return Err(HillError::Domain(format!("label {y} is not 0 or 1")));
            }
            total += w * cross_entropy(y, p);
        }
    }
    Ok(-total / T::lit(predictions.rows() as f64))
}

/// Cross-entropy of predictions against teacher soft labels in [0, 1].
pub fn distillation_loss<T: Scalar>(predictions: &Matrix<T>, soft_labels: &Matrix<T>) -> Result<T> {
    if predictions.rows() != soft_labels.rows() || predictions.cols() != soft_labels.cols() {
        return Err(HillError::DimensionMismatch {
            expected: predictions.rows() * predictions.cols(),
            actual: soft_labels.rows() * soft_labels.cols(),
        });
    }
    if predictions.rows() == 0 {
        return Err(HillError::Empty("distillation loss over zero samples".into()));
    }
    let mut total = T::zero();
    for (p_row, y_row) in predictions.iter_rows().zip(soft_labels.iter_rows()) {
        for (&p, &y) in p_row.iter().zip(y_row) {
            check_open_unit(p)?;
            if !(y >= T::zero() && y <= T::one()) {
                return Err(HillError::Domain(format!("soft label {y} outside [0, 1]")));
            }
            total += cross_entropy(y, p);
        }
    }
    Ok(-total / T::lit(predictions.rows() as f64))
}

pub fn total_loss<T: Scalar>(sup: T, unsup: T, unsup_weight: T) -> T {
    sup + unsup_weight * unsup
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn init_reproduces_seeded_normal_stream() {
        let cfg = ModelConfig { dim: 4, seed: 11, ..Default::default() };
        let m = TwoTowerModel::<f64>::new(3, 5, cfg.clone()).unwrap();
        let mut rng = rng::stream(11, tags::MODEL_INIT);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let expected: Vec<f64> = (0..(3 + 5) * 4).map(|_| normal.sample(&mut rng)).collect();
        assert_eq!(m.user_embedding(2).unwrap(), expected[8..12].to_vec());
        assert_eq!(m.item_embedding(0).unwrap(), expected[12..16].to_vec());
        assert_eq!(m.item_embedding(4).unwrap(), m.item_embedding(4).unwrap());
        assert_eq!(m.item_embedding(4).unwrap(), m.item_table.row(4).to_vec());
        assert!(matches!(m.user_embedding(3), Err(HillError::IndexOutOfRange { .. })));
        assert!(matches!(m.score(0, 5), Err(HillError::IndexOutOfRange { .. })));
    }

    #[test]
    fn score_examples() {
        let cfg = ModelConfig { dim: 4, ..Default::default() };
        let mut m = TwoTowerModel::<f64>::new(2, 2, cfg).unwrap();
        m.user_table.row_mut(0).fill(0.0);
        let s = m.score(0, 1).unwrap();
        assert_eq!((s.logit, s.probability), (0.0, 0.5));
        m.user_table.row_mut(1).fill(1.0);
        m.item_table.row_mut(1).fill(1.0);
        let s = m.score(1, 1).unwrap();
        assert_eq!(s.logit, 4.0);
        assert!((s.probability - 1.0 / (1.0 + (-4f64).exp())).abs() < 1e-15);
        assert!((s.probability - 0.9820).abs() < 1e-4);
        let before = m.score(1, 0).unwrap().logit;
        for x in m.item_table.row_mut(0) {
            *x = -*x;
        }
        assert_eq!(m.score(1, 0).unwrap().logit, -before);
    }

    #[test]
    fn supervised_loss_examples() {
        let l = supervised_loss(&col(&[0.5]), &col(&[1.0]), &[1.0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = supervised_loss(&col(&[1.0 - 1e-12]), &col(&[1.0]), &[1.0]).unwrap();
        assert!(l < 1e-11);
        let l = supervised_loss(&col(&[0.9, 0.2]), &col(&[1.0, 0.0]), &[1.0]).unwrap();
        assert!((l - -(0.9f64.ln() + 0.8f64.ln()) / 2.0).abs() < 1e-15);
        assert!((l - 0.1643).abs() < 1e-4);
        assert!(matches!(supervised_loss(&col(&[1.0]), &col(&[1.0]), &[1.0]), Err(HillError::Domain(_))));
        assert!(matches!(supervised_loss(&col(&[0.0]), &col(&[0.0]), &[1.0]), Err(HillError::Domain(_))));
    }

    #[test]
    fn multi_task_weights_apply_per_column() {
        let p = Matrix::from_vec(1, 2, vec![0.5, 0.25]).unwrap();
        let y = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let l = supervised_loss(&p, &y, &[2.0, 3.0]).unwrap();
        assert!((l - (2.0 * 2f64.ln() - 3.0 * 0.75f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn distillation_examples() {
        let p = col(&[0.3, 0.6, 0.9]);
        let entropy: f64 =
            [0.3f64, 0.6, 0.9].iter().map(|&q| -(q * q.ln() + (1.0 - q) * (1.0 - q).ln())).sum::<f64>() / 3.0;
        assert!((distillation_loss(&p, &p).unwrap() - entropy).abs() < 1e-14);
        let hard = col(&[1.0, 0.0, 1.0]);
        assert_eq!(distillation_loss(&p, &hard).unwrap(), supervised_loss(&p, &hard, &[1.0]).unwrap());
        let half = col(&[0.5, 0.5]);
        assert!((distillation_loss(&half, &col(&[0.1, 0.77])).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(distillation_loss(&half, &col(&[1.5, 0.0])).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.5, 0.2, 0.0), 0.5);
        assert!((total_loss(0.5f64, 0.2, 1.0) - 0.7).abs() < 1e-15);
        assert_eq!(total_loss(1.0, 0.25, 2.0), 1.5);
    }

    #[test]
    fn bilinear_in_user_row() {
        let m = TwoTowerModel::<f64>::new(1, 1, ModelConfig { dim: 8, ..Default::default() }).unwrap();
        let mut scaled = m.clone();
        for x in scaled.user_table.row_mut(0) {
            *x *= 3.0;
        }
        let a = m.score(0, 0).unwrap().logit;
        assert!((scaled.score(0, 0).unwrap().logit - 3.0 * a).abs() < 1e-14);
    }
}
