//! Learned hierarchical index.
//!
//! Each level owns a codebook of node embeddings. Items attend to the nodes
//! of a level through a temperature-controlled softmax over squared
//! distances; the attention-weighted node mixture stands in for the item on
//! the item side of the two-tower objective, so node embeddings, and
//! optionally the model, learn jointly. After training a level is finalized
//! to hard assignments with medoid snapping, and the residuals left by that
//! level feed the next, coarser one.

use std::collections::VecDeque;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{InteractionDataset, TrainingExample};
use crate::error::{HillError, Result};
use crate::linalg::{axpy, dot, sq_dist, Matrix};
use crate::model::{DenseAdam, Gradients, OptimizerConfig, Trainable, Trainer, TwoTowerModel};
use crate::progress::{ProgressRecord, ProgressSink};
use crate::rng::{self, tags};
use crate::scalar::{bce_with_logit, logistic, Scalar};

/// Squared Euclidean distance.
pub fn distance<T: Scalar>(v: &[T], c: &[T]) -> Result<T> {
    if v.len() != c.len() {
        return Err(HillError::DimensionMismatch { expected: v.len(), actual: c.len() });
    }
    Ok(sq_dist(v, c))
}

fn affinity_into<T: Scalar>(distances: &[T], alpha: T, out: &mut Vec<T>) {
    let min = distances.iter().copied().fold(T::infinity(), T::min);
    out.clear();
    out.extend(distances.iter().map(|&d| (-(alpha * (d - min))).exp()));
    let total: T = out.iter().copied().sum();
    for a in out.iter_mut() {
        *a /= total;
    }
}

/// Softmax of `-alpha * distances`, shifted by the smallest distance so the
/// largest exponent is zero.
pub fn affinity<T: Scalar>(distances: &[T], alpha: T) -> Result<Vec<T>> {
    if distances.is_empty() {
        return Err(HillError::Empty("affinity over zero nodes".into()));
    }
    if !(alpha.is_finite() && alpha >= T::zero()) {
        return Err(HillError::Domain(format!("alpha {alpha} must be finite and >= 0")));
    }
    if let Some(d) = distances.iter().find(|d| !d.is_finite()) {
        return Err(HillError::Domain(format!("non-finite distance {d}")));
    }
    let mut out = Vec::with_capacity(distances.len());
    affinity_into(distances, alpha, &mut out);
    Ok(out)
}

fn mix_into<T: Scalar>(affinities: &[T], nodes: &Matrix<T>, out: &mut [T]) {
    out.fill(T::zero());
    for (&a, c) in affinities.iter().zip(nodes.iter_rows()) {
        axpy(a, c, out);
    }
}

/// Convex combination `Σ_k a_k c_k` of the node embeddings.
pub fn pseudo_embedding<T: Scalar>(affinities: &[T], nodes: &Matrix<T>) -> Result<Vec<T>> {
    if affinities.len() != nodes.rows() {
        return Err(HillError::DimensionMismatch { expected: nodes.rows(), actual: affinities.len() });
    }
    let mut out = vec![T::zero(); nodes.cols()];
    mix_into(affinities, nodes, &mut out);
    Ok(out)
}

/// Nearest node to `x`; ties go to the lowest node index.
pub(crate) fn nearest<T: Scalar>(x: &[T], nodes: &Matrix<T>) -> (u32, T) {
    let mut best = (0u32, T::infinity());
    for (k, c) in nodes.iter_rows().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k as u32, d);
        }
    }
    best
}

pub(crate) fn assign_all<T: Scalar>(items: &Matrix<T>, nodes: &Matrix<T>) -> Vec<u32> {
    (0..items.rows()).into_par_iter().map(|j| nearest(items.row(j), nodes).0).collect()
}

/// Node embeddings of one level together with the hard item mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelCodebook<T> {
    /// Tree level, 2 for the codebook nearest the items.
    pub level: usize,
    pub node_embeddings: Matrix<T>,
    /// `assignment[j]` is the node of item `j`; empty until finalized.
    pub assignment: Vec<u32>,
    /// Medoid item of each node, `None` for empty nodes.
    pub representative: Vec<Option<u32>>,
    /// Index of the node pinned at the origin, if any.
    pub zero_node: Option<u32>,
    pub finalized: bool,
}

impl<T: Scalar> LevelCodebook<T> {
    pub fn unfinalized(level: usize, node_embeddings: Matrix<T>) -> Self {
        let k = node_embeddings.rows();
        Self {
            level,
            node_embeddings,
            assignment: Vec::new(),
            representative: vec![None; k],
            zero_node: None,
            finalized: false,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.node_embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.node_embeddings.cols()
    }

    /// Items assigned to each node, ascending.
    pub fn members(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.num_nodes()];
        for (j, &k) in self.assignment.iter().enumerate() {
            out[k as usize].push(j as u32);
        }
        out
    }

    pub fn non_empty_nodes(&self) -> usize {
        self.representative.iter().filter(|r| r.is_some()).count()
    }
}

/// Hard-assigns items to nodes and snaps every non-empty node onto its
/// nearest assigned item.
///
/// Items are assigned by argmin distance (ties to the lowest node). Each
/// non-empty node, except a pinned zero node, then moves onto the assigned
/// item closest to its learned position (ties to the lowest item id).
/// Assignments are recomputed against the snapped nodes, so every item ends
/// on its true nearest node, and each non-empty node's representative is its
/// closest assigned item. Empty nodes keep their embedding.
///
/// With `zero_centroid`, a node fixed at the origin is appended after the
/// learned ones.
pub fn finalize<T: Scalar>(
    nodes: Matrix<T>,
    items: &Matrix<T>,
    level: usize,
    zero_centroid: bool,
) -> Result<LevelCodebook<T>> {
    if items.rows() == 0 {
        return Err(HillError::Empty("cannot finalize a codebook over zero items".into()));
    }
    if nodes.cols() != items.cols() {
        return Err(HillError::DimensionMismatch { expected: items.cols(), actual: nodes.cols() });
    }
    let mut nodes = nodes;
    let zero_node = if zero_centroid {
        nodes.push_row(&vec![T::zero(); items.cols()])?;
        Some(nodes.rows() as u32 - 1)
    } else {
        None
    };
    if nodes.rows() == 0 {
        return Err(HillError::Empty("codebook without nodes".into()));
    }
    let mut cb = LevelCodebook::unfinalized(level, nodes);
    cb.zero_node = zero_node;
    cb.assignment = assign_all(items, &cb.node_embeddings);

    for (k, members) in cb.members().into_iter().enumerate() {
        if members.is_empty() || Some(k as u32) == zero_node {
            continue;
        }
        let c = cb.node_embeddings.row(k).to_vec();
        let medoid = closest_member(&members, items, &c);
        cb.node_embeddings.row_mut(k).copy_from_slice(items.row(medoid as usize));
    }

    cb.assignment = assign_all(items, &cb.node_embeddings);
    for (k, members) in cb.members().into_iter().enumerate() {
        cb.representative[k] =
            (!members.is_empty()).then(|| closest_member(&members, items, cb.node_embeddings.row(k)));
    }
    cb.finalized = true;
    Ok(cb)
}

fn closest_member<T: Scalar>(members: &[u32], items: &Matrix<T>, c: &[T]) -> u32 {
    let mut best = (members[0], T::infinity());
    for &j in members {
        let d = sq_dist(items.row(j as usize), c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Per-item residuals `r` and cumulative reconstructions `q`, `q + r = v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualState<T> {
    pub level: usize,
    pub residuals: Matrix<T>,
    pub cumulative: Matrix<T>,
}

impl<T: Scalar> ResidualState<T> {
    /// Level-1 state: residuals are the item embeddings themselves.
    pub fn initial(items: &Matrix<T>) -> Self {
        Self { level: 1, residuals: items.clone(), cumulative: Matrix::zeros(items.rows(), items.cols()) }
    }

    /// `q + r` row by row.
    pub fn reconstructed_items(&self) -> Matrix<T> {
        let data = self.cumulative.as_slice().iter().zip(self.residuals.as_slice()).map(|(&q, &r)| q + r).collect();
        Matrix::from_vec(self.residuals.rows(), self.residuals.cols(), data).expect("same shape")
    }

    /// Replaces the residuals with `items - q`, keeping `q`.
    pub fn rebase(&mut self, items: &Matrix<T>) -> Result<()> {
        if items.rows() != self.cumulative.rows() || items.cols() != self.cumulative.cols() {
            return Err(HillError::DimensionMismatch { expected: self.cumulative.rows(), actual: items.rows() });
        }
        let data = items.as_slice().iter().zip(self.cumulative.as_slice()).map(|(&v, &q)| v - q).collect();
        self.residuals = Matrix::from_vec(items.rows(), items.cols(), data)?;
        Ok(())
    }
}

/// How a level's contribution is taken when moving to the next level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// The finalized node of each item.
    Hard,
    /// The soft pseudo embedding at the given temperature.
    Soft { alpha: f64 },
}

/// Subtracts each item's level contribution from its residual and adds it to
/// the cumulative reconstruction.
pub fn residual_step<T: Scalar>(
    state: &ResidualState<T>,
    codebook: &LevelCodebook<T>,
    mode: ResidualMode,
) -> Result<ResidualState<T>> {
    if codebook.level != state.level + 1 {
        return Err(HillError::Domain(format!(
            "codebook level {} cannot follow residual level {}",
            codebook.level, state.level
        )));
    }
    if codebook.dim() != state.residuals.cols() {
        return Err(HillError::DimensionMismatch { expected: state.residuals.cols(), actual: codebook.dim() });
    }
    let m = state.residuals.rows();
    let d = state.residuals.cols();
    let contributions: Vec<Vec<T>> = match mode {
        ResidualMode::Hard => {
            if !codebook.finalized {
                return Err(HillError::Unfinalized { level: codebook.level });
            }
            if codebook.assignment.len() != m {
                return Err(HillError::DimensionMismatch { expected: m, actual: codebook.assignment.len() });
            }
            codebook.assignment.iter().map(|&k| codebook.node_embeddings.row(k as usize).to_vec()).collect()
        }
        ResidualMode::Soft { alpha } => {
            let alpha = T::lit(alpha);
            (0..m)
                .into_par_iter()
                .map(|j| {
                    let r = state.residuals.row(j);
                    let dists: Vec<T> = codebook.node_embeddings.iter_rows().map(|c| sq_dist(r, c)).collect();
                    let mut a = Vec::new();
                    affinity_into(&dists, alpha, &mut a);
                    let mut out = vec![T::zero(); d];
                    mix_into(&a, &codebook.node_embeddings, &mut out);
                    out
                })
                .collect()
        }
    };
    let mut next = state.clone();
    next.level = codebook.level;
    for (j, c) in contributions.iter().enumerate() {
        for ((r, q), &cv) in next.residuals.row_mut(j).iter_mut().zip(next.cumulative.row_mut(j).iter_mut()).zip(c) {
            *r -= cv;
            *q += cv;
        }
    }
    Ok(next)
}

/// `Σ_j ‖q_j − v_j‖²`.
pub fn reconstruction_loss<T: Scalar>(cumulative: &Matrix<T>, originals: &Matrix<T>) -> Result<T> {
    if cumulative.rows() != originals.rows() || cumulative.cols() != originals.cols() {
        return Err(HillError::DimensionMismatch {
            expected: originals.rows() * originals.cols(),
            actual: cumulative.rows() * cumulative.cols(),
        });
    }
    Ok(cumulative.iter_rows().zip(originals.iter_rows()).map(|(q, v)| sq_dist(q, v)).sum())
}

/// `max_alpha · (iter / max_iters)^exp`; past `max_iters` the value is
/// clamped to `max_alpha`.
pub fn temperature_at(iter: usize, max_iters: usize, max_alpha: f64, exp: f64) -> f64 {
    if iter >= max_iters {
        if iter > max_iters {
            warn!("temperature: iter {iter} past max_iters {max_iters}, clamped");
        }
        return max_alpha;
    }
    max_alpha * (iter as f64).powf(exp) / (max_iters as f64).powf(exp)
}

pub fn temperature(iter: usize, cfg: &IndexTrainConfig) -> f64 {
    temperature_at(iter, cfg.max_iters, cfg.max_alpha, cfg.exp)
}

/// `Σ_k (mean_j a_jk)²` over a matrix of affinity rows.
pub fn flops_penalty<T: Scalar>(pooled: &Matrix<T>) -> T {
    if pooled.rows() == 0 {
        return T::zero();
    }
    let mut sums = vec![T::zero(); pooled.cols()];
    for row in pooled.iter_rows() {
        axpy(T::one(), row, &mut sums);
    }
    let n = T::lit(pooled.rows() as f64);
    sums.iter().map(|&s| (s / n) * (s / n)).sum()
}

/// Linear ramp `target · min(1, iter / warmup_iters)`; no ramp when
/// `warmup_iters` is 0.
pub fn warmup_weight(iter: usize, warmup_iters: usize, target_weight: f64) -> f64 {
    if warmup_iters == 0 {
        return target_weight;
    }
    target_weight * (iter as f64 / warmup_iters as f64).min(1.0)
}

/// Column sums of the affinity rows of recent batches.
#[derive(Debug, Clone)]
pub struct AffinityPool<T> {
    capacity: usize,
    batches: VecDeque<(Vec<T>, usize)>,
}

impl<T: Scalar> AffinityPool<T> {
    /// Pools over `pool_batches` batches, the current one included.
    pub fn new(pool_batches: usize) -> Self {
        Self { capacity: pool_batches.saturating_sub(1), batches: VecDeque::new() }
    }

    pub fn push(&mut self, column_sums: Vec<T>, rows: usize) {
        if self.capacity == 0 {
            return;
        }
        if self.batches.len() == self.capacity {
            self.batches.pop_front();
        }
        self.batches.push_back((column_sums, rows));
    }

    fn totals(&self, k: usize) -> (Vec<T>, usize) {
        let mut sums = vec![T::zero(); k];
        let mut rows = 0;
        for (s, r) in &self.batches {
            if s.len() == k {
                axpy(T::one(), s, &mut sums);
                rows += r;
            }
        }
        (sums, rows)
    }
}

/// Coefficients of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointWeights {
    /// Scales the pseudo-embedding cross-entropy and the reconstruction term.
    pub index_loss: f64,
    /// Weight of `‖r − c̄‖²` relative to the cross-entropy inside the index term.
    pub recon: f64,
    /// Weight of the plain two-tower cross-entropy on `⟨u, v⟩`.
    pub model_loss: f64,
    pub flops: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: f64,
    pub index_loss: f64,
    /// Mean `‖r − c̄‖²` over the batch.
    pub recon_loss: f64,
    pub model_loss: f64,
    pub flops_penalty: f64,
}

#[derive(Debug, Clone)]
pub struct JointGradients<T> {
    pub model: Gradients<T>,
    pub nodes: Matrix<T>,
    batch_column_sums: Vec<T>,
    batch_rows: usize,
}

struct Forward<T> {
    u: Vec<T>,
    ucache: Option<crate::model::TowerCache<T>>,
    v: Vec<T>,
    vcache: Option<crate::model::TowerCache<T>>,
    r: Vec<T>,
    a: Vec<T>,
    cbar: Vec<T>,
}

/// Value and gradient of the joint objective on one batch:
///
/// `w_i/S Σ [CE(y, σ⟨u, c̄⟩) + ρ‖r − c̄‖²] + w_m/S Σ CE(y, σ⟨u, v⟩) + w_f P`
///
/// where `r = v − q` is the item's residual against the frozen lower-level
/// reconstruction `q` (`cumulative`) and `P` the FLOPs penalty over the
/// current batch pooled with `pool`. Gradients reach the node embeddings and
/// both towers, including through `v` inside the distances.
pub fn joint_loss_and_gradients<T: Scalar>(
    model: &TwoTowerModel<T>,
    nodes: &Matrix<T>,
    cumulative: &Matrix<T>,
    batch: &[TrainingExample],
    alpha: T,
    weights: &JointWeights,
    pool: &AffinityPool<T>,
) -> Result<(StepReport, JointGradients<T>)> {
    let d = model.dim();
    let k = nodes.rows();
    if nodes.cols() != d {
        return Err(HillError::DimensionMismatch { expected: d, actual: nodes.cols() });
    }
    if cumulative.rows() != model.num_items() || cumulative.cols() != d {
        return Err(HillError::DimensionMismatch { expected: model.num_items(), actual: cumulative.rows() });
    }
    if k == 0 {
        return Err(HillError::Empty("joint step over zero nodes".into()));
    }
    if batch.is_empty() {
        return Err(HillError::Empty("joint step over an empty batch".into()));
    }
    for ex in batch {
        if ex.user as usize >= model.num_users() {
            return Err(HillError::IndexOutOfRange { kind: "user", id: ex.user as usize, len: model.num_users() });
        }
        if ex.item as usize >= model.num_items() {
            return Err(HillError::IndexOutOfRange { kind: "item", id: ex.item as usize, len: model.num_items() });
        }
    }

    let fwd: Vec<Forward<T>> = batch
        .par_iter()
        .map(|ex| {
            let (u, ucache) = model.user_forward(ex.user);
            let (v, vcache) = model.item_forward(ex.item);
            let r: Vec<T> = v.iter().zip(cumulative.row(ex.item as usize)).map(|(&x, &q)| x - q).collect();
            let dists: Vec<T> = nodes.iter_rows().map(|c| sq_dist(&r, c)).collect();
            let mut a = Vec::with_capacity(k);
            affinity_into(&dists, alpha, &mut a);
            let mut cbar = vec![T::zero(); d];
            mix_into(&a, nodes, &mut cbar);
            Forward { u, ucache, v, vcache, r, a, cbar }
        })
        .collect();

    let s = T::lit(batch.len() as f64);
    let (mut col, prev_rows) = pool.totals(k);
    let mut batch_sums = vec![T::zero(); k];
    for f in &fwd {
        axpy(T::one(), &f.a, &mut batch_sums);
    }
    axpy(T::one(), &batch_sums, &mut col);
    let rows = T::lit((prev_rows + batch.len()) as f64);
    let means: Vec<T> = col.iter().map(|&c| c / rows).collect();
    let penalty: T = means.iter().map(|&m| m * m).sum();

    let iw = T::lit(weights.index_loss) / s;
    let rw = T::lit(weights.recon);
    let mw = T::lit(weights.model_loss) / s;
    let fw = T::lit(weights.flops);
    let two = T::lit(2.0);
    let flops_grad: Vec<T> = means.iter().map(|&m| fw * two * m / rows).collect();

    let mut grads = Gradients::zeros_for(model);
    let mut node_grads = Matrix::zeros(k, d);
    let (mut ce_sum, mut rec_sum, mut model_sum) = (T::zero(), T::zero(), T::zero());
    let mut g_cbar = vec![T::zero(); d];
    let mut g_a = vec![T::zero(); k];
    let mut diff = vec![T::zero(); d];
    for (ex, f) in batch.iter().zip(&fwd) {
        let y = T::lit(f64::from(ex.label));
        let z = dot(&f.u, &f.cbar);
        ce_sum += bce_with_logit(z, y);
        let e: Vec<T> = f.r.iter().zip(&f.cbar).map(|(&r, &c)| r - c).collect();
        rec_sum += dot(&e, &e);

        let g_z = iw * (logistic(z) - y);
        for t in 0..d {
            g_cbar[t] = g_z * f.u[t] - two * iw * rw * e[t];
        }
        let mut g_u: Vec<T> = f.cbar.iter().map(|&c| g_z * c).collect();
        let mut g_r: Vec<T> = e.iter().map(|&x| two * iw * rw * x).collect();

        for (kk, c) in nodes.iter_rows().enumerate() {
            g_a[kk] = dot(&g_cbar, c) + flops_grad[kk];
            axpy(f.a[kk], &g_cbar, node_grads.row_mut(kk));
        }
        let mean_ga: T = f.a.iter().zip(&g_a).map(|(&a, &g)| a * g).sum();
        for (kk, c) in nodes.iter_rows().enumerate() {
            let g_d = -alpha * f.a[kk] * (g_a[kk] - mean_ga);
            if g_d == T::zero() {
                continue;
            }
            for t in 0..d {
                diff[t] = f.r[t] - c[t];
            }
            axpy(two * g_d, &diff, &mut g_r);
            axpy(-two * g_d, &diff, node_grads.row_mut(kk));
        }

        if weights.model_loss != 0.0 {
            let zm = dot(&f.u, &f.v);
            model_sum += bce_with_logit(zm, y);
            let g_zm = mw * (logistic(zm) - y);
            axpy(g_zm, &f.v, &mut g_u);
            axpy(g_zm, &f.u, &mut g_r);
        }
        model.user_backward(ex.user, f.ucache.as_ref(), &g_u, &mut grads);
        model.item_backward(ex.item, f.vcache.as_ref(), &g_r, &mut grads);
    }

    let index_loss = T::lit(weights.index_loss) * (ce_sum + rw * rec_sum) / s;
    let model_loss = T::lit(weights.model_loss) * model_sum / s;
    let loss = index_loss + model_loss + fw * penalty;
    let report = StepReport {
        loss: loss.as_f64(),
        index_loss: index_loss.as_f64(),
        recon_loss: (rec_sum / s).as_f64(),
        model_loss: model_loss.as_f64(),
        flops_penalty: penalty.as_f64(),
    };
    Ok((
        report,
        JointGradients { model: grads, nodes: node_grads, batch_column_sums: batch_sums, batch_rows: batch.len() },
    ))
}

/// Optimizer state for training one level.
#[derive(Debug, Clone)]
pub struct JointTrainer<T> {
    pub nodes: Matrix<T>,
    node_opt: DenseAdam<T>,
    model_opt: Trainer<T>,
    pool: AffinityPool<T>,
    pub freeze_model: bool,
}

impl<T: Scalar> JointTrainer<T> {
    pub fn new(
        model: &TwoTowerModel<T>,
        nodes: Matrix<T>,
        node_optimizer: OptimizerConfig,
        model_optimizer: OptimizerConfig,
        pool_batches: usize,
        freeze_model: bool,
    ) -> Self {
        let trainable = if freeze_model { Trainable::NONE } else { Trainable::ALL };
        Self {
            node_opt: DenseAdam::new(nodes.as_slice().len(), node_optimizer),
            model_opt: Trainer::new(model, model_optimizer, trainable),
            pool: AffinityPool::new(pool_batches),
            nodes,
            freeze_model,
        }
    }
}

/// One joint update of the node embeddings and, unless frozen, the model.
pub fn joint_train_step<T: Scalar>(
    model: &mut TwoTowerModel<T>,
    trainer: &mut JointTrainer<T>,
    cumulative: &Matrix<T>,
    batch: &[TrainingExample],
    alpha: f64,
    weights: &JointWeights,
) -> Result<StepReport> {
    let (report, grads) =
        joint_loss_and_gradients(model, &trainer.nodes, cumulative, batch, T::lit(alpha), weights, &trainer.pool)?;
    if !report.loss.is_finite() {
        return Err(HillError::Divergence(format!(
            "non-finite joint loss at alpha {alpha} (index {}, flops {})",
            report.index_loss, report.flops_penalty
        )));
    }
    trainer.node_opt.step(trainer.nodes.as_mut_slice(), grads.nodes.as_slice());
    if !trainer.freeze_model {
        trainer.model_opt.apply(model, &grads.model);
    }
    trainer.pool.push(grads.batch_column_sums, grads.batch_rows);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexTrainConfig {
    /// Node counts `K_2..K_N`, nearest-to-items first.
    pub level_counts: Vec<usize>,
    pub max_alpha: f64,
    pub exp: f64,
    /// Iterations per level.
    pub max_iters: usize,
    pub flops_weight: f64,
    pub pool_batches: usize,
    pub warmup_iters: usize,
    pub index_loss_weight: f64,
    pub recon_weight: f64,
    pub model_loss_weight: f64,
    /// Positives per batch.
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    pub node_optimizer: OptimizerConfig,
    pub model_optimizer: OptimizerConfig,
    pub freeze_model: bool,
    pub zero_centroid: bool,
    /// Use finalized nodes (not soft mixtures) when passing residuals up.
    pub hard_transition: bool,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for IndexTrainConfig {
    fn default() -> Self {
        Self {
            level_counts: vec![512, 64],
            max_alpha: 100.0,
            exp: 2.0,
            max_iters: 500,
            flops_weight: 0.1,
            pool_batches: 4,
            warmup_iters: 100,
            index_loss_weight: 1.0,
            recon_weight: 1.0,
            model_loss_weight: 1.0,
            batch_size: 256,
            negatives_per_positive: 1,
            node_optimizer: OptimizerConfig { learning_rate: 0.01, ..Default::default() },
            model_optimizer: OptimizerConfig::default(),
            freeze_model: false,
            zero_centroid: false,
            hard_transition: true,
            log_every: 50,
            seed: 42,
        }
    }
}

impl IndexTrainConfig {
    /// Number of tree levels `N`, counting the item level as 1.
    pub fn levels(&self) -> usize {
        self.level_counts.len() + 1
    }

    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.level_counts.is_empty() {
            p.push("at least one index level is required (N >= 2)".to_string());
        }
        if self.level_counts.contains(&0) {
            p.push("every level node count must be >= 1".to_string());
        }
        if !(self.max_alpha.is_finite() && self.max_alpha > 0.0) {
            p.push(format!("max_alpha {} must be > 0", self.max_alpha));
        }
        if !(self.exp.is_finite() && self.exp > 0.0) {
            p.push(format!("exp {} must be > 0", self.exp));
        }
        if self.max_iters == 0 {
            p.push("max_iters must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            p.push("batch_size must be >= 1".to_string());
        }
        for (name, w) in [
            ("flops_weight", self.flops_weight),
            ("index_loss_weight", self.index_loss_weight),
            ("recon_weight", self.recon_weight),
            ("model_loss_weight", self.model_loss_weight),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                p.push(format!("{name} {w} must be finite and >= 0"));
            }
        }
        p
    }
}

/// All finalized levels and the residual state after the top one.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy<T> {
    pub codebooks: Vec<LevelCodebook<T>>,
    pub state: ResidualState<T>,
    /// `L_recon` after each level.
    pub level_recon: Vec<f64>,
    pub recon_loss: f64,
}

/// Initial nodes: residuals of distinct randomly chosen items. Levels with
/// more nodes than items reuse items cyclically; the duplicates stay empty.
fn init_nodes<T: Scalar>(residuals: &Matrix<T>, k: usize, seed: u64) -> Matrix<T> {
    let m = residuals.rows();
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(&mut rng::stream(seed, tags::INDEX_INIT));
    let mut nodes = Matrix::zeros(0, residuals.cols());
    for i in 0..k {
        nodes.push_row(residuals.row(perm[i % m])).expect("same width");
    }
    nodes
}

/// Trains the node embeddings of one level on the current residuals.
pub fn train_level<T: Scalar>(
    model: &mut TwoTowerModel<T>,
    dataset: &InteractionDataset,
    state: &ResidualState<T>,
    level: usize,
    num_nodes: usize,
    cfg: &IndexTrainConfig,
    sink: &mut dyn ProgressSink,
) -> Result<Matrix<T>> {
    let level_seed = rng::derive_seed(cfg.seed, level as u64);
    if num_nodes > state.residuals.rows() {
        warn!("level {level}: {num_nodes} nodes for {} items, empty nodes expected", state.residuals.rows());
    }
    let nodes = init_nodes(&state.residuals, num_nodes, level_seed);
    let mut trainer = JointTrainer::new(
        model,
        nodes,
        cfg.node_optimizer.clone(),
        cfg.model_optimizer.clone(),
        cfg.pool_batches,
        cfg.freeze_model,
    );
    let batch_seed = rng::derive_seed(level_seed, tags::INDEX_BATCHES);
    let mut epoch = 0u64;
    let mut batches = dataset.epoch_batches(cfg.batch_size, cfg.negatives_per_positive, batch_seed, epoch)?;
    for iter in 1..=cfg.max_iters {
        let batch = match batches.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                batches = dataset.epoch_batches(cfg.batch_size, cfg.negatives_per_positive, batch_seed, epoch)?;
                batches.next().ok_or_else(|| HillError::Empty("no training interactions for index learning".into()))?
            }
        };
        let alpha = temperature(iter, cfg);
        let weights = JointWeights {
            index_loss: warmup_weight(iter, cfg.warmup_iters, cfg.index_loss_weight),
            recon: cfg.recon_weight,
            model_loss: if cfg.freeze_model { 0.0 } else { cfg.model_loss_weight },
            flops: cfg.flops_weight,
        };
        let report =
            joint_train_step(model, &mut trainer, &state.cumulative, &batch, alpha, &weights).map_err(|e| match e {
                HillError::Divergence(msg) => HillError::Divergence(format!("level {level} iter {iter}: {msg}")),
                other => other,
            })?;
        if iter == cfg.max_iters || (cfg.log_every > 0 && iter % cfg.log_every == 0) {
            sink.record(&ProgressRecord {
                level,
                iter,
                alpha,
                index_loss: report.index_loss,
                flops_penalty: report.flops_penalty,
                recon_loss: report.recon_loss,
                round: None,
                inertia: None,
            });
        }
    }
    Ok(trainer.nodes)
}

/// Builds levels `2..=N` bottom-up: each level is trained on the residuals
/// left by the levels below it, finalized, and its contribution subtracted.
pub fn build_hierarchy<T: Scalar>(
    model: &mut TwoTowerModel<T>,
    dataset: &InteractionDataset,
    cfg: &IndexTrainConfig,
    sink: &mut dyn ProgressSink,
) -> Result<Hierarchy<T>> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(HillError::InvalidConfig(problems));
    }
    if model.num_items() == 0 {
        return Err(HillError::Empty("model has no items to index".into()));
    }
    let mut state = ResidualState::initial(&model.item_embeddings());
    let mut codebooks = Vec::with_capacity(cfg.level_counts.len());
    let mut level_recon = Vec::with_capacity(cfg.level_counts.len());
    for (idx, &k) in cfg.level_counts.iter().enumerate() {
        let level = idx + 2;
        let nodes = train_level(model, dataset, &state, level, k, cfg, sink)?;
        if !cfg.freeze_model {
            state.rebase(&model.item_embeddings())?;
        }
        let cb = finalize(nodes, &state.residuals, level, cfg.zero_centroid)?;
        let mode = if cfg.hard_transition { ResidualMode::Hard } else { ResidualMode::Soft { alpha: cfg.max_alpha } };
        state = residual_step(&state, &cb, mode)?;
        let recon: f64 = state.residuals.iter_rows().map(|r| dot(r, r).as_f64()).sum();
        debug!("level {level}: {} of {} nodes used, L_recon {recon:.6}", cb.non_empty_nodes(), cb.num_nodes());
        level_recon.push(recon);
        codebooks.push(cb);
    }
    let recon_loss = *level_recon.last().expect("at least one level");
    Ok(Hierarchy { codebooks, state, level_recon, recon_loss })
}
