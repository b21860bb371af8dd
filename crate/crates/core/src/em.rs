//! Expectation-maximization index building: residual k-means for the
//! E-step, model refitting against level-2 nodes for the M-step.

use log::{debug, info};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::error::{HillError, Result};
use crate::hill::{finalize, residual_step, Hierarchy, LevelCodebook, ResidualMode, ResidualState};
use crate::linalg::{dot, Matrix};
use crate::model::{train_with, ItemSide, TrainConfig, TrainingReport, TwoTowerModel, WeightedExample};
use crate::progress::{ProgressRecord, ProgressSink};
use crate::rng::{self, tags};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult<T> {
    pub centroids: Matrix<T>,
    pub assignment: Vec<u32>,
    /// Inertia after each assignment pass, first entry from the seeding.
    pub inertia_trace: Vec<f64>,
}

impl<T> KMeansResult<T> {
    pub fn inertia(&self) -> f64 {
        self.inertia_trace.last().copied().unwrap_or(0.0)
    }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest64(x: &[f64], centroids: &[Vec<f64>]) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq(x, c);
        if d < best.1 {
            best = (k as u32, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let m = points.len();
    let mut centroids = vec![points[rng.random_range(0..m)].clone()];
    let mut dist: Vec<f64> = points.par_iter().map(|p| sq(p, &centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&dist) {
            Ok(w) => w.sample(rng),
            // every point already coincides with a centroid
            Err(_) => rng.random_range(0..m),
        };
        let c = points[next].clone();
        dist.par_iter_mut().zip(points.par_iter()).for_each(|(d, p)| *d = d.min(sq(p, &c)));
        centroids.push(c);
    }
    centroids
}

/// Lloyd's algorithm from a k-means++ seeding. Computation runs in `f64`;
/// empty clusters are re-seeded at the point farthest from its centroid.
/// Stops early once assignments are stable.
pub fn kmeans_fit<T: Scalar>(vectors: &Matrix<T>, k: usize, iters: usize, seed: u64) -> Result<KMeansResult<T>> {
    let m = vectors.rows();
    if m == 0 {
        return Err(HillError::Empty("k-means over zero vectors".into()));
    }
    if k == 0 {
        return Err(HillError::config("k-means needs k >= 1"));
    }
    let d = vectors.cols();
    let points: Vec<Vec<f64>> = vectors.iter_rows().map(|r| r.iter().map(|x| x.as_f64()).collect()).collect();
    let mut rng = rng::stream(seed, tags::KMEANS);
    let mut centroids = kmeans_pp(&points, k, &mut rng);

    let assign =
        |centroids: &[Vec<f64>]| -> Vec<(u32, f64)> { points.par_iter().map(|p| nearest64(p, centroids)).collect() };
    let mut current = assign(&centroids);
    let mut trace = vec![current.iter().map(|x| x.1).sum::<f64>()];
    for it in 0..iters {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &(c, _)) in points.iter().zip(&current) {
            counts[c as usize] += 1;
            for (s, x) in sums[c as usize].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut taken = vec![false; m];
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                centroids[c] = sums[c].iter().map(|s| s / n).collect();
            } else {
                let far = (0..m).filter(|&j| !taken[j]).fold(None::<(usize, f64)>, |best, j| match best {
                    Some((_, bd)) if current[j].1 <= bd => best,
                    _ => Some((j, current[j].1)),
                });
                if let Some((j, _)) = far {
                    taken[j] = true;
                    centroids[c] = points[j].clone();
                }
            }
        }
        let next = assign(&centroids);
        let changed = next.iter().zip(&current).any(|(a, b)| a.0 != b.0);
        trace.push(next.iter().map(|x| x.1).sum::<f64>());
        current = next;
        if !changed {
            debug!("k-means converged after {} iterations", it + 1);
            break;
        }
    }
    let flat: Vec<T> = centroids.iter().flatten().map(|&x| T::lit(x)).collect();
    Ok(KMeansResult {
        centroids: Matrix::from_vec(k, d, flat)?,
        assignment: current.into_iter().map(|x| x.0).collect(),
        inertia_trace: trace,
    })
}

/// k-means over the given vectors followed by medoid-snapping finalization.
pub fn e_step<T: Scalar>(
    vectors: &Matrix<T>,
    level: usize,
    k: usize,
    iters: usize,
    seed: u64,
    zero_centroid: bool,
) -> Result<(LevelCodebook<T>, KMeansResult<T>)> {
    let km = kmeans_fit(vectors, k, iters, seed)?;
    let cb = finalize(km.centroids.clone(), vectors, level, zero_centroid)?;
    Ok((cb, km))
}

/// Trains `model` with each positive `(u, j)` accompanied by the pair
/// `(u, c_{assignment[j]})` at `aug_weight`, the level-2 node embedding
/// acting as a frozen item side. Normalization counts primary examples only.
pub fn m_step<T: Scalar>(
    model: &mut TwoTowerModel<T>,
    dataset: &InteractionDataset,
    level2: &LevelCodebook<T>,
    config: &TrainConfig,
    aug_weight: f64,
) -> Result<TrainingReport> {
    if !level2.finalized {
        return Err(HillError::Unfinalized { level: level2.level });
    }
    if level2.assignment.len() < dataset.num_items() {
        return Err(HillError::DimensionMismatch { expected: dataset.num_items(), actual: level2.assignment.len() });
    }
    let w = T::lit(aug_weight);
    train_with(model, dataset, config, None, |ex, out| {
        if aug_weight != 0.0 && ex.label == 1 {
            let node = level2.assignment[ex.item as usize] as usize;
            out.push(WeightedExample {
                user: ex.user,
                item: ItemSide::Fixed(level2.node_embeddings.row(node)),
                label: T::one(),
                weight: w,
                soft_label: None,
            });
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub rounds: usize,
    pub kmeans_iters: usize,
    /// Node counts `K_2..K_N`, nearest-to-items first.
    pub level_counts: Vec<usize>,
    pub m_step_epochs: usize,
    pub aug_weight: f64,
    pub train: TrainConfig,
    pub freeze_model: bool,
    pub include_zero_centroid: bool,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            rounds: 1,
            kmeans_iters: 25,
            level_counts: vec![512, 64],
            m_step_epochs: 1,
            aug_weight: 1.0,
            train: TrainConfig { epochs: 1, ..Default::default() },
            freeze_model: false,
            include_zero_centroid: true,
            seed: 42,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.rounds == 0 {
            p.push("rounds must be >= 1".to_string());
        }
        if self.kmeans_iters == 0 {
            p.push("kmeans_iters must be >= 1".to_string());
        }
        if self.level_counts.is_empty() {
            p.push("at least one index level is required (N >= 2)".to_string());
        }
        if self.level_counts.contains(&0) {
            p.push("every level node count must be >= 1".to_string());
        }
        if !(self.aug_weight.is_finite() && self.aug_weight >= 0.0) {
            p.push(format!("aug_weight {} must be finite and >= 0", self.aug_weight));
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmResult<T> {
    pub hierarchy: Hierarchy<T>,
    /// `L_recon` at the end of each round's E-step.
    pub recon_trace: Vec<f64>,
}

fn quantize<T: Scalar>(
    items: &Matrix<T>,
    cfg: &EmConfig,
    round: usize,
    sink: &mut dyn ProgressSink,
) -> Result<Hierarchy<T>> {
    let mut state = ResidualState::initial(items);
    let mut codebooks = Vec::with_capacity(cfg.level_counts.len());
    let mut level_recon = Vec::with_capacity(cfg.level_counts.len());
    for (idx, &k) in cfg.level_counts.iter().enumerate() {
        let level = idx + 2;
        let seed = rng::derive_seed(cfg.seed, level as u64);
        let (cb, km) = e_step(&state.residuals, level, k, cfg.kmeans_iters, seed, cfg.include_zero_centroid)?;
        state = residual_step(&state, &cb, ResidualMode::Hard)?;
        let recon: f64 = state.residuals.iter_rows().map(|r| dot(r, r).as_f64()).sum();
        let mut counts = vec![0usize; cb.num_nodes()];
        for &a in &cb.assignment {
            counts[a as usize] += 1;
        }
        let m = cb.assignment.len() as f64;
        sink.record(&ProgressRecord {
            level,
            iter: km.inertia_trace.len() - 1,
            alpha: 0.0,
            index_loss: 0.0,
            flops_penalty: counts.iter().map(|&c| (c as f64 / m).powi(2)).sum(),
            recon_loss: recon,
            round: Some(round),
            inertia: Some(km.inertia()),
        });
        level_recon.push(recon);
        codebooks.push(cb);
    }
    let recon_loss = *level_recon.last().expect("validated levels");
    Ok(Hierarchy { codebooks, state, level_recon, recon_loss })
}

/// Alternates residual k-means over the current item embeddings with
/// M-steps. The last round ends after its E-step so the returned codebooks
/// match the returned model. Each level uses the same seed in every round.
pub fn em_build<T: Scalar>(
    model: &mut TwoTowerModel<T>,
    dataset: &InteractionDataset,
    cfg: &EmConfig,
    sink: &mut dyn ProgressSink,
) -> Result<EmResult<T>> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(HillError::InvalidConfig(problems));
    }
    if model.num_items() == 0 {
        return Err(HillError::Empty("model has no items to index".into()));
    }
    let mut recon_trace = Vec::with_capacity(cfg.rounds);
    let mut hierarchy = None;
    for round in 0..cfg.rounds {
        let h = quantize(&model.item_embeddings(), cfg, round, sink)?;
        info!("EM round {round}: L_recon {:.6}", h.recon_loss);
        recon_trace.push(h.recon_loss);
        let last = round + 1 == cfg.rounds;
        if !last && !cfg.freeze_model && cfg.m_step_epochs > 0 {
            let train = TrainConfig { epochs: cfg.m_step_epochs, ..cfg.train.clone() };
            m_step(model, dataset, &h.codebooks[0], &train, cfg.aug_weight)?;
        }
        hierarchy = Some(h);
    }
    Ok(EmResult { hierarchy: hierarchy.expect("rounds >= 1"), recon_trace })
}
