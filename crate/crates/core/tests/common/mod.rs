#![allow(dead_code)]

pub mod gradients;
pub mod oracles;

use hill_core::data::InteractionDataset;
use hill_core::em::e_step;
use hill_core::hill::{residual_step, IndexTrainConfig, ResidualMode, ResidualState};
use hill_core::linalg::Matrix;
use hill_core::model::{ModelConfig, OptimizerConfig, TwoTowerModel};
use hill_core::synthetic::gaussian_cloud;
use hill_core::tree::{assemble, HierarchicalIndex};

/// 3-Gaussian cloud (300 items, d = 8) as the item table of a frozen model
/// whose user `j` interacted with item `j` only.
pub struct Cloud {
    pub model: TwoTowerModel<f64>,
    pub dataset: InteractionDataset,
    pub labels: Vec<u32>,
}

pub fn cloud(seed: u64) -> Cloud {
    let (x, labels) = gaussian_cloud(3, 100, 8, 6.0, 1.0, seed);
    let n = x.rows();
    let mut model = TwoTowerModel::<f64>::new(n, n, ModelConfig { dim: 8, ..Default::default() }).unwrap();
    model.user_table = x.map(|v| v * 0.2);
    model.item_table = x;
    let dataset = InteractionDataset::new(n, n, (0..n as u32).map(|j| vec![j]).collect(), vec![]).unwrap();
    Cloud { model, dataset, labels }
}

pub fn cloud_index_config(seed: u64) -> IndexTrainConfig {
    IndexTrainConfig {
        level_counts: vec![3],
        max_alpha: 2.0,
        max_iters: 300,
        batch_size: 64,
        warmup_iters: 20,
        node_optimizer: OptimizerConfig { learning_rate: 0.05, ..Default::default() },
        freeze_model: true,
        seed,
        ..Default::default()
    }
}

/// Share of items whose node's majority label matches their own label.
pub fn purity(assignment: &[u32], labels: &[u32]) -> f64 {
    let nodes = assignment.iter().copied().max().map_or(0, |m| m as usize + 1);
    let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut counts = vec![vec![0usize; classes]; nodes];
    for (&a, &l) in assignment.iter().zip(labels) {
        counts[a as usize][l as usize] += 1;
    }
    let majority: usize = counts.iter().map(|c| c.iter().copied().max().unwrap_or(0)).sum();
    majority as f64 / assignment.len() as f64
}

/// Rand index between two partitions: share of item pairs on which both
/// agree about being together or apart.
pub fn pair_agreement(a: &[u32], b: &[u32]) -> f64 {
    let (mut agree, mut total) = (0u64, 0u64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            total += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        agree as f64 / total as f64
    }
}

/// Residual k-means levels over `items`, assembled into a tree.
pub fn quantized_index(items: &Matrix<f64>, counts: &[usize], seed: u64) -> HierarchicalIndex<f64> {
    let mut state = ResidualState::initial(items);
    let mut codebooks = Vec::new();
    for (i, &k) in counts.iter().enumerate() {
        let (cb, _) = e_step(&state.residuals, i + 2, k, 20, seed + i as u64, false).unwrap();
        state = residual_step(&state, &cb, ResidualMode::Hard).unwrap();
        codebooks.push(cb);
    }
    assemble(&codebooks, items).unwrap()
}

pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, data).unwrap()
}
