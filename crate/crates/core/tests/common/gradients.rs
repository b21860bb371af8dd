//! Analytic gradients against central finite differences on ten sampled
//! parameters per objective.

use hill_core::data::TrainingExample;
use hill_core::hill::{joint_loss_and_gradients, AffinityPool, JointWeights};
use hill_core::linalg::Matrix;
use hill_core::model::{ItemSide, ModelConfig, ParamRef, TwoTowerModel, WeightedExample};
use hill_core::rng;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn model(hidden: usize, seed: u64) -> TwoTowerModel<f64> {
    TwoTowerModel::new(4, 6, ModelConfig { dim: 5, hidden, init_std: 0.5, seed, ..Default::default() }).unwrap()
}

/// Parameters the batch touches: rows of the users and items involved, and
/// every tower weight.
fn candidate_params(m: &TwoTowerModel<f64>, users: &[u32], items: &[u32]) -> Vec<ParamRef> {
    let mut out = Vec::new();
    for &row in users {
        out.extend((0..m.dim()).map(|col| ParamRef::User { row, col }));
    }
    for &row in items {
        out.extend((0..m.dim()).map(|col| ParamRef::Item { row, col }));
    }
    if let Some(sizes) = m.mlp_tensor_sizes() {
        for (tensor, &n) in sizes.iter().enumerate() {
            out.extend((0..n).map(|index| ParamRef::UserMlp { tensor, index }));
            out.extend((0..n).map(|index| ParamRef::ItemMlp { tensor, index }));
        }
    }
    out
}

fn sample<T: Copy>(pool: &[T], n: usize, seed: u64) -> Vec<T> {
    let mut rng = rng::stream(seed, 500);
    (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

/// Largest relative error over ten sampled parameters of the model loss.
pub fn check_model_loss(hidden: usize, seed: u64) -> f64 {
    let mut m = model(hidden, seed);
    let fixed = vec![0.3, -0.2, 0.5, 0.1, -0.4];
    let examples = vec![
        WeightedExample { user: 0, item: ItemSide::Item(1), label: 1.0, weight: 1.0, soft_label: Some(0.7) },
        WeightedExample { user: 0, item: ItemSide::Item(3), label: 0.0, weight: 1.0, soft_label: Some(0.2) },
        WeightedExample { user: 2, item: ItemSide::Item(1), label: 1.0, weight: 2.0, soft_label: None },
        WeightedExample { user: 3, item: ItemSide::Item(5), label: 0.0, weight: 0.5, soft_label: Some(0.4) },
        WeightedExample { user: 2, item: ItemSide::Fixed(&fixed), label: 1.0, weight: 1.0, soft_label: None },
    ];
    let (norm, unsup) = (5.0, 0.6);
    let (_, grads) = m.loss_and_gradients(&examples, norm, unsup).unwrap();
    let mut worst: f64 = 0.0;
    for p in sample(&candidate_params(&m, &[0, 2, 3], &[1, 3, 5]), 10, seed) {
        let x = m.param(p);
        m.set_param(p, x + STEP);
        let up = m.loss(&examples, norm, unsup).unwrap();
        m.set_param(p, x - STEP);
        let down = m.loss(&examples, norm, unsup).unwrap();
        m.set_param(p, x);
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(grads.get(p), numeric));
    }
    worst
}

#[derive(Clone, Copy, Debug)]
enum JointParam {
    Model(ParamRef),
    Node(usize, usize),
}

/// Largest relative error over ten sampled parameters (model and nodes) of
/// the joint index-training objective.
pub fn check_joint_step(hidden: usize, seed: u64) -> f64 {
    let mut m = model(hidden, seed);
    let normal = Normal::new(0.0, 0.5).unwrap();
    let mut r = rng::stream(seed, 501);
    let k = 4;
    let mut nodes = Matrix::from_vec(k, 5, (0..k * 5).map(|_| normal.sample(&mut r)).collect()).unwrap();
    let cumulative = Matrix::from_vec(6, 5, (0..30).map(|_| 0.3 * normal.sample(&mut r)).collect()).unwrap();
    let batch = vec![
        TrainingExample::positive(0, 1),
        TrainingExample::negative(0, 4),
        TrainingExample::positive(1, 2),
        TrainingExample::positive(3, 1),
        TrainingExample::negative(3, 0),
    ];
    let mut pool = AffinityPool::new(3);
    pool.push(vec![0.5, 1.5, 0.25, 0.75], 3);
    let weights = JointWeights { index_loss: 0.8, recon: 0.5, model_loss: 0.7, flops: 0.3 };
    let alpha = 1.3;
    let loss = |m: &TwoTowerModel<f64>, nodes: &Matrix<f64>| {
        joint_loss_and_gradients(m, nodes, &cumulative, &batch, alpha, &weights, &pool).unwrap().0.loss
    };
    let (_, grads) = joint_loss_and_gradients(&m, &nodes, &cumulative, &batch, alpha, &weights, &pool).unwrap();

    let mut candidates: Vec<JointParam> =
        candidate_params(&m, &[0, 1, 3], &[0, 1, 2, 4]).into_iter().map(JointParam::Model).collect();
    for n in 0..k {
        candidates.extend((0..5).map(|c| JointParam::Node(n, c)));
    }
    let mut picked = sample(&candidates, 8, seed);
    picked.extend(sample(&(0..k * 5).map(|i| JointParam::Node(i / 5, i % 5)).collect::<Vec<_>>(), 2, seed + 1));
    let mut worst: f64 = 0.0;
    for p in picked {
        let (analytic, numeric) = match p {
            JointParam::Model(p) => {
                let x = m.param(p);
                m.set_param(p, x + STEP);
                let up = loss(&m, &nodes);
                m.set_param(p, x - STEP);
                let down = loss(&m, &nodes);
                m.set_param(p, x);
                (grads.model.get(p), (up - down) / (2.0 * STEP))
            }
            JointParam::Node(n, c) => {
                let x = nodes.row(n)[c];
                nodes.row_mut(n)[c] = x + STEP;
                let up = loss(&m, &nodes);
                nodes.row_mut(n)[c] = x - STEP;
                let down = loss(&m, &nodes);
                nodes.row_mut(n)[c] = x;
                (grads.nodes.row(n)[c], (up - down) / (2.0 * STEP))
            }
        };
        worst = worst.max(relative_error(analytic, numeric));
    }
    worst
}
