mod common;

use hill_core::data::{InteractionDataset, TrainingExample};
use hill_core::hill::{
    affinity, build_hierarchy, finalize, flops_penalty, joint_train_step, reconstruction_loss, residual_step,
    temperature_at, IndexTrainConfig, JointTrainer, JointWeights, ResidualMode, ResidualState,
};
use hill_core::linalg::{sq_dist, Matrix};
use hill_core::model::{ModelConfig, OptimizerConfig, TwoTowerModel};
use hill_core::progress::{NullSink, ProgressRecord};
use proptest::prelude::*;

use common::{cloud, cloud_index_config, matrix, purity};

fn items_strategy(max_rows: usize, dim: usize) -> impl Strategy<Value = Matrix<f64>> {
    (1..=max_rows)
        .prop_flat_map(move |m| prop::collection::vec(-5.0f64..5.0, m * dim).prop_map(move |v| matrix(m, dim, v)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn affinity_is_a_distribution_peaked_at_the_nearest_node(
        dists in prop::collection::vec(0.0f64..50.0, 1..12),
        alpha in 0.0f64..1e3,
    ) {
        let a = affinity(&dists, alpha).unwrap();
        let total: f64 = a.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
        prop_assert!(a.iter().all(|&x| (0.0..=1.0).contains(&x)));
        if alpha > 0.0 {
            let nearest = (0..dists.len()).min_by(|&i, &j| dists[i].total_cmp(&dists[j])).unwrap();
            prop_assert!(a.iter().all(|&x| x <= a[nearest]));
        }
    }

    #[test]
    fn temperature_is_monotone_and_hits_max(
        max_iters in 1usize..500,
        max_alpha in 0.01f64..1e3,
        exp in 0.1f64..4.0,
    ) {
        let mut last = 0.0;
        for iter in 0..=max_iters {
            let t = temperature_at(iter, max_iters, max_alpha, exp);
            prop_assert!(t >= last);
            last = t;
        }
        prop_assert_eq!(temperature_at(max_iters, max_iters, max_alpha, exp), max_alpha);
    }

    #[test]
    fn flops_penalty_is_bounded_by_balance_and_collapse(
        raw in prop::collection::vec(prop::collection::vec(0.001f64..1.0, 5), 1..20),
    ) {
        let k = 5;
        let rows: Vec<Vec<f64>> = raw.iter().map(|r| { let s: f64 = r.iter().sum(); r.iter().map(|x| x / s).collect() }).collect();
        let m = Matrix::from_rows(k, &rows).unwrap();
        let p = flops_penalty(&m);
        prop_assert!(p >= 1.0 / k as f64 - 1e-12 && p <= 1.0 + 1e-12);
        let uniform = Matrix::from_vec(rows.len(), k, vec![1.0 / k as f64; rows.len() * k]).unwrap();
        prop_assert!((flops_penalty(&uniform) - 1.0 / k as f64).abs() < 1e-12);
    }

    #[test]
    fn finalize_assigns_every_item_to_its_true_nearest_node(
        items in items_strategy(30, 3),
        nodes in items_strategy(8, 3),
        zero in any::<bool>(),
    ) {
        let cb = finalize(nodes, &items, 2, zero).unwrap();
        prop_assert_eq!(cb.assignment.len(), items.rows());
        for (j, &a) in cb.assignment.iter().enumerate() {
            let da = sq_dist(items.row(j), cb.node_embeddings.row(a as usize));
            for k in 0..cb.num_nodes() {
                let dk = sq_dist(items.row(j), cb.node_embeddings.row(k));
                prop_assert!(da <= dk);
                if k < a as usize {
                    prop_assert!(da < dk, "tie not resolved to the lowest node");
                }
            }
        }
        for (k, members) in cb.members().iter().enumerate() {
            match cb.representative[k] {
                None => prop_assert!(members.is_empty()),
                Some(r) => {
                    prop_assert!(members.contains(&r));
                    let dr = sq_dist(items.row(r as usize), cb.node_embeddings.row(k));
                    for &j in members {
                        prop_assert!(dr <= sq_dist(items.row(j as usize), cb.node_embeddings.row(k)));
                    }
                }
            }
        }
    }

    #[test]
    fn cumulative_plus_residual_reconstructs_items(
        raw in prop::collection::vec(-10.0f32..10.0, 4 * 25),
        node_rows in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 4), 1..6),
        soft_alpha in 0.0f64..5.0,
        hard in any::<bool>(),
    ) {
        let items = Matrix::from_vec(25, 4, raw).unwrap();
        let mut state = ResidualState::initial(&items);
        prop_assert_eq!(&state.residuals, &items);
        for level in 2..5 {
            let nodes = Matrix::from_rows(4, &node_rows).unwrap();
            let cb = finalize(nodes, &state.residuals, level, false).unwrap();
            let mode = if hard { ResidualMode::Hard } else { ResidualMode::Soft { alpha: soft_alpha } };
            state = residual_step(&state, &cb, mode).unwrap();
            let rebuilt = state.reconstructed_items();
            for (a, b) in rebuilt.as_slice().iter().zip(items.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_centroid_levels_never_increase_reconstruction_loss(
        items in items_strategy(40, 3),
        levels in prop::collection::vec(prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..6), 1..4),
    ) {
        let mut state = ResidualState::initial(&items);
        let mut last = reconstruction_loss(&Matrix::zeros(items.rows(), 3), &items).unwrap();
        for (i, rows) in levels.iter().enumerate() {
            let cb = finalize(Matrix::from_rows(3, rows).unwrap(), &state.residuals, i + 2, true).unwrap();
            state = residual_step(&state, &cb, ResidualMode::Hard).unwrap();
            let recon = reconstruction_loss(&state.cumulative, &items).unwrap();
            prop_assert!(recon <= last * (1.0 + 1e-12) + 1e-12, "{recon} > {last}");
            last = recon;
        }
    }
}

#[test]
fn residual_arithmetic_example() {
    let items = matrix(1, 2, vec![3.0, 4.0]);
    let state = ResidualState::initial(&items);
    let cb = finalize(matrix(1, 2, vec![1.0, 1.0]), &matrix(1, 2, vec![1.0, 1.0]), 2, false).unwrap();
    let next = residual_step(&state, &cb, ResidualMode::Hard).unwrap();
    assert_eq!(next.residuals.row(0), &[2.0, 3.0]);
    assert_eq!(next.reconstructed_items().row(0), &[3.0, 4.0]);
}

#[test]
fn gaussian_cloud_is_recovered_by_joint_learning() {
    for seed in 0..3 {
        let c = cloud(seed);
        let h = build_hierarchy(&mut c.model.clone(), &c.dataset, &cloud_index_config(seed), &mut NullSink).unwrap();
        let p = purity(&h.codebooks[0].assignment, &c.labels);
        assert!(p >= 0.95, "seed {seed}: purity {p}");
    }
}

#[test]
fn saturated_level_reconstructs_exactly() {
    let c = cloud(4);
    let cfg = IndexTrainConfig {
        level_counts: vec![300],
        max_iters: 20,
        node_optimizer: OptimizerConfig { learning_rate: 1e-4, ..Default::default() },
        ..cloud_index_config(4)
    };
    let h = build_hierarchy(&mut c.model.clone(), &c.dataset, &cfg, &mut NullSink).unwrap();
    assert_eq!(h.recon_loss, 0.0);
    assert_eq!(h.codebooks[0].non_empty_nodes(), 300);
}

#[test]
fn third_level_with_zero_centroid_does_not_increase_reconstruction_loss() {
    let c = cloud(5);
    let two = IndexTrainConfig { level_counts: vec![6], zero_centroid: true, ..cloud_index_config(5) };
    let three = IndexTrainConfig { level_counts: vec![6, 3], ..two.clone() };
    let h2 = build_hierarchy(&mut c.model.clone(), &c.dataset, &two, &mut NullSink).unwrap();
    let h3 = build_hierarchy(&mut c.model.clone(), &c.dataset, &three, &mut NullSink).unwrap();
    assert_eq!(h2.codebooks[0], h3.codebooks[0]);
    assert!(h3.recon_loss <= h2.recon_loss, "{} > {}", h3.recon_loss, h2.recon_loss);
    assert!(h3.level_recon.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn build_hierarchy_is_deterministic_and_reports_progress() {
    let c = cloud(6);
    let cfg = IndexTrainConfig { level_counts: vec![5, 2], log_every: 50, ..cloud_index_config(6) };
    let mut records: Vec<ProgressRecord> = Vec::new();
    let mut sink = |r: &ProgressRecord| records.push(r.clone());
    let a = build_hierarchy(&mut c.model.clone(), &c.dataset, &cfg, &mut sink).unwrap();
    let b = build_hierarchy(&mut c.model.clone(), &c.dataset, &cfg, &mut NullSink).unwrap();
    assert_eq!(a, b);
    assert_eq!(records.len(), 2 * 6);
    assert!(records.iter().all(|r| r.alpha <= cfg.max_alpha && r.flops_penalty <= 1.0 + 1e-12));
    assert_eq!(records.last().unwrap().alpha, cfg.max_alpha);
}

#[test]
fn co_training_updates_the_model_and_keeps_the_identity() {
    let c = cloud(7);
    let cfg = IndexTrainConfig { freeze_model: false, max_iters: 60, ..cloud_index_config(7) };
    let mut model = c.model.clone();
    let h = build_hierarchy(&mut model, &c.dataset, &cfg, &mut NullSink).unwrap();
    assert_ne!(model, c.model);
    let v = model.item_embeddings();
    let rebuilt = h.state.reconstructed_items();
    for (a, b) in rebuilt.as_slice().iter().zip(v.as_slice()) {
        assert!((a - b).abs() <= 1e-9);
    }
}

fn one_pair() -> (TwoTowerModel<f64>, InteractionDataset, Vec<TrainingExample>) {
    let mut model = TwoTowerModel::<f64>::new(1, 1, ModelConfig { dim: 4, ..Default::default() }).unwrap();
    model.user_table = matrix(1, 4, vec![1.0, 0.5, -0.5, 0.25]);
    model.item_table = matrix(1, 4, vec![0.3, -0.2, 0.1, 0.4]);
    let ds = InteractionDataset::new(1, 1, vec![vec![0]], vec![]).unwrap();
    (model, ds, vec![TrainingExample::positive(0, 0)])
}

#[test]
fn zero_index_and_flops_weights_leave_nodes_untouched() {
    let (mut model, _, batch) = one_pair();
    let nodes = matrix(2, 4, vec![0.1, 0.2, 0.3, 0.4, -0.1, 0.0, 0.5, 0.2]);
    let q = Matrix::zeros(1, 4);
    let mut trainer =
        JointTrainer::new(&model, nodes.clone(), OptimizerConfig::default(), OptimizerConfig::default(), 4, false);
    let w = JointWeights { index_loss: 0.0, recon: 1.0, model_loss: 1.0, flops: 0.0 };
    for _ in 0..10 {
        joint_train_step(&mut model, &mut trainer, &q, &batch, 1.0, &w).unwrap();
    }
    assert_eq!(trainer.nodes, nodes);
}

#[test]
fn single_node_loss_decreases_while_its_score_rises() {
    let (mut model, _, batch) = one_pair();
    let q = Matrix::zeros(1, 4);
    let node_opt = OptimizerConfig { learning_rate: 0.01, ..Default::default() };
    let mut trainer = JointTrainer::new(&model, Matrix::zeros(1, 4), node_opt, OptimizerConfig::default(), 1, true);
    let w = JointWeights { index_loss: 1.0, recon: 0.0, model_loss: 0.0, flops: 0.0 };
    let user = model.user_table.row(0).to_vec();
    let mut last_loss = f64::INFINITY;
    let mut last_score = f64::NEG_INFINITY;
    for step in 0..50 {
        let r = joint_train_step(&mut model, &mut trainer, &q, &batch, 1.0, &w).unwrap();
        let score: f64 = user.iter().zip(trainer.nodes.row(0)).map(|(a, b)| a * b).sum();
        assert!(r.loss < last_loss, "step {step}: {} !< {last_loss}", r.loss);
        assert!(score > last_score);
        last_loss = r.loss;
        last_score = score;
    }
}

#[test]
fn invalid_index_config_lists_every_problem() {
    let cfg =
        IndexTrainConfig { level_counts: vec![0], max_alpha: 0.0, exp: -1.0, batch_size: 0, ..Default::default() };
    assert_eq!(cfg.validate().len(), 4);
    let c = cloud(0);
    assert!(build_hierarchy(&mut c.model.clone(), &c.dataset, &cfg, &mut NullSink).is_err());
}
