mod common;

use hill_core::data::InteractionDataset;
use hill_core::hill::LevelCodebook;
use hill_core::linalg::{dot, Matrix};
use hill_core::model::{FinetuneConfig, ModelConfig, NodeEmbeddings, OptimizerConfig, TwoTowerModel};
use hill_core::tree::{assemble, HierarchicalIndex};
use hill_core::ttt::{extract_pairs, extract_pairs_from, interest_set, run_ttt, EvalMode, TttConfig};
use proptest::prelude::*;

use common::{matrix, quantized_index};

/// Items 0..5 under level-2 node 0, items 5..8 under node 1, both under one
/// level-3 node. The two groups point in different directions.
fn small_tree() -> HierarchicalIndex<f64> {
    let items = matrix(8, 2, (0..8).flat_map(|j| if j < 5 { [1.0, 0.1 * j as f64] } else { [-0.5, 1.0] }).collect());
    let mut l2 = LevelCodebook::unfinalized(2, Matrix::zeros(2, 2));
    l2.assignment = vec![0, 0, 0, 0, 0, 1, 1, 1];
    l2.representative = vec![Some(0), Some(5)];
    l2.finalized = true;
    let mut l3 = LevelCodebook::unfinalized(3, Matrix::zeros(1, 2));
    l3.assignment = vec![0; 8];
    l3.representative = vec![Some(0)];
    l3.finalized = true;
    assemble(&[l2, l3], &items).unwrap()
}

fn dataset(train: Vec<Vec<u32>>, items: usize) -> InteractionDataset {
    InteractionDataset::new(train.len(), items, train, vec![]).unwrap()
}

#[test]
fn interest_set_examples() {
    let t = small_tree();
    let ds = dataset(vec![vec![], vec![0, 1, 2, 3, 4], vec![0, 1, 2, 3, 6]], 8);
    for level in 1..=3 {
        assert!(interest_set(&ds, &t, 0, level, &[0.0, 0.0]).unwrap().is_empty());
    }
    assert_eq!(interest_set(&ds, &t, 1, 2, &[0.8]).unwrap(), vec![0]);
    assert_eq!(interest_set(&ds, &t, 2, 2, &[0.8]).unwrap(), vec![0]);
    assert!(interest_set(&ds, &t, 2, 2, &[0.81]).unwrap().is_empty());
    assert_eq!(interest_set(&ds, &t, 2, 2, &[0.3]).unwrap(), vec![0, 1]);
    assert!(interest_set(&ds, &t, 1, 4, &[0.0, 0.0]).is_err());

    let pairs = extract_pairs(&ds, &t, &TttConfig { depth: 1, thresholds: vec![0.8] }).unwrap();
    assert_eq!(pairs.keys(), vec![(1, 2, 0), (2, 2, 0)]);
    assert_eq!(pairs.as_slice()[1].interest_rate, 0.8);
}

#[test]
fn depth_reaching_the_root_is_a_config_error() {
    let t = small_tree();
    let ds = dataset(vec![vec![0]], 8);
    assert!(extract_pairs(&ds, &t, &TttConfig { depth: 2, thresholds: vec![0.5, 0.5] }).is_err());
}

#[test]
fn unit_thresholds_on_scattered_interests_find_nothing() {
    let t = small_tree();
    let ds = dataset(vec![vec![0, 5], vec![1, 6], vec![2]], 8);
    let pairs = extract_pairs(&ds, &t, &TttConfig { depth: 1, thresholds: vec![1.0] }).unwrap();
    assert!(pairs.is_empty());
}

#[test]
fn no_pairs_leave_metrics_unchanged() {
    let t = small_tree();
    let ds = InteractionDataset::new(2, 8, vec![vec![0, 5], vec![1, 6]], vec![vec![2], vec![7]]).unwrap();
    let mut model = TwoTowerModel::<f64>::new(2, 8, ModelConfig { dim: 2, ..Default::default() }).unwrap();
    model.item_table = t.items.clone();
    let before = model.clone();
    let cfg = TttConfig { depth: 1, thresholds: vec![1.0] };
    let (report, pairs) = run_ttt(&mut model, &ds, &t, &cfg, &FinetuneConfig::default(), 3, EvalMode::Flat).unwrap();
    assert!(pairs.is_empty());
    assert_eq!(report.recall_before, report.recall_after);
    assert_eq!(report.ndcg_before, report.ndcg_after);
    assert_eq!(model, before);
}

#[test]
fn fine_tuning_raises_the_score_of_a_filled_node() {
    let t = small_tree();
    let ds = InteractionDataset::new(1, 8, vec![vec![0, 1, 2, 3, 4]], vec![vec![5]]).unwrap();
    let mut model = TwoTowerModel::<f64>::new(1, 8, ModelConfig { dim: 2, ..Default::default() }).unwrap();
    model.item_table = t.items.clone();
    let node = t.node_embedding(2, 0).unwrap().to_vec();
    let before = dot(model.user_table.row(0), &node);
    let cfg = TttConfig { depth: 1, thresholds: vec![0.8] };
    let ft = FinetuneConfig {
        epochs: 20,
        optimizer: OptimizerConfig { learning_rate: 0.01, ..Default::default() },
        ..Default::default()
    };
    let (report, pairs) = run_ttt(&mut model, &ds, &t, &cfg, &ft, 3, EvalMode::Beam(2)).unwrap();
    assert_eq!(pairs.len(), 1);
    assert_eq!(report.pairs_extracted, 1);
    assert!(dot(model.user_table.row(0), &node) > before);
    assert_eq!(model.item_table, t.items);
}

fn corpus() -> impl Strategy<Value = (HierarchicalIndex<f64>, Vec<Vec<u32>>)> {
    (20usize..60, any::<u64>()).prop_flat_map(|(m, seed)| {
        (
            prop::collection::vec(-3.0f64..3.0, m * 2)
                .prop_map(move |v| quantized_index(&matrix(m, 2, v), &[8, 4, 2], seed)),
            prop::collection::vec(prop::collection::btree_set(0..m as u32, 0..12), 1..15)
                .prop_map(|sets| sets.into_iter().map(|s| s.into_iter().collect()).collect()),
        )
    })
}

fn thresholds() -> impl Strategy<Value = (f64, f64)> {
    (0.0f64..=1.0, 0.0f64..=1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn raising_thresholds_never_adds_pairs((t, seeds) in corpus(), (a, b) in thresholds(), (da, db) in thresholds()) {
        let low = TttConfig { depth: 2, thresholds: vec![a, b] };
        let high = TttConfig { depth: 2, thresholds: vec![(a + da).min(1.0), (b + db).min(1.0)] };
        let lo = extract_pairs_from(&t, &seeds, &low).unwrap();
        let hi = extract_pairs_from(&t, &seeds, &high).unwrap();
        prop_assert!(hi.is_subset_of(&lo));
        for p in lo.iter() {
            prop_assert!((0.0..=1.0).contains(&p.interest_rate));
            prop_assert!(p.interest_rate >= low.thresholds[p.level - 2]);
            prop_assert!(p.level < t.num_levels());
        }
    }

    #[test]
    fn shallower_depth_is_a_subset((t, seeds) in corpus(), (a, b) in thresholds()) {
        let one = extract_pairs_from(&t, &seeds, &TttConfig { depth: 1, thresholds: vec![a] }).unwrap();
        let two = extract_pairs_from(&t, &seeds, &TttConfig { depth: 2, thresholds: vec![a, b] }).unwrap();
        prop_assert!(one.is_subset_of(&two));
        prop_assert!(one.iter().all(|p| p.level == 2));
    }

    #[test]
    fn zero_thresholds_select_every_ancestor((t, seeds) in corpus()) {
        let pairs = extract_pairs_from(&t, &seeds, &TttConfig { depth: 2, thresholds: vec![0.0, 0.0] }).unwrap();
        let mut expected = Vec::new();
        for (u, items) in seeds.iter().enumerate() {
            for &j in items {
                let path = t.item_path(j);
                let n = path.len();
                expected.push((u as u32, 2, path[n - 1]));
                expected.push((u as u32, 3, path[n - 2]));
            }
        }
        expected.sort_unstable();
        expected.dedup();
        prop_assert_eq!(pairs.keys(), expected);
    }

    #[test]
    fn extraction_is_per_user_and_deterministic((t, seeds) in corpus(), (a, b) in thresholds()) {
        let cfg = TttConfig { depth: 2, thresholds: vec![a, b] };
        let all = extract_pairs_from(&t, &seeds, &cfg).unwrap();
        prop_assert_eq!(&all, &extract_pairs_from(&t, &seeds, &cfg).unwrap());
        let mut reversed = seeds.clone();
        reversed.reverse();
        let rev = extract_pairs_from(&t, &reversed, &cfg).unwrap();
        let last = seeds.len() as u32 - 1;
        let mut remapped: Vec<_> = rev.keys().into_iter().map(|(u, l, n)| (last - u, l, n)).collect();
        remapped.sort_unstable();
        prop_assert_eq!(all.keys(), remapped);
    }
}
