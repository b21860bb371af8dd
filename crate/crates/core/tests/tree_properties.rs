mod common;

use hill_core::hill::LevelCodebook;
use hill_core::linalg::Matrix;
use hill_core::tree::{
    assemble, beam_search, beam_search_excluding, brute_force_top_k, cost_estimate, decode, encode, load, save,
    trace_cost, HierarchicalIndex,
};
use proptest::prelude::*;

use common::{matrix, quantized_index};

fn codebook(level: usize, k: usize, assignment: Vec<u32>, representative: Vec<Option<u32>>) -> LevelCodebook<f64> {
    let mut cb = LevelCodebook::unfinalized(level, Matrix::zeros(k, 2));
    cb.assignment = assignment;
    cb.representative = representative;
    cb.finalized = true;
    cb
}

/// Eight items under four level-2 nodes `d, e, f, g` (ids 0..4) and two
/// level-3 nodes `b, c` (ids 0, 1) below a virtual root `a`. Item 0 plays
/// the part of item 1 in the usual drawing.
fn figure_tree() -> HierarchicalIndex<f64> {
    let xs = [10.0, 3.0, 5.0, 9.0, 7.0, 2.0, 6.0, 8.0];
    let items = matrix(8, 2, xs.iter().flat_map(|&x| [x, 1.0]).collect());
    let level2 = codebook(2, 4, vec![0, 0, 1, 1, 2, 2, 3, 3], vec![Some(0), Some(2), Some(4), Some(6)]);
    let level3 = codebook(3, 2, vec![0, 0, 0, 0, 1, 1, 1, 1], vec![Some(0), Some(4)]);
    assemble(&[level2, level3], &items).unwrap()
}

#[test]
fn figure_tree_shape() {
    let t = figure_tree();
    assert_eq!(t.num_levels(), 3);
    assert_eq!(t.level(3).unwrap().children, vec![vec![0, 1], vec![2, 3]]);
    assert!(t.level(2).unwrap().children.iter().all(|c| c.len() == 2));
    assert_eq!(t.level(3).unwrap().parent, vec![None, None]);
    assert_eq!(t.level(2).unwrap().parent, vec![Some(0), Some(0), Some(1), Some(1)]);
    t.validate().unwrap();
}

#[test]
fn figure_tree_beam_search_trace() {
    let t = figure_tree();
    let r = beam_search(&t, &[1.0, 0.0], 2, 2).unwrap();
    assert_eq!(r.survivors, vec![vec![0, 1], vec![0, 2]]);
    assert_eq!(r.items.iter().map(|s| s.id).collect::<Vec<_>>(), vec![0, 4]);
    assert_eq!(r.path_trace[0], vec![0, 0]);
    assert_eq!(r.scoring_calls, 2 + 4 + 4);
    assert_eq!(brute_force_top_k(&t.items, &[1.0, 0.0], 2, &[])[1].id, 3);
}

#[test]
fn single_beam_costs_top_width_plus_chosen_fanouts() {
    let t = figure_tree();
    let r = beam_search(&t, &[1.0, 0.0], 1, 5).unwrap();
    assert_eq!(r.scoring_calls, 2 + 2 + 2);
    assert_eq!(trace_cost(&t, &r.survivors), r.scoring_calls);
    assert_eq!(r.items.len(), 2);
}

#[test]
fn cost_model_examples() {
    let t = figure_tree();
    let flat = cost_estimate(&t, 1, &[]);
    assert_eq!((flat.flat_calls, flat.flat_cost), (8, 8.0));
    let full = cost_estimate(&t, 4, &[]);
    assert_eq!(full.calls_bound, vec![2, 4, 8]);
    assert_eq!(full.total_calls_bound, 2 + 4 + 8);

    let items = matrix(6, 2, vec![1.0, 0.0, 0.9, 0.1, 0.0, 1.0, 0.1, 0.9, -1.0, 0.0, -0.9, -0.1]);
    let two = quantized_index(&items, &[3], 1);
    let cascade = cost_estimate(&two, 3, &[5.0, 1.0]);
    assert_eq!(cascade.calls_bound, vec![3, 6]);
    assert_eq!(cascade.weighted_cost_bound, 3.0 * 5.0 + 6.0);
    let r = beam_search(&two, &[0.3, 0.2], 3, 6).unwrap();
    assert_eq!(r.scoring_calls, 3 + 6);
}

#[test]
fn star_tree_and_truncation() {
    let items = matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]);
    let t = quantized_index(&items, &[1], 0);
    assert_eq!(t.top().unwrap().children, vec![vec![0, 1, 2]]);
    let r = beam_search(&t, &[1.0, 0.2], 1, 10).unwrap();
    assert_eq!(r.items.iter().map(|s| s.id).collect::<Vec<_>>(), vec![0, 2, 1]);
}

#[test]
fn empty_index_gives_empty_results() {
    let t = HierarchicalIndex::<f64>::empty(3);
    let r = beam_search(&t, &[1.0, 2.0, 3.0], 4, 5).unwrap();
    assert!(r.items.is_empty());
    assert_eq!(r.scoring_calls, 0);
}

#[test]
fn unfinalized_codebook_is_rejected() {
    let cb = LevelCodebook::unfinalized(2, Matrix::<f64>::zeros(2, 2));
    assert!(assemble(&[cb], &Matrix::zeros(3, 2)).is_err());
}

#[test]
fn truncated_or_corrupted_files_fail_to_load() {
    let t = figure_tree();
    let bytes = encode(&t);
    for cut in 0..bytes.len() {
        assert!(decode::<f64>(&bytes[..cut]).is_err(), "prefix of {cut} bytes decoded");
    }
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(decode::<f64>(&bad).is_err());
    let mut bad_version = bytes;
    bad_version[4] = 99;
    assert!(decode::<f64>(&bad_version).is_err());
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("figure.idx");
    let t = figure_tree();
    save(&t, &path).unwrap();
    assert_eq!(load::<f64>(&path).unwrap(), t);
    assert!(load::<f64>(dir.path().join("missing.idx")).is_err());
}

fn index_case() -> impl Strategy<Value = (HierarchicalIndex<f64>, Vec<f64>)> {
    (1usize..50, prop::collection::vec(1usize..9, 1..4), any::<u64>()).prop_flat_map(|(m, counts, seed)| {
        (
            prop::collection::vec(-3.0f64..3.0, m * 3)
                .prop_map(move |v| quantized_index(&matrix(m, 3, v), &counts, seed)),
            prop::collection::vec(-2.0f64..2.0, 3),
        )
    })
}

fn max_width(t: &HierarchicalIndex<f64>) -> usize {
    t.levels.iter().map(|l| l.width()).max().unwrap_or(1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn exhaustive_beam_equals_brute_force(
        (t, user) in index_case(),
        k in 1usize..12,
        extra in 0usize..3,
        exclude_mask in prop::collection::vec(any::<bool>(), 50),
    ) {
        let exclude: Vec<u32> = (0..t.num_items() as u32).filter(|&j| exclude_mask[j as usize] && j % 3 == 0).collect();
        let r = beam_search_excluding(&t, &user, max_width(&t) + extra, k, &exclude).unwrap();
        prop_assert_eq!(r.items, brute_force_top_k(&t.items, &user, k, &exclude));
    }

    #[test]
    fn measured_calls_match_the_trace_and_respect_the_bound((t, user) in index_case(), beam in 1usize..10, k in 1usize..10) {
        let r = beam_search(&t, &user, beam, k).unwrap();
        prop_assert_eq!(trace_cost(&t, &r.survivors), r.scoring_calls);
        prop_assert!(r.scoring_calls <= cost_estimate(&t, beam, &[]).total_calls_bound);
    }

    #[test]
    fn paths_are_root_to_item_chains((t, user) in index_case(), beam in 1usize..6, k in 1usize..8) {
        let r = beam_search(&t, &user, beam, k).unwrap();
        prop_assert!(r.items.len() <= k);
        prop_assert!(r.items.windows(2).all(|w| w[0].score > w[1].score || (w[0].score == w[1].score && w[0].id < w[1].id)));
        for (s, path) in r.items.iter().zip(&r.path_trace) {
            prop_assert_eq!(path.len(), t.levels.len());
            prop_assert!(!t.top().unwrap().children[path[0] as usize].is_empty());
            for (i, w) in path.windows(2).enumerate() {
                let level = t.num_levels() - i;
                prop_assert!(t.children(level, w[0]).contains(&w[1]));
            }
            prop_assert!(t.children(2, *path.last().unwrap()).contains(&s.id));
        }
    }

    #[test]
    fn recall_is_monotone_in_beam_on_two_level_trees(
        m in 2usize..60,
        k2 in 1usize..10,
        seed in any::<u64>(),
        raw in prop::collection::vec(-3.0f64..3.0, 60 * 3),
        user in prop::collection::vec(-2.0f64..2.0, 3),
        k in 1usize..10,
    ) {
        let t = quantized_index(&matrix(m, 3, raw[..m * 3].to_vec()), &[k2], seed);
        let truth: Vec<u32> = brute_force_top_k(&t.items, &user, k, &[]).iter().map(|s| s.id).collect();
        let mut last = 0;
        for beam in 1..=max_width(&t) {
            let got = beam_search(&t, &user, beam, k).unwrap();
            let hits = got.items.iter().filter(|s| truth.contains(&s.id)).count();
            prop_assert!(hits >= last);
            last = hits;
        }
        prop_assert_eq!(last, truth.len());
    }

    #[test]
    fn encode_decode_is_lossless((t, _) in index_case()) {
        let f32_tree = HierarchicalIndex::<f32> {
            dim: t.dim,
            items: t.items.cast(),
            item_parent: t.item_parent.clone(),
            levels: t.levels.iter().map(|l| hill_core::tree::IndexLevel {
                level: l.level,
                embeddings: l.embeddings.cast(),
                representative: l.representative.clone(),
                parent: l.parent.clone(),
                children: l.children.clone(),
            }).collect(),
        };
        let back = decode::<f32>(&encode(&f32_tree)).unwrap();
        prop_assert_eq!(back, f32_tree);
    }
}
