use std::collections::BTreeMap;

use hill_core::data::{load_interactions, write_adjacency, write_pair_tsv, InteractionDataset, InteractionFormat};
use proptest::prelude::*;

fn sets() -> impl Strategy<Value = Vec<Vec<u32>>> {
    prop::collection::vec(prop::collection::btree_set(0u32..200, 0..15), 1..30)
        .prop_map(|v| v.into_iter().map(|s| s.into_iter().collect()).collect())
}

fn dataset() -> impl Strategy<Value = InteractionDataset> {
    sets().prop_map(|train| {
        let items = train.iter().flatten().map(|&i| i as usize + 1).max().unwrap_or(0) + 1;
        InteractionDataset::new(train.len(), items, train, vec![]).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn written_datasets_reload_identically(train in sets(), tsv in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let (format, name) = if tsv { (InteractionFormat::PairTsv, "d.tsv") } else { (InteractionFormat::Adjacency, "d.txt") };
        let first_path = dir.path().join(format!("first-{name}"));
        let write = |p: &std::path::Path, s: &[Vec<u32>]| if tsv { write_pair_tsv(p, s) } else { write_adjacency(p, s) };
        write(&first_path, &train).unwrap();
        let first = load_interactions(&first_path, format).unwrap().dataset;
        let again_path = dir.path().join(format!("again-{name}"));
        write(&again_path, first.train_sets()).unwrap();
        let again = load_interactions(&again_path, format).unwrap().dataset;
        prop_assert_eq!(first, again);
    }

    #[test]
    fn negatives_avoid_train_positives(ds in dataset(), seed in any::<u64>(), count in 1usize..50) {
        for u in 0..ds.num_users() as u32 {
            let negs = ds.sample_negatives(u, count, seed).unwrap();
            prop_assert_eq!(negs.len(), count);
            prop_assert!(negs.iter().all(|&i| !ds.is_train_positive(u, i) && (i as usize) < ds.num_items()));
            prop_assert_eq!(&negs, &ds.sample_negatives(u, count, seed).unwrap());
        }
    }

    #[test]
    fn an_epoch_emits_every_positive_once(ds in dataset(), batch in 1usize..40, negs in 0usize..3, seed in any::<u64>(), epoch in 0u64..4) {
        let mut emitted: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        let mut batches = 0;
        for b in ds.epoch_batches(batch, negs, seed, epoch).unwrap() {
            batches += 1;
            let positives = b.iter().filter(|e| e.label == 1).count();
            prop_assert!(positives <= batch);
            prop_assert_eq!(b.len(), positives * (1 + negs));
            for e in &b {
                if e.label == 1 {
                    *emitted.entry((e.user, e.item)).or_default() += 1;
                } else {
                    prop_assert!(!ds.is_train_positive(e.user, e.item));
                }
            }
        }
        prop_assert_eq!(batches, ds.num_train_interactions().div_ceil(batch));
        let expected: BTreeMap<(u32, u32), usize> = ds
            .train_sets()
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| ((u as u32, i), 1)))
            .collect();
        prop_assert_eq!(emitted, expected);
    }
}
