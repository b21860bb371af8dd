//! Synthetic data generators for tests, benchmarks and offline runs.

use std::collections::BTreeSet;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::error::{HillError, Result};
use crate::linalg::Matrix;
use crate::rng;

/// Isotropic Gaussian clusters. Centers sit at `separation` along distinct
/// axes when `clusters <= dim`, otherwise at scaled random directions.
/// Returns the points (cluster-major) and their generating labels.
pub fn gaussian_cloud(
    clusters: usize,
    per_cluster: usize,
    dim: usize,
    separation: f64,
    spread: f64,
    seed: u64,
) -> (Matrix<f64>, Vec<u32>) {
    let mut rng = rng::stream(seed, 101);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centers: Vec<Vec<f64>> = (0..clusters)
        .map(|c| {
            if clusters <= dim {
                (0..dim).map(|t| if t == c { separation } else { 0.0 }).collect()
            } else {
                let raw: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
                let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                raw.iter().map(|x| separation * x / norm).collect()
            }
        })
        .collect();
    let mut data = Vec::with_capacity(clusters * per_cluster * dim);
    let mut labels = Vec::with_capacity(clusters * per_cluster);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_cluster {
            data.extend(center.iter().map(|&m| m + spread * unit.sample(&mut rng)));
            labels.push(c as u32);
        }
    }
    (Matrix::from_vec(clusters * per_cluster, dim, data).expect("sized"), labels)
}

/// Shape of a synthetic check-in style interaction corpus: items belong to
/// regions, users favour a few regions and pick popular items within them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub regions: usize,
    pub max_regions_per_user: usize,
    pub min_interactions: usize,
    pub mean_interactions: f64,
    pub test_fraction: f64,
    /// Zipf exponent of item popularity inside a region.
    pub popularity_exponent: f64,
    /// Share of interactions drawn uniformly from the whole catalogue.
    pub noise_fraction: f64,
    pub seed: u64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self {
            num_users: 1000,
            num_items: 2000,
            regions: 40,
            max_regions_per_user: 3,
            min_interactions: 10,
            mean_interactions: 34.0,
            test_fraction: 0.2,
            popularity_exponent: 0.8,
            noise_fraction: 0.2,
            seed: 7,
        }
    }
}

impl SurrogateSpec {
    /// Same user, item and interaction counts as the public Gowalla
    /// check-in split (29,858 users, 40,981 items, ~1.03M interactions).
    pub fn gowalla_shaped() -> Self {
        Self {
            num_users: 29_858,
            num_items: 40_981,
            regions: 400,
            max_regions_per_user: 4,
            mean_interactions: 34.4,
            ..Default::default()
        }
    }
}

/// Generates a train/test split following `spec`.
pub fn surrogate_interactions(spec: &SurrogateSpec) -> Result<InteractionDataset> {
    if spec.num_items == 0 || spec.regions == 0 || spec.regions > spec.num_items {
        return Err(HillError::config("surrogate needs 1 <= regions <= num_items"));
    }
    let mut rng = rng::stream(spec.seed, 102);
    let mut region_items: Vec<Vec<u32>> = vec![Vec::new(); spec.regions];
    let mut order: Vec<u32> = (0..spec.num_items as u32).collect();
    order.shuffle(&mut rng);
    for (i, &item) in order.iter().enumerate() {
        region_items[i % spec.regions].push(item);
    }
    let samplers: Vec<WeightedIndex<f64>> = region_items
        .iter()
        .map(|items| {
            let w: Vec<f64> = (1..=items.len()).map(|r| (r as f64).powf(-spec.popularity_exponent)).collect();
            WeightedIndex::new(w).expect("positive weights")
        })
        .collect();
    let extra = Poisson::new((spec.mean_interactions - spec.min_interactions as f64).max(1e-9))
        .map_err(|e| HillError::config(format!("surrogate interaction mean: {e}")))?;

    let mut train = Vec::with_capacity(spec.num_users);
    let mut test = Vec::with_capacity(spec.num_users);
    for _ in 0..spec.num_users {
        let n_regions = rng.random_range(1..=spec.max_regions_per_user.max(1));
        let regions: Vec<usize> = (0..n_regions).map(|_| rng.random_range(0..spec.regions)).collect();
        let weights: Vec<f64> = (0..n_regions).map(|_| rng.random_range(0.2..1.0)).collect();
        let pick_region = WeightedIndex::new(&weights).expect("positive weights");
        let capacity: usize = regions.iter().collect::<BTreeSet<_>>().iter().map(|&&r| region_items[r].len()).sum();
        let target = (spec.min_interactions + extra.sample(&mut rng) as usize).min(capacity);
        let mut chosen = BTreeSet::new();
        let mut attempts = 0;
        while chosen.len() < target && attempts < target * 50 {
            if rng.random_bool(spec.noise_fraction.clamp(0.0, 1.0)) {
                chosen.insert(rng.random_range(0..spec.num_items as u32));
            } else {
                let r = regions[pick_region.sample(&mut rng)];
                chosen.insert(region_items[r][samplers[r].sample(&mut rng)]);
            }
            attempts += 1;
        }
        let mut items: Vec<u32> = chosen.into_iter().collect();
        items.shuffle(&mut rng);
        let n_test = ((items.len() as f64) * spec.test_fraction).round() as usize;
        let n_test = n_test.min(items.len().saturating_sub(1));
        let te = items.split_off(items.len() - n_test);
        train.push(items);
        test.push(te);
    }
    InteractionDataset::new(spec.num_users, spec.num_items, train, test)
}
