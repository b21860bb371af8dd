//! Direct reference implementations of the ranking and calibration metrics.

use std::collections::BTreeSet;

pub fn reference_recall(relevant: &BTreeSet<u32>, recommended: &[u32], k: usize) -> f64 {
    let top: BTreeSet<u32> = recommended[..k.min(recommended.len())].iter().copied().collect();
    relevant.intersection(&top).count() as f64 / relevant.len() as f64
}

pub fn reference_ndcg(relevant: &BTreeSet<u32>, recommended: &[u32], k: usize) -> f64 {
    let mut dcg = 0.0;
    for (i, item) in recommended.iter().take(k).enumerate() {
        if relevant.contains(item) {
            dcg += 1.0 / (std::f64::consts::LN_2.recip() * ((i + 2) as f64).ln());
        }
    }
    let mut idcg = 0.0;
    for i in 1..=k.min(relevant.len()) {
        idcg += std::f64::consts::LN_2 / ((i + 1) as f64).ln();
    }
    dcg / idcg
}

pub fn reference_ne(labels: &[i8], p: &[f64]) -> f64 {
    let n = labels.len() as f64;
    let mut ce = 0.0;
    let mut pos = 0.0;
    for (&y, &q) in labels.iter().zip(p) {
        let y01 = if y > 0 { 1.0 } else { 0.0 };
        pos += y01;
        ce -= y01 * q.ln() + (1.0 - y01) * (1.0 - q).ln();
    }
    let ctr = pos / n;
    (ce / n) / -(ctr * ctr.ln() + (1.0 - ctr) * (1.0 - ctr).ln())
}
