use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::EmbeddingSet;
use crate::seed;

/// Euclidean distance of every row to the mean embedding.
pub fn distances_to_mean(e: &EmbeddingSet) -> Vec<f64> {
    let d = e.dim();
    let n = e.len() as f64;
    let mut mean = vec![0.0; d];
    for r in e.rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    e.rows()
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// Indices sorted by distance to the mean (ties by index), cut into
/// `floor(n / k)` contiguous blocks of `k`; the last block also takes the
/// `n mod k` farthest leftovers.
pub fn distance_blocks(e: &EmbeddingSet, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = e.len();
    if k == 0 || n < k {
        return Err(Error::Invalid(format!("cannot cut {n} items into blocks of {k}")));
    }
    let dist = distances_to_mean(e);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let blocks = n / k;
    Ok((0..blocks)
        .map(|b| {
            let end = if b + 1 == blocks { n } else { (b + 1) * k };
            order[b * k..end].to_vec()
        })
        .collect())
}

/// One seeded uniform pick per distance block; returns sorted indices.
pub fn subsample_dataset(e: &EmbeddingSet, k: usize, seed: u64) -> Result<Vec<usize>> {
    let blocks = distance_blocks(e, k)?;
    let mut rng = seed::stream(seed, "subsample");
    let mut picks: Vec<usize> = blocks
        .iter()
        .map(|b| b[rng.random_range(0..b.len())])
        .collect();
    picks.sort_unstable();
    Ok(picks)
}
