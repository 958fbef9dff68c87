use rand::seq::index::sample_weighted;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ClickMatrix;
use crate::error::{Error, Result};

/// Share of each user's click distribution placed on their cluster's block.
pub const IN_BLOCK_MASS: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub clicks_per_user: usize,
    pub seed: u64,
}

/// Item range `[start, end)` owned by cluster `c`.
pub fn cluster_block(n_items: usize, n_clusters: usize, c: usize) -> (usize, usize) {
    (c * n_items / n_clusters, (c + 1) * n_items / n_clusters)
}

/// Per-item click probabilities for a user in cluster `c`: 80% spread over
/// the cluster's block, 20% uniform over all items.
pub fn cluster_distribution(n_items: usize, n_clusters: usize, c: usize) -> Vec<f64> {
    let (start, end) = cluster_block(n_items, n_clusters, c);
    let base = (1.0 - IN_BLOCK_MASS) / n_items as f64;
    let bump = IN_BLOCK_MASS / (end - start) as f64;
    (0..n_items)
        .map(|j| if (start..end).contains(&j) { base + bump } else { base })
        .collect()
}

/// A synthetic dataset and the cluster each user was drawn from.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub matrix: ClickMatrix,
    pub clusters: Vec<usize>,
}

/// Draws a clustered multinomial click dataset. Every user gets exactly
/// `clicks_per_user` distinct items, drawn without replacement from their
/// cluster's distribution.
pub fn synthesize(cfg: &SynthConfig) -> Result<Synthetic> {
    if cfg.n_clusters == 0 || cfg.n_clusters > cfg.n_items {
        return Err(Error::InvalidArgument(format!(
            "n_clusters must be in [1, n_items], got {} for {} items",
            cfg.n_clusters, cfg.n_items
        )));
    }
    if cfg.clicks_per_user > cfg.n_items {
        return Err(Error::InvalidArgument(format!(
            "clicks_per_user {} exceeds n_items {}; a binary matrix cannot hold repeats",
            cfg.clicks_per_user, cfg.n_items
        )));
    }

    let dists: Vec<Vec<f64>> = (0..cfg.n_clusters)
        .map(|c| cluster_distribution(cfg.n_items, cfg.n_clusters, c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clusters = Vec::with_capacity(cfg.n_users);
    let mut rows = Vec::with_capacity(cfg.n_users);
    for _ in 0..cfg.n_users {
        let c = rng.random_range(0..cfg.n_clusters);
        let p = &dists[c];
        let picked = sample_weighted(&mut rng, cfg.n_items, |j| p[j], cfg.clicks_per_user)
            .map_err(|e| Error::InvalidArgument(format!("click distribution: {e}")))?;
        rows.push(picked.into_iter().map(|j| j as u32).collect());
        clusters.push(c);
    }

    let mut matrix = ClickMatrix::from_unsorted_rows(cfg.n_items, rows)?;
    matrix.set_meta("synthetic_clusters", cfg.n_clusters);
    matrix.set_meta("synthetic_clicks_per_user", cfg.clicks_per_user);
    matrix.set_meta("seed", cfg.seed);
    Ok(Synthetic { matrix, clusters })
}
