use std::collections::HashSet;

use rand::Rng;

use crate::error::{Error, Result};

/// `k` distinct items drawn uniformly from `pool` minus `history`.
pub fn negative_sample(history: &[usize], pool: &[usize], k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let seen: HashSet<usize> = history.iter().copied().collect();
    let mut available: Vec<usize> = pool.iter().copied().filter(|i| !seen.contains(i)).collect();
    available.dedup();
    if k > available.len() {
        return Err(Error::Sampling {
            k,
            available: available.len(),
        });
    }
    Ok(rand::seq::index::sample(rng, available.len(), k)
        .into_iter()
        .map(|i| available[i])
        .collect())
}
