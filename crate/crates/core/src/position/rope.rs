//! Rotary position embedding.

use crate::error::{Error, Result};
use crate::tensor::{rope_frequencies, rotate_pairs_in_place, Graph, Var};

pub const ROPE_BASE: f64 = 10_000.0;

/// Rotates each row of `vectors: [rows, d]` by its sequence index:
/// pair `(x_2i, x_2i+1)` at index `m` turns by `m * base^(-2i/d)`.
pub fn rope_apply(g: &mut Graph, vectors: Var, indices: &[usize], base: f64) -> Result<Var> {
    let positions: Vec<f64> = indices.iter().map(|&m| m as f64).collect();
    g.rope(vectors, &positions, base)
}

/// Rotates pairs of `x` by explicit angles (one per pair).
pub fn rotate_pairs(x: &[f64], angles: &[f64]) -> Result<Vec<f64>> {
    if x.len() % 2 != 0 {
        return Err(Error::Config(format!("rotary dimension must be even, got {}", x.len())));
    }
    if angles.len() != x.len() / 2 {
        return Err(Error::dim("rotate_pairs", &[x.len() / 2], &[angles.len()]));
    }
    let mut out = x.to_vec();
    rotate_pairs_in_place(&mut out, angles, false);
    Ok(out)
}

/// Rotation of a single vector at sequence index `m`, outside any graph.
pub fn rope_rotate(x: &[f64], m: usize, base: f64) -> Result<Vec<f64>> {
    let angles: Vec<f64> = rope_frequencies(x.len(), base).iter().map(|f| m as f64 * f).collect();
    rotate_pairs(x, &angles)
}
