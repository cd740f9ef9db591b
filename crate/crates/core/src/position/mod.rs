//! Position encodings that feed attention.
//!
//! Every variant either rewrites the context embeddings (naive, rope) or
//! produces one additive logit per context item (cope, cape). The
//! contextual variants share one pipeline:
//!
//! ```text
//! gates      g_j = 1 - sigmoid(sim(t, h_j))          (cope: sigmoid(sim))
//! positions  p_j = sum_{k >= j} g_k                   (reverse cumulative sum)
//! projection t'  = silu(t W + b)                      (cope: t' = t)
//! logits     z[p] = <t', e[p]>  for integer p = 0..=n_max
//! lookup     z[p_j] = frac * z[ceil] + (1 - frac) * z[floor]
//! ```
//!
//! The most recent context item therefore sits at the smallest position.
//! Logit interpolation is the production path; the embedding-interpolation
//! form [`interpolate_position_embedding`] is kept as a reference.

mod rope;

pub use rope::{rope_apply, rope_rotate, rotate_pairs, ROPE_BASE};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeVariant {
    None,
    Naive,
    Rope,
    Cope,
    Cape,
}

impl PeVariant {
    pub const ALL: [PeVariant; 5] = [
        PeVariant::None,
        PeVariant::Naive,
        PeVariant::Rope,
        PeVariant::Cope,
        PeVariant::Cape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PeVariant::None => "none",
            PeVariant::Naive => "naive",
            PeVariant::Rope => "rope",
            PeVariant::Cope => "cope",
            PeVariant::Cape => "cape",
        }
    }
}

impl fmt::Display for PeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PeVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = PeVariant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown PE variant `{s}`; valid variants: {}", valid.join(", ")))
            })
    }
}

fn default_true() -> bool {
    true
}

fn default_rope_base() -> f64 {
    ROPE_BASE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PEConfig {
    pub variant: PeVariant,
    /// Width of the CAPE position table and gate projection.
    pub d_pos: usize,
    /// Longest context; position tables hold rows `0..=n_max`.
    pub n_max: usize,
    /// Divide gate similarities by `sqrt(d)`.
    #[serde(default = "default_true")]
    pub gate_sim_scale: bool,
    /// Upper clamp for CoPE positions; `None` means `n_max`.
    #[serde(default)]
    pub cope_p_max: Option<f64>,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

impl PEConfig {
    pub fn new(variant: PeVariant, d_pos: usize, n_max: usize) -> Self {
        PEConfig {
            variant,
            d_pos,
            n_max,
            gate_sim_scale: true,
            cope_p_max: None,
            rope_base: ROPE_BASE,
        }
    }

    /// Problems with this config for vectors of width `d` (the per-head
    /// width under self-attention).
    pub fn problems(&self, d: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_max < 1 {
            out.push("pe.n_max must be at least 1".to_string());
        }
        match self.variant {
            PeVariant::Cape if self.d_pos < 1 || self.d_pos > d => {
                out.push(format!("pe.d_pos must lie in [1, {d}], got {}", self.d_pos));
            }
            PeVariant::Rope if d % 2 != 0 => {
                out.push(format!("pe.variant rope needs an even rotation dimension, got {d}"));
            }
            PeVariant::Cope => {
                if let Some(p) = self.cope_p_max {
                    if !(p > 0.0) {
                        out.push(format!("pe.cope_p_max must be positive, got {p}"));
                    }
                }
            }
            _ => {}
        }
        if !(self.rope_base > 1.0) {
            out.push(format!("pe.rope_base must exceed 1, got {}", self.rope_base));
        }
        out
    }

    pub fn cope_clamp(&self) -> f64 {
        self.cope_p_max.unwrap_or(self.n_max as f64).min(self.n_max as f64)
    }
}

/// Gates and fractional positions of one example, read off a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionState {
    pub gates: Vec<f64>,
    pub positions: Vec<f64>,
}

impl PositionState {
    /// Positions from gates by a suffix sum.
    pub fn from_gates(gates: Vec<f64>) -> Self {
        let mut positions = vec![0.0; gates.len()];
        let mut acc = 0.0;
        for k in (0..gates.len()).rev() {
            acc += gates[k];
            positions[k] = acc;
        }
        PositionState { gates, positions }
    }
}

/// Learnable position embeddings `e[0..=n_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionTable {
    pub embeddings: Tensor,
}

impl PositionTable {
    /// Uniform(-1/sqrt(width), 1/sqrt(width)) rows with `e[0] = 0`.
    pub fn random(n_max: usize, width: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (width as f64).sqrt();
        let mut data: Vec<f64> = (0..(n_max + 1) * width).map(|_| rng.gen_range(-bound..bound)).collect();
        data[..width].iter_mut().for_each(|v| *v = 0.0);
        PositionTable {
            embeddings: Tensor::new(vec![n_max + 1, width], data).expect("shape"),
        }
    }

    pub fn rows(&self) -> usize {
        self.embeddings.shape()[0]
    }
}

/// `t' = silu(t W + b)` with `W: d x d_pos`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateProjection {
    pub w: Tensor,
    pub b: Tensor,
}

impl GateProjection {
    pub fn random(d: usize, d_pos: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_pos as f64).sqrt();
        let data = (0..d * d_pos).map(|_| rng.gen_range(-bound..bound)).collect();
        GateProjection {
            w: Tensor::new(vec![d, d_pos], data).expect("shape"),
            b: Tensor::zeros(&[d_pos]),
        }
    }
}

/// Which way the gate reads the similarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    /// `1 - sigmoid(sim)`: similar items barely advance the position.
    Dissimilarity,
    /// `sigmoid(sim)`: the CoPE convention.
    Similarity,
}

/// Graph handles for the contextual position path.
#[derive(Clone, Copy, Debug)]
pub struct ContextualPe {
    /// `(W, b)`; absent for CoPE, which compares the query with the table directly.
    pub projection: Option<(Var, Var)>,
    pub table: Var,
}

/// Graph nodes produced by [`contextual_logits`].
#[derive(Clone, Copy, Debug)]
pub struct PositionLogits {
    pub gates: Var,
    pub positions: Var,
    pub logits: Var,
}

fn check_rows(g: &Graph, target: Var, context: Var) -> Result<(usize, usize, usize)> {
    let (st, sc) = (g.shape(target), g.shape(context));
    if st.len() != 2 || sc.len() != 3 || st[0] != sc[0] || st[1] != sc[2] {
        return Err(Error::Config(format!(
            "target {st:?} and context {sc:?} disagree (expected [B,d] and [B,n,d])"
        )));
    }
    Ok((sc[0], sc[1], sc[2]))
}

/// Gate per context item, `[B, n]`. Entries where `mask` is 0 become 0.
///
/// `target: [B, d]`, `context: [B, n, d]`.
pub fn compute_gates(
    g: &mut Graph,
    target: Var,
    context: Var,
    mask: Option<&Tensor>,
    scale: bool,
    kind: GateKind,
) -> Result<Var> {
    let (b, n, d) = check_rows(g, target, context)?;
    let ids: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, n)).collect();
    let t_rep = g.gather_rows(target, &ids)?;
    let ctx = g.reshape(context, &[b * n, d])?;
    let prod = g.mul(t_rep, ctx)?;
    let mut sim = g.sum_lastdim(prod);
    if scale {
        sim = g.scale(sim, 1.0 / (d as f64).sqrt());
    }
    let sim = g.reshape(sim, &[b, n])?;
    let mut gates = g.sigmoid(sim);
    if kind == GateKind::Dissimilarity {
        gates = g.one_minus(gates);
    }
    apply_mask(g, gates, mask)
}

pub(crate) fn apply_mask(g: &mut Graph, x: Var, mask: Option<&Tensor>) -> Result<Var> {
    match mask {
        Some(m) => {
            if m.shape() != g.shape(x) {
                return Err(Error::dim("gate mask", g.shape(x), m.shape()));
            }
            let m = g.constant(m.clone());
            g.mul(x, m)
        }
        None => Ok(x),
    }
}

/// `p_j = sum_{k >= j} g_k` along the last axis.
pub fn accumulate_positions(g: &mut Graph, gates: Var) -> Var {
    g.reverse_cumsum(gates)
}

/// `silu(t W + b)` for each row of `target`.
pub fn project_target_gate(g: &mut Graph, target: Var, w: Var, b: Var) -> Result<Var> {
    let (st, sw) = (g.shape(target), g.shape(w));
    if st.len() != 2 || sw.len() != 2 || st[1] != sw[0] || g.value(b).numel() != sw[1] {
        return Err(Error::Config(format!(
            "gate projection {sw:?} does not accept input {st:?}"
        )));
    }
    let lin = g.matmul(target, w)?;
    let lin = g.add_row(lin, b)?;
    Ok(g.silu(lin))
}

/// `z[r, p] = <t'_r, e[p]>` for every integer position: `[R, n_max + 1]`.
pub fn integer_position_logits(g: &mut Graph, t_prime: Var, table: Var) -> Result<Var> {
    let et = g.transpose(table)?;
    g.matmul(t_prime, et)
}

/// Interpolated logits at fractional positions, `z: [R, P]`, `positions: [R, m]`.
pub fn interpolate_position_logits(g: &mut Graph, z: Var, positions: Var) -> Result<Var> {
    g.interp_gather(z, positions)
}

/// Full contextual position path for target attention.
///
/// `target: [B, d]`, `context: [B, n, d]`, `mask: [B, n]` with 1 at real
/// items. Returns additive logits `[B, n]`.
pub fn contextual_logits(
    g: &mut Graph,
    target: Var,
    context: Var,
    mask: Option<&Tensor>,
    params: ContextualPe,
    cfg: &PEConfig,
) -> Result<PositionLogits> {
    let (_, n, _) = check_rows(g, target, context)?;
    if n > cfg.n_max {
        return Err(Error::Length { len: n, n_max: cfg.n_max });
    }
    let kind = match params.projection {
        Some(_) => GateKind::Dissimilarity,
        None => GateKind::Similarity,
    };
    let gates = compute_gates(g, target, context, mask, cfg.gate_sim_scale, kind)?;
    logits_from_gates(g, gates, target, params, cfg)
}

/// Everything downstream of the gates; exposed so gates can be forced.
pub fn logits_from_gates(
    g: &mut Graph,
    gates: Var,
    query: Var,
    params: ContextualPe,
    cfg: &PEConfig,
) -> Result<PositionLogits> {
    let mut positions = accumulate_positions(g, gates);
    let t_prime = match params.projection {
        Some((w, b)) => project_target_gate(g, query, w, b)?,
        None => {
            positions = g.clamp(positions, 0.0, cfg.cope_clamp());
            query
        }
    };
    let z = integer_position_logits(g, t_prime, params.table)?;
    let logits = interpolate_position_logits(g, z, positions)?;
    Ok(PositionLogits {
        gates,
        positions,
        logits,
    })
}

/// `h_j + e[j]` for every example; `context: [B*n, d]`, `table: [n_max, d]`,
/// index 0 is the oldest item.
pub fn naive_pe_apply(g: &mut Graph, context: Var, n: usize, table: Var) -> Result<Var> {
    let rows = g.shape(context)[0];
    let n_max = g.shape(table)[0];
    if n > n_max {
        return Err(Error::Length { len: n, n_max });
    }
    if n == 0 || rows % n != 0 {
        return Err(Error::dim("naive_pe_apply", g.shape(context), &[n]));
    }
    let ids: Vec<usize> = (0..rows).map(|r| r % n).collect();
    let pe = g.gather_rows(table, &ids)?;
    g.add(context, pe)
}

/// Reference interpolation of the embedding itself:
/// `(p - floor p) e[ceil p] + (1 - p + floor p) e[floor p]`.
pub fn interpolate_position_embedding(p: f64, table: &Tensor) -> Vec<f64> {
    let top = (table.shape()[0] - 1) as f64;
    let p = p.clamp(0.0, top);
    let lo = p.floor();
    let w_hi = p - lo;
    let (lo_row, hi_row) = (table.row(lo as usize), table.row(p.ceil() as usize));
    lo_row
        .iter()
        .zip(hi_row)
        .map(|(l, h)| w_hi * h + (1.0 - w_hi) * l)
        .collect()
}

/// Scalar interpolation of precomputed integer-position logits.
pub fn interpolate_position_logit(p: f64, z: &[f64]) -> f64 {
    crate::tensor::graph_interpolate(z, p)
}
