//! Causal multi-head self-attention over the context (SASRec style).
//!
//! Blocks are pre-norm: `x + MHA(LN(x))` then `x + FFN(LN(x))`. Under the
//! contextual encodings each query position `i` plays the target: row `i`
//! gets gates `g_ij` from `q_i . k_j / sqrt(d_h)` for `j <= i`, positions
//! `p_ij = sum_{k=j..=i} g_ik`, and `z` from the query's own projection.
//! Gates and positions are per head; each block owns one position table.
//!
//! For click prediction the target is appended after the last real item and
//! its output state feeds the head, so the target is the query that attends
//! over the context. Ranking uses the state of the last context item.

use rand::Rng;

use super::{add_linear, add_pe_params, contextual_params, mlp, predict_head, uniform, Bound, Forward, Model, ModelConfig, ParamStore};
use crate::data::{ContextBatch, PAD_ID};
use crate::error::Result;
use crate::position::{apply_mask, logits_from_gates, naive_pe_apply, rope_apply, PEConfig, PeVariant};
use crate::tensor::{Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

pub(super) fn init_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) {
    let d = cfg.d();
    let dh = d / cfg.n_heads;
    if cfg.pe.variant == PeVariant::Naive {
        // One extra row for the appended target.
        let pe = PEConfig {
            n_max: cfg.pe.n_max + 1,
            ..cfg.pe.clone()
        };
        add_pe_params(store, "pe", &pe, d, rng);
    }
    let bound = 1.0 / (d as f64).sqrt();
    for l in 0..cfg.n_blocks {
        let pre = format!("block{l}");
        add_layer_norm(store, &format!("{pre}.ln1"), d);
        for proj in ["q", "k", "v", "o"] {
            store.insert(format!("{pre}.attn.{proj}"), uniform(&[d, d], bound, rng));
        }
        if matches!(cfg.pe.variant, PeVariant::Cape | PeVariant::Cope) {
            add_pe_params(store, &format!("{pre}.pe"), &cfg.pe, dh, rng);
        }
        add_layer_norm(store, &format!("{pre}.ln2"), d);
        add_linear(store, &format!("{pre}.ffn.0"), d, d, rng);
        add_linear(store, &format!("{pre}.ffn.1"), d, d, rng);
    }
    add_layer_norm(store, "ln_f", d);
}

fn add_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[d], 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
}

fn layer_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = g.layer_norm(x, LN_EPS);
    let y = g.mul_row(y, p.get(&format!("{prefix}.g")))?;
    g.add_row(y, p.get(&format!("{prefix}.b")))
}

/// Allowed (query `i`, key `j`) pairs for every example and head, laid out
/// as `[B * heads, n, n]`: `j <= i` and `j` a real item.
pub fn causal_mask(lengths: &[usize], heads: usize, n: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(lengths.len() * heads * n * n);
    for &len in lengths {
        for _ in 0..heads {
            for i in 0..n {
                out.extend((0..n).map(|j| j <= i && j < len));
            }
        }
    }
    out
}

/// `[B*n, d] -> [B*heads, n, d_h]`
fn split_heads(g: &mut Graph, x: Var, b: usize, n: usize, heads: usize) -> Result<Var> {
    let d = g.shape(x)[1];
    let x = g.reshape(x, &[b, n, heads, d / heads])?;
    let x = g.swap_dims12(x)?;
    g.reshape(x, &[b * heads, n, d / heads])
}

/// `[B*heads, n, d_h] -> [B*n, d]`
fn merge_heads(g: &mut Graph, x: Var, b: usize, n: usize, heads: usize) -> Result<Var> {
    let dh = g.shape(x)[2];
    let x = g.reshape(x, &[b, heads, n, dh])?;
    let x = g.swap_dims12(x)?;
    g.reshape(x, &[b * n, heads * dh])
}

fn attention_block(
    model: &Model,
    g: &mut Graph,
    p: &Bound,
    l: usize,
    x: Var,
    batch: &ContextBatch,
    allowed: &[bool],
) -> Result<(Var, Var)> {
    let cfg = model.config();
    let (b, n, heads) = (batch.len(), batch.width, cfg.n_heads);
    let dh = cfg.d() / heads;
    let pre = format!("block{l}");

    let y = layer_norm(g, p, &format!("{pre}.ln1"), x)?;
    let mut qkv = Vec::with_capacity(3);
    for proj in ["q", "k", "v"] {
        let m = g.matmul(y, p.get(&format!("{pre}.attn.{proj}")))?;
        qkv.push(split_heads(g, m, b, n, heads)?);
    }
    let (q, k, v) = (qkv[0], qkv[1], qkv[2]);
    let (q_att, k_att) = if cfg.pe.variant == PeVariant::Rope {
        let idx: Vec<usize> = (0..b * heads * n).map(|r| r % n).collect();
        let rotate = |g: &mut Graph, t: Var| -> Result<Var> {
            let flat = g.reshape(t, &[b * heads * n, dh])?;
            let r = rope_apply(g, flat, &idx, cfg.pe.rope_base)?;
            g.reshape(r, &[b * heads, n, dh])
        };
        (rotate(g, q)?, rotate(g, k)?)
    } else {
        (q, k)
    };
    let kt = g.transpose(k_att)?;
    let raw = g.bmm(q_att, kt)?;
    let mut scores = g.scale(raw, 1.0 / (dh as f64).sqrt());

    if let Some(params) = contextual_params(p, &format!("{pre}.pe"), cfg.pe.variant) {
        let sim = if cfg.pe.gate_sim_scale { scores } else { raw };
        let sim = g.reshape(sim, &[b * heads * n, n])?;
        let mut gates = g.sigmoid(sim);
        if cfg.pe.variant == PeVariant::Cape {
            gates = g.one_minus(gates);
        }
        let keep = Tensor::new(
            vec![b * heads * n, n],
            allowed.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect(),
        )?;
        let gates = apply_mask(g, gates, Some(&keep))?;
        let query = g.reshape(q, &[b * heads * n, dh])?;
        let pos = logits_from_gates(g, gates, query, params, &cfg.pe)?;
        let z = g.reshape(pos.logits, &[b * heads, n, n])?;
        scores = g.add(scores, z)?;
    }

    let weights = g.softmax(scores, Some(allowed))?;
    let ctx = g.bmm(weights, v)?;
    let ctx = merge_heads(g, ctx, b, n, heads)?;
    let out = g.matmul(ctx, p.get(&format!("{pre}.attn.o")))?;
    let x = g.add(x, out)?;

    let y = layer_norm(g, p, &format!("{pre}.ln2"), x)?;
    let f = mlp(g, p, &format!("{pre}.ffn"), 2, y)?;
    Ok((g.add(x, f)?, weights))
}

/// Hidden states of every position after all blocks and the final norm,
/// `[B*n, d]`, plus the last block's attention weights.
pub(crate) fn encode(model: &Model, g: &mut Graph, p: &Bound, batch: &ContextBatch) -> Result<(Var, Var)> {
    let cfg = model.config();
    let n = batch.width;
    let mut x = model.embed(g, p, &batch.items, &batch.categories)?;
    if cfg.pe.variant == PeVariant::Naive {
        x = naive_pe_apply(g, x, n, p.get("pe.naive"))?;
    }
    let allowed = causal_mask(&batch.lengths, cfg.n_heads, n);
    let mut weights = None;
    for l in 0..cfg.n_blocks {
        let (next, w) = attention_block(model, g, p, l, x, batch, &allowed)?;
        x = next;
        weights = Some(w);
    }
    let x = layer_norm(g, p, "ln_f", x)?;
    Ok((x, weights.expect("at least one block")))
}

/// `batch` widened by one with each target placed right after its context.
fn with_target_token(batch: &ContextBatch) -> ContextBatch {
    let (n, w) = (batch.width, batch.width + 1);
    let mut out = ContextBatch {
        width: w,
        items: vec![PAD_ID; batch.len() * w],
        categories: vec![PAD_ID; batch.len() * w],
        lengths: batch.lengths.iter().map(|l| l + 1).collect(),
        mask: vec![false; batch.len() * w],
        ..batch.clone()
    };
    for (b, &len) in batch.lengths.iter().enumerate() {
        let (src, dst) = (b * n, b * w);
        out.items[dst..dst + len].copy_from_slice(&batch.items[src..src + len]);
        out.categories[dst..dst + len].copy_from_slice(&batch.categories[src..src + len]);
        out.items[dst + len] = batch.target_items[b];
        out.categories[dst + len] = batch.target_categories[b];
        out.mask[dst..=dst + len].iter_mut().for_each(|m| *m = true);
    }
    out
}

/// Output state at each example's last real position, `[B, d]`.
fn last_states(g: &mut Graph, hidden: Var, batch: &ContextBatch) -> Result<Var> {
    let n = batch.width;
    let last: Vec<usize> = batch.lengths.iter().enumerate().map(|(i, &len)| i * n + len - 1).collect();
    g.gather_rows(hidden, &last)
}

/// Final state of the context alone, used to score next-item candidates.
pub(crate) fn context_state(model: &Model, g: &mut Graph, p: &Bound, batch: &ContextBatch) -> Result<Var> {
    let (hidden, _) = encode(model, g, p, batch)?;
    last_states(g, hidden, batch)
}

pub(super) fn forward(model: &Model, g: &mut Graph, p: &Bound, batch: &ContextBatch) -> Result<Forward> {
    let seq = with_target_token(batch);
    let (hidden, attention) = encode(model, g, p, &seq)?;
    let user = last_states(g, hidden, &seq)?;
    let t = model.embed(g, p, &batch.target_items, &batch.target_categories)?;
    let extras = g.mul(user, t)?;
    let probs = predict_head(g, p, model.head_layers(), user, t, Some(extras))?;
    Ok(Forward { probs, user, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interaction;
    use crate::model::tests::tiny;
    use crate::model::Backbone;

    fn batch(lengths: &[usize], width: usize) -> ContextBatch {
        let data: Vec<Interaction> = lengths
            .iter()
            .enumerate()
            .map(|(u, &len)| Interaction {
                user_id: format!("u{u}"),
                item_ids: (0..len).map(|k| 2 + (u * 3 + k * 5) % 10).collect(),
                category_ids: (0..len).map(|k| 2 + (u + k) % 4).collect(),
                target_item: 3 + u,
                target_category: 2 + u % 4,
                label: (u % 2) as u8,
            })
            .collect();
        ContextBatch::from_all(&data, width).unwrap()
    }

    #[test]
    fn future_positions_get_zero_weight() {
        for variant in PeVariant::ALL {
            let model = Model::new(tiny(Backbone::Sasrec, variant), 4).unwrap();
            let b = batch(&[4, 2], 5);
            let mut g = Graph::new();
            let p = model.params().bind(&mut g, false);
            let (_, attention) = encode(&model, &mut g, &p, &b).unwrap();
            let w = g.data(attention);
            let n = 5;
            let allowed = causal_mask(&b.lengths, 2, n);
            for (k, (&wt, &ok)) in w.iter().zip(&allowed).enumerate() {
                if !ok {
                    assert_eq!(wt, 0.0, "{variant} entry {k}");
                }
            }
            for row in w.chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_item_context_gets_full_weight() {
        let model = Model::new(tiny(Backbone::Sasrec, PeVariant::Cape), 2).unwrap();
        let b = batch(&[1], 1);
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let (_, attention) = encode(&model, &mut g, &p, &b).unwrap();
        assert_eq!(g.data(attention), &[1.0, 1.0]);
    }

    #[test]
    fn unit_gates_recover_relative_positions_per_row() {
        let n = 4;
        let allowed = causal_mask(&[n], 1, n);
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full(&[n, n], 1.0));
        let keep = Tensor::new(vec![n, n], allowed.iter().map(|&a| f64::from(u8::from(a))).collect()).unwrap();
        let gates = apply_mask(&mut g, ones, Some(&keep)).unwrap();
        let pos = g.reverse_cumsum(gates);
        let pos = g.data(pos);
        for i in 0..n {
            for j in 0..=i {
                assert_eq!(pos[i * n + j], (i - j + 1) as f64);
            }
        }
    }

    #[test]
    fn perturbing_a_later_item_leaves_earlier_states_unchanged() {
        for variant in PeVariant::ALL {
            let model = Model::new(tiny(Backbone::Sasrec, variant), 8).unwrap();
            let mut b = batch(&[5], 5);
            let hidden = |b: &ContextBatch| {
                let mut g = Graph::new();
                let p = model.params().bind(&mut g, false);
                let (h, _) = encode(&model, &mut g, &p, b).unwrap();
                g.data(h).to_vec()
            };
            let before = hidden(&b);
            b.items[3] = 11;
            b.categories[3] = 5;
            let after = hidden(&b);
            let d = model.config().d();
            assert_eq!(before[..3 * d], after[..3 * d], "{variant}");
            assert_ne!(before[3 * d..4 * d], after[3 * d..4 * d], "{variant}");
        }
    }
}
