//! Target attention: the candidate item queries the user's context.

use super::{contextual_params, mlp, predict_head, Bound, Forward, Model};
use crate::data::ContextBatch;
use crate::error::{Error, Result};
use crate::position::{contextual_logits, naive_pe_apply, rope_apply, PeVariant};
use crate::tensor::{Graph, Var};

/// Attention weights and the pooled interest vector.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[B, n]`, zero at padding.
    pub weights: Var,
    /// `[B, d]`, `sum_j a_j h_j`.
    pub pooled: Var,
}

/// Per-item logits from the DIN attention unit: an MLP over
/// `[t, h_j, t - h_j, t * h_j]` (without `t - h_j` when `use_diff` is off).
///
/// `target: [B, d]`, `context: [B*n, d]`; returns `[B, n]`.
pub fn din_attention_logits(
    g: &mut Graph,
    p: &Bound,
    layers: usize,
    target: Var,
    context: Var,
    n: usize,
    use_diff: bool,
) -> Result<Var> {
    let (st, sc) = (g.shape(target).to_vec(), g.shape(context).to_vec());
    let b = st[0];
    if st.len() != 2 || sc.len() != 2 || st[1] != sc[1] || sc[0] != b * n {
        return Err(Error::Config(format!("DIN unit got target {st:?} and context {sc:?} for n = {n}")));
    }
    let ids: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, n)).collect();
    let t = g.gather_rows(target, &ids)?;
    let prod = g.mul(t, context)?;
    let input = if use_diff {
        let diff = g.sub(t, context)?;
        g.concat(&[t, context, diff, prod])?
    } else {
        g.concat(&[t, context, prod])?
    };
    let expected = g.shape(p.get("att.0.w"))[0];
    if g.shape(input)[1] != expected {
        return Err(Error::Config(format!(
            "attention unit expects width {expected}, got {}",
            g.shape(input)[1]
        )));
    }
    let logits = mlp(g, p, "att", layers, input)?;
    g.reshape(logits, &[b, n])
}

/// `a = softmax(item_logits + pos_logits)` over real positions and
/// `o = sum_j a_j h_j`; `context: [B, n, d]`.
pub fn attention_weights_and_pool(
    g: &mut Graph,
    item_logits: Var,
    pos_logits: Option<Var>,
    context: Var,
    mask: &[bool],
) -> Result<AttentionOutput> {
    let logits = match pos_logits {
        Some(z) => g.add(item_logits, z)?,
        None => item_logits,
    };
    let sc = g.shape(context).to_vec();
    if sc.len() != 3 || g.shape(logits) != [sc[0], sc[1]] {
        return Err(Error::dim("attention_weights_and_pool", g.shape(logits), &sc));
    }
    let weights = g.softmax(logits, Some(mask))?;
    let (b, n, d) = (sc[0], sc[1], sc[2]);
    let w3 = g.reshape(weights, &[b, 1, n])?;
    let pooled = g.bmm(w3, context)?;
    let pooled = g.reshape(pooled, &[b, d])?;
    Ok(AttentionOutput { weights, pooled })
}

pub(super) fn forward(model: &Model, g: &mut Graph, p: &Bound, batch: &ContextBatch) -> Result<Forward> {
    let cfg = model.config();
    let (b, n, d) = (batch.len(), batch.width, cfg.d());
    let mut h = model.embed(g, p, &batch.items, &batch.categories)?;
    let t = model.embed(g, p, &batch.target_items, &batch.target_categories)?;
    if cfg.pe.variant == PeVariant::Naive {
        h = naive_pe_apply(g, h, n, p.get("pe.naive"))?;
    }
    // Rotary: context item j turns by j, the target by its own index (the
    // step after the last real item).
    let (h_att, t_att) = if cfg.pe.variant == PeVariant::Rope {
        let idx: Vec<usize> = (0..b * n).map(|r| r % n).collect();
        (
            rope_apply(g, h, &idx, cfg.pe.rope_base)?,
            rope_apply(g, t, &batch.lengths, cfg.pe.rope_base)?,
        )
    } else {
        (h, t)
    };
    let att_layers = cfg.att_hidden.len() + 1;
    let item_logits = din_attention_logits(g, p, att_layers, t_att, h_att, n, cfg.din_use_diff)?;
    let h3 = g.reshape(h, &[b, n, d])?;
    let pos_logits = match contextual_params(p, "pe", cfg.pe.variant) {
        Some(params) => {
            let mask = batch.mask_tensor();
            Some(contextual_logits(g, t, h3, Some(&mask), params, &cfg.pe)?.logits)
        }
        None => None,
    };
    let att = attention_weights_and_pool(g, item_logits, pos_logits, h3, &batch.mask)?;
    let extras = g.mul(att.pooled, t)?;
    let probs = predict_head(g, p, model.head_layers(), att.pooled, t, Some(extras))?;
    Ok(Forward {
        probs,
        user: att.pooled,
        attention: att.weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Backbone, ModelConfig, ParamStore};
    use crate::position::PEConfig;
    use crate::tensor::Tensor;

    #[test]
    fn zero_unit_gives_bias_logits() {
        let (d, n) = (2, 3);
        let mut store = ParamStore::default();
        store.insert("att.0.w", Tensor::zeros(&[4 * d, 1]));
        store.insert("att.0.b", Tensor::vector(vec![0.7]));
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let t = g.constant(Tensor::new(vec![1, d], vec![0.3, -0.2]).unwrap());
        let c = g.constant(Tensor::new(vec![n, d], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let z = din_attention_logits(&mut g, &p, 1, t, c, n, true).unwrap();
        assert_eq!(g.data(z), &[0.7; 3]);
    }

    #[test]
    fn identical_context_items_get_identical_logits() {
        let cfg = {
            let mut c = ModelConfig::new(Backbone::Din, PEConfig::new(PeVariant::None, 2, 4), 10, 5);
            c.embed_dim = 3;
            c.att_hidden = vec![4];
            c
        };
        let model = Model::new(cfg, 1).unwrap();
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let t = model.embed(&mut g, &p, &[4], &[2]).unwrap();
        let c = model.embed(&mut g, &p, &[7, 7, 7], &[3, 3, 3]).unwrap();
        let z = din_attention_logits(&mut g, &p, 2, t, c, 3, true).unwrap();
        let v = g.data(z);
        assert!(v[0] == v[1] && v[1] == v[2]);
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::new();
        let ctx = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap());
        let logits = g.constant(Tensor::new(vec![1, 2], vec![2f64.ln(), 0.0]).unwrap());
        let out = attention_weights_and_pool(&mut g, logits, None, ctx, &[true, true]).unwrap();
        let w = g.data(out.weights);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);

        let flat = g.constant(Tensor::zeros(&[1, 2]));
        let zero_pos = g.constant(Tensor::zeros(&[1, 2]));
        let out = attention_weights_and_pool(&mut g, flat, Some(zero_pos), ctx, &[true, true]).unwrap();
        assert_eq!(g.data(out.pooled), &[0.5, 1.5]);

        let all_pad = attention_weights_and_pool(&mut g, flat, None, ctx, &[false, false]);
        assert!(matches!(all_pad, Err(Error::DegenerateRow { .. })));
    }
}
