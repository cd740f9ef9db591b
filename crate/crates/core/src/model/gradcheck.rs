//! Finite-difference check of every model parameter on a small instance.

use super::{Backbone, Model, ModelConfig};
use crate::data::{ContextBatch, Interaction};
use crate::error::Result;
use crate::position::{PEConfig, PeVariant};
use crate::tensor::gradcheck::{check, DEFAULT_STEP};

/// Worst relative error seen for one named parameter.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub analytic: f64,
    pub numeric: f64,
}

/// Small configuration used for gradient checks.
pub fn check_config(backbone: Backbone, variant: PeVariant) -> ModelConfig {
    let mut c = ModelConfig::new(backbone, PEConfig::new(variant, 3, 6), 12, 6);
    c.embed_dim = 4;
    c.att_hidden = vec![5];
    c.head_hidden = vec![4];
    c.n_heads = 2;
    c
}

/// Two examples padded to width 4; the second is one item shorter.
pub fn check_instance() -> Vec<Interaction> {
    vec![
        Interaction {
            user_id: "a".into(),
            item_ids: vec![3, 7, 5, 9],
            category_ids: vec![2, 4, 3, 5],
            target_item: 6,
            target_category: 3,
            label: 1,
        },
        Interaction {
            user_id: "b".into(),
            item_ids: vec![10, 4, 8],
            category_ids: vec![5, 2, 4],
            target_item: 11,
            target_category: 2,
            label: 0,
        },
    ]
}

/// Compares the backward pass of the mean BCE with central differences
/// for every parameter of `model` on `data`.
pub fn check_model(model: &Model, data: &[Interaction], width: usize) -> Result<Vec<ParamCheck>> {
    let batch = ContextBatch::from_all(data, width)?;
    let store = model.params();
    let inputs: Vec<_> = store.iter().map(|(_, t)| t.clone()).collect();
    let reports = check(
        &inputs,
        |g, vars| {
            let p = store.attach(vars)?;
            let out = model.forward(g, &p, &batch)?;
            g.bce_loss(out.probs, &batch.labels)
        },
        DEFAULT_STEP,
    )?;
    Ok(store
        .iter()
        .zip(reports)
        .map(|((name, _), r)| ParamCheck {
            name: name.to_string(),
            max_rel_err: r.max_rel_err,
            analytic: r.analytic,
            numeric: r.numeric,
        })
        .collect())
}

/// [`check_model`] on [`check_config`] and [`check_instance`].
pub fn check_combo(backbone: Backbone, variant: PeVariant, seed: u64) -> Result<Vec<ParamCheck>> {
    let model = Model::new(check_config(backbone, variant), seed)?;
    check_model(&model, &check_instance(), 4)
}
