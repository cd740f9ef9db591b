//! Attention backbones and their learnable parameters.

mod checkpoint;
mod din;
pub mod gradcheck;
mod sasrec;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use din::{attention_weights_and_pool, din_attention_logits, AttentionOutput};
pub use sasrec::causal_mask;

use std::fmt;
use std::str::FromStr;

use indexmap::{IndexMap, IndexSet};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ContextBatch;
use crate::error::{Error, Result};
use crate::position::{GateProjection, PEConfig, PeVariant, PositionTable};
use crate::rng::{self, Stream};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Din,
    Sasrec,
}

impl Backbone {
    pub const ALL: [Backbone; 2] = [Backbone::Din, Backbone::Sasrec];

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Din => "din",
            Backbone::Sasrec => "sasrec",
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Backbone::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown backbone `{s}`; valid backbones: din, sasrec")))
    }
}

fn default_embed_dim() -> usize {
    64
}
fn default_att_hidden() -> Vec<usize> {
    vec![80, 40]
}
fn default_head_hidden() -> Vec<usize> {
    vec![200, 80]
}
fn default_one() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub pe: PEConfig,
    /// Item vocabulary size including the padding and OOV ids.
    pub n_items: usize,
    pub n_categories: usize,
    /// Per-feature embedding width; items are `2 * embed_dim` wide.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Hidden sizes of the DIN attention unit.
    #[serde(default = "default_att_hidden")]
    pub att_hidden: Vec<usize>,
    /// Hidden sizes of the prediction MLP.
    #[serde(default = "default_head_hidden")]
    pub head_hidden: Vec<usize>,
    #[serde(default = "default_one")]
    pub n_heads: usize,
    #[serde(default = "default_one")]
    pub n_blocks: usize,
    /// Feed `t - h` to the DIN attention unit alongside `t`, `h`, `t * h`.
    #[serde(default = "default_true")]
    pub din_use_diff: bool,
}

impl ModelConfig {
    pub fn new(backbone: Backbone, pe: PEConfig, n_items: usize, n_categories: usize) -> Self {
        ModelConfig {
            backbone,
            pe,
            n_items,
            n_categories,
            embed_dim: default_embed_dim(),
            att_hidden: default_att_hidden(),
            head_hidden: default_head_hidden(),
            n_heads: 1,
            n_blocks: 1,
            din_use_diff: true,
        }
    }

    /// Item embedding width (item and category embeddings concatenated).
    pub fn d(&self) -> usize {
        2 * self.embed_dim
    }

    /// Width the position encoding operates on.
    pub fn pe_width(&self) -> usize {
        match self.backbone {
            Backbone::Din => self.d(),
            Backbone::Sasrec => self.d() / self.n_heads.max(1),
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.embed_dim == 0 {
            out.push("model.embed_dim must be positive".to_string());
        }
        if self.n_items < 3 {
            out.push(format!("model.n_items must cover padding, OOV and one item, got {}", self.n_items));
        }
        if self.n_categories < 3 {
            out.push(format!("model.n_categories must cover padding, OOV and one category, got {}", self.n_categories));
        }
        if self.att_hidden.contains(&0) || self.head_hidden.contains(&0) {
            out.push("model hidden layer sizes must be positive".to_string());
        }
        if self.backbone == Backbone::Sasrec {
            if !matches!(self.n_heads, 1 | 2 | 4 | 8) {
                out.push(format!("model.n_heads must be one of 1, 2, 4, 8, got {}", self.n_heads));
            } else if self.d() % self.n_heads != 0 {
                out.push(format!("model.n_heads {} must divide d = {}", self.n_heads, self.d()));
            }
            if self.n_blocks == 0 {
                out.push("model.n_blocks must be positive".to_string());
            }
        }
        if self.d() > 0 && self.n_heads > 0 {
            out.extend(self.pe.problems(self.pe_width()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Named parameters in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.values_mut()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Puts every parameter on `g`, differentiable when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .values()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound {
            names: self.tensors.keys().cloned().collect(),
            vars,
        }
    }
}

impl ParamStore {
    /// Names parameters already placed on a graph, in store order.
    pub fn attach(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.len() {
            return Err(Error::dim("attach", &[self.len()], &[vars.len()]));
        }
        Ok(Bound {
            names: self.tensors.keys().cloned().collect(),
            vars: vars.to_vec(),
        })
    }
}

/// Parameters placed on a graph, looked up by name.
#[derive(Clone, Debug)]
pub struct Bound {
    names: IndexSet<String>,
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .names
            .get_index_of(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was never initialised"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("shape")
}

fn add_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}.w"), uniform(&[fan_in, fan_out], bound, rng));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

fn add_mlp(store: &mut ParamStore, prefix: &str, input: usize, hidden: &[usize], rng: &mut impl Rng) {
    let mut fan_in = input;
    for (i, &h) in hidden.iter().chain([&1]).enumerate() {
        add_linear(store, &format!("{prefix}.{i}"), fan_in, h, rng);
        fan_in = h;
    }
}

/// Linear layers with SiLU between them; the final layer is linear.
pub(crate) fn mlp(g: &mut Graph, p: &Bound, prefix: &str, layers: usize, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        let w = p.get(&format!("{prefix}.{i}.w"));
        let b = p.get(&format!("{prefix}.{i}.b"));
        h = g.matmul(h, w)?;
        h = g.add_row(h, b)?;
        if i + 1 < layers {
            h = g.silu(h);
        }
    }
    Ok(h)
}

/// `sigmoid(MLP([pooled, target, extras]))`, one probability per row.
pub fn predict_head(g: &mut Graph, p: &Bound, layers: usize, pooled: Var, target: Var, extras: Option<Var>) -> Result<Var> {
    let mut parts = vec![pooled, target];
    parts.extend(extras);
    let x = g.concat(&parts)?;
    let expected = g.shape(p.get("head.0.w"))[0];
    if g.shape(x)[1] != expected {
        return Err(Error::Config(format!(
            "prediction head expects width {expected}, got {}",
            g.shape(x)[1]
        )));
    }
    let logit = mlp(g, p, "head", layers, x)?;
    let prob = g.sigmoid(logit);
    let rows = g.shape(prob)[0];
    g.reshape(prob, &[rows])
}

/// Output of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Click probabilities, `[B]`.
    pub probs: Var,
    /// Final user representation, `[B, d]` (pooled interest for DIN, the
    /// output state of the appended target for SASRec).
    pub user: Var,
    /// Attention weights of the pooling (DIN) or of the last block over
    /// context plus target (SASRec).
    pub attention: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    /// Validated model with parameters drawn from the `init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Stream::Init);
        let mut store = ParamStore::default();
        let (f, d) = (config.embed_dim, config.d());
        store.insert("emb.item", uniform(&[config.n_items, f], 0.1, &mut rng));
        store.insert("emb.cat", uniform(&[config.n_categories, f], 0.1, &mut rng));
        match config.backbone {
            Backbone::Din => {
                add_pe_params(&mut store, "pe", &config.pe, d, &mut rng);
                let unit_in = if config.din_use_diff { 4 * d } else { 3 * d };
                add_mlp(&mut store, "att", unit_in, &config.att_hidden, &mut rng);
            }
            Backbone::Sasrec => sasrec::init_params(&mut store, &config, &mut rng),
        }
        add_mlp(&mut store, "head", 3 * d, &config.head_hidden, &mut rng);
        Ok(Model { config, params: store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces all parameters, checking names and shapes against this model.
    pub fn load_params(&mut self, store: ParamStore) -> Result<()> {
        for (name, t) in self.params.iter() {
            let found = store
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` missing from checkpoint")))?;
            if found.shape() != t.shape() {
                return Err(Error::ParamShape {
                    name: name.to_string(),
                    expected: t.shape().to_vec(),
                    found: found.shape().to_vec(),
                });
            }
        }
        if let Some((extra, _)) = store.iter().find(|(n, _)| self.params.get(n).is_none()) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}` in checkpoint")));
        }
        let ordered = self
            .params
            .iter()
            .map(|(n, _)| (n.to_string(), store.get(n).expect("checked").clone()))
            .collect();
        self.params = ParamStore { tensors: ordered };
        Ok(())
    }

    pub(crate) fn head_layers(&self) -> usize {
        self.config.head_hidden.len() + 1
    }

    /// `[rows, d]` embeddings of (item, category) id pairs.
    pub(crate) fn embed(&self, g: &mut Graph, p: &Bound, items: &[usize], cats: &[usize]) -> Result<Var> {
        let e_item = g.gather_rows(p.get("emb.item"), items)?;
        let e_cat = g.gather_rows(p.get("emb.cat"), cats)?;
        g.concat(&[e_item, e_cat])
    }

    /// Records the forward pass for `batch` on `g`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &ContextBatch) -> Result<Forward> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        if batch.width > self.config.pe.n_max {
            return Err(Error::Length {
                len: batch.width,
                n_max: self.config.pe.n_max,
            });
        }
        match self.config.backbone {
            Backbone::Din => din::forward(self, g, p, batch),
            Backbone::Sasrec => sasrec::forward(self, g, p, batch),
        }
    }

    pub fn predict(&self, batch: &ContextBatch) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &p, batch)?;
        Ok(g.data(out.probs).to_vec())
    }

    /// Mean BCE of `batch`, the probabilities, and the gradient of every
    /// parameter in store order.
    pub fn loss_and_grads(&self, batch: &ContextBatch) -> Result<(f64, Vec<f64>, Vec<Tensor>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true);
        let out = self.forward(&mut g, &p, batch)?;
        let loss = g.bce_loss(out.probs, &batch.labels)?;
        let value = g.data(loss)[0];
        let probs = g.data(out.probs).to_vec();
        g.backward(loss)?;
        let grads = p.vars().iter().map(|v| g.grad(*v).expect("leaf").clone()).collect();
        Ok((value, probs, grads))
    }

    pub fn loss(&self, batch: &ContextBatch) -> Result<f64> {
        let probs = self.predict(batch)?;
        Ok(crate::tensor::bce(&probs, &batch.labels))
    }

    /// Next-item scores for each example's candidate list.
    ///
    /// DIN scores a candidate by its click probability as the target.
    /// SASRec scores it by the dot product of the last hidden state with
    /// the candidate embedding.
    pub fn candidate_scores(&self, batch: &ContextBatch, candidates: &[Vec<(usize, usize)>]) -> Result<Vec<Vec<f64>>> {
        match self.config.backbone {
            Backbone::Din => {
                let expanded = batch.with_candidates(candidates)?;
                let probs = self.predict(&expanded)?;
                let mut it = probs.into_iter();
                Ok(candidates.iter().map(|c| it.by_ref().take(c.len()).collect()).collect())
            }
            Backbone::Sasrec => {
                let mut g = Graph::new();
                let p = self.params.bind(&mut g, false);
                let user = sasrec::context_state(self, &mut g, &p, batch)?;
                let d = self.config.d();
                let hidden = g.data(user).to_vec();
                candidates
                    .iter()
                    .enumerate()
                    .map(|(b, cands)| {
                        let (items, cats): (Vec<_>, Vec<_>) = cands.iter().copied().unzip();
                        let e = self.embed(&mut g, &p, &items, &cats)?;
                        let h = &hidden[b * d..(b + 1) * d];
                        Ok(g.data(e).chunks(d).map(|row| row.iter().zip(h).map(|(x, y)| x * y).sum()).collect())
                    })
                    .collect()
            }
        }
    }
}

/// Position-encoding parameters for vectors of width `width`.
pub(crate) fn add_pe_params(store: &mut ParamStore, prefix: &str, pe: &PEConfig, width: usize, rng: &mut impl Rng) {
    match pe.variant {
        PeVariant::None | PeVariant::Rope => {}
        PeVariant::Naive => {
            let bound = 1.0 / (width as f64).sqrt();
            store.insert(format!("{prefix}.naive"), uniform(&[pe.n_max, width], bound, rng));
        }
        PeVariant::Cope => {
            store.insert(format!("{prefix}.cope.table"), PositionTable::random(pe.n_max, width, rng).embeddings);
        }
        PeVariant::Cape => {
            let proj = GateProjection::random(width, pe.d_pos, rng);
            store.insert(format!("{prefix}.cape.w"), proj.w);
            store.insert(format!("{prefix}.cape.b"), proj.b);
            store.insert(format!("{prefix}.cape.table"), PositionTable::random(pe.n_max, pe.d_pos, rng).embeddings);
        }
    }
}

/// Graph handles for the contextual PE parameters under `prefix`.
pub(crate) fn contextual_params(p: &Bound, prefix: &str, variant: PeVariant) -> Option<crate::position::ContextualPe> {
    match variant {
        PeVariant::Cape => Some(crate::position::ContextualPe {
            projection: Some((p.get(&format!("{prefix}.cape.w")), p.get(&format!("{prefix}.cape.b")))),
            table: p.get(&format!("{prefix}.cape.table")),
        }),
        PeVariant::Cope => Some(crate::position::ContextualPe {
            projection: None,
            table: p.get(&format!("{prefix}.cope.table")),
        }),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(backbone: Backbone, variant: PeVariant) -> ModelConfig {
        let mut c = ModelConfig::new(backbone, PEConfig::new(variant, 3, 6), 12, 6);
        c.embed_dim = 4;
        c.att_hidden = vec![5];
        c.head_hidden = vec![4];
        c.n_heads = 2;
        c
    }

    #[test]
    fn config_problems_are_listed() {
        let mut c = tiny(Backbone::Sasrec, PeVariant::Cape);
        c.n_heads = 3;
        c.pe.d_pos = 0;
        c.n_items = 1;
        let problems = c.problems();
        assert_eq!(problems.len(), 3, "{problems:?}");
        assert!(tiny(Backbone::Din, PeVariant::Cape).problems().is_empty());
    }

    #[test]
    fn parameter_sets_depend_on_variant() {
        for backbone in Backbone::ALL {
            let names = |v| {
                Model::new(tiny(backbone, v), 0)
                    .unwrap()
                    .params()
                    .iter()
                    .map(|(n, _)| n.to_string())
                    .collect::<Vec<_>>()
            };
            let none = names(PeVariant::None);
            assert_eq!(none, names(PeVariant::Rope));
            assert!(names(PeVariant::Cape).iter().any(|n| n.contains("cape.table")));
            assert!(names(PeVariant::Cope).iter().any(|n| n.contains("cope.table")));
            assert!(names(PeVariant::Naive).len() == none.len() + 1);
        }
    }

    #[test]
    fn loading_checks_shapes() {
        let mut a = Model::new(tiny(Backbone::Din, PeVariant::Cape), 0).unwrap();
        let mut other = tiny(Backbone::Din, PeVariant::Cape);
        other.pe.d_pos = 2;
        let b = Model::new(other, 0).unwrap();
        match a.load_params(b.params().clone()) {
            Err(Error::ParamShape { name, .. }) => assert_eq!(name, "pe.cape.w"),
            other => panic!("{other:?}"),
        }
    }
}
