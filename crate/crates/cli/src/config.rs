use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cape_core::data::{SyntheticSpec, Vocab};
use cape_core::model::{Backbone, ModelConfig};
use cape_core::position::{PEConfig, PeVariant, ROPE_BASE};
use cape_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

fn default_backbone() -> String {
    "din".into()
}
fn default_variant() -> String {
    "cape".into()
}
fn default_d_pos() -> usize {
    16
}
fn default_embed_dim() -> usize {
    16
}
fn default_att_hidden() -> Vec<usize> {
    vec![32]
}
fn default_head_hidden() -> Vec<usize> {
    vec![32]
}
fn default_one() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_rope_base() -> f64 {
    ROPE_BASE
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Model section of a run config. Names stay strings until validation so
/// that every bad field can be reported at once; vocabulary sizes and
/// `n_max` are inferred from the data when absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_backbone")]
    pub backbone: String,
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default = "default_d_pos")]
    pub d_pos: usize,
    #[serde(default)]
    pub n_max: Option<usize>,
    #[serde(default = "default_true")]
    pub gate_sim_scale: bool,
    #[serde(default)]
    pub cope_p_max: Option<f64>,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default)]
    pub n_items: Option<usize>,
    #[serde(default)]
    pub n_categories: Option<usize>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_att_hidden")]
    pub att_hidden: Vec<usize>,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: Vec<usize>,
    #[serde(default = "default_one")]
    pub n_heads: usize,
    #[serde(default = "default_one")]
    pub n_blocks: usize,
    #[serde(default = "default_true")]
    pub din_use_diff: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub valid: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Generates the data into `<out_dir>/data` when no paths are given.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
    }

    /// Every problem with the names, the model shape and the training
    /// settings. Vocabulary and `n_max` are filled from `inferred` when the
    /// config leaves them out.
    pub fn problems(&self, inferred: Option<(Vocab, usize)>) -> Vec<String> {
        let mut out = Vec::new();
        let backbone = self.model.backbone.parse::<Backbone>();
        let variant = self.model.variant.parse::<PeVariant>();
        if let Err(e) = &backbone {
            out.push(format!("model.backbone: {}", core_message(e)));
        }
        if let Err(e) = &variant {
            out.push(format!("model.variant: {}", core_message(e)));
        }
        if let (Ok(b), Ok(v)) = (backbone, variant) {
            out.extend(self.model_config_with(b, v, inferred).problems());
        }
        out.extend(self.train.problems());
        out
    }

    fn model_config_with(&self, backbone: Backbone, variant: PeVariant, inferred: Option<(Vocab, usize)>) -> ModelConfig {
        let m = &self.model;
        // Before the data is read, stand-ins that pass validation.
        let (vocab, longest) = inferred.unwrap_or((
            Vocab {
                n_items: 3,
                n_categories: 3,
            },
            1,
        ));
        let mut pe = PEConfig::new(variant, m.d_pos, m.n_max.unwrap_or(longest));
        pe.gate_sim_scale = m.gate_sim_scale;
        pe.cope_p_max = m.cope_p_max;
        pe.rope_base = m.rope_base;
        let mut cfg = ModelConfig::new(
            backbone,
            pe,
            m.n_items.unwrap_or(vocab.n_items),
            m.n_categories.unwrap_or(vocab.n_categories),
        );
        cfg.embed_dim = m.embed_dim;
        cfg.att_hidden = m.att_hidden.clone();
        cfg.head_hidden = m.head_hidden.clone();
        cfg.n_heads = m.n_heads;
        cfg.n_blocks = m.n_blocks;
        cfg.din_use_diff = m.din_use_diff;
        cfg
    }

    /// Validated model configuration.
    pub fn model_config(&self, inferred: Option<(Vocab, usize)>) -> anyhow::Result<ModelConfig> {
        let problems = self.problems(inferred);
        if !problems.is_empty() {
            bail!("invalid configuration:\n  - {}", problems.join("\n  - "));
        }
        Ok(self.model_config_with(
            self.model.backbone.parse()?,
            self.model.variant.parse()?,
            inferred,
        ))
    }

    /// Pins the inferred vocabulary and context length into the config so
    /// a later `eval` rebuilds exactly the trained model.
    pub fn pin(&mut self, cfg: &ModelConfig) {
        self.model.n_items = Some(cfg.n_items);
        self.model.n_categories = Some(cfg.n_categories);
        self.model.n_max = Some(cfg.pe.n_max);
    }
}

/// The message of a core error without its category prefix.
fn core_message(e: &cape_core::Error) -> String {
    match e {
        cape_core::Error::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}
