//! Optimisation, early stopping and evaluation.

mod adam;
mod metrics;

pub use adam::{adam_step, AdamState};
pub use metrics::{auc, gauc, logloss, ndcg_at_k, positive_rank, recall_at_k, MetricsReport};

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{negative_sample, CategoryMap, ContextBatch, Interaction};
use crate::error::{Error, Result};
use crate::model::{Model, ParamStore};
use crate::rng::{self, Stream};

fn default_lr() -> f64 {
    5e-4
}
fn default_batch_size() -> usize {
    128
}
fn default_max_epochs() -> usize {
    20
}
fn default_patience() -> usize {
    3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_negatives() -> usize {
    20
}
fn default_ks() -> Vec<usize> {
    vec![1, 5, 10]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// Sampled negatives per positive for Recall@K / NDCG@K; 0 skips them.
    #[serde(default = "default_negatives")]
    pub ranking_negatives: usize,
    #[serde(default = "default_ks")]
    pub ranking_ks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            batch_size: default_batch_size(),
            max_epochs: default_max_epochs(),
            early_stop_patience: default_patience(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            seed: 0,
            ranking_negatives: default_negatives(),
            ranking_ks: default_ks(),
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("train.learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            out.push("train.batch_size must be positive".to_string());
        }
        if self.max_epochs == 0 {
            out.push("train.max_epochs must be positive".to_string());
        }
        if self.early_stop_patience == 0 {
            out.push("train.early_stop_patience must be at least 1".to_string());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("train.{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            out.push(format!("train.eps must be positive, got {}", self.eps));
        }
        if self.ranking_negatives > 0 {
            if let Some(&k) = self.ranking_ks.iter().find(|&&k| k == 0 || k > self.ranking_negatives + 1) {
                out.push(format!(
                    "train.ranking_ks entry {k} must lie in [1, {}]",
                    self.ranking_negatives + 1
                ));
            }
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

/// Widest context in `data`.
fn context_width(data: &[Interaction]) -> usize {
    data.iter().map(Interaction::len).max().unwrap_or(0)
}

/// Click probabilities for every example of `data`, in order.
pub fn predict_all(model: &Model, data: &[Interaction], batch_size: usize) -> Result<Vec<f64>> {
    let width = context_width(data);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        out.extend(model.predict(&ContextBatch::new(data, chunk, width)?)?);
    }
    Ok(out)
}

fn ranking_metrics(
    model: &Model,
    data: &[Interaction],
    cfg: &TrainConfig,
) -> Result<(BTreeMap<usize, f64>, BTreeMap<usize, f64>)> {
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    let positives: Vec<usize> = (0..data.len()).filter(|&i| data[i].label == 1).collect();
    if cfg.ranking_negatives == 0 || cfg.ranking_ks.is_empty() || positives.is_empty() {
        return Ok((recall, ndcg));
    }
    let catalog = CategoryMap::from_data(data)?;
    let pool = catalog.items();
    let mut rng = rng::stream(cfg.seed, Stream::Sampling);
    let width = context_width(data);
    let mut lists = Vec::with_capacity(positives.len());
    for chunk in positives.chunks(cfg.batch_size.max(1)) {
        let batch = ContextBatch::new(data, chunk, width)?;
        let mut candidates = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let x = &data[i];
            let mut seen = x.item_ids.clone();
            seen.push(x.target_item);
            let negs = negative_sample(&seen, &pool, cfg.ranking_negatives, &mut rng)?;
            let mut c = vec![(x.target_item, x.target_category)];
            c.extend(negs.into_iter().map(|item| (item, catalog.get(item))));
            candidates.push(c);
        }
        lists.extend(model.candidate_scores(&batch, &candidates)?);
    }
    let pos_index = vec![0; lists.len()];
    for &k in &cfg.ranking_ks {
        recall.insert(k, recall_at_k(&lists, &pos_index, k)?);
        ndcg.insert(k, ndcg_at_k(&lists, &pos_index, k)?);
    }
    Ok((recall, ndcg))
}

/// All metrics of `model` on `data`; `epoch` is copied into the report.
pub fn evaluate(model: &Model, data: &[Interaction], cfg: &TrainConfig, epoch: usize) -> Result<MetricsReport> {
    let probs = predict_all(model, data, cfg.batch_size)?;
    let labels: Vec<f64> = data.iter().map(|x| f64::from(x.label)).collect();
    let users: Vec<&str> = data.iter().map(|x| x.user_id.as_str()).collect();
    let gauc = match gauc(&probs, &labels, &users) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let (recall_at_k, ndcg_at_k) = ranking_metrics(model, data, cfg)?;
    Ok(MetricsReport {
        epoch,
        seed: cfg.seed,
        auc: auc(&probs, &labels)?,
        gauc,
        logloss: logloss(&probs, &labels)?,
        recall_at_k,
        ndcg_at_k,
    })
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the per-batch training losses.
    pub train_loss: f64,
    pub valid: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model holding the parameters of the best validation epoch.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }
}

/// Trains with Adam, scoring `valid` after every epoch. Stops once
/// validation AUC has not improved for `early_stop_patience` epochs and
/// returns the best parameters seen.
pub fn train(model: Model, train_data: &[Interaction], valid: &[Interaction], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, train_data, valid, cfg, |_| {})
}

/// [`train`] with a callback run after each epoch.
pub fn train_with(
    mut model: Model,
    train_data: &[Interaction],
    valid: &[Interaction],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() || valid.is_empty() {
        return Err(Error::Config("training and validation data must be non-empty".into()));
    }
    let width = context_width(train_data);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, Stream::Shuffle);
    let mut state = AdamState::new(model.params());
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut stale = 0;
    let mut batch_index = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = ContextBatch::new(train_data, chunk, width)?;
            let (loss, probs, grads) = model.loss_and_grads(&batch)?;
            if !loss.is_finite() || probs.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    batch: batch_index,
                    value: loss,
                });
            }
            adam_step(model.params_mut(), &grads, &mut state, cfg)?;
            total += loss;
            count += 1;
            batch_index += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / count as f64,
            valid: evaluate(&model, valid, cfg, epoch)?,
        };
        on_epoch(&record);
        let auc = record.valid.auc;
        history.push(record);
        match &best {
            Some((b, _, _)) if auc <= *b => stale += 1,
            _ => {
                best = Some((auc, epoch, model.params().clone()));
                stale = 0;
            }
        }
        if stale >= cfg.early_stop_patience {
            break;
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.load_params(params)?;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

fn unix_time() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// JSON object for one history line: every [`MetricsReport`] field of the
/// validation metrics, the training loss, and a `meta` object carrying the
/// wall-clock timestamp.
pub fn epoch_json(record: &EpochRecord, timestamp: f64) -> serde_json::Value {
    let mut obj = serde_json::to_value(&record.valid).expect("report serialises");
    let map = obj.as_object_mut().expect("object");
    map.insert("train_loss".into(), serde_json::json!(record.train_loss));
    map.insert("meta".into(), serde_json::json!({ "timestamp": timestamp }));
    obj
}

/// Writes one JSON object per epoch.
pub fn write_history_jsonl(mut w: impl Write, history: &[EpochRecord]) -> std::io::Result<()> {
    for record in history {
        serde_json::to_writer(&mut w, &epoch_json(record, unix_time()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Drops the `meta` field from every line, leaving what must be identical
/// between runs with equal inputs.
pub fn strip_meta(jsonl: &str) -> Result<String> {
    let mut out = String::new();
    for (i, line) in jsonl.lines().enumerate() {
        let mut v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i as u64 + 1,
            msg: e.to_string(),
        })?;
        if let Some(map) = v.as_object_mut() {
            map.remove("meta");
        }
        out.push_str(&v.to_string());
        out.push('\n');
    }
    Ok(out)
}
