//! Intent-segmented synthetic sessions.
//!
//! Each user's context is a run of segments; a segment draws consecutive
//! items from one intent's item set. The positive target comes from the
//! intent of the most recent segment, the negative from another intent, so
//! the label depends on where in the context an intent occurs, not only on
//! whether it occurs.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{split_by_user, write_csv, Interaction, Splits, Vocab, FIRST_ID};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveRule {
    /// Positive target drawn from the intent of the last segment.
    MostRecentSegment,
}

fn default_rule() -> PositiveRule {
    PositiveRule::MostRecentSegment
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_intents: usize,
    pub items_per_intent: usize,
    /// Inclusive `[min, max]` segment length.
    pub segment_length_range: (usize, usize),
    /// Inclusive `[min, max]` context length.
    pub context_length_range: (usize, usize),
    #[serde(default = "default_rule")]
    pub positive_rule: PositiveRule,
    /// Probability that a context item is swapped for an item of another
    /// intent. Zero gives clean segments.
    #[serde(default)]
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// `n_intents` equally sized intents over `n_items` items.
    pub fn new(n_users: usize, n_items: usize, n_intents: usize, context_len: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_users,
            n_items,
            n_intents,
            items_per_intent: n_items.checked_div(n_intents).unwrap_or(0),
            segment_length_range: (3, 8),
            context_length_range: (context_len, context_len),
            positive_rule: PositiveRule::MostRecentSegment,
            noise: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_users == 0 {
            problems.push("n_users must be positive".to_string());
        }
        if self.n_intents == 0 {
            problems.push("n_intents must be positive".to_string());
        }
        if self.items_per_intent == 0 {
            problems.push("items_per_intent must be positive".to_string());
        }
        if self.n_intents * self.items_per_intent != self.n_items {
            problems.push(format!(
                "intents must partition the items: {} x {} != {}",
                self.n_intents, self.items_per_intent, self.n_items
            ));
        }
        for (name, (lo, hi)) in [
            ("segment_length_range", self.segment_length_range),
            ("context_length_range", self.context_length_range),
        ] {
            if lo == 0 || lo > hi {
                problems.push(format!("{name} [{lo}, {hi}] must be non-empty and start at 1 or more"));
            }
        }
        if !(0.0..1.0).contains(&self.noise) {
            problems.push(format!("noise must lie in [0, 1), got {}", self.noise));
        }
        if self.noise > 0.0 && self.n_intents < 2 {
            problems.push("noise needs at least two intents".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Spec(problems.join("; ")))
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            n_items: self.n_items + FIRST_ID,
            n_categories: self.n_intents + FIRST_ID,
        }
    }

    pub fn item_id(&self, intent: usize, k: usize) -> usize {
        FIRST_ID + intent * self.items_per_intent + k
    }

    pub fn category_id(&self, intent: usize) -> usize {
        FIRST_ID + intent
    }

    /// Intent that generated `item`.
    pub fn intent_of(&self, item: usize) -> usize {
        (item - FIRST_ID) / self.items_per_intent
    }
}

/// Generated interactions plus, per user, the intent of the last segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub interactions: Vec<Interaction>,
    pub recent_intents: Vec<usize>,
}

impl SyntheticDataset {
    pub fn split(&self) -> Splits {
        split_by_user(self.interactions.clone(), self.spec.seed)
    }
}

fn other_intent(rng: &mut impl Rng, n_intents: usize, not: usize) -> usize {
    if n_intents == 1 {
        return 0;
    }
    let k = rng.gen_range(0..n_intents - 1);
    if k >= not {
        k + 1
    } else {
        k
    }
}

/// One positive and one negative example per user, deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Data);
    let mut interactions = Vec::with_capacity(2 * spec.n_users);
    let mut recent_intents = Vec::with_capacity(spec.n_users);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng, intent: usize| {
        spec.item_id(intent, rng.gen_range(0..spec.items_per_intent))
    };
    for u in 0..spec.n_users {
        let (lo, hi) = spec.context_length_range;
        let len = rng.gen_range(lo..=hi);
        // Segments are generated newest first so the last one is never cut short.
        let mut items = Vec::with_capacity(len);
        let mut recent = None;
        let mut prev = None;
        while items.len() < len {
            let intent = match prev {
                Some(p) => other_intent(&mut rng, spec.n_intents, p),
                None => rng.gen_range(0..spec.n_intents),
            };
            recent.get_or_insert(intent);
            prev = Some(intent);
            let (slo, shi) = spec.segment_length_range;
            let seg = rng.gen_range(slo..=shi).min(len - items.len());
            for _ in 0..seg {
                let mut item = draw(&mut rng, intent);
                if spec.noise > 0.0 && rng.gen::<f64>() < spec.noise {
                    let swap = other_intent(&mut rng, spec.n_intents, intent);
                    item = draw(&mut rng, swap);
                }
                items.push(item);
            }
        }
        items.reverse();
        let recent = recent.expect("at least one segment");
        let categories: Vec<usize> = items.iter().map(|&i| spec.category_id(spec.intent_of(i))).collect();
        let positive = draw(&mut rng, recent);
        let neg_intent = other_intent(&mut rng, spec.n_intents, recent);
        let negative = draw(&mut rng, neg_intent);
        for (target, label) in [(positive, 1u8), (negative, 0u8)] {
            interactions.push(Interaction {
                user_id: format!("u{u}"),
                item_ids: items.clone(),
                category_ids: categories.clone(),
                target_item: target,
                target_category: spec.category_id(spec.intent_of(target)),
                label,
            });
        }
        recent_intents.push(recent);
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        interactions,
        recent_intents,
    })
}

/// Writes `train.csv`, `valid.csv`, `test.csv` and the `synthetic.json`
/// sidecar into `dir`, creating it if needed.
pub fn write_synthetic(dir: impl AsRef<Path>, data: &SyntheticDataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let splits = data.split();
    for (name, part) in [("train.csv", &splits.train), ("valid.csv", &splits.valid), ("test.csv", &splits.test)] {
        let path = dir.join(name);
        let mut buf = Vec::new();
        write_csv(&mut buf, part)?;
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("synthetic.json");
    let json = serde_json::to_string_pretty(&data.spec).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_follow_the_recent_intent() {
        let spec = SyntheticSpec::new(200, 60, 6, 20, 11);
        let data = generate_synthetic(&spec).unwrap();
        assert_eq!(data.interactions.len(), 400);
        let positives = data.interactions.iter().filter(|x| x.label == 1).count();
        assert_eq!(positives, 200);
        for (u, pair) in data.interactions.chunks(2).enumerate() {
            let recent = data.recent_intents[u];
            assert_eq!(spec.intent_of(pair[0].target_item), recent);
            assert_ne!(spec.intent_of(pair[1].target_item), recent);
            assert_eq!(spec.intent_of(*pair[0].item_ids.last().unwrap()), recent);
            assert_eq!(pair[0].item_ids.len(), 20);
        }
    }

    #[test]
    fn single_intent_control() {
        let spec = SyntheticSpec::new(30, 10, 1, 8, 2);
        let data = generate_synthetic(&spec).unwrap();
        assert!(data.interactions.iter().all(|x| spec.intent_of(x.target_item) == 0));
    }

    #[test]
    fn seeded_determinism() {
        let spec = SyntheticSpec::new(50, 40, 4, 12, 99);
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 100, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn infeasible_specs_rejected() {
        let mut spec = SyntheticSpec::new(10, 40, 4, 12, 1);
        spec.items_per_intent = 0;
        assert!(matches!(generate_synthetic(&spec), Err(Error::Spec(_))));
        let mut spec = SyntheticSpec::new(10, 40, 4, 12, 1);
        spec.segment_length_range = (5, 2);
        assert!(matches!(generate_synthetic(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn categories_match_intents() {
        let mut spec = SyntheticSpec::new(40, 30, 3, 15, 5);
        spec.noise = 0.3;
        let data = generate_synthetic(&spec).unwrap();
        for x in &data.interactions {
            for (&i, &c) in x.item_ids.iter().zip(&x.category_ids) {
                assert_eq!(c, spec.category_id(spec.intent_of(i)));
            }
            assert!(x.item_ids.iter().all(|&i| i >= FIRST_ID && i < spec.vocab().n_items));
        }
    }
}
