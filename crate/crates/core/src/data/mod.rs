//! Interaction records, padded batches, CSV ingestion, the synthetic intent
//! generator and negative sampling.
//!
//! Id 0 is the padding id and id 1 the out-of-vocabulary id in both the
//! item and category vocabularies; real ids start at 2.

mod batching;
mod csv_io;
mod sampling;
mod synthetic;

pub use batching::{make_batches, ContextBatch};
pub use csv_io::{parse_csv_dataset, read_csv, write_csv, CSV_HEADER};
pub use sampling::negative_sample;
pub use synthetic::{generate_synthetic, write_synthetic, SyntheticDataset, SyntheticSpec};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const PAD_ID: usize = 0;
pub const OOV_ID: usize = 1;
/// First id available to real items and categories.
pub const FIRST_ID: usize = 2;

/// One labelled impression: a user's chronological context and a target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_ids: Vec<usize>,
    pub category_ids: Vec<usize>,
    pub target_item: usize,
    pub target_category: usize,
    pub label: u8,
}

impl Interaction {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.item_ids.is_empty() {
            return Err("empty item sequence".into());
        }
        if self.item_ids.len() != self.category_ids.len() {
            return Err(format!(
                "item_seq has {} entries but cat_seq has {}",
                self.item_ids.len(),
                self.category_ids.len()
            ));
        }
        if self.label > 1 {
            return Err(format!("label must be 0 or 1, got {}", self.label));
        }
        let ids = self.item_ids.iter().chain(&self.category_ids);
        if ids.chain([&self.target_item, &self.target_category]).any(|&id| id == PAD_ID) {
            return Err("id 0 is reserved for padding".into());
        }
        Ok(())
    }

    /// Keeps the most recent `n_max` context items.
    pub fn truncate(&mut self, n_max: usize) {
        if self.item_ids.len() > n_max {
            let cut = self.item_ids.len() - n_max;
            self.item_ids.drain(..cut);
            self.category_ids.drain(..cut);
        }
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }
}

/// Item and category vocabulary sizes, counting the two reserved ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub n_items: usize,
    pub n_categories: usize,
}

impl Vocab {
    /// Smallest vocabulary covering every id in `data`.
    pub fn covering(data: &[Interaction]) -> Self {
        let max_item = data
            .iter()
            .flat_map(|x| x.item_ids.iter().chain([&x.target_item]))
            .max()
            .copied()
            .unwrap_or(OOV_ID);
        let max_cat = data
            .iter()
            .flat_map(|x| x.category_ids.iter().chain([&x.target_category]))
            .max()
            .copied()
            .unwrap_or(OOV_ID);
        Vocab {
            n_items: max_item.max(OOV_ID) + 1,
            n_categories: max_cat.max(OOV_ID) + 1,
        }
    }

    /// Replaces ids outside the vocabulary with [`OOV_ID`]; returns how many
    /// ids were replaced.
    pub fn remap_unknown(&self, data: &mut [Interaction]) -> usize {
        let mut replaced = 0;
        let mut fix = |id: &mut usize, bound: usize| {
            if *id >= bound {
                *id = OOV_ID;
                replaced += 1;
            }
        };
        for x in data.iter_mut() {
            x.item_ids.iter_mut().for_each(|id| fix(id, self.n_items));
            x.category_ids.iter_mut().for_each(|id| fix(id, self.n_categories));
            fix(&mut x.target_item, self.n_items);
            fix(&mut x.target_category, self.n_categories);
        }
        replaced
    }
}

/// Item to category map gathered from a dataset.
#[derive(Clone, Debug, Default)]
pub struct CategoryMap {
    map: HashMap<usize, usize>,
}

impl CategoryMap {
    /// Records every (item, category) pair; conflicting assignments are an
    /// error naming the item.
    pub fn from_data(data: &[Interaction]) -> Result<Self> {
        let mut out = CategoryMap::default();
        for (row, x) in data.iter().enumerate() {
            let pairs = x.item_ids.iter().zip(&x.category_ids).chain([(&x.target_item, &x.target_category)]);
            for (&item, &cat) in pairs {
                out.insert(item, cat).map_err(|msg| Error::Parse {
                    line: row as u64 + 2,
                    msg,
                })?;
            }
        }
        Ok(out)
    }

    pub fn insert(&mut self, item: usize, cat: usize) -> std::result::Result<(), String> {
        if item == OOV_ID {
            return Ok(());
        }
        match self.map.insert(item, cat) {
            Some(prev) if prev != cat => Err(format!("item {item} has categories {prev} and {cat}")),
            _ => Ok(()),
        }
    }

    pub fn get(&self, item: usize) -> usize {
        self.map.get(&item).copied().unwrap_or(OOV_ID)
    }

    pub fn items(&self) -> Vec<usize> {
        let mut items: Vec<usize> = self.map.keys().copied().collect();
        items.sort_unstable();
        items
    }
}

/// Disjoint train / validation / test partitions.
#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<Interaction>,
    pub valid: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

/// Splits by user, 80/10/10, with a seeded user shuffle.
pub fn split_by_user(data: Vec<Interaction>, seed: u64) -> Splits {
    use rand::seq::SliceRandom;

    let mut users: Vec<String> = data.iter().map(|x| x.user_id.clone()).collect();
    users.sort();
    users.dedup();
    users.shuffle(&mut rng::stream(seed, Stream::Split));
    let n = users.len();
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    let bucket: HashMap<String, u8> = users
        .into_iter()
        .enumerate()
        .map(|(i, u)| (u, if i < n_train { 0 } else if i < n_train + n_valid { 1 } else { 2 }))
        .collect();
    let mut splits = Splits::default();
    for x in data {
        match bucket[&x.user_id] {
            0 => splits.train.push(x),
            1 => splits.valid.push(x),
            _ => splits.test.push(x),
        }
    }
    splits
}
