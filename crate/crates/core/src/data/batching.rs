use rand::seq::SliceRandom;

use super::{Interaction, PAD_ID};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Fixed-width, right-padded batch. Item `j` of example `b` lives at
/// `b * width + j`; position 0 is the oldest item.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextBatch {
    pub width: usize,
    pub items: Vec<usize>,
    pub categories: Vec<usize>,
    pub lengths: Vec<usize>,
    pub target_items: Vec<usize>,
    pub target_categories: Vec<usize>,
    pub labels: Vec<f64>,
    /// True exactly at real (unpadded) positions.
    pub mask: Vec<bool>,
    /// Index of each example in the source dataset.
    pub indices: Vec<usize>,
}

impl ContextBatch {
    pub fn new(data: &[Interaction], indices: &[usize], width: usize) -> Result<Self> {
        let b = indices.len();
        let mut batch = ContextBatch {
            width,
            items: vec![PAD_ID; b * width],
            categories: vec![PAD_ID; b * width],
            lengths: Vec::with_capacity(b),
            target_items: Vec::with_capacity(b),
            target_categories: Vec::with_capacity(b),
            labels: Vec::with_capacity(b),
            mask: vec![false; b * width],
            indices: indices.to_vec(),
        };
        for (row, &idx) in indices.iter().enumerate() {
            let x = &data[idx];
            let len = x.item_ids.len();
            if len > width {
                return Err(Error::Length { len, n_max: width });
            }
            if len == 0 {
                return Err(Error::Config(format!("example {idx} has an empty context")));
            }
            let off = row * width;
            batch.items[off..off + len].copy_from_slice(&x.item_ids);
            batch.categories[off..off + len].copy_from_slice(&x.category_ids);
            batch.mask[off..off + len].iter_mut().for_each(|m| *m = true);
            batch.lengths.push(len);
            batch.target_items.push(x.target_item);
            batch.target_categories.push(x.target_category);
            batch.labels.push(f64::from(x.label));
        }
        Ok(batch)
    }

    /// Batch over all of `data`, in order.
    pub fn from_all(data: &[Interaction], width: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..data.len()).collect();
        ContextBatch::new(data, &idx, width)
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// `[B, width]` tensor with 1.0 at real positions.
    pub fn mask_tensor(&self) -> Tensor {
        let data = self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.len(), self.width], data).expect("shape")
    }

    /// Repeats every example once per candidate, swapping in each
    /// candidate `(item, category)` as the target. Labels are zeroed.
    pub fn with_candidates(&self, candidates: &[Vec<(usize, usize)>]) -> Result<Self> {
        if candidates.len() != self.len() {
            return Err(Error::dim("with_candidates", &[self.len()], &[candidates.len()]));
        }
        let w = self.width;
        let mut out = ContextBatch {
            width: w,
            items: Vec::new(),
            categories: Vec::new(),
            lengths: Vec::new(),
            target_items: Vec::new(),
            target_categories: Vec::new(),
            labels: Vec::new(),
            mask: Vec::new(),
            indices: Vec::new(),
        };
        for (b, cands) in candidates.iter().enumerate() {
            for &(item, cat) in cands {
                out.items.extend_from_slice(&self.items[b * w..(b + 1) * w]);
                out.categories.extend_from_slice(&self.categories[b * w..(b + 1) * w]);
                out.mask.extend_from_slice(&self.mask[b * w..(b + 1) * w]);
                out.lengths.push(self.lengths[b]);
                out.target_items.push(item);
                out.target_categories.push(cat);
                out.labels.push(0.0);
                out.indices.push(self.indices[b]);
            }
        }
        Ok(out)
    }
}

/// Splits `data` into padded batches of at most `batch_size` examples. With
/// a seed the example order is shuffled deterministically; the final
/// partial batch is kept.
pub fn make_batches(
    data: &[Interaction],
    batch_size: usize,
    width: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<ContextBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut rng::stream(seed, Stream::Shuffle));
    }
    order
        .chunks(batch_size)
        .map(|chunk| ContextBatch::new(data, chunk, width))
        .collect()
}
