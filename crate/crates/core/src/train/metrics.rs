//! Classification and ranking metrics.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Validation or test metrics at one point of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epoch: usize,
    pub seed: u64,
    pub auc: f64,
    /// `None` when no user has both a positive and a negative example.
    pub gauc: Option<f64>,
    pub logloss: f64,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub ndcg_at_k: BTreeMap<usize, f64>,
}

fn check_inputs(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auc", &[scores.len()], &[labels.len()]));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric(format!("score {i} is NaN")));
    }
    if let Some(i) = labels.iter().position(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::UndefinedMetric(format!("label {i} is {}, expected 0 or 1", labels[i])));
    }
    Ok(())
}

/// Area under the ROC curve from average ranks; tied scores count 1/2.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let mean_rank = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count();
        rank_sum += mean_rank * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Per-user AUC averaged with weights equal to each user's impression
/// count. Users with a single class are left out entirely.
pub fn gauc<U: Ord>(scores: &[f64], labels: &[f64], users: &[U]) -> Result<f64> {
    check_inputs(scores, labels)?;
    if users.len() != scores.len() {
        return Err(Error::dim("gauc", &[scores.len()], &[users.len()]));
    }
    let mut groups: BTreeMap<&U, Vec<usize>> = BTreeMap::new();
    for (i, u) in users.iter().enumerate() {
        groups.entry(u).or_default().push(i);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for idx in groups.values() {
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let y: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
        let pos = y.iter().filter(|&&v| v == 1.0).count();
        if pos == 0 || pos == y.len() {
            continue;
        }
        let w = idx.len() as f64;
        num += w * auc(&s, &y)?;
        den += w;
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("no user has both positive and negative examples".into()));
    }
    Ok(num / den)
}

/// Mean binary cross-entropy, clamped exactly as the training loss.
pub fn logloss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    check_inputs(probs, labels)?;
    if probs.is_empty() {
        return Err(Error::UndefinedMetric("logloss of an empty set".into()));
    }
    Ok(crate::tensor::bce(probs, labels))
}

/// 1-based rank of `scores[positive]`. Candidates tied with the positive
/// are ranked ahead of it.
pub fn positive_rank(scores: &[f64], positive: usize) -> usize {
    let s = scores[positive];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| j != positive && x.total_cmp(&s) != Ordering::Less)
        .count()
}

fn ranks(lists: &[Vec<f64>], positives: &[usize], k: usize) -> Result<Vec<usize>> {
    if lists.len() != positives.len() {
        return Err(Error::dim("ranking", &[lists.len()], &[positives.len()]));
    }
    if lists.is_empty() {
        return Err(Error::UndefinedMetric("ranking metric over zero lists".into()));
    }
    lists
        .iter()
        .zip(positives)
        .enumerate()
        .map(|(i, (scores, &pos))| {
            if k == 0 || k > scores.len() {
                return Err(Error::Config(format!("k = {k} out of range for list {i} with {} candidates", scores.len())));
            }
            if pos >= scores.len() {
                return Err(Error::Index { id: pos, bound: scores.len() });
            }
            if scores.iter().any(|s| s.is_nan()) {
                return Err(Error::UndefinedMetric(format!("list {i} has a NaN score")));
            }
            Ok(positive_rank(scores, pos))
        })
        .collect()
}

/// Fraction of lists whose positive lands in the top `k`.
pub fn recall_at_k(lists: &[Vec<f64>], positives: &[usize], k: usize) -> Result<f64> {
    let r = ranks(lists, positives, k)?;
    Ok(r.iter().filter(|&&rank| rank <= k).count() as f64 / r.len() as f64)
}

/// Mean of `1 / log2(rank + 1)` over lists, counting 0 beyond rank `k`.
pub fn ndcg_at_k(lists: &[Vec<f64>], positives: &[usize], k: usize) -> Result<f64> {
    let r = ranks(lists, positives, k)?;
    let total: f64 = r
        .iter()
        .map(|&rank| if rank <= k { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 })
        .sum();
    Ok(total / r.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1.0, 1.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn gauc_examples() {
        let s = [0.9, 0.1, 0.2, 0.8];
        let y = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(gauc(&s, &y, &["a"; 4]).unwrap(), auc(&s, &y).unwrap());
        assert_eq!(gauc(&s, &y, &["a", "a", "b", "b"]).unwrap(), 0.5);
        let lonely = gauc(&[0.1, 0.2], &[1.0, 1.0], &["a", "b"]);
        assert!(matches!(lonely, Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ranking_examples() {
        let lists = vec![vec![0.9, 0.1, 0.5, 0.3, 0.2, 0.0]];
        assert_eq!(recall_at_k(&lists, &[0], 5).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&lists, &[0], 5).unwrap(), 1.0);
        let second = vec![vec![0.5, 0.9, 0.1]];
        assert!((ndcg_at_k(&second, &[0], 2).unwrap() - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert_eq!(recall_at_k(&second, &[0], 1).unwrap(), 0.0);
        assert!(matches!(recall_at_k(&second, &[0], 4), Err(Error::Config(_))));
        assert!(matches!(ndcg_at_k(&second, &[0], 0), Err(Error::Config(_))));
    }

    #[test]
    fn ties_rank_the_positive_last() {
        assert_eq!(positive_rank(&[0.5, 0.5, 0.5], 1), 3);
        assert_eq!(positive_rank(&[0.5, 0.4, 0.6], 0), 2);
    }
}
