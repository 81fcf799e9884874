//! Full-catalog ranking metrics for a single held-out target per sample.

use serde::{Deserialize, Serialize};

use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::model::{forward, logits, ModelParams};

pub const DEFAULT_KS: [usize; 2] = [10, 20];

/// 1-based rank of `target` under descending score; ties go to the lower item id.
///
/// Items in `excluded` (other than the target) are removed from the candidate set.
pub fn rank_in_scores(scores: &[f64], target: usize, excluded: &[usize]) -> usize {
    let s_y = scores[target];
    let mut rank = 1;
    for (j, &s) in scores.iter().enumerate() {
        if j == target || excluded.contains(&j) {
            continue;
        }
        if s > s_y || (s == s_y && j < target) {
            rank += 1;
        }
    }
    rank
}

pub fn rank_of_target(params: &ModelParams, sample: &Sample, exclude_history: bool) -> Result<usize> {
    let scores = logits(params, &forward(params, sample)?);
    let excluded: &[usize] = if exclude_history { &sample.history } else { &[] };
    Ok(rank_in_scores(&scores, sample.target, excluded))
}

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub at: Vec<AtK>,
    pub n_evaluated: usize,
}

impl Metrics {
    pub fn get(&self, k: usize) -> Option<&AtK> {
        self.at.iter().find(|a| a.k == k)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.get(k).map_or(0.0, |a| a.ndcg)
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.get(k).map_or(0.0, |a| a.recall)
    }

    /// Mean metrics from a list of 1-based ranks.
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
        }
        let n = ranks.len() as f64;
        let at = ks
            .iter()
            .map(|&k| AtK {
                k,
                recall: ranks.iter().map(|&r| recall_at_k(r, k)).sum::<f64>() / n,
                ndcg: ranks.iter().map(|&r| ndcg_at_k(r, k)).sum::<f64>() / n,
            })
            .collect();
        Ok(Self {
            at,
            n_evaluated: ranks.len(),
        })
    }

    pub const CSV_HEADER: &'static str = "R@20,N@20,R@10,N@10";

    /// `R@20,N@20,R@10,N@10`.
    pub fn csv_line(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6}",
            self.recall(20),
            self.ndcg(20),
            self.recall(10),
            self.ndcg(10)
        )
    }
}

/// Mean Recall@k / NDCG@k over `split`, ranking against every item.
pub fn evaluate(params: &ModelParams, split: &[Sample], ks: &[usize], exclude_history: bool) -> Result<Metrics> {
    let ranks = split
        .iter()
        .map(|s| rank_of_target(params, s, exclude_history))
        .collect::<Result<Vec<_>>>()?;
    Metrics::from_ranks(&ranks, ks)
}

/// Reference evaluation that sorts the whole score list per sample.
///
/// Kept deliberately naive; it exists to cross-check [`evaluate`].
pub fn oracle_evaluate(params: &ModelParams, split: &[Sample], ks: &[usize], exclude_history: bool) -> Result<Metrics> {
    if split.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let mut recall_sums = vec![0.0; ks.len()];
    let mut ndcg_sums = vec![0.0; ks.len()];
    for s in split {
        let scores = logits(params, &forward(params, s)?);
        let mut order: Vec<(f64, usize)> = scores
            .iter()
            .enumerate()
            .filter(|&(j, _)| j == s.target || !(exclude_history && s.history.contains(&j)))
            .map(|(j, &v)| (v, j))
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let pos = order.iter().position(|&(_, j)| j == s.target).unwrap();
        for (idx, &k) in ks.iter().enumerate() {
            if pos < k {
                recall_sums[idx] += 1.0;
                ndcg_sums[idx] += 1.0 / ((pos + 2) as f64).log2();
            }
        }
    }
    let n = split.len() as f64;
    Ok(Metrics {
        at: ks
            .iter()
            .enumerate()
            .map(|(idx, &k)| AtK {
                k,
                recall: recall_sums[idx] / n,
                ndcg: ndcg_sums[idx] / n,
            })
            .collect(),
        n_evaluated: split.len(),
    })
}
