//! Ranking metrics over scored candidate lists.
//!
//! Candidates are ranked by descending score; equal scores keep ascending
//! candidate index. Instances without a positive label are skipped by every
//! metric and the skip count is logged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingInstance {
    pub context_id: usize,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl RankingInstance {
    pub fn has_positive(&self) -> bool {
        self.labels.contains(&1)
    }

    /// Candidate indices from best to worst.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        idx
    }

    /// 1-based ranks of the positives, ascending.
    fn positive_ranks(&self) -> Vec<usize> {
        self.ranking()
            .iter()
            .enumerate()
            .filter(|(_, &c)| self.labels[c] == 1)
            .map(|(r, _)| r + 1)
            .collect()
    }
}

fn validate(instances: &[RankingInstance]) -> Result<()> {
    for inst in instances {
        if inst.scores.is_empty() || inst.scores.len() != inst.labels.len() {
            return Err(Error::Metric(format!(
                "instance {}: {} scores for {} labels",
                inst.context_id,
                inst.scores.len(),
                inst.labels.len()
            )));
        }
    }
    Ok(())
}

/// Mean of `f` over instances with a positive.
fn mean_over_positive(
    instances: &[RankingInstance],
    name: &str,
    f: impl Fn(&RankingInstance) -> f64,
) -> Result<f64> {
    validate(instances)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for inst in instances.iter().filter(|i| i.has_positive()) {
        sum += f(inst);
        n += 1;
    }
    let skipped = instances.len() - n;
    if skipped > 0 {
        log::warn!("{name}: skipped {skipped} instances without a positive");
    }
    if n == 0 {
        return Err(Error::Metric(format!("{name}: no instance has a positive")));
    }
    Ok(sum / n as f64)
}

/// `R_n@k`: share of instances with a positive among the top `k`.
pub fn recall_at_k(instances: &[RankingInstance], n: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::Metric(format!("k = {k} outside 1..={n}")));
    }
    if let Some(bad) = instances.iter().find(|i| i.scores.len() != n) {
        return Err(Error::Metric(format!(
            "instance {} has {} candidates, expected {n}",
            bad.context_id,
            bad.scores.len()
        )));
    }
    mean_over_positive(instances, "recall_at_k", |inst| {
        let ranks = inst.positive_ranks();
        f64::from(u8::from(ranks[0] <= k))
    })
}

/// Mean average precision.
pub fn map(instances: &[RankingInstance]) -> Result<f64> {
    mean_over_positive(instances, "map", |inst| {
        let ranks = inst.positive_ranks();
        let total: f64 = ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| (i + 1) as f64 / r as f64)
            .sum();
        total / ranks.len() as f64
    })
}

/// Mean reciprocal rank of the first positive.
pub fn mrr(instances: &[RankingInstance]) -> Result<f64> {
    mean_over_positive(instances, "mrr", |inst| {
        1.0 / inst.positive_ranks()[0] as f64
    })
}

/// Precision of the top-ranked candidate.
pub fn p_at_1(instances: &[RankingInstance]) -> Result<f64> {
    mean_over_positive(instances, "p_at_1", |inst| {
        f64::from(inst.labels[inst.ranking()[0]])
    })
}

/// A metric name as accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    RecallAt(usize),
    Map,
    Mrr,
    PAt1,
}

impl Metric {
    /// Parses `r@k`, `map`, `mrr` or `p@1`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "map" => Ok(Metric::Map),
            "mrr" => Ok(Metric::Mrr),
            "p@1" => Ok(Metric::PAt1),
            _ => s
                .strip_prefix("r@")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k > 0)
                .map(Metric::RecallAt)
                .ok_or_else(|| Error::Metric(format!("unknown metric {s:?}"))),
        }
    }

    /// Column label for a candidate set of size `n`.
    pub fn label(&self, n: usize) -> String {
        match self {
            Metric::RecallAt(k) => format!("R_{n}@{k}"),
            Metric::Map => "MAP".into(),
            Metric::Mrr => "MRR".into(),
            Metric::PAt1 => "P@1".into(),
        }
    }

    pub fn compute(&self, instances: &[RankingInstance], n: usize) -> Result<f64> {
        match *self {
            Metric::RecallAt(k) => recall_at_k(instances, n, k),
            Metric::Map => map(instances),
            Metric::Mrr => mrr(instances),
            Metric::PAt1 => p_at_1(instances),
        }
    }
}
