//! Ranking metrics over candidate groups: R_n@k for k in {1, 2, 5}, P@1, MAP and MRR.
//!
//! Recall uses the proportional definition, `relevant in top k / total relevant`, which reduces
//! to the hit rate for single-positive groups. Groups without any relevant candidate are skipped
//! and counted in [`MetricsReport::skipped_groups`].

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::CandidateGroup;
use crate::model::ModelScorer;
use crate::{Error, Result};

pub const RECALL_CUTOFFS: [usize; 3] = [1, 2, 5];

/// Indices sorted by descending score; equal scores keep their original order.
pub fn rank_group(scores: &[f64], labels: &[bool]) -> Result<Vec<usize>> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Empty("group has no candidates"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order)
}

/// Metrics of a single ranked group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// Recall at each of [`RECALL_CUTOFFS`].
    pub recall: [f64; 3],
    pub precision_at_1: f64,
    pub average_precision: f64,
    pub reciprocal_rank: f64,
}

/// Metrics of labels already in ranked order.
pub fn group_metrics(ranked_labels: &[bool]) -> Result<GroupMetrics> {
    let relevant = ranked_labels.iter().filter(|&&l| l).count();
    if relevant == 0 {
        return Err(Error::Empty("group has no relevant candidate"));
    }
    let total = relevant as f64;
    let mut recall = [0.0; 3];
    for (slot, &k) in RECALL_CUTOFFS.iter().enumerate() {
        let hits = ranked_labels.iter().take(k).filter(|&&l| l).count();
        recall[slot] = hits as f64 / total;
    }
    let first = ranked_labels.iter().position(|&l| l).expect("relevant exists");
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (i, _) in ranked_labels.iter().enumerate().filter(|(_, &l)| l) {
        hits += 1;
        precision_sum += hits as f64 / (i + 1) as f64;
    }
    Ok(GroupMetrics {
        recall,
        precision_at_1: if ranked_labels[0] { 1.0 } else { 0.0 },
        average_precision: precision_sum / total,
        reciprocal_rank: 1.0 / (first + 1) as f64,
    })
}

/// Aggregate metrics over a set of groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `k -> R_n@k`
    pub r_at: BTreeMap<usize, f64>,
    pub p_at_1: f64,
    pub map: f64,
    pub mrr: f64,
    pub group_count: usize,
    pub skipped_groups: usize,
}

impl MetricsReport {
    pub fn recall_at(&self, k: usize) -> f64 {
        self.r_at.get(&k).copied().unwrap_or(f64::NAN)
    }
}

/// Aggregates metrics of `groups` given one score vector per group.
pub fn evaluate_scores(groups: &[CandidateGroup], scores: &[Vec<f64>]) -> Result<MetricsReport> {
    if groups.is_empty() {
        return Err(Error::Empty("no candidate groups"));
    }
    if groups.len() != scores.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "{} score vectors for {} groups",
            scores.len(),
            groups.len()
        )));
    }
    let mut sums = [0.0f64; 6];
    let mut kept = 0usize;
    for (group, group_scores) in groups.iter().zip(scores) {
        let labels = group.labels();
        let order = rank_group(group_scores, &labels)?;
        let ranked: Vec<bool> = order.iter().map(|&i| labels[i]).collect();
        let Ok(m) = group_metrics(&ranked) else {
            continue;
        };
        kept += 1;
        for (s, v) in sums.iter_mut().zip([
            m.recall[0],
            m.recall[1],
            m.recall[2],
            m.precision_at_1,
            m.average_precision,
            m.reciprocal_rank,
        ]) {
            *s += v;
        }
    }
    if kept == 0 {
        return Err(Error::Empty("every group lacks a relevant candidate"));
    }
    let mean = |s: f64| s / kept as f64;
    Ok(MetricsReport {
        r_at: RECALL_CUTOFFS.iter().zip(&sums[..3]).map(|(&k, &s)| (k, mean(s))).collect(),
        p_at_1: mean(sums[3]),
        map: mean(sums[4]),
        mrr: mean(sums[5]),
        group_count: kept,
        skipped_groups: groups.len() - kept,
    })
}

/// Anything that can score a (context, response) pair.
pub trait Scorer {
    fn score(&self, context: &[String], response: &str) -> Result<f64>;
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, context: &[String], response: &str) -> Result<f64> {
        ModelScorer::score(self, context, response)
    }
}

impl<F> Scorer for F
where
    F: Fn(&[String], &str) -> f64,
{
    fn score(&self, context: &[String], response: &str) -> Result<f64> {
        Ok(self(context, response))
    }
}

pub fn score_groups<S: Scorer + ?Sized>(scorer: &S, groups: &[CandidateGroup]) -> Result<Vec<Vec<f64>>> {
    groups
        .iter()
        .map(|g| {
            g.candidates
                .iter()
                .map(|c| scorer.score(&g.context, &c.response))
                .collect()
        })
        .collect()
}

/// Scores every candidate and aggregates the metrics.
pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, groups: &[CandidateGroup]) -> Result<MetricsReport> {
    evaluate_scores(groups, &score_groups(scorer, groups)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Candidate;
    use alloc::vec;

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_group(&[0.1, 0.9], &[false, true]).unwrap(), vec![1, 0]);
        assert_eq!(rank_group(&[0.3; 4], &[false; 4]).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(rank_group(&[0.5, 0.7, 0.5], &[false; 3]).unwrap(), vec![1, 0, 2]);
        assert!(rank_group(&[0.5], &[false, true]).is_err());
    }

    fn ranked(relevant_ranks: &[usize], n: usize) -> Vec<bool> {
        (1..=n).map(|r| relevant_ranks.contains(&r)).collect()
    }

    #[test]
    fn perfect_ranking() {
        let m = group_metrics(&ranked(&[1], 10)).unwrap();
        assert_eq!(m.recall, [1.0, 1.0, 1.0]);
        assert_eq!((m.precision_at_1, m.average_precision, m.reciprocal_rank), (1.0, 1.0, 1.0));
    }

    #[test]
    fn relevant_at_rank_two() {
        let m = group_metrics(&ranked(&[2], 10)).unwrap();
        assert_eq!(m.reciprocal_rank, 0.5);
        assert_eq!(m.recall[0], 0.0);
        assert_eq!(m.recall[1], 1.0);
        assert_eq!(m.precision_at_1, 0.0);
    }

    #[test]
    fn two_relevant_at_one_and_three() {
        let m = group_metrics(&ranked(&[1, 3], 10)).unwrap();
        assert!((m.average_precision - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.reciprocal_rank, 1.0);
        assert_eq!(m.recall, [0.5, 0.5, 1.0]);
    }

    #[test]
    fn no_relevant_is_an_error() {
        assert!(group_metrics(&[false; 10]).is_err());
    }

    fn group(labels: &[bool]) -> CandidateGroup {
        CandidateGroup {
            context: vec!["c".into()],
            candidates: labels
                .iter()
                .enumerate()
                .map(|(i, &label)| Candidate {
                    response: alloc::format!("r{i}"),
                    label,
                })
                .collect(),
        }
    }

    #[test]
    fn zero_positive_groups_are_skipped() {
        let groups = vec![group(&[true, false]), group(&[false, false])];
        let scores = vec![vec![0.9, 0.1], vec![0.5, 0.5]];
        let report = evaluate_scores(&groups, &scores).unwrap();
        assert_eq!(report.group_count, 1);
        assert_eq!(report.skipped_groups, 1);
        assert_eq!(report.recall_at(1), 1.0);

        assert!(evaluate_scores(&groups[1..], &scores[1..]).is_err());
        assert!(evaluate_scores(&[], &[]).is_err());
    }

    #[test]
    fn perfect_ranking_with_two_positives() {
        let groups = vec![group(&[false, true, false]), group(&[true, false, true])];
        let scores: Vec<Vec<f64>> = groups
            .iter()
            .map(|g| g.candidates.iter().map(|c| if c.label { 1.0 } else { 0.0 }).collect())
            .collect();
        let r = evaluate_scores(&groups, &scores).unwrap();
        // the two-positive group can only place half its positives at rank 1
        assert_eq!(r.r_at.values().copied().collect::<Vec<_>>(), vec![0.75, 1.0, 1.0]);
        assert_eq!((r.p_at_1, r.map, r.mrr), (1.0, 1.0, 1.0));
    }

    #[test]
    fn closures_are_scorers() {
        let groups = vec![group(&[false, true])];
        let scorer = |_: &[String], r: &str| if r == "r1" { 1.0 } else { 0.0 };
        assert_eq!(evaluate(&scorer, &groups).unwrap().mrr, 1.0);
    }
}
