//! Ranking metrics (MRR@k, P@k, hit@k) and answer metrics (VQA-core
//! accuracy, exact match).

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::normalize_answer;

/// One query's ranking together with its relevance judgements.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgedRanking {
    pub query_id: String,
    pub ranked: Vec<String>,
    pub relevant: HashSet<String>,
}

impl JudgedRanking {
    pub fn new(
        query_id: impl Into<String>,
        ranked: Vec<String>,
        relevant: HashSet<String>,
    ) -> Result<Self> {
        let query_id = query_id.into();
        let mut seen = HashSet::with_capacity(ranked.len());
        if let Some(dup) = ranked.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Validation(format!(
                "query {query_id}: passage {dup} ranked twice"
            )));
        }
        Ok(Self {
            query_id,
            ranked,
            relevant,
        })
    }

    pub fn reciprocal_rank(&self, k: usize) -> f64 {
        self.ranked
            .iter()
            .take(k)
            .position(|id| self.relevant.contains(id))
            .map_or(0.0, |i| 1.0 / (i + 1) as f64)
    }

    pub fn precision(&self, k: usize) -> f64 {
        let hits = self
            .ranked
            .iter()
            .take(k)
            .filter(|id| self.relevant.contains(*id))
            .count();
        hits as f64 / k as f64
    }

    pub fn hit(&self, k: usize) -> f64 {
        if self
            .ranked
            .iter()
            .take(k)
            .any(|id| self.relevant.contains(id))
        {
            1.0
        } else {
            0.0
        }
    }
}

/// Rankings for a set of queries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalJudgedRun(pub Vec<JudgedRanking>);

impl RetrievalJudgedRun {
    fn mean(&self, k: usize, f: impl Fn(&JudgedRanking, usize) -> f64) -> Result<f64> {
        if self.0.is_empty() {
            return Err(Error::Argument("cannot evaluate an empty run".into()));
        }
        if k == 0 {
            return Err(Error::Argument("cut-off k must be at least 1".into()));
        }
        Ok(self.0.iter().map(|q| f(q, k)).sum::<f64>() / self.0.len() as f64)
    }
}

pub fn mrr_at_k(run: &RetrievalJudgedRun, k: usize) -> Result<f64> {
    run.mean(k, JudgedRanking::reciprocal_rank)
}

/// The denominator is always `k`, even when a list is shorter.
pub fn precision_at_k(run: &RetrievalJudgedRun, k: usize) -> Result<f64> {
    run.mean(k, JudgedRanking::precision)
}

pub fn hit_at_k(run: &RetrievalJudgedRun, k: usize) -> Result<f64> {
    run.mean(k, JudgedRanking::hit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerJudgment {
    pub prediction: String,
    /// Annotator answers, with multiplicity.
    pub references: Vec<String>,
}

impl AnswerJudgment {
    fn matches(&self) -> usize {
        let p = normalize_answer(&self.prediction);
        self.references
            .iter()
            .filter(|r| normalize_answer(r) == p)
            .count()
    }

    /// `min(matching annotations / 3, 1)`.
    pub fn vqa_score(&self) -> f64 {
        (self.matches() as f64 / 3.0).min(1.0)
    }

    pub fn exact_match(&self) -> f64 {
        if self.matches() > 0 {
            1.0
        } else {
            0.0
        }
    }
}

/// Mean VQA-core accuracy. This is the `min(n/3, 1)` core of the VQA
/// protocol applied to the plain answer multiset, without the averaging
/// over annotator subsets.
pub fn vqa_accuracy(judgments: &[AnswerJudgment]) -> Result<f64> {
    if judgments.is_empty() {
        return Err(Error::Argument("no answer judgments to score".into()));
    }
    if judgments.iter().any(|j| j.references.is_empty()) {
        return Err(Error::Validation(
            "answer judgment without references".into(),
        ));
    }
    Ok(judgments.iter().map(AnswerJudgment::vqa_score).sum::<f64>() / judgments.len() as f64)
}

/// Mean exact match after normalisation; 0 for an empty set.
pub fn exact_match(judgments: &[AnswerJudgment]) -> f64 {
    if judgments.is_empty() {
        return 0.0;
    }
    judgments
        .iter()
        .map(AnswerJudgment::exact_match)
        .sum::<f64>()
        / judgments.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranking(ranked: &[&str], relevant: &[&str]) -> JudgedRanking {
        JudgedRanking::new(
            "q",
            ranked.iter().map(|s| s.to_string()).collect(),
            relevant.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    fn judgment(pred: &str, refs: &[&str]) -> AnswerJudgment {
        AnswerJudgment {
            prediction: pred.into(),
            references: refs.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn reciprocal_rank_cases() {
        let run = RetrievalJudgedRun(vec![ranking(&["a", "b"], &["a"])]);
        assert_eq!(mrr_at_k(&run, 5).unwrap(), 1.0);
        let run = RetrievalJudgedRun(vec![ranking(&["x", "y", "a", "b"], &["a", "b"])]);
        assert!((mrr_at_k(&run, 5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mrr_at_k(&run, 2).unwrap(), 0.0);
    }

    #[test]
    fn precision_cases() {
        let run = RetrievalJudgedRun(vec![ranking(&["a", "x", "b", "y", "z"], &["a", "b"])]);
        assert!((precision_at_k(&run, 5).unwrap() - 0.4).abs() < 1e-15);
        let run = RetrievalJudgedRun(vec![ranking(&["x", "y"], &["a"])]);
        assert_eq!(precision_at_k(&run, 5).unwrap(), 0.0);
        // short list: denominator stays k
        let run = RetrievalJudgedRun(vec![ranking(&["a"], &["a"])]);
        assert!((precision_at_k(&run, 5).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(precision_at_k(&run, 1).unwrap(), 1.0);
    }

    #[test]
    fn empty_run_and_zero_k_are_errors() {
        assert!(mrr_at_k(&RetrievalJudgedRun::default(), 5).is_err());
        let run = RetrievalJudgedRun(vec![ranking(&["a"], &["a"])]);
        assert!(hit_at_k(&run, 0).is_err());
    }

    #[test]
    fn duplicate_ranked_ids_are_rejected() {
        assert!(JudgedRanking::new("q", vec!["a".into(), "a".into()], HashSet::new()).is_err());
    }

    #[test]
    fn vqa_core_scores() {
        let refs = ["giraffe", "giraffe", "giraffe", "zebra", "horse", "horse"];
        assert_eq!(judgment("Giraffe", &refs).vqa_score(), 1.0);
        assert!((judgment("zebra", &refs).vqa_score() - 1.0 / 3.0).abs() < 1e-15);
        assert!((judgment("horse", &refs).vqa_score() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(judgment("cat", &refs).vqa_score(), 0.0);
        assert!(vqa_accuracy(&[]).is_err());
    }

    #[test]
    fn exact_match_table() {
        assert_eq!(judgment("The Giraffe!", &["giraffe"]).exact_match(), 1.0);
        assert_eq!(judgment("a red panda", &["red panda"]).exact_match(), 1.0);
        assert_eq!(judgment("giraffes", &["giraffe"]).exact_match(), 0.0);
        assert_eq!(exact_match(&[]), 0.0);
    }
}
