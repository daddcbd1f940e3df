//! Per-query candidate sets: the positive, own hard negatives and the
//! in-batch negatives contributed by the other queries.

use std::collections::HashSet;

use log::warn;

use crate::corpus::{Dataset, QueryRecord};
use crate::error::{Error, Result};
use crate::sparse::{mine_hard_negatives, Bm25Params, InvertedIndex};

/// What one query brings to a batch before in-batch expansion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSeed {
    pub query_id: String,
    pub positive_id: String,
    pub hard_negative_ids: Vec<String>,
    /// Every passage judged relevant to the query; none of them may act as
    /// one of its negatives.
    pub relevant_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub query_id: String,
    pub positive_id: String,
    pub negative_ids: Vec<String>,
    /// Aligned with `[positive] ++ negatives`; empty until scored.
    pub scores: Vec<f64>,
}

impl CandidateSet {
    /// `[positive] ++ negatives`.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.positive_id.as_str())
            .chain(self.negative_ids.iter().map(String::as_str))
    }

    pub fn len(&self) -> usize {
        1 + self.negative_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Expands each seed with the positives and negatives of every other seed in
/// the batch. Duplicates are dropped by id (first occurrence wins) and the
/// query's own relevant passages never count as negatives.
pub fn build_candidates(batch: &[CandidateSeed]) -> Result<Vec<CandidateSet>> {
    if batch.is_empty() {
        return Err(Error::Argument("a batch needs at least one query".into()));
    }
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, seed)| {
            let mut seen: HashSet<&str> = seed.relevant_ids.iter().map(String::as_str).collect();
            seen.insert(&seed.positive_id);
            let others = batch
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, o)| std::iter::once(&o.positive_id).chain(&o.hard_negative_ids));
            let negative_ids = seed
                .hard_negative_ids
                .iter()
                .chain(others)
                .filter(|id| seen.insert(id.as_str()))
                .cloned()
                .collect();
            CandidateSet {
                query_id: seed.query_id.clone(),
                positive_id: seed.positive_id.clone(),
                negative_ids,
                scores: Vec::new(),
            }
        })
        .collect())
}

/// Seeds for training queries: first relevant passage as the positive and up
/// to `m` hard negatives, taken from the record or mined with BM25 when the
/// record carries fewer than `m`.
pub fn training_seeds(
    dataset: &Dataset,
    records: &[QueryRecord],
    m: usize,
) -> Result<Vec<CandidateSeed>> {
    let mut index: Option<InvertedIndex> = None;
    records
        .iter()
        .map(|r| {
            let positive_id = r.relevant_passage_ids.first().cloned().ok_or_else(|| {
                Error::Validation(format!(
                    "training query {} has no relevant passage",
                    r.query_id
                ))
            })?;
            let mut negs: Vec<String> = r.hard_negative_ids.iter().take(m).cloned().collect();
            if negs.len() < m {
                let idx = index.get_or_insert_with(|| {
                    InvertedIndex::build(&dataset.passages, Bm25Params::default())
                });
                let mined = mine_hard_negatives(idx, r, m);
                for id in mined.ids {
                    if negs.len() == m {
                        break;
                    }
                    if !negs.contains(&id) {
                        negs.push(id);
                    }
                }
                if negs.len() < m {
                    warn!(
                        "query {}: training with {} hard negatives instead of {m}",
                        r.query_id,
                        negs.len()
                    );
                }
            }
            Ok(CandidateSeed {
                query_id: r.query_id.clone(),
                positive_id,
                hard_negative_ids: negs,
                relevant_ids: r.relevant_passage_ids.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seed(q: &str, pos: &str, negs: &[&str]) -> CandidateSeed {
        CandidateSeed {
            query_id: q.into(),
            positive_id: pos.into(),
            hard_negative_ids: negs.iter().map(|s| s.to_string()).collect(),
            relevant_ids: vec![pos.into()],
        }
    }

    /// Explicit enumeration of every id the other queries contribute.
    fn oracle_count(batch: &[CandidateSeed], i: usize) -> usize {
        let mut ids: Vec<&str> = batch[i]
            .hard_negative_ids
            .iter()
            .map(String::as_str)
            .collect();
        for (j, o) in batch.iter().enumerate() {
            if j != i {
                ids.push(&o.positive_id);
                ids.extend(o.hard_negative_ids.iter().map(String::as_str));
            }
        }
        ids.retain(|id| *id != batch[i].positive_id);
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    fn distinct_batch(b: usize, m: usize) -> Vec<CandidateSeed> {
        (0..b)
            .map(|q| {
                let negs: Vec<String> = (0..m).map(|n| format!("n{q}_{n}")).collect();
                let refs: Vec<&str> = negs.iter().map(String::as_str).collect();
                seed(&format!("q{q}"), &format!("p{q}"), &refs)
            })
            .collect()
    }

    #[test]
    fn negative_counts_match_enumeration() {
        for (b, m, expected) in [(1, 2, 2), (2, 2, 5), (3, 5, 17)] {
            let batch = distinct_batch(b, m);
            let sets = build_candidates(&batch).unwrap();
            for (i, s) in sets.iter().enumerate() {
                assert_eq!(s.negative_ids.len(), expected);
                assert_eq!(oracle_count(&batch, i), expected);
            }
        }
    }

    #[test]
    fn own_positive_is_removed_when_shared() {
        // q1's hard negative is q0's positive: it stays a candidate of q1 but
        // never becomes a negative of q0.
        let batch = vec![seed("q0", "p0", &["a"]), seed("q1", "p1", &["p0", "b"])];
        let sets = build_candidates(&batch).unwrap();
        assert!(!sets[0].negative_ids.contains(&"p0".to_string()));
        assert!(sets[1].negative_ids.contains(&"p0".to_string()));
        assert_eq!(sets[0].negative_ids, ["a", "p1", "b"]);
    }

    proptest! {
        #[test]
        fn candidates_are_unique_and_exclude_positive(
            raw in prop::collection::vec((0..12u8, prop::collection::vec(0..12u8, 0..4)), 1..6)
        ) {
            let batch: Vec<CandidateSeed> = raw
                .iter()
                .enumerate()
                .map(|(i, (p, negs))| {
                    let negs: Vec<String> = negs.iter().filter(|n| *n != p).map(|n| format!("d{n}")).collect();
                    CandidateSeed {
                        query_id: format!("q{i}"),
                        positive_id: format!("d{p}"),
                        hard_negative_ids: negs,
                        relevant_ids: vec![format!("d{p}")],
                    }
                })
                .collect();
            let sets = build_candidates(&batch).unwrap();
            for (i, s) in sets.iter().enumerate() {
                let ids: Vec<&str> = s.ids().collect();
                let uniq: HashSet<&str> = ids.iter().copied().collect();
                prop_assert_eq!(uniq.len(), ids.len());
                prop_assert!(!s.negative_ids.contains(&s.positive_id));
                prop_assert_eq!(s.negative_ids.len(), oracle_count(&batch, i));
            }
        }
    }
}
