//! BM25 retrieval, BM25-Obj with CombMax fusion, and BM25 hard-negative
//! mining.
//!
//! Scoring for a query `q` and document `d`:
//!
//! ```text
//! score(q, d) = Σ_{t ∈ q} idf(t) · tf(t,d)·(k1 + 1) / (tf(t,d) + k1·(1 − b + b·|d|/avgdl))
//! idf(t)      = ln(1 + (N − df(t) + 0.5) / (df(t) + 0.5))
//! ```
//!
//! Query terms are summed per occurrence, so a repeated query word counts
//! twice.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Passage, QueryRecord};
use crate::text::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

/// Descending `(passage_id, score)` pairs; ties ordered by ascending id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList(pub Vec<(String, f64)>);

impl RankedList {
    /// Sorts arbitrary scored ids into ranking order and keeps the top `k`.
    pub fn from_scores(mut scored: Vec<(String, f64)>, k: usize) -> Self {
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        Self(scored)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|(id, _)| id.as_str())
    }

    pub fn ids_vec(&self) -> Vec<String> {
        self.0.iter().map(|(id, _)| id.clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct InvertedIndex {
    postings: HashMap<String, Vec<(usize, u32)>>,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    params: Bm25Params,
}

impl InvertedIndex {
    pub fn build(passages: &[Passage], params: Bm25Params) -> Self {
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        let mut doc_lengths = Vec::with_capacity(passages.len());
        for (doc, p) in passages.iter().enumerate() {
            let tokens = tokenize(&p.text);
            doc_lengths.push(tokens.len() as u32);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (t, f) in tf {
                postings.entry(t).or_default().push((doc, f));
            }
        }
        for list in postings.values_mut() {
            list.sort_unstable();
        }
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        let avg_doc_length = if passages.is_empty() {
            0.0
        } else {
            total as f64 / passages.len() as f64
        };
        Self {
            postings,
            doc_ids: passages.iter().map(|p| p.passage_id.clone()).collect(),
            doc_lengths,
            avg_doc_length,
            params,
        }
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, doc: usize) -> u32 {
        self.doc_lengths[doc]
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.num_docs() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 score of every document, in collection order.
    pub fn score_all(&self, query_text: &str) -> Vec<f64> {
        let mut scores = vec![0.0; self.num_docs()];
        let Bm25Params { k1, b } = self.params;
        for term in tokenize(query_text) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(list.len());
            for &(doc, tf) in list {
                let tf = tf as f64;
                let norm = 1.0 - b + b * self.doc_lengths[doc] as f64 / self.avg_doc_length;
                scores[doc] += idf * tf * (k1 + 1.0) / (tf + k1 * norm);
            }
        }
        scores
    }

    pub fn search(&self, query_text: &str, k: usize) -> RankedList {
        bm25_search(self, query_text, k)
    }
}

/// Top-`k` passages under BM25. An empty query yields an empty list.
pub fn bm25_search(index: &InvertedIndex, query_text: &str, k: usize) -> RankedList {
    if tokenize(query_text).is_empty() || k == 0 {
        return RankedList::default();
    }
    let scored = index
        .score_all(query_text)
        .into_iter()
        .enumerate()
        .map(|(doc, s)| (index.doc_ids[doc].clone(), s))
        .collect();
    RankedList::from_scores(scored, k)
}

/// CombMax fusion: each passage keeps its best score over the input lists.
pub fn combmax_aggregate(lists: &[RankedList]) -> RankedList {
    let mut best: HashMap<&str, f64> = HashMap::new();
    for list in lists {
        for (id, s) in &list.0 {
            best.entry(id.as_str())
                .and_modify(|b| *b = b.max(*s))
                .or_insert(*s);
        }
    }
    let n = best.len();
    RankedList::from_scores(
        best.into_iter()
            .map(|(id, s)| (id.to_string(), s))
            .collect(),
        n,
    )
}

/// BM25-Obj: one BM25 query per detected object (question ⊕ object name),
/// fused with CombMax.
pub fn bm25_obj_search(
    index: &InvertedIndex,
    question: &str,
    object_names: &[String],
    k: usize,
) -> RankedList {
    if object_names.is_empty() {
        return bm25_search(index, question, k);
    }
    let lists: Vec<RankedList> = object_names
        .iter()
        .map(|name| bm25_search(index, &format!("{question} {name}"), k))
        .collect();
    let mut fused = combmax_aggregate(&lists);
    fused.0.truncate(k);
    fused
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedNegatives {
    pub ids: Vec<String>,
    /// The collection ran out of non-relevant candidates before `m`.
    pub exhausted: bool,
}

/// Top-`m` BM25 passages for the question, excluding relevant passages.
pub fn mine_hard_negatives(
    index: &InvertedIndex,
    record: &QueryRecord,
    m: usize,
) -> MinedNegatives {
    let relevant: HashSet<&str> = record
        .relevant_passage_ids
        .iter()
        .map(String::as_str)
        .collect();
    let ranked = bm25_search(index, &record.question, index.num_docs());
    let ids: Vec<String> = ranked
        .0
        .into_iter()
        .map(|(id, _)| id)
        .filter(|id| !relevant.contains(id.as_str()))
        .take(m)
        .collect();
    let exhausted = ids.len() < m;
    if exhausted {
        log::warn!(
            "query {}: only {} non-relevant candidates available, wanted {m}",
            record.query_id,
            ids.len()
        );
    }
    MinedNegatives { ids, exhausted }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn passages(texts: &[&str]) -> Vec<Passage> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Passage {
                passage_id: format!("d{}", i + 1),
                text: t.to_string(),
            })
            .collect()
    }

    /// Direct per-document evaluation of the scoring formula.
    fn reference_bm25(docs: &[Vec<String>], query: &[String], k1: f64, b: f64) -> Vec<f64> {
        let n = docs.len() as f64;
        let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
        docs.iter()
            .map(|d| {
                query
                    .iter()
                    .map(|t| {
                        let df = docs.iter().filter(|x| x.contains(t)).count() as f64;
                        let tf = d.iter().filter(|x| *x == t).count() as f64;
                        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                        idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * d.len() as f64 / avgdl))
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn disjoint_vocabulary_ranks_matching_doc_first() {
        let idx =
            InvertedIndex::build(&passages(&["red panda", "blue sky"]), Bm25Params::default());
        let r = bm25_search(&idx, "red panda", 2);
        assert_eq!(r.0[0].0, "d1");
        assert_eq!(r.0[1].1, 0.0);
    }

    #[test]
    fn absent_term_contributes_nothing() {
        let idx =
            InvertedIndex::build(&passages(&["red panda", "blue sky"]), Bm25Params::default());
        assert_eq!(idx.score_all("red"), idx.score_all("red zebra"));
        assert!(idx.score_all("zebra").iter().all(|&s| s == 0.0));
    }

    #[test]
    fn scores_match_reference_formula() {
        let texts = [
            "the panda eats bamboo bamboo",
            "a red panda climbs a tree",
            "bamboo forests in china",
            "the sky is blue and the sea is blue",
            "panda panda panda",
        ];
        let idx = InvertedIndex::build(&passages(&texts), Bm25Params::default());
        let docs: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t)).collect();
        for q in [
            "panda bamboo",
            "blue sea sky",
            "red tree panda panda",
            "china",
        ] {
            let expected = reference_bm25(&docs, &tokenize(q), 0.9, 0.4);
            let got = idx.score_all(q);
            for (e, g) in expected.iter().zip(&got) {
                assert!((e - g).abs() < 1e-9, "{q}: {e} vs {g}");
            }
            let full = bm25_search(&idx, q, texts.len());
            assert_eq!(full.len(), texts.len());
            for w in full.0.windows(2) {
                assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
            }
        }
        let total: u32 = (0..idx.num_docs()).map(|d| idx.doc_length(d)).sum();
        assert!((idx.avg_doc_length() - total as f64 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn empty_query_is_empty_list() {
        let idx = InvertedIndex::build(&passages(&["red panda"]), Bm25Params::default());
        assert!(bm25_search(&idx, " ?! ", 5).is_empty());
    }

    #[test]
    fn combmax_takes_the_maximum() {
        let a = RankedList(vec![("x".into(), 1.0), ("y".into(), 0.5)]);
        let b = RankedList(vec![("x".into(), 3.0)]);
        let fused = combmax_aggregate(&[a.clone(), b]);
        assert_eq!(fused.0[0], ("x".to_string(), 3.0));
        assert_eq!(fused.0[1], ("y".to_string(), 0.5));
        assert_eq!(combmax_aggregate(&[a.clone()]), a);
    }

    #[test]
    fn mining_excludes_relevant_and_flags_exhaustion() {
        let idx = InvertedIndex::build(&passages(&["red panda"]), Bm25Params::default());
        let rec = QueryRecord {
            query_id: "q".into(),
            question: "red panda".into(),
            image_id: "i".into(),
            answers: vec!["a".into()],
            relevant_passage_ids: vec!["d1".into()],
            hard_negative_ids: vec![],
        };
        let mined = mine_hard_negatives(&idx, &rec, 5);
        assert!(mined.ids.is_empty());
        assert!(mined.exhausted);
    }
}
