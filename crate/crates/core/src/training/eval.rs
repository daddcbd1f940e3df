//! Validation harness: exact dense retrieval over the whole collection.

use std::collections::HashSet;

use rayon::prelude::*;

use crate::corpus::QueryRecord;
use crate::encoders::{DenseEncoder, InputBuilder};
use crate::error::{Error, Result};
use crate::index::{concat_dual, embed_passages, exact_top_k, DualEmbedding, FlatIndex, Run};
use crate::metrics::{mrr_at_k, JudgedRanking, RetrievalJudgedRun};
use crate::sparse::RankedList;

/// Pairs each record with its ranking in `run`; a record without a ranking
/// is a lookup error.
pub fn judge_run(records: &[QueryRecord], run: &Run) -> Result<RetrievalJudgedRun> {
    records
        .iter()
        .map(|r| {
            let list = run.get(&r.query_id).ok_or_else(|| {
                Error::Lookup(format!("run has no ranking for query {}", r.query_id))
            })?;
            let relevant: HashSet<String> = r.relevant_passage_ids.iter().cloned().collect();
            JudgedRanking::new(r.query_id.clone(), list.ids_vec(), relevant)
        })
        .collect::<Result<Vec<_>>>()
        .map(RetrievalJudgedRun)
}

fn collect_run(records: &[QueryRecord], lists: Vec<RankedList>) -> Run {
    records
        .iter()
        .map(|r| r.query_id.clone())
        .zip(lists)
        .collect()
}

/// Top-`k` single-path retrieval for every record.
pub fn dense_rankings(
    encoder: &dyn DenseEncoder,
    builder: &InputBuilder,
    records: &[QueryRecord],
    k: usize,
) -> Result<Run> {
    let matrix = embed_passages(encoder, builder, &builder.dataset.passages)?;
    let ids: Vec<String> = builder
        .dataset
        .passages
        .iter()
        .map(|p| p.passage_id.clone())
        .collect();
    let lists = records
        .par_iter()
        .map(|r| {
            let (seq, visual) = builder.query(encoder.path(), r)?;
            let q = encoder.encode(&seq, visual.as_ref())?;
            Ok(exact_top_k(&matrix, &ids, &q.embedding, k))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(collect_run(records, lists))
}

/// Concatenated query embedding `concat(E_T(Q, caption), E_MM(Q, I))`.
pub fn dual_query(
    encoder_t: &dyn DenseEncoder,
    encoder_mm: &dyn DenseEncoder,
    builder: &InputBuilder,
    record: &QueryRecord,
) -> Result<DualEmbedding> {
    let (st, vt) = builder.query(encoder_t.path(), record)?;
    let (sm, vm) = builder.query(encoder_mm.path(), record)?;
    concat_dual(
        &encoder_t.encode(&st, vt.as_ref())?,
        &encoder_mm.encode(&sm, vm.as_ref())?,
        record.query_id.clone(),
    )
}

/// Top-`k` dual-embedding retrieval against a built index.
pub fn index_rankings(
    index: &FlatIndex,
    encoder_t: &dyn DenseEncoder,
    encoder_mm: &dyn DenseEncoder,
    builder: &InputBuilder,
    records: &[QueryRecord],
    k: usize,
) -> Result<Run> {
    let lists = records
        .par_iter()
        .map(|r| index.search(&dual_query(encoder_t, encoder_mm, builder, r)?, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(collect_run(records, lists))
}

pub fn dense_run(
    encoder: &dyn DenseEncoder,
    builder: &InputBuilder,
    records: &[QueryRecord],
    k: usize,
) -> Result<RetrievalJudgedRun> {
    judge_run(records, &dense_rankings(encoder, builder, records, k)?)
}

/// Builds a throwaway index and judges top-`k` dual retrieval.
pub fn dual_run(
    encoder_t: &dyn DenseEncoder,
    encoder_mm: &dyn DenseEncoder,
    builder: &InputBuilder,
    records: &[QueryRecord],
    k: usize,
) -> Result<RetrievalJudgedRun> {
    let index = FlatIndex::build(
        &builder.dataset.passages,
        encoder_t,
        encoder_mm,
        builder,
        (String::new(), String::new()),
    )?;
    judge_run(
        records,
        &index_rankings(&index, encoder_t, encoder_mm, builder, records, k)?,
    )
}

pub fn mrr5(run: &RetrievalJudgedRun) -> Result<f64> {
    mrr_at_k(run, 5)
}

/// Validation MRR@5 of single encoders or of a dual pair on a fixed split.
#[derive(Clone, Copy)]
pub struct Evaluator<'a> {
    pub builder: InputBuilder<'a>,
    pub records: &'a [QueryRecord],
}

impl<'a> Evaluator<'a> {
    pub fn single(&self, encoder: &dyn DenseEncoder) -> Result<f64> {
        mrr5(&dense_run(encoder, &self.builder, self.records, 5)?)
    }

    pub fn dual(&self, t: &dyn DenseEncoder, mm: &dyn DenseEncoder) -> Result<f64> {
        mrr5(&dual_run(t, mm, &self.builder, self.records, 5)?)
    }
}
