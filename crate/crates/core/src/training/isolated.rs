use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::candidates::{build_candidates, training_seeds, CandidateSet};
use super::eval::Evaluator;
use super::losses::batch_contrastive;
use super::{MetricRecord, MetricsLog, RetrieverTrainConfig};
use crate::autograd::{Graph, Mat, Var};
use crate::corpus::{Dataset, QueryRecord, Split, VisualInput};
use crate::encoders::{EncoderPath, InputBuilder, TextSequence, ToyEncoder, ToyEncoderModel};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, AdamConfig, AdamW, LinearSchedule};

pub(crate) type Input = (TextSequence, Option<VisualInput>);

/// Tokenised inputs of one path for a set of queries and every passage.
pub(crate) struct PathInputs {
    queries: HashMap<String, Input>,
    passages: Vec<Input>,
}

impl PathInputs {
    pub(crate) fn new(
        builder: &InputBuilder,
        path: EncoderPath,
        records: &[QueryRecord],
    ) -> Result<Self> {
        let queries = records
            .iter()
            .map(|r| Ok((r.query_id.clone(), builder.query(path, r)?)))
            .collect::<Result<_>>()?;
        let passages = builder
            .dataset
            .passages
            .iter()
            .map(|p| builder.passage(path, p))
            .collect::<Result<_>>()?;
        Ok(Self { queries, passages })
    }

    fn query(&self, id: &str) -> Result<&Input> {
        self.queries
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("no prepared input for query {id}")))
    }
}

/// Column layout of a batch score matrix: one row per query, one column per
/// distinct passage in the batch.
pub(crate) struct BatchLayout {
    pub query_ids: Vec<String>,
    pub passages: Vec<usize>,
    /// Candidate columns of each query, positive first.
    pub cols: Vec<Vec<usize>>,
}

impl BatchLayout {
    pub(crate) fn new(sets: &[CandidateSet], dataset: &Dataset) -> Result<Self> {
        let mut column: HashMap<usize, usize> = HashMap::new();
        let mut passages = Vec::new();
        let mut cols = Vec::with_capacity(sets.len());
        for s in sets {
            let mut c = Vec::with_capacity(s.len());
            for id in s.ids() {
                let pos = dataset
                    .passage_position(id)
                    .ok_or_else(|| Error::Lookup(format!("unknown passage {id}")))?;
                let col = *column.entry(pos).or_insert_with(|| {
                    passages.push(pos);
                    passages.len() - 1
                });
                c.push(col);
            }
            cols.push(c);
        }
        Ok(Self {
            query_ids: sets.iter().map(|s| s.query_id.clone()).collect(),
            passages,
            cols,
        })
    }
}

/// `B × U` matrix of query–passage dot products for one path.
pub(crate) fn score_graph(
    g: &mut Graph,
    model: &ToyEncoderModel,
    inputs: &PathInputs,
    layout: &BatchLayout,
) -> Result<Var> {
    let mut qs = Vec::with_capacity(layout.query_ids.len());
    for id in &layout.query_ids {
        let (seq, visual) = inputs.query(id)?;
        qs.push(model.forward(g, seq, visual.as_ref())?);
    }
    let mut ps = Vec::with_capacity(layout.passages.len());
    for &p in &layout.passages {
        let (seq, visual) = &inputs.passages[p];
        ps.push(model.forward(g, seq, visual.as_ref())?);
    }
    let q = g.concat_rows(&qs);
    let p = g.concat_rows(&ps);
    Ok(g.matmul_bt(q, p))
}

/// Candidate scores of a frozen encoder, aligned with `layout.cols`.
pub(crate) fn frozen_scores(
    encoder: &ToyEncoder,
    inputs: &PathInputs,
    layout: &BatchLayout,
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new(encoder.params());
    let s = score_graph(&mut g, encoder.model(), inputs, layout)?;
    let s = g.value(s);
    Ok(layout
        .cols
        .iter()
        .enumerate()
        .map(|(i, c)| c.iter().map(|&j| s[[i, j]]).collect())
        .collect())
}

pub(crate) fn non_finite(step: u64, scores: &Mat) -> Error {
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    Error::Numeric(format!(
        "non-finite loss at batch {step}; score range [{lo}, {hi}]"
    ))
}

pub(crate) fn split_pair<'a>(
    dataset: &'a Dataset,
) -> Result<(&'a [QueryRecord], &'a [QueryRecord])> {
    let train = dataset.split(Split::Train);
    let val = dataset.split(Split::Validation);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Validation(
            "training needs non-empty train and validation splits".into(),
        ));
    }
    Ok((train, val))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation MRR@5 (the initial one if no
    /// epoch improved on it).
    pub encoder: ToyEncoder,
    pub initial_val_mrr5: f64,
    pub best_val_mrr5: f64,
    /// Validation MRR@5 after each epoch.
    pub val_history: Vec<f64>,
    /// Mean batch loss of every optimiser step.
    pub losses: Vec<f64>,
}

/// Contrastive training of one path on the train split, validated on the
/// validation split after every epoch.
pub fn train_isolated(
    init: ToyEncoder,
    builder: &InputBuilder,
    cfg: &RetrieverTrainConfig,
    log: &mut MetricsLog,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = builder.dataset;
    let (train, val) = split_pair(dataset)?;
    let path = init.model().path();
    let seeds = training_seeds(dataset, train, cfg.hard_negatives)?;
    let inputs = PathInputs::new(builder, path, train)?;
    let eval = Evaluator {
        builder: *builder,
        records: val,
    };
    let tag = path.tag().to_string();
    let entry = |step, loss, val_mrr5| MetricRecord {
        phase: "isolated".into(),
        path: tag.clone(),
        round: 0,
        step,
        loss,
        val_mrr5,
        ..Default::default()
    };

    let initial = eval.single(&init)?;
    log.record(entry(0, None, Some(initial)))?;
    let mut encoder = init;
    let mut best = (encoder.clone(), initial);
    let steps_per_epoch = seeds.len().div_ceil(cfg.batch_size) as u64;
    let schedule =
        LinearSchedule::from_fraction(steps_per_epoch * cfg.epochs as u64, cfg.warmup_fraction);
    let mut opt = AdamW::new(
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::adam(cfg.lr)
        },
        encoder.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..seeds.len()).collect();
    let mut step = 0u64;
    let mut losses = Vec::new();
    let mut val_history = Vec::new();

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| seeds[i].clone()).collect();
            let layout = BatchLayout::new(&build_candidates(&batch)?, dataset)?;
            let (loss, mut grads) = {
                let mut g = Graph::new(encoder.params());
                let scores = score_graph(&mut g, encoder.model(), &inputs, &layout)?;
                let l = batch_contrastive(&mut g, scores, &layout.cols);
                let v = g.scalar(l);
                if !v.is_finite() {
                    return Err(non_finite(step, g.value(scores)));
                }
                (v, g.backward(l).into_params())
            };
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(encoder.params_mut(), &grads, schedule.factor(step));
            step += 1;
            losses.push(loss);
            log.record(entry(step, Some(loss), None))?;
        }
        let v = eval.single(&encoder)?;
        log::info!("isolated {tag}: step {step} val MRR@5 {v:.4}");
        log.record(entry(step, None, Some(v)))?;
        val_history.push(v);
        if v > best.1 {
            best = (encoder.clone(), v);
        }
    }
    Ok(TrainOutcome {
        encoder: best.0,
        initial_val_mrr5: initial,
        best_val_mrr5: best.1,
        val_history,
        losses,
    })
}
