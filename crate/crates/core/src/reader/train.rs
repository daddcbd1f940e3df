use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{answer_target, assemble_fusion_inputs, Reader, ReaderConfig};
use crate::autograd::Graph;
use crate::corpus::{Dataset, QueryRecord, VisualInput};
use crate::encoders::TextSequence;
use crate::error::{Error, Result};
use crate::index::Run;
use crate::metrics::{exact_match, AnswerJudgment};
use crate::optim::{
    accumulate_grads, clip_global_norm, scale_grads, AdamConfig, AdamW, LinearSchedule,
};
use crate::text::Vocab;
use crate::training::{MetricRecord, MetricsLog};

/// One question with its encoder inputs and decoder target.
#[derive(Debug, Clone)]
pub struct ReaderExample {
    pub query_id: String,
    pub inputs: Vec<(TextSequence, VisualInput)>,
    pub target: Vec<u32>,
    pub references: Vec<String>,
}

/// The first `n` passage ids of every ranking in `run`.
pub fn supporting_passages(run: &Run, n: usize) -> BTreeMap<String, Vec<String>> {
    run.iter()
        .map(|(q, list)| {
            (
                q.clone(),
                list.0.iter().take(n).map(|(p, _)| p.clone()).collect(),
            )
        })
        .collect()
}

/// Builds reader examples; each query uses the first `cfg.n_passages` ids
/// of its entry in `supporting`.
pub fn prepare_examples(
    dataset: &Dataset,
    records: &[QueryRecord],
    supporting: &BTreeMap<String, Vec<String>>,
    vocab: &Vocab,
    cfg: &ReaderConfig,
) -> Result<Vec<ReaderExample>> {
    records
        .iter()
        .map(|r| {
            let ids: &[String] = match (cfg.n_passages, supporting.get(&r.query_id)) {
                (0, _) => &[],
                (_, Some(ids)) => &ids[..ids.len().min(cfg.n_passages)],
                (_, None) => {
                    return Err(Error::Lookup(format!(
                        "no supporting passages for query {}",
                        r.query_id
                    )))
                }
            };
            let passages = ids
                .iter()
                .map(|id| {
                    dataset.passage(id).ok_or_else(|| {
                        Error::Lookup(format!("unknown passage {id} for query {}", r.query_id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let answer = r
                .target_answer()
                .ok_or_else(|| Error::Validation(format!("query {} has no answers", r.query_id)))?;
            Ok(ReaderExample {
                query_id: r.query_id.clone(),
                inputs: assemble_fusion_inputs(r, &dataset.visual, &passages, vocab, cfg)?,
                target: answer_target(vocab, answer, cfg.max_output_tokens),
                references: r.answers.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReaderTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Examples per optimizer update.
    pub accumulation: usize,
    pub clip_norm: f64,
    pub warmup_fraction: f64,
    /// Optimizer updates.
    pub max_steps: usize,
    /// Validation cadence in optimizer updates.
    pub eval_every: usize,
    /// Stop once validation EM reaches this value.
    #[serde(default)]
    pub stop_at_em: Option<f64>,
    pub seed: u64,
}

impl ReaderTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config(
                "reader lr and clip_norm must be positive, weight_decay ≥ 0".into(),
            ));
        }
        if self.accumulation == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "accumulation, max_steps and eval_every must be ≥ 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub struct ReaderTrainOutcome {
    /// Checkpoint with the best validation EM.
    pub reader: Reader,
    pub best_val_em: f64,
    pub best_step: u64,
    /// (update, validation EM) at every check.
    pub history: Vec<(u64, f64)>,
    pub losses: Vec<f64>,
    pub steps: u64,
}

/// Exact match of beam-search answers over `examples`.
pub fn evaluate_em(reader: &Reader, vocab: &Vocab, examples: &[ReaderExample]) -> Result<f64> {
    let judgments = examples
        .iter()
        .map(|ex| {
            Ok(AnswerJudgment {
                prediction: reader.generate(vocab, &ex.inputs, true)?.answer,
                references: ex.references.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(exact_match(&judgments))
}

/// Teacher-forced loss of one example and its parameter gradients.
pub(crate) fn example_loss(
    reader: &Reader,
    ex: &ReaderExample,
) -> Result<(f64, Vec<Option<crate::autograd::Mat>>)> {
    let mut g = Graph::new(reader.params());
    let fusion = reader.model().fuse_encode(&mut g, &ex.inputs)?;
    let loss = reader.model().reader_loss(&mut g, &fusion, &ex.target)?;
    Ok((g.scalar(loss), g.backward(loss).into_params()))
}

pub fn train_reader(
    init: Reader,
    vocab: &Vocab,
    train: &[ReaderExample],
    val: &[ReaderExample],
    cfg: &ReaderTrainConfig,
    log: &mut MetricsLog,
) -> Result<ReaderTrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Validation(
            "reader training needs train and validation examples".into(),
        ));
    }
    let mut reader = init;
    let adam = AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::adam(cfg.lr)
    };
    let mut opt = AdamW::new(adam, reader.params());
    let schedule = LinearSchedule::from_fraction(cfg.max_steps as u64, cfg.warmup_fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut best: Option<(Reader, f64, u64)> = None;
    let mut history = Vec::new();
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut steps = 0u64;
    for step in 0..cfg.max_steps as u64 {
        let mut acc = Vec::new();
        let mut total = 0.0;
        for _ in 0..cfg.accumulation {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &train[order[cursor]];
            cursor += 1;
            let (loss, grads) = example_loss(&reader, ex)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "reader loss {loss} at update {} on query {} (target {:?})",
                    step + 1,
                    ex.query_id,
                    ex.target
                )));
            }
            total += loss;
            accumulate_grads(&mut acc, grads);
        }
        scale_grads(&mut acc, 1.0 / cfg.accumulation as f64);
        clip_global_norm(&mut acc, cfg.clip_norm);
        opt.step(reader.params_mut(), &acc, schedule.factor(step));
        let mean = total / cfg.accumulation as f64;
        losses.push(mean);
        steps = step + 1;
        let check = steps % cfg.eval_every as u64 == 0 || steps == cfg.max_steps as u64;
        let val_em = if check {
            Some(evaluate_em(&reader, vocab, val)?)
        } else {
            None
        };
        log.record(MetricRecord {
            phase: "reader".into(),
            path: "MM-FiD".into(),
            step: steps,
            loss: Some(mean),
            val_em,
            ..Default::default()
        })?;
        if let Some(em) = val_em {
            history.push((steps, em));
            if best.as_ref().map_or(true, |b| em > b.1) {
                best = Some((reader.clone(), em, steps));
            }
            if cfg.stop_at_em.is_some_and(|target| em >= target) {
                break;
            }
        }
    }
    let (reader, best_val_em, best_step) = best.expect("the final update is always checked");
    Ok(ReaderTrainOutcome {
        reader,
        best_val_em,
        best_step,
        history,
        losses,
        steps,
    })
}

/// One line of an answer file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub query_id: String,
    pub answer: String,
    pub score: f64,
}

/// Writes `query_id<TAB>answer<TAB>score` lines.
pub fn write_answers(path: &Path, answers: &[AnswerRecord]) -> Result<()> {
    let mut out = String::new();
    for a in answers {
        if a.query_id.contains(['\t', '\n']) || a.answer.contains(['\t', '\n']) {
            return Err(Error::Argument(format!(
                "answer for {} contains a tab or newline",
                a.query_id
            )));
        }
        out.push_str(&format!("{}\t{}\t{}\n", a.query_id, a.answer, a.score));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_answers(path: &Path) -> Result<Vec<AnswerRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(bad(format!(
                    "expected 3 tab-separated columns, found {}",
                    cols.len()
                )));
            }
            let score = cols[2]
                .parse::<f64>()
                .map_err(|e| bad(format!("score: {e}")))?;
            Ok(AnswerRecord {
                query_id: cols[0].to_string(),
                answer: cols[1].to_string(),
                score,
            })
        })
        .collect()
}
