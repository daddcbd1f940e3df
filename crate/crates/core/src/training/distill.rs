use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::candidates::{build_candidates, training_seeds, CandidateSeed};
use super::eval::Evaluator;
use super::isolated::{
    frozen_scores, non_finite, score_graph, split_pair, BatchLayout, PathInputs,
};
use super::losses::{batch_contrastive, batch_kd};
use super::{MetricRecord, MetricsLog};
use crate::autograd::Graph;
use crate::encoders::{EncoderPath, InputBuilder, ToyEncoder};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, AdamConfig, AdamW, LinearSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub max_rounds: usize,
    /// Stop after this many consecutive rounds without a validation gain.
    pub patience: usize,
    pub temperature: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub hard_negatives: usize,
    pub seed: u64,
    /// Passes over the training set per round.
    pub round_passes: usize,
    /// Validation checks per round, evenly spaced.
    pub checks_per_round: usize,
    /// End a round after this many checks without a gain.
    pub check_patience: usize,
    /// Abort a round when the student falls below this fraction of its
    /// starting validation MRR@5.
    pub divergence_fraction: f64,
    /// Weight of an extra contrastive term in the student objective; 0 trains
    /// on the teacher's scores alone.
    pub contrastive_weight: f64,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.round_passes == 0 || self.checks_per_round == 0 {
            return Err(Error::Config(
                "batch_size, round_passes and checks_per_round must be positive".into(),
            ));
        }
        if !(self.temperature > 0.0) || !(self.lr > 0.0) || self.contrastive_weight < 0.0 {
            return Err(Error::Config(
                "temperature and lr must be positive, contrastive_weight non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PathCheckpoint {
    pub encoder: ToyEncoder,
    pub val_mrr5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub teacher: EncoderPath,
    pub student: EncoderPath,
    pub student_val_before: f64,
    /// Best validation MRR@5 the student reached in this round.
    pub student_val_after: f64,
    pub improved: bool,
    pub aborted: bool,
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct DistillationState {
    /// Completed rounds; equals `history.len()`.
    pub round: usize,
    /// Teacher of the next round.
    pub teacher_path: EncoderPath,
    pub student_path: EncoderPath,
    pub history: Vec<RoundRecord>,
    pub best: BTreeMap<EncoderPath, PathCheckpoint>,
}

impl DistillationState {
    pub fn best_val(&self, path: EncoderPath) -> f64 {
        self.best[&path].val_mrr5
    }

    pub fn max_val(&self) -> f64 {
        self.best
            .values()
            .map(|c| c.val_mrr5)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

struct RoundResult {
    best: Option<PathCheckpoint>,
    best_val: f64,
    aborted: bool,
    steps: u64,
}

struct Round<'a> {
    cfg: &'a DistillConfig,
    builder: &'a InputBuilder<'a>,
    seeds: &'a [CandidateSeed],
    inputs: &'a BTreeMap<EncoderPath, PathInputs>,
    eval: Evaluator<'a>,
}

impl Round<'_> {
    fn run(
        &self,
        round: usize,
        teacher: &ToyEncoder,
        start: &PathCheckpoint,
        log: &mut MetricsLog,
    ) -> Result<RoundResult> {
        let cfg = self.cfg;
        let dataset = self.builder.dataset;
        let t_path = teacher.model().path();
        let s_path = start.encoder.model().path();
        let mut student = start.encoder.clone();
        let per_pass = self.seeds.len().div_ceil(cfg.batch_size) as u64;
        let total = per_pass * cfg.round_passes as u64;
        let checks: Vec<u64> = (1..=cfg.checks_per_round as u64)
            .map(|j| (total * j).div_ceil(cfg.checks_per_round as u64).max(1))
            .collect();
        let schedule = LinearSchedule::from_fraction(total, cfg.warmup_fraction);
        let mut opt = AdamW::new(AdamConfig::adam(cfg.lr), student.params());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(round as u64));
        let mut order: Vec<usize> = (0..self.seeds.len()).collect();
        let entry = |step, loss, val_mrr5| MetricRecord {
            phase: "distill".into(),
            path: s_path.tag().into(),
            round,
            step,
            loss,
            val_mrr5,
            ..Default::default()
        };
        let floor = cfg.divergence_fraction * start.val_mrr5;
        let mut result = RoundResult {
            best: None,
            best_val: start.val_mrr5,
            aborted: false,
            steps: 0,
        };
        let mut stale = 0;
        let mut step = 0u64;
        'passes: for _ in 0..cfg.round_passes {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<_> = chunk.iter().map(|&i| self.seeds[i].clone()).collect();
                let layout = BatchLayout::new(&build_candidates(&batch)?, dataset)?;
                let targets = frozen_scores(teacher, &self.inputs[&t_path], &layout)?;
                let (loss, mut grads) = {
                    let mut g = Graph::new(student.params());
                    let scores =
                        score_graph(&mut g, student.model(), &self.inputs[&s_path], &layout)?;
                    let mut l = batch_kd(&mut g, scores, &layout.cols, &targets, cfg.temperature);
                    if cfg.contrastive_weight > 0.0 {
                        let c = batch_contrastive(&mut g, scores, &layout.cols);
                        let c = g.scale(c, cfg.contrastive_weight);
                        l = g.add(l, c);
                    }
                    let v = g.scalar(l);
                    if !v.is_finite() {
                        return Err(non_finite(step, g.value(scores)));
                    }
                    (v, g.backward(l).into_params())
                };
                clip_global_norm(&mut grads, cfg.clip_norm);
                opt.step(student.params_mut(), &grads, schedule.factor(step));
                step += 1;
                log.record(entry(step, Some(loss), None))?;

                if checks.contains(&step) {
                    let v = self.eval.single(&student)?;
                    log.record(entry(step, None, Some(v)))?;
                    log::info!(
                        "distill round {round} ({t_path}→{s_path}) step {step}: val MRR@5 {v:.4}"
                    );
                    if v < floor {
                        log::warn!("round {round}: student diverged ({v:.4} < {floor:.4}), keeping prior best");
                        result.aborted = true;
                        break 'passes;
                    }
                    if v > result.best_val {
                        result.best_val = v;
                        result.best = Some(PathCheckpoint {
                            encoder: student.clone(),
                            val_mrr5: v,
                        });
                        stale = 0;
                    } else {
                        stale += 1;
                        if stale >= cfg.check_patience {
                            break 'passes;
                        }
                    }
                }
            }
        }
        result.steps = step;
        Ok(result)
    }
}

/// Alternating teacher/student distillation between the two paths.
///
/// The path with the higher validation MRR@5 teaches first (text path on a
/// tie). Each round trains the current student on the frozen teacher's
/// candidate scores, keeps the student's best checkpoint if it improved,
/// then swaps roles.
pub fn run_iterative_distillation(
    ckpt_t: PathCheckpoint,
    ckpt_mm: PathCheckpoint,
    builder: &InputBuilder,
    cfg: &DistillConfig,
    log: &mut MetricsLog,
) -> Result<DistillationState> {
    cfg.validate()?;
    if ckpt_t.encoder.model().path() != EncoderPath::Text
        || ckpt_mm.encoder.model().path() != EncoderPath::MultiModal
    {
        return Err(Error::Contract(
            "distillation needs a T checkpoint and an MM checkpoint".into(),
        ));
    }
    let teacher_path = if ckpt_t.val_mrr5 >= ckpt_mm.val_mrr5 {
        EncoderPath::Text
    } else {
        EncoderPath::MultiModal
    };
    let mut state = DistillationState {
        round: 0,
        teacher_path,
        student_path: teacher_path.other(),
        history: Vec::new(),
        best: BTreeMap::from([
            (EncoderPath::Text, ckpt_t),
            (EncoderPath::MultiModal, ckpt_mm),
        ]),
    };
    if cfg.max_rounds == 0 {
        return Ok(state);
    }

    let dataset = builder.dataset;
    let (train, val) = split_pair(dataset)?;
    let seeds = training_seeds(dataset, train, cfg.hard_negatives)?;
    let inputs: BTreeMap<EncoderPath, PathInputs> = [EncoderPath::Text, EncoderPath::MultiModal]
        .into_iter()
        .map(|p| Ok((p, PathInputs::new(builder, p, train)?)))
        .collect::<Result<_>>()?;
    let runner = Round {
        cfg,
        builder,
        seeds: &seeds,
        inputs: &inputs,
        eval: Evaluator {
            builder: *builder,
            records: val,
        },
    };

    let mut stale_rounds = 0;
    while state.round < cfg.max_rounds {
        let (t, s) = (state.teacher_path, state.student_path);
        let before = state.best_val(s);
        let out = runner.run(state.round, &state.best[&t].encoder, &state.best[&s], log)?;
        let improved = out.best.is_some();
        state.history.push(RoundRecord {
            round: state.round,
            teacher: t,
            student: s,
            student_val_before: before,
            student_val_after: out.best_val,
            improved,
            aborted: out.aborted,
            steps: out.steps,
        });
        if let Some(ck) = out.best {
            state.best.insert(s, ck);
        }
        state.round += 1;
        state.teacher_path = s;
        state.student_path = t;
        stale_rounds = if improved { 0 } else { stale_rounds + 1 };
        if stale_rounds >= cfg.patience.max(1) {
            break;
        }
    }
    Ok(state)
}
