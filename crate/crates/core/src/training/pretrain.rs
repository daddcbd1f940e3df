//! In-domain warm start for toy encoders, standing in for pretrained
//! weights. Two in-batch contrastive stages run in order:
//!
//! 1. pseudo-queries of a few tokens sampled from one passage must find that
//!    passage among the other passages of the batch;
//! 2. (multi-modal path only) the visual regions of an image must find the
//!    text listing the distinct detector labels of those regions.

use std::collections::BTreeSet;

use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::isolated::{non_finite, Input};
use super::losses::batch_contrastive;
use super::{MetricRecord, MetricsLog};
use crate::autograd::Graph;
use crate::corpus::VisualInput;
use crate::encoders::{truncated, EncoderPath, InputBuilder, TextSequence, ToyEncoder};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, AdamConfig, AdamW, LinearSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    /// Passage pseudo-query steps; 0 skips the stage.
    pub steps: usize,
    /// Region/label alignment steps for the multi-modal path; 0 skips it.
    #[serde(default)]
    pub region_steps: usize,
    pub batch_size: usize,
    /// Tokens sampled from the passage to form a pseudo-query.
    pub query_tokens: usize,
    pub lr: f64,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn disabled() -> Self {
        Self {
            steps: 0,
            region_steps: 0,
            batch_size: 32,
            query_tokens: 3,
            lr: 1e-3,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.query_tokens == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(
                "warm start needs batch_size ≥ 2, query_tokens ≥ 1 and lr > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Runs the enabled warm-start stages and returns the updated encoder.
pub fn pretrain_on_passages(
    init: ToyEncoder,
    builder: &InputBuilder,
    cfg: &PretrainConfig,
    log: &mut MetricsLog,
) -> Result<ToyEncoder> {
    let path = init.model().path();
    let region_steps = if path == EncoderPath::MultiModal {
        cfg.region_steps
    } else {
        0
    };
    if cfg.steps == 0 && region_steps == 0 {
        return Ok(init);
    }
    cfg.validate()?;
    let masked = (path == EncoderPath::MultiModal)
        .then(|| VisualInput::masked(builder.num_regions, builder.feature_dim));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder = init;

    if cfg.steps > 0 {
        let passages = builder
            .dataset
            .passages
            .iter()
            .map(|p| builder.passage(path, p))
            .collect::<Result<Vec<_>>>()?;
        let n_tokens = cfg.query_tokens;
        let make = |i: usize, rng: &mut ChaCha8Rng| -> (Input, Input) {
            let ids = &passages[i].0.token_ids;
            let n = n_tokens.min(ids.len());
            let mut picked = sample(rng, ids.len(), n).into_vec();
            picked.sort_unstable();
            let query = TextSequence::new(picked.into_iter().map(|j| ids[j]).collect());
            ((query, masked.clone()), passages[i].clone())
        };
        encoder = stage(
            encoder,
            passages.len(),
            cfg.steps,
            cfg,
            "warm-start",
            &mut rng,
            make,
            log,
        )?;
    }

    if region_steps > 0 {
        let pairs = builder
            .dataset
            .objects
            .iter()
            .map(|(image_id, names)| {
                let visual = builder.dataset.visual_input(image_id)?.clone();
                let labels: BTreeSet<&str> = names.iter().map(String::as_str).collect();
                let labels = truncated(
                    builder.vocab,
                    &labels.into_iter().collect::<Vec<_>>().join(" "),
                    builder.max_len,
                );
                Ok((
                    (TextSequence::new(Vec::new()), Some(visual)),
                    (labels, masked.clone()),
                ))
            })
            .collect::<Result<Vec<(Input, Input)>>>()?;
        let make = |i: usize, _: &mut ChaCha8Rng| pairs[i].clone();
        encoder = stage(
            encoder,
            pairs.len(),
            region_steps,
            cfg,
            "warm-start-regions",
            &mut rng,
            make,
            log,
        )?;
    }
    Ok(encoder)
}

/// One in-batch contrastive stage over `n` pair sources.
#[allow(clippy::too_many_arguments)]
fn stage<F>(
    mut encoder: ToyEncoder,
    n: usize,
    steps: usize,
    cfg: &PretrainConfig,
    phase: &str,
    rng: &mut ChaCha8Rng,
    make: F,
    log: &mut MetricsLog,
) -> Result<ToyEncoder>
where
    F: Fn(usize, &mut ChaCha8Rng) -> (Input, Input),
{
    if n < cfg.batch_size {
        return Err(Error::Validation(format!(
            "{phase}: {n} examples is fewer than the batch size {}",
            cfg.batch_size
        )));
    }
    let path = encoder.model().path();
    let schedule = LinearSchedule::from_fraction(steps as u64, 0.1);
    let mut opt = AdamW::new(AdamConfig::adam(cfg.lr), encoder.params());
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    for step in 0..steps as u64 {
        if cursor + cfg.batch_size > n {
            order.shuffle(rng);
            cursor = 0;
        }
        let batch: Vec<(Input, Input)> = order[cursor..cursor + cfg.batch_size]
            .iter()
            .map(|&i| make(i, rng))
            .collect();
        cursor += cfg.batch_size;
        let b = batch.len();
        let cols: Vec<Vec<usize>> = (0..b)
            .map(|i| {
                std::iter::once(i)
                    .chain((0..b).filter(|&j| j != i))
                    .collect()
            })
            .collect();
        let (loss, mut grads) = {
            let mut g = Graph::new(encoder.params());
            let model = encoder.model();
            let mut qs = Vec::with_capacity(b);
            let mut ps = Vec::with_capacity(b);
            for ((qseq, qvis), (pseq, pvis)) in &batch {
                qs.push(model.forward(&mut g, qseq, qvis.as_ref())?);
                ps.push(model.forward(&mut g, pseq, pvis.as_ref())?);
            }
            let q = g.concat_rows(&qs);
            let p = g.concat_rows(&ps);
            let scores = g.matmul_bt(q, p);
            let l = batch_contrastive(&mut g, scores, &cols);
            let v = g.scalar(l);
            if !v.is_finite() {
                return Err(non_finite(step, g.value(scores)));
            }
            (v, g.backward(l).into_params())
        };
        clip_global_norm(&mut grads, 1.0);
        opt.step(encoder.params_mut(), &grads, schedule.factor(step));
        log.record(MetricRecord {
            phase: phase.into(),
            path: path.tag().into(),
            round: 0,
            step: step + 1,
            loss: Some(loss),
            val_mrr5: None,
            ..Default::default()
        })?;
    }
    Ok(encoder)
}
