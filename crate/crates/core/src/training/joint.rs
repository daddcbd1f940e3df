use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::candidates::{build_candidates, training_seeds};
use super::eval::Evaluator;
use super::isolated::{non_finite, score_graph, split_pair, BatchLayout, PathInputs};
use super::losses::batch_contrastive;
use super::{MetricRecord, MetricsLog, RetrieverTrainConfig};
use crate::autograd::Graph;
use crate::encoders::{EncoderPath, InputBuilder, ToyEncoder, ToyEncoderModel};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, AdamConfig, AdamW, LinearSchedule};
use crate::params::ParamStore;

const T_PREFIX: &str = "t.";
const MM_PREFIX: &str = "mm.";

#[derive(Debug, Clone)]
pub struct JointOutcome {
    pub encoder_t: ToyEncoder,
    pub encoder_mm: ToyEncoder,
    pub initial_val_mrr5: f64,
    pub best_val_mrr5: f64,
    pub losses: Vec<f64>,
}

fn split_store(
    store: &ParamStore,
    t: &ToyEncoder,
    mm: &ToyEncoder,
) -> Result<(ToyEncoder, ToyEncoder)> {
    Ok((
        ToyEncoder::from_parts(*t.config(), EncoderPath::Text, store.extract(T_PREFIX))?,
        ToyEncoder::from_parts(
            *mm.config(),
            EncoderPath::MultiModal,
            store.extract(MM_PREFIX),
        )?,
    ))
}

/// Retrains both encoders together on the contrastive objective over summed
/// scores `S_T + S_MM`, i.e. over the concatenated dual embeddings.
pub fn train_joint(
    encoder_t: ToyEncoder,
    encoder_mm: ToyEncoder,
    builder: &InputBuilder,
    cfg: &RetrieverTrainConfig,
    log: &mut MetricsLog,
) -> Result<JointOutcome> {
    cfg.validate()?;
    if encoder_t.model().path() != EncoderPath::Text
        || encoder_mm.model().path() != EncoderPath::MultiModal
    {
        return Err(Error::Contract(
            "joint training needs a T encoder and an MM encoder".into(),
        ));
    }
    let dataset = builder.dataset;
    let (train, val) = split_pair(dataset)?;
    let seeds = training_seeds(dataset, train, cfg.hard_negatives)?;
    let inputs_t = PathInputs::new(builder, EncoderPath::Text, train)?;
    let inputs_mm = PathInputs::new(builder, EncoderPath::MultiModal, train)?;
    let eval = Evaluator {
        builder: *builder,
        records: val,
    };

    let mut store = ParamStore::default();
    store.absorb(T_PREFIX, encoder_t.params());
    store.absorb(MM_PREFIX, encoder_mm.params());
    let model_t =
        ToyEncoderModel::resolve(&store, T_PREFIX, *encoder_t.config(), EncoderPath::Text)?;
    let model_mm = ToyEncoderModel::resolve(
        &store,
        MM_PREFIX,
        *encoder_mm.config(),
        EncoderPath::MultiModal,
    )?;
    let entry = |step, loss, val_mrr5| MetricRecord {
        phase: "joint".into(),
        path: "T+MM".into(),
        round: 0,
        step,
        loss,
        val_mrr5,
        ..Default::default()
    };

    let initial = eval.dual(&encoder_t, &encoder_mm)?;
    log.record(entry(0, None, Some(initial)))?;
    let mut best = (encoder_t.clone(), encoder_mm.clone(), initial);
    let steps_per_epoch = seeds.len().div_ceil(cfg.batch_size) as u64;
    let schedule =
        LinearSchedule::from_fraction(steps_per_epoch * cfg.epochs as u64, cfg.warmup_fraction);
    let mut opt = AdamW::new(
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::adam(cfg.lr)
        },
        &store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..seeds.len()).collect();
    let mut losses = Vec::new();
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| seeds[i].clone()).collect();
            let layout = BatchLayout::new(&build_candidates(&batch)?, dataset)?;
            let (loss, mut grads) = {
                let mut g = Graph::new(&store);
                let st = score_graph(&mut g, &model_t, &inputs_t, &layout)?;
                let sm = score_graph(&mut g, &model_mm, &inputs_mm, &layout)?;
                let scores = g.add(st, sm);
                let l = batch_contrastive(&mut g, scores, &layout.cols);
                let v = g.scalar(l);
                if !v.is_finite() {
                    return Err(non_finite(step, g.value(scores)));
                }
                (v, g.backward(l).into_params())
            };
            clip_global_norm(&mut grads, cfg.clip_norm);
            opt.step(&mut store, &grads, schedule.factor(step));
            step += 1;
            losses.push(loss);
            log.record(entry(step, Some(loss), None))?;
        }
        let (t, mm) = split_store(&store, &encoder_t, &encoder_mm)?;
        let v = eval.dual(&t, &mm)?;
        log.record(entry(step, None, Some(v)))?;
        if v > best.2 {
            best = (t, mm, v);
        }
    }
    Ok(JointOutcome {
        encoder_t: best.0,
        encoder_mm: best.1,
        initial_val_mrr5: initial,
        best_val_mrr5: best.2,
        losses,
    })
}
