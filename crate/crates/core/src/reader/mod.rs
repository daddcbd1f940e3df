//! Fusion-in-decoder reader over (question, image, passage) triplets.
//!
//! Every triplet goes through the multi-modal toy encoder on its own; the
//! decoder then cross-attends over the concatenation of all encoded states.
//! Output logits are tied to the encoder's token embedding table.

mod train;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use train::{
    evaluate_em, prepare_examples, read_answers, supporting_passages, train_reader, write_answers,
    AnswerRecord, ReaderExample, ReaderTrainConfig, ReaderTrainOutcome,
};

use crate::autograd::{Graph, Mat, Var};
use crate::corpus::{Passage, QueryRecord, VisualInput};
use crate::encoders::layers::{causal_mask, DecoderBlock, LayerNormIds};
use crate::encoders::{truncated, EncoderPath, TextSequence, ToyEncoderConfig, ToyEncoderModel};
use crate::error::{Error, Result};
use crate::params::{normal_init, Checkpoint, ParamStore};
use crate::text::{Vocab, BOS, EOS};

pub const DEFAULT_MAX_OUTPUT_TOKENS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReaderConfig {
    /// Triplet encoder; `max_len` is the per-triplet text cap.
    pub encoder: ToyEncoderConfig,
    pub decoder_layers: usize,
    pub max_output_tokens: usize,
    pub beam_size: usize,
    /// Supporting passages per question.
    pub n_passages: usize,
    /// Triplet text; `{question}` and `{passage}` are substituted.
    pub template: String,
    /// Text used when no passage is supplied.
    pub question_only_template: String,
}

impl ReaderConfig {
    pub fn new(encoder: ToyEncoderConfig) -> Self {
        Self {
            encoder,
            decoder_layers: 2,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            beam_size: 2,
            n_passages: 5,
            template: "question: {question} context: {passage}".into(),
            question_only_template: "question: {question}".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_output_tokens == 0 || self.beam_size == 0 || self.decoder_layers == 0 {
            return Err(Error::Config(
                "reader needs max_output_tokens, beam_size and decoder_layers ≥ 1".into(),
            ));
        }
        if !self.template.contains("{question}") || !self.template.contains("{passage}") {
            return Err(Error::Config(
                "reader template must contain {question} and {passage}".into(),
            ));
        }
        if !self.question_only_template.contains("{question}") {
            return Err(Error::Config(
                "question-only template must contain {question}".into(),
            ));
        }
        Ok(())
    }
}

/// Builds one (text, image) encoder input per supporting passage, or a
/// single question-only input when `passages` is empty.
pub fn assemble_fusion_inputs(
    record: &QueryRecord,
    visual: &BTreeMap<String, VisualInput>,
    passages: &[&Passage],
    vocab: &Vocab,
    cfg: &ReaderConfig,
) -> Result<Vec<(TextSequence, VisualInput)>> {
    let image = visual.get(&record.image_id).ok_or_else(|| {
        Error::Lookup(format!("no visual features for image {}", record.image_id))
    })?;
    let texts: Vec<String> = if passages.is_empty() {
        vec![cfg
            .question_only_template
            .replace("{question}", &record.question)]
    } else {
        passages
            .iter()
            .map(|p| {
                cfg.template
                    .replace("{question}", &record.question)
                    .replace("{passage}", &p.text)
            })
            .collect()
    };
    Ok(texts
        .iter()
        .map(|t| (truncated(vocab, t, cfg.encoder.max_len), image.clone()))
        .collect())
}

/// Encoded, concatenated triplet states inside a graph.
pub struct FusionBatch {
    pub n: usize,
    /// Positions contributed by each triplet, in input order.
    pub lengths: Vec<usize>,
    pub context: Var,
    /// One entry per context position; every position is real because the
    /// blocks are concatenated without padding.
    pub mask: Vec<bool>,
}

impl FusionBatch {
    pub fn context_len(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Token ids the decoder is trained to emit for `answer`: its tokens then
/// EOS, capped at `max_tokens` with EOS kept last.
pub fn answer_target(vocab: &Vocab, answer: &str, max_tokens: usize) -> Vec<u32> {
    let mut ids = vocab.encode(answer);
    ids.truncate(max_tokens.saturating_sub(1));
    ids.push(EOS);
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderOutput {
    /// Generated ids without the closing EOS.
    pub token_ids: Vec<u32>,
    pub answer: String,
    /// Sum of token log-probabilities, EOS included when emitted.
    pub log_prob: f64,
}

/// Architecture and tensor ids of the reader inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ReaderModel {
    cfg: ReaderConfig,
    encoder: ToyEncoderModel,
    dec_pos: usize,
    blocks: Vec<DecoderBlock>,
    ln_final: LayerNormIds,
}

impl ReaderModel {
    fn init(store: &mut ParamStore, cfg: ReaderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.encoder;
        let encoder = ToyEncoderModel::init(store, "enc.", e, EncoderPath::MultiModal, rng)?;
        let dec_pos = store.insert(
            "dec.pos_emb",
            normal_init(rng, cfg.max_output_tokens, e.width, 0.1),
        );
        let blocks = (0..cfg.decoder_layers)
            .map(|l| {
                DecoderBlock::init(
                    store,
                    &format!("dec.block{l}"),
                    e.width,
                    e.heads,
                    e.ffn_hidden,
                    rng,
                )
            })
            .collect();
        let ln_final = LayerNormIds::init(store, "dec.ln_f", e.width);
        Ok(Self {
            cfg,
            encoder,
            dec_pos,
            blocks,
            ln_final,
        })
    }

    fn resolve(store: &ParamStore, cfg: ReaderConfig) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.encoder;
        let model = Self {
            encoder: ToyEncoderModel::resolve(store, "enc.", e, EncoderPath::MultiModal)?,
            dec_pos: store.id("dec.pos_emb")?,
            blocks: (0..cfg.decoder_layers)
                .map(|l| DecoderBlock::resolve(store, &format!("dec.block{l}"), e.heads))
                .collect::<Result<_>>()?,
            ln_final: LayerNormIds::resolve(store, "dec.ln_f")?,
            cfg,
        };
        if store.tensor(model.dec_pos).nrows() != model.cfg.max_output_tokens {
            return Err(Error::Checkpoint(
                "decoder positions do not match max_output_tokens".into(),
            ));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ReaderConfig {
        &self.cfg
    }

    /// Encodes each triplet independently and concatenates the states.
    pub fn fuse_encode(
        &self,
        g: &mut Graph,
        inputs: &[(TextSequence, VisualInput)],
    ) -> Result<FusionBatch> {
        if inputs.is_empty() {
            return Err(Error::Argument(
                "fusion needs at least one encoder input".into(),
            ));
        }
        let mut parts = Vec::with_capacity(inputs.len());
        let mut lengths = Vec::with_capacity(inputs.len());
        for (seq, visual) in inputs {
            let states = self.encoder.states(g, seq, Some(visual), false)?;
            lengths.push(g.value(states).nrows());
            parts.push(states);
        }
        let context = g.concat_rows(&parts);
        let total = lengths.iter().sum();
        Ok(FusionBatch {
            n: inputs.len(),
            lengths,
            context,
            mask: vec![true; total],
        })
    }

    /// Next-token logits for every position of `[BOS] prefix…`, one row each.
    pub fn decoder_logits(&self, g: &mut Graph, context: Var, prefix: &[u32]) -> Result<Var> {
        let n = prefix.len() + 1;
        if n > self.cfg.max_output_tokens {
            return Err(Error::Contract(format!(
                "decoder input of {n} positions exceeds max_output_tokens {}",
                self.cfg.max_output_tokens
            )));
        }
        let ids: Vec<usize> = std::iter::once(BOS)
            .chain(prefix.iter().copied())
            .map(|t| t as usize)
            .collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.cfg.encoder.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} outside the vocabulary"
            )));
        }
        let table = g.param(self.encoder.token_embedding_id());
        let pos_table = g.param(self.dec_pos);
        let tok = g.gather(table, &ids);
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.gather(pos_table, &positions);
        let mut x = g.add(tok, pos);
        let mask = causal_mask(n);
        for block in &self.blocks {
            x = block.forward(g, x, context, &mask);
        }
        let h = self.ln_final.forward(g, x);
        Ok(g.matmul_bt(h, table))
    }

    /// Teacher-forced cross-entropy summed over target positions.
    pub fn reader_loss(&self, g: &mut Graph, fusion: &FusionBatch, target: &[u32]) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::Argument("empty answer target".into()));
        }
        if target.len() > self.cfg.max_output_tokens {
            return Err(Error::Argument(format!(
                "answer target of {} tokens exceeds the cap {}",
                target.len(),
                self.cfg.max_output_tokens
            )));
        }
        let logits = self.decoder_logits(g, fusion.context, &target[..target.len() - 1])?;
        let targets: Vec<usize> = target.iter().map(|&t| t as usize).collect();
        Ok(g.cross_entropy(logits, &targets))
    }
}

/// A reader that owns its parameters.
#[derive(Debug, Clone)]
pub struct Reader {
    model: ReaderModel,
    params: ParamStore,
}

struct Hypothesis {
    tokens: Vec<u32>,
    log_prob: f64,
}

impl Reader {
    pub fn new(cfg: ReaderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let model = ReaderModel::init(&mut params, cfg, &mut rng)?;
        Ok(Self { model, params })
    }

    pub fn model(&self) -> &ReaderModel {
        &self.model
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn config(&self) -> &ReaderConfig {
        &self.model.cfg
    }

    /// Fusion context as a plain matrix. Triplets are encoded in parallel,
    /// each in its own graph.
    pub fn encode_context(&self, inputs: &[(TextSequence, VisualInput)]) -> Result<Mat> {
        if inputs.is_empty() {
            return Err(Error::Argument(
                "fusion needs at least one encoder input".into(),
            ));
        }
        let blocks = inputs
            .par_iter()
            .map(|(seq, visual)| {
                let mut g = Graph::new(&self.params);
                let s = self
                    .model
                    .encoder
                    .states(&mut g, seq, Some(visual), false)?;
                Ok(g.value(s).clone())
            })
            .collect::<Result<Vec<Mat>>>()?;
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        Ok(ndarray::concatenate(ndarray::Axis(0), &views).expect("blocks share the model width"))
    }

    /// Log-probabilities of the next token after `prefix`.
    pub fn next_token_log_probs(&self, context: &Mat, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let ctx = g.leaf(context.clone());
        let logits = self.model.decoder_logits(&mut g, ctx, prefix)?;
        let row = g.value(logits).row(prefix.len()).to_vec();
        let lse = crate::autograd::log_sum_exp(row.iter().copied());
        Ok(row.into_iter().map(|v| v - lse).collect())
    }

    /// Greedy decoding: the arg-max token at every step.
    pub fn greedy(
        &self,
        vocab: &Vocab,
        inputs: &[(TextSequence, VisualInput)],
    ) -> Result<ReaderOutput> {
        let context = self.encode_context(inputs)?;
        let mut tokens = Vec::new();
        let mut log_prob = 0.0;
        while tokens.len() < self.model.cfg.max_output_tokens {
            let lp = self.next_token_log_probs(&context, &tokens)?;
            let (best, v) = argmax(&lp);
            log_prob += v;
            tokens.push(best);
            if best == EOS {
                break;
            }
        }
        Ok(finish(vocab, tokens, log_prob))
    }

    /// Beam search with the configured width and length cap. With
    /// `length_normalize`, finished hypotheses are ranked by log-probability
    /// per generated token; otherwise by raw log-probability.
    pub fn generate(
        &self,
        vocab: &Vocab,
        inputs: &[(TextSequence, VisualInput)],
        length_normalize: bool,
    ) -> Result<ReaderOutput> {
        self.beam_search(vocab, inputs, self.model.cfg.beam_size, length_normalize)
    }

    pub fn beam_search(
        &self,
        vocab: &Vocab,
        inputs: &[(TextSequence, VisualInput)],
        width: usize,
        length_normalize: bool,
    ) -> Result<ReaderOutput> {
        if width == 0 {
            return Err(Error::Argument("beam width must be ≥ 1".into()));
        }
        let cap = self.model.cfg.max_output_tokens;
        let context = self.encode_context(inputs)?;
        let mut live = vec![Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
        }];
        let mut done: Vec<Hypothesis> = Vec::new();
        for _ in 0..cap {
            let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
            for (b, hyp) in live.iter().enumerate() {
                let lp = self.next_token_log_probs(&context, &hyp.tokens)?;
                let mut order: Vec<u32> = (0..lp.len() as u32).collect();
                order.sort_by(|&x, &y| lp[y as usize].total_cmp(&lp[x as usize]).then(x.cmp(&y)));
                for &t in order.iter().take(2 * width) {
                    candidates.push((b, t, hyp.log_prob + lp[t as usize]));
                }
            }
            candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
            let mut next = Vec::with_capacity(width);
            for (rank, &(b, t, score)) in candidates.iter().enumerate() {
                let mut tokens = live[b].tokens.clone();
                tokens.push(t);
                let hyp = Hypothesis {
                    tokens,
                    log_prob: score,
                };
                if t == EOS {
                    // an EOS candidate only counts while it is within the beam
                    if rank < width {
                        done.push(hyp);
                    }
                } else {
                    next.push(hyp);
                }
                if next.len() == width {
                    break;
                }
            }
            if done.len() >= width {
                live.clear();
                break;
            }
            live = next;
        }
        done.extend(live);
        let key = |h: &Hypothesis| {
            if length_normalize {
                h.log_prob / h.tokens.len().max(1) as f64
            } else {
                h.log_prob
            }
        };
        let best = done
            .into_iter()
            .reduce(|a, b| if key(&b) > key(&a) { b } else { a })
            .expect("beam search keeps at least one hypothesis");
        Ok(finish(vocab, best.tokens, best.log_prob))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert(
            "config".into(),
            serde_json::to_value(&self.model.cfg).expect("config serialises"),
        );
        Checkpoint {
            kind: "mm-fid".into(),
            meta,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.kind != "mm-fid" {
            return Err(Error::Checkpoint(format!(
                "expected a reader checkpoint, found `{}`",
                ck.kind
            )));
        }
        let cfg: ReaderConfig = ck
            .meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("checkpoint metadata lacks `config`".into()))
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| Error::Checkpoint(e.to_string()))
            })?;
        let model = ReaderModel::resolve(&ck.params, cfg)?;
        Ok(Self {
            model,
            params: ck.params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

fn argmax(values: &[f64]) -> (u32, f64) {
    let mut best = (0u32, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (i as u32, v);
        }
    }
    best
}

fn finish(vocab: &Vocab, mut tokens: Vec<u32>, log_prob: f64) -> ReaderOutput {
    if tokens.last() == Some(&EOS) {
        tokens.pop();
    }
    ReaderOutput {
        answer: vocab.decode(&tokens),
        token_ids: tokens,
        log_prob,
    }
}
