//! The two symmetric encoding paths and their inputs.
//!
//! * Text path: the query is `question [SEP] caption`, the passage is its
//!   own text; both go through one shared text encoder.
//! * Multi-modal path: the query is `(question, region features)`; the
//!   passage is `(passage text, masked visual input)` where the masked input
//!   is all-zero features with whole-image boxes. Again one shared encoder.
//!
//! Scores are raw dot products of the pooled embeddings.

pub mod layers;
mod toy;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Passage, QueryRecord, VisualInput};
use crate::error::{Error, Result};
use crate::text::{Vocab, SEP};

pub use toy::{ToyEncoder, ToyEncoderConfig, ToyEncoderModel};

pub const DEFAULT_MAX_INPUT_TOKENS: usize = 400;
pub const DEFAULT_NUM_REGIONS: usize = 36;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EncoderPath {
    #[serde(rename = "T")]
    Text,
    #[serde(rename = "MM")]
    MultiModal,
}

impl EncoderPath {
    pub fn tag(self) -> &'static str {
        match self {
            EncoderPath::Text => "T",
            EncoderPath::MultiModal => "MM",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "T" | "t" | "text" => Ok(EncoderPath::Text),
            "MM" | "mm" | "multimodal" => Ok(EncoderPath::MultiModal),
            other => Err(Error::Argument(format!(
                "unknown encoder path `{other}` (use T or MM)"
            ))),
        }
    }

    pub fn other(self) -> Self {
        match self {
            EncoderPath::Text => EncoderPath::MultiModal,
            EncoderPath::MultiModal => EncoderPath::Text,
        }
    }
}

impl std::fmt::Display for EncoderPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Token ids, already truncated to the encoder's input limit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSequence {
    pub token_ids: Vec<u32>,
}

impl TextSequence {
    pub fn new(token_ids: Vec<u32>) -> Self {
        Self { token_ids }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub embedding: Vec<f64>,
    pub path: EncoderPath,
}

impl EncoderOutput {
    pub fn dim(&self) -> usize {
        self.embedding.len()
    }
}

/// Relevance score: the inner product of two same-path embeddings.
pub fn score(q: &EncoderOutput, p: &EncoderOutput) -> Result<f64> {
    if q.path != p.path {
        return Err(Error::Contract(format!(
            "cannot score a {} query against a {} passage",
            q.path, p.path
        )));
    }
    if q.dim() != p.dim() {
        return Err(Error::Contract(format!(
            "embedding dimensions differ: {} vs {}",
            q.dim(),
            p.dim()
        )));
    }
    Ok(dot(&q.embedding, &p.embedding))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seam for swapping in external (e.g. pretrained) encoders: tokenisation
/// happens outside, the encoder only maps inputs to embeddings.
pub trait DenseEncoder: Send + Sync {
    fn path(&self) -> EncoderPath;
    fn dim(&self) -> usize;
    fn max_input_tokens(&self) -> usize;
    /// `visual` must be `None` for the text path and `Some` for the
    /// multi-modal path.
    fn encode(&self, seq: &TextSequence, visual: Option<&VisualInput>) -> Result<EncoderOutput>;
}

/// `question [SEP] caption`, truncated to `max_len` by dropping the caption
/// tail first.
pub fn build_unimodal_query_input(
    record: &QueryRecord,
    dataset: &Dataset,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TextSequence> {
    let caption = dataset.caption(&record.image_id)?;
    Ok(join_question_caption(
        vocab,
        &record.question,
        caption,
        max_len,
    ))
}

pub fn join_question_caption(
    vocab: &Vocab,
    question: &str,
    caption: &str,
    max_len: usize,
) -> TextSequence {
    let mut ids = vocab.encode(question);
    if ids.len() >= max_len {
        ids.truncate(max_len);
        return TextSequence::new(ids);
    }
    ids.push(SEP);
    let room = max_len - ids.len();
    ids.extend(vocab.encode(caption).into_iter().take(room));
    TextSequence::new(ids)
}

pub fn truncated(vocab: &Vocab, text: &str, max_len: usize) -> TextSequence {
    let mut ids = vocab.encode(text);
    ids.truncate(max_len);
    TextSequence::new(ids)
}

/// Passage-side input of the multi-modal path: the passage text and the
/// constant masked visual input.
pub fn pemir_inputs(
    passage: &Passage,
    vocab: &Vocab,
    max_len: usize,
    num_regions: usize,
    feature_dim: usize,
) -> Result<(TextSequence, VisualInput)> {
    if passage.text.trim().is_empty() {
        return Err(Error::Argument(format!(
            "passage {} is empty",
            passage.passage_id
        )));
    }
    Ok((
        truncated(vocab, &passage.text, max_len),
        VisualInput::masked(num_regions, feature_dim),
    ))
}

/// Builds encoder inputs for either side of either path.
#[derive(Clone, Copy)]
pub struct InputBuilder<'a> {
    pub dataset: &'a Dataset,
    pub vocab: &'a Vocab,
    pub max_len: usize,
    pub num_regions: usize,
    pub feature_dim: usize,
}

impl<'a> InputBuilder<'a> {
    pub fn query(
        &self,
        path: EncoderPath,
        record: &QueryRecord,
    ) -> Result<(TextSequence, Option<VisualInput>)> {
        match path {
            EncoderPath::Text => Ok((
                build_unimodal_query_input(record, self.dataset, self.vocab, self.max_len)?,
                None,
            )),
            EncoderPath::MultiModal => {
                let visual = self.dataset.visual_input(&record.image_id)?.clone();
                Ok((
                    truncated(self.vocab, &record.question, self.max_len),
                    Some(visual),
                ))
            }
        }
    }

    pub fn passage(
        &self,
        path: EncoderPath,
        passage: &Passage,
    ) -> Result<(TextSequence, Option<VisualInput>)> {
        match path {
            EncoderPath::Text => Ok((truncated(self.vocab, &passage.text, self.max_len), None)),
            EncoderPath::MultiModal => {
                let (seq, visual) = pemir_inputs(
                    passage,
                    self.vocab,
                    self.max_len,
                    self.num_regions,
                    self.feature_dim,
                )?;
                Ok((seq, Some(visual)))
            }
        }
    }
}
