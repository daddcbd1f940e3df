//! Flat experiment configuration, presets and `key=value` overrides.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dedr_core::corpus::synthetic::SyntheticConfig;
use dedr_core::encoders::ToyEncoderConfig;
use dedr_core::reader::{ReaderConfig, ReaderTrainConfig};
use dedr_core::sparse::Bm25Params;
use dedr_core::training::{DistillConfig, PretrainConfig, RetrieverTrainConfig};

use crate::error::CliError;

pub const PRESETS: [&str; 3] = ["toy", "okvqa-full", "fvqa-full"];

/// Every tunable of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Source of all randomness; stage seeds are fixed offsets from it.
    pub seed: u64,

    // synthetic corpus
    pub synthetic_queries: usize,
    pub synthetic_passages: usize,
    pub synthetic_vocab: usize,

    // inputs
    /// Region feature dimension D.
    pub feature_dim: usize,
    pub num_regions: usize,
    /// Token cap of every retriever input.
    pub max_input_tokens: usize,

    // toy encoders
    pub encoder_width: usize,
    pub encoder_heads: usize,
    pub encoder_layers: usize,
    pub encoder_ffn: usize,
    /// Output dimension of each path (d_T = d_MM).
    pub embedding_dim: usize,

    // warm start of the toy encoders; 0 steps disables a stage
    pub warm_start_steps: usize,
    pub warm_start_region_steps: usize,
    pub warm_start_batch: usize,
    pub warm_start_query_tokens: usize,
    pub warm_start_lr: f64,

    // sparse retrieval and negative mining
    pub bm25_k1: f64,
    pub bm25_b: f64,
    /// Hard negatives stored per question by `mine-negatives`.
    pub mined_negatives: usize,

    // isolated retriever training
    pub retriever_lr: f64,
    pub retriever_batch: usize,
    pub retriever_epochs: usize,
    pub retriever_warmup_fraction: f64,
    pub retriever_clip: f64,
    pub retriever_weight_decay: f64,
    /// Hard negatives per question inside a training batch (m).
    pub retriever_hard_negatives: usize,

    // iterative distillation
    pub distill_max_rounds: usize,
    pub distill_patience: usize,
    pub distill_temperature: f64,
    pub distill_lr: f64,
    pub distill_checks_per_round: usize,
    pub distill_check_patience: usize,
    pub distill_divergence_fraction: f64,
    /// Weight of an extra contrastive term for the student; 0 is pure KD.
    pub distill_contrastive_weight: f64,

    /// Default retrieval depth.
    pub retrieval_k: usize,

    // reader
    pub reader_passages: usize,
    pub reader_max_input_tokens: usize,
    pub reader_decoder_layers: usize,
    pub reader_beam: usize,
    pub reader_max_output_tokens: usize,
    pub reader_lr: f64,
    pub reader_weight_decay: f64,
    pub reader_accumulation: usize,
    pub reader_steps: usize,
    pub reader_warmup_steps: usize,
    pub reader_eval_every: usize,
    pub reader_clip: f64,
    pub reader_template: String,

    /// Cut-offs tabulated by `sweep-k`.
    pub sweep_ks: Vec<usize>,
}

impl ExperimentConfig {
    /// Desk-scale configuration used by the acceptance suite.
    pub fn toy() -> Self {
        Self {
            seed: 7,
            synthetic_queries: 200,
            synthetic_passages: 1000,
            synthetic_vocab: 500,
            feature_dim: 8,
            num_regions: 36,
            max_input_tokens: 64,
            encoder_width: 64,
            encoder_heads: 4,
            encoder_layers: 2,
            encoder_ffn: 128,
            embedding_dim: 64,
            warm_start_steps: 600,
            warm_start_region_steps: 300,
            warm_start_batch: 32,
            warm_start_query_tokens: 3,
            warm_start_lr: 1e-3,
            bm25_k1: 0.9,
            bm25_b: 0.4,
            mined_negatives: 5,
            retriever_lr: 3e-4,
            retriever_batch: 16,
            retriever_epochs: 20,
            retriever_warmup_fraction: 0.1,
            retriever_clip: 1.0,
            retriever_weight_decay: 0.0,
            retriever_hard_negatives: 2,
            distill_max_rounds: 2,
            distill_patience: 2,
            distill_temperature: 1.0,
            distill_lr: 1e-4,
            distill_checks_per_round: 4,
            distill_check_patience: 2,
            distill_divergence_fraction: 0.5,
            distill_contrastive_weight: 0.0,
            retrieval_k: 5,
            reader_passages: 3,
            reader_max_input_tokens: 64,
            reader_decoder_layers: 2,
            reader_beam: 2,
            reader_max_output_tokens: 16,
            reader_lr: 1e-3,
            reader_weight_decay: 0.1,
            reader_accumulation: 32,
            reader_steps: 100,
            reader_warmup_steps: 5,
            reader_eval_every: 50,
            reader_clip: 1.0,
            reader_template: "question: {question} context: {passage}".into(),
            sweep_ks: vec![1, 2, 4, 8, 16, 32],
        }
    }

    /// Published OK-VQA settings. Encoder sizes stay at toy scale because
    /// pretrained backbones are not bundled.
    pub fn okvqa_full() -> Self {
        Self {
            max_input_tokens: 400,
            warm_start_steps: 0,
            warm_start_region_steps: 0,
            retriever_lr: 1e-5,
            retriever_batch: 16,
            retriever_epochs: 2,
            retriever_warmup_fraction: 0.1,
            retriever_clip: 1.0,
            retriever_hard_negatives: 5,
            distill_lr: 1e-5,
            reader_passages: 32,
            reader_max_input_tokens: 420,
            reader_beam: 2,
            reader_max_output_tokens: 16,
            reader_lr: 5e-5,
            reader_weight_decay: 0.1,
            reader_accumulation: 32,
            reader_steps: 5000,
            reader_warmup_steps: 800,
            reader_eval_every: 500,
            reader_clip: 1.0,
            ..Self::toy()
        }
    }

    pub fn fvqa_full() -> Self {
        Self {
            retriever_epochs: 4,
            reader_passages: 5,
            reader_max_input_tokens: 64,
            reader_steps: 2000,
            reader_warmup_steps: 200,
            ..Self::okvqa_full()
        }
    }

    pub fn preset(name: &str) -> Result<Self, CliError> {
        match name {
            "toy" => Ok(Self::toy()),
            "okvqa-full" => Ok(Self::okvqa_full()),
            "fvqa-full" => Ok(Self::fvqa_full()),
            other => Err(CliError::Config(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Starts from `preset`, applies the keys of an optional TOML file, then
    /// `key=value` overrides, and validates the result.
    pub fn load(preset: &str, file: Option<&str>, overrides: &[String]) -> Result<Self, CliError> {
        let base = Self::preset(preset)?;
        let mut table = match toml::Value::try_from(&base).expect("config serialises") {
            toml::Value::Table(t) => t,
            _ => unreachable!("config is a table"),
        };
        if let Some(text) = file {
            let file: toml::Table =
                toml::from_str(text).map_err(|e| CliError::Config(format!("config file: {e}")))?;
            for (k, v) in file {
                table.insert(k, v);
            }
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{item}` is not key=value")))?;
            let key = key.trim();
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.to_string(), value);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let field = |name: &str, e: dedr_core::Error| CliError::Config(format!("{name}: {e}"));
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(CliError::Config(msg.into()))
            }
        };
        check(self.synthetic_queries >= 1, "synthetic_queries must be ≥ 1")?;
        check(
            self.synthetic_passages >= self.synthetic_queries,
            "synthetic_passages must be ≥ synthetic_queries",
        )?;
        check(self.synthetic_vocab >= 20, "synthetic_vocab must be ≥ 20")?;
        check(self.feature_dim >= 1, "feature_dim must be ≥ 1")?;
        check(self.num_regions >= 1, "num_regions must be ≥ 1")?;
        check(
            self.bm25_k1 >= 0.0 && (0.0..=1.0).contains(&self.bm25_b),
            "bm25_k1 must be ≥ 0 and bm25_b in [0, 1]",
        )?;
        check(self.mined_negatives >= 1, "mined_negatives must be ≥ 1")?;
        check(self.retrieval_k >= 1, "retrieval_k must be ≥ 1")?;
        check(self.reader_passages >= 1, "reader_passages must be ≥ 1")?;
        check(
            !self.sweep_ks.is_empty() && self.sweep_ks.iter().all(|&k| k >= 1),
            "sweep_ks must be a non-empty list of positive cut-offs",
        )?;
        check(
            self.reader_warmup_steps <= self.reader_steps,
            "reader_warmup_steps must not exceed reader_steps",
        )?;
        self.encoder_config(dedr_core::text::RESERVED.len())
            .validate()
            .map_err(|e| field("encoder_*", e))?;
        self.retriever_config()
            .validate()
            .map_err(|e| field("retriever_*", e))?;
        self.distill_config()
            .validate()
            .map_err(|e| field("distill_*", e))?;
        self.reader_config(dedr_core::text::RESERVED.len())
            .validate()
            .map_err(|e| field("reader_*", e))?;
        self.reader_train_config()
            .validate()
            .map_err(|e| field("reader_*", e))?;
        if self.warm_start_steps + self.warm_start_region_steps > 0 {
            check(
                self.warm_start_batch >= 2
                    && self.warm_start_query_tokens >= 1
                    && self.warm_start_lr > 0.0,
                "warm_start_batch must be ≥ 2, warm_start_query_tokens ≥ 1 and warm_start_lr > 0",
            )?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }

    /// Weight initialisation of encoders and reader.
    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(4)
    }

    pub fn warm_start_seed(&self) -> u64 {
        self.seed.wrapping_sub(4)
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        let mut cfg = SyntheticConfig::new(
            self.seed,
            self.synthetic_queries,
            self.synthetic_passages,
            self.synthetic_vocab,
            self.feature_dim,
        );
        cfg.num_regions = self.num_regions;
        cfg
    }

    pub fn bm25(&self) -> Bm25Params {
        Bm25Params {
            k1: self.bm25_k1,
            b: self.bm25_b,
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> ToyEncoderConfig {
        ToyEncoderConfig {
            vocab_size,
            width: self.encoder_width,
            heads: self.encoder_heads,
            layers: self.encoder_layers,
            ffn_hidden: self.encoder_ffn,
            out_dim: self.embedding_dim,
            max_len: self.max_input_tokens,
            feature_dim: self.feature_dim,
            num_regions: self.num_regions,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.warm_start_steps,
            region_steps: self.warm_start_region_steps,
            batch_size: self.warm_start_batch,
            query_tokens: self.warm_start_query_tokens,
            lr: self.warm_start_lr,
            seed: self.warm_start_seed(),
        }
    }

    pub fn retriever_config(&self) -> RetrieverTrainConfig {
        RetrieverTrainConfig {
            lr: self.retriever_lr,
            batch_size: self.retriever_batch,
            epochs: self.retriever_epochs,
            warmup_fraction: self.retriever_warmup_fraction,
            clip_norm: self.retriever_clip,
            weight_decay: self.retriever_weight_decay,
            hard_negatives: self.retriever_hard_negatives,
            seed: self.seed,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            max_rounds: self.distill_max_rounds,
            patience: self.distill_patience,
            temperature: self.distill_temperature,
            lr: self.distill_lr,
            batch_size: self.retriever_batch,
            warmup_fraction: self.retriever_warmup_fraction,
            clip_norm: self.retriever_clip,
            hard_negatives: self.retriever_hard_negatives,
            seed: self.seed,
            round_passes: 1,
            checks_per_round: self.distill_checks_per_round,
            check_patience: self.distill_check_patience,
            divergence_fraction: self.distill_divergence_fraction,
            contrastive_weight: self.distill_contrastive_weight,
        }
    }

    pub fn reader_config(&self, vocab_size: usize) -> ReaderConfig {
        let mut encoder = self.encoder_config(vocab_size);
        encoder.max_len = self.reader_max_input_tokens;
        let mut cfg = ReaderConfig::new(encoder);
        cfg.decoder_layers = self.reader_decoder_layers;
        cfg.max_output_tokens = self.reader_max_output_tokens;
        cfg.beam_size = self.reader_beam;
        cfg.n_passages = self.reader_passages;
        cfg.template = self.reader_template.clone();
        cfg
    }

    pub fn reader_train_config(&self) -> ReaderTrainConfig {
        ReaderTrainConfig {
            lr: self.reader_lr,
            weight_decay: self.reader_weight_decay,
            accumulation: self.reader_accumulation,
            clip_norm: self.reader_clip,
            warmup_fraction: if self.reader_steps == 0 {
                0.0
            } else {
                self.reader_warmup_steps as f64 / self.reader_steps as f64
            },
            max_steps: self.reader_steps,
            eval_every: self.reader_eval_every,
            stop_at_em: None,
            seed: self.seed.wrapping_add(2),
        }
    }
}
