//! Subcommand implementations. Every command reads its inputs from the work
//! directory, writes its artifacts there and records a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use log::{info, warn};
use serde::Serialize;

use dedr_core::corpus::synthetic::generate;
use dedr_core::corpus::DataLayout;
use dedr_core::corpus::{Dataset, QueryRecord, Split};
use dedr_core::encoders::{EncoderPath, InputBuilder, ToyEncoder};
use dedr_core::index::{read_run, write_run, FlatIndex, Run};
use dedr_core::metrics::{
    exact_match, hit_at_k, mrr_at_k, precision_at_k, vqa_accuracy, AnswerJudgment,
};
use dedr_core::reader::{
    assemble_fusion_inputs, prepare_examples, read_answers, supporting_passages, train_reader,
    write_answers, AnswerRecord, Reader,
};
use dedr_core::sparse::{bm25_obj_search, bm25_search, mine_hard_negatives, InvertedIndex};
use dedr_core::text::Vocab;
use dedr_core::training::{
    dense_rankings, index_rankings, judge_run, pretrain_on_passages, run_iterative_distillation,
    train_isolated, train_joint, Evaluator, MetricsLog, PathCheckpoint,
};
use dedr_core::Error;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::ManifestWriter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainPath {
    #[value(name = "T")]
    Text,
    #[value(name = "MM")]
    MultiModal,
    #[value(name = "joint")]
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Isolated,
    Distilled,
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Isolated => "isolated",
            Stage::Distilled => "distilled",
            Stage::Joint => "joint",
        }
    }

    fn producer(self, path: EncoderPath) -> String {
        match self {
            Stage::Isolated => format!("train-retriever --path {}", path.tag()),
            Stage::Distilled => "distill".into(),
            Stage::Joint => "train-retriever --path joint".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RetrieverKind {
    #[value(name = "dedr")]
    Dedr,
    #[value(name = "T")]
    Text,
    #[value(name = "MM")]
    MultiModal,
    #[value(name = "bm25")]
    Bm25,
    #[value(name = "bm25-obj")]
    Bm25Obj,
}

impl RetrieverKind {
    pub fn name(self) -> &'static str {
        match self {
            RetrieverKind::Dedr => "dedr",
            RetrieverKind::Text => "T",
            RetrieverKind::MultiModal => "MM",
            RetrieverKind::Bm25 => "bm25",
            RetrieverKind::Bm25Obj => "bm25-obj",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Support {
    Retrieved,
    Gold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Artifact locations inside the work directory.
#[derive(Debug, Clone)]
pub struct Work {
    pub root: PathBuf,
}

impl Work {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn vocab(&self) -> PathBuf {
        DataLayout::new(&self.data()).vocab()
    }

    pub fn model(&self, stage: Stage, path: EncoderPath) -> PathBuf {
        self.root
            .join("models")
            .join(format!("{}_{}.ckpt", stage.name(), path.tag()))
    }

    pub fn models_file(&self, name: &str) -> PathBuf {
        self.root.join("models").join(name)
    }

    pub fn index(&self, stage: Stage) -> PathBuf {
        self.root
            .join("index")
            .join(format!("dedr_{}.idx", stage.name()))
    }

    pub fn run(&self, retriever: RetrieverKind, split: Split) -> PathBuf {
        self.root
            .join("runs")
            .join(format!("{}_{}.run", retriever.name(), split.name()))
    }

    pub fn reader(&self) -> PathBuf {
        self.root.join("reader").join("reader.ckpt")
    }

    pub fn reader_file(&self, name: &str) -> PathBuf {
        self.root.join("reader").join(name)
    }

    pub fn answers(&self, retriever: RetrieverKind, split: Split) -> PathBuf {
        self.root
            .join("answers")
            .join(format!("{}_{}.tsv", retriever.name(), split.name()))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
}

/// Shared state of one invocation.
pub struct Ctx {
    pub work: Work,
    pub cfg: ExperimentConfig,
}

fn ensure_dir(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    Ok(())
}

fn write_text(path: &Path, body: &str) -> CliResult<()> {
    ensure_dir(path)?;
    fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_text(
        path,
        &(serde_json::to_string_pretty(value).expect("value serialises") + "\n"),
    )
}

fn require(path: &Path, producer: impl Into<String>) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            path: path.to_path_buf(),
            producer: producer.into(),
        })
    }
}

impl Ctx {
    fn manifest<'a>(
        &'a self,
        command: &'a str,
        args: &[(&str, String)],
        seed: u64,
    ) -> ManifestWriter<'a> {
        ManifestWriter {
            work: &self.work.root,
            cfg: &self.cfg,
            command,
            args: args
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
            seed,
        }
    }

    fn load_data(&self) -> CliResult<(Dataset, Vocab)> {
        let dir = self.work.data();
        require(
            &DataLayout::new(&dir).passages(),
            "gen-data` or `dedr ingest",
        )?;
        require(&self.work.vocab(), "gen-data` or `dedr ingest")?;
        let ds = Dataset::load(&dir, self.cfg.num_regions, self.cfg.feature_dim)?;
        let vocab = Vocab::load(&self.work.vocab())?;
        Ok((ds, vocab))
    }

    fn builder<'a>(&self, ds: &'a Dataset, vocab: &'a Vocab) -> InputBuilder<'a> {
        InputBuilder {
            dataset: ds,
            vocab,
            max_len: self.cfg.max_input_tokens,
            num_regions: self.cfg.num_regions,
            feature_dim: self.cfg.feature_dim,
        }
    }

    fn load_encoder(&self, stage: Stage, path: EncoderPath) -> CliResult<ToyEncoder> {
        let file = self.work.model(stage, path);
        require(&file, stage.producer(path))?;
        Ok(ToyEncoder::load(&file)?)
    }

    fn data_inputs(&self) -> Vec<PathBuf> {
        vec![self.work.data()]
    }

    fn save_dataset(&self, ds: &Dataset) -> CliResult<()> {
        let dir = self.work.data();
        ds.save(&dir)?;
        Vocab::build(ds.all_texts()).save(&self.work.vocab())?;
        Ok(())
    }

    pub fn gen_data(&self, seed: Option<u64>) -> CliResult<()> {
        let mut syn = self.cfg.synthetic();
        if let Some(s) = seed {
            syn.seed = s;
        }
        let ds = generate(&syn)?;
        self.save_dataset(&ds)?;
        let dir = self.work.data();
        self.manifest("gen-data", &[("seed", syn.seed.to_string())], syn.seed)
            .write(&dir, &[], &[dir.clone()])?;
        println!(
            "generated {} passages, {} train / {} validation / {} test questions in {}",
            ds.passages.len(),
            ds.split(Split::Train).len(),
            ds.split(Split::Validation).len(),
            ds.split(Split::Test).len(),
            dir.display()
        );
        Ok(())
    }

    pub fn ingest(&self, src: &Path) -> CliResult<()> {
        if !src.is_dir() {
            return Err(CliError::Core(Error::Lookup(format!(
                "source directory {} does not exist",
                src.display()
            ))));
        }
        let ds = Dataset::load(src, self.cfg.num_regions, self.cfg.feature_dim)?;
        self.save_dataset(&ds)?;
        let dir = self.work.data();
        self.manifest(
            "ingest",
            &[("src", src.display().to_string())],
            self.cfg.seed,
        )
        .write(&dir, &[src.to_path_buf()], &[dir.clone()])?;
        println!(
            "ingested {} passages and {} questions into {}",
            ds.passages.len(),
            ds.queries.values().map(Vec::len).sum::<usize>(),
            dir.display()
        );
        Ok(())
    }

    pub fn mine_negatives(&self, m: Option<usize>) -> CliResult<()> {
        let m = m.unwrap_or(self.cfg.mined_negatives);
        if m == 0 {
            return Err(CliError::Config("--m must be ≥ 1".into()));
        }
        let (mut ds, _) = self.load_data()?;
        let index = InvertedIndex::build(&ds.passages, self.cfg.bm25());
        let mut exhausted = 0;
        for split in [Split::Train, Split::Validation] {
            for r in ds.split_mut(split).iter_mut() {
                let mined = mine_hard_negatives(&index, r, m);
                exhausted += usize::from(mined.exhausted);
                r.hard_negative_ids = mined.ids;
            }
        }
        if exhausted > 0 {
            warn!("{exhausted} questions received fewer than {m} negatives");
        }
        let dir = self.work.data();
        ds.save(&dir)?;
        let layout = DataLayout::new(&dir);
        let out = [
            layout.questions(Split::Train),
            layout.questions(Split::Validation),
        ];
        self.manifest("mine-negatives", &[("m", m.to_string())], self.cfg.seed)
            .write(&out[0], &[layout.passages()], &out)?;
        println!("mined {m} BM25 hard negatives per train/validation question");
        Ok(())
    }

    pub fn train_retriever(&self, which: TrainPath) -> CliResult<()> {
        let (ds, vocab) = self.load_data()?;
        let builder = self.builder(&ds, &vocab);
        let rcfg = self.cfg.retriever_config();
        let cmd_arg = [(
            "path",
            match which {
                TrainPath::Text => "T",
                TrainPath::MultiModal => "MM",
                TrainPath::Joint => "joint",
            }
            .to_string(),
        )];
        match which {
            TrainPath::Text | TrainPath::MultiModal => {
                let path = if which == TrainPath::Text {
                    EncoderPath::Text
                } else {
                    EncoderPath::MultiModal
                };
                let tag = path.tag();
                let metrics = self
                    .work
                    .models_file(&format!("isolated_{tag}.metrics.jsonl"));
                let mut log = MetricsLog::to_file(&metrics)?;
                let enc = ToyEncoder::new(
                    self.cfg.encoder_config(vocab.len()),
                    path,
                    self.cfg.init_seed(),
                )?;
                let enc = if self.cfg.warm_start_steps + self.cfg.warm_start_region_steps > 0 {
                    pretrain_on_passages(enc, &builder, &self.cfg.pretrain_config(), &mut log)?
                } else {
                    enc
                };
                let out = train_isolated(enc, &builder, &rcfg, &mut log)?;
                let ckpt = self.work.model(Stage::Isolated, path);
                ensure_dir(&ckpt)?;
                out.encoder.save(&ckpt)?;
                let summary = self.work.models_file(&format!("isolated_{tag}.json"));
                write_json(
                    &summary,
                    &serde_json::json!({
                        "path": tag,
                        "best_val_mrr5": out.best_val_mrr5,
                        "val_history": out.val_history,
                    }),
                )?;
                self.manifest("train-retriever", &cmd_arg, rcfg.seed)
                    .write(
                        &ckpt,
                        &self.data_inputs(),
                        &[ckpt.clone(), metrics, summary],
                    )?;
                println!(
                    "trained {tag}: best validation MRR@5 {:.4} -> {}",
                    out.best_val_mrr5,
                    ckpt.display()
                );
            }
            TrainPath::Joint => {
                let t = self.load_encoder(Stage::Isolated, EncoderPath::Text)?;
                let mm = self.load_encoder(Stage::Isolated, EncoderPath::MultiModal)?;
                let metrics = self.work.models_file("joint.metrics.jsonl");
                let mut log = MetricsLog::to_file(&metrics)?;
                let out = train_joint(t, mm, &builder, &rcfg, &mut log)?;
                let ct = self.work.model(Stage::Joint, EncoderPath::Text);
                let cm = self.work.model(Stage::Joint, EncoderPath::MultiModal);
                out.encoder_t.save(&ct)?;
                out.encoder_mm.save(&cm)?;
                let mut inputs = self.data_inputs();
                inputs.push(self.work.model(Stage::Isolated, EncoderPath::Text));
                inputs.push(self.work.model(Stage::Isolated, EncoderPath::MultiModal));
                self.manifest("train-retriever", &cmd_arg, rcfg.seed)
                    .write(&ct, &inputs, &[ct.clone(), cm.clone(), metrics])?;
                println!("joint training done -> {}, {}", ct.display(), cm.display());
            }
        }
        Ok(())
    }

    pub fn distill(&self) -> CliResult<()> {
        let (ds, vocab) = self.load_data()?;
        let builder = self.builder(&ds, &vocab);
        let eval = Evaluator {
            builder,
            records: ds.split(Split::Validation),
        };
        let mut ckpts = Vec::new();
        for path in [EncoderPath::Text, EncoderPath::MultiModal] {
            let encoder = self.load_encoder(Stage::Isolated, path)?;
            let val_mrr5 = eval.single(&encoder)?;
            ckpts.push(PathCheckpoint { encoder, val_mrr5 });
        }
        let mm = ckpts.pop().expect("two checkpoints");
        let t = ckpts.pop().expect("two checkpoints");
        let before = (t.val_mrr5, mm.val_mrr5);
        let dcfg = self.cfg.distill_config();
        let metrics = self.work.models_file("distill.metrics.jsonl");
        let mut log = MetricsLog::to_file(&metrics)?;
        let state = run_iterative_distillation(t, mm, &builder, &dcfg, &mut log)?;
        let mut outputs = vec![metrics];
        for path in [EncoderPath::Text, EncoderPath::MultiModal] {
            let file = self.work.model(Stage::Distilled, path);
            state.best[&path].encoder.save(&file)?;
            outputs.push(file);
        }
        let history = self.work.models_file("distill_history.json");
        write_json(
            &history,
            &serde_json::json!({
                "isolated_val_mrr5": { "T": before.0, "MM": before.1 },
                "best_val_mrr5": {
                    "T": state.best_val(EncoderPath::Text),
                    "MM": state.best_val(EncoderPath::MultiModal),
                },
                "rounds": state.history,
            }),
        )?;
        outputs.push(history.clone());
        let mut inputs = self.data_inputs();
        inputs.push(self.work.model(Stage::Isolated, EncoderPath::Text));
        inputs.push(self.work.model(Stage::Isolated, EncoderPath::MultiModal));
        self.manifest("distill", &[], dcfg.seed)
            .write(&history, &inputs, &outputs)?;
        println!(
            "distillation: {} rounds, best validation MRR@5 T {:.4} MM {:.4} (isolated {:.4} / {:.4})",
            state.history.len(),
            state.best_val(EncoderPath::Text),
            state.best_val(EncoderPath::MultiModal),
            before.0,
            before.1
        );
        Ok(())
    }

    pub fn build_index(&self, stage: Stage) -> CliResult<()> {
        let (ds, vocab) = self.load_data()?;
        let builder = self.builder(&ds, &vocab);
        let t = self.load_encoder(stage, EncoderPath::Text)?;
        let mm = self.load_encoder(stage, EncoderPath::MultiModal)?;
        let fingerprints = (
            t.to_checkpoint().fingerprint(),
            mm.to_checkpoint().fingerprint(),
        );
        let index = FlatIndex::build(&ds.passages, &t, &mm, &builder, fingerprints)?;
        let file = self.work.index(stage);
        ensure_dir(&file)?;
        index.save(&file)?;
        let (nt, nm) = index.half_norms();
        let mut inputs = self.data_inputs();
        inputs.push(self.work.model(stage, EncoderPath::Text));
        inputs.push(self.work.model(stage, EncoderPath::MultiModal));
        self.manifest(
            "build-index",
            &[("stage", stage.name().into())],
            self.cfg.seed,
        )
        .write(&file, &inputs, &[file.clone()])?;
        println!(
            "indexed {} passages, d = {} (mean half norms T {nt:.4}, MM {nm:.4}) -> {}",
            index.len(),
            index.dim(),
            file.display()
        );
        Ok(())
    }

    pub fn retrieve(
        &self,
        retriever: RetrieverKind,
        split: Split,
        k: Option<usize>,
        stage: Stage,
    ) -> CliResult<()> {
        let k = k.unwrap_or(self.cfg.retrieval_k);
        if k == 0 {
            return Err(CliError::Config("--k must be ≥ 1".into()));
        }
        let (ds, vocab) = self.load_data()?;
        let builder = self.builder(&ds, &vocab);
        let records = ds.split(split);
        let mut inputs = self.data_inputs();
        let run: Run = match retriever {
            RetrieverKind::Dedr => {
                let file = self.work.index(stage);
                require(&file, format!("build-index --stage {}", stage.name()))?;
                let index = FlatIndex::load(&file)?;
                let t = self.load_encoder(stage, EncoderPath::Text)?;
                let mm = self.load_encoder(stage, EncoderPath::MultiModal)?;
                index.check_fingerprints(
                    &t.to_checkpoint().fingerprint(),
                    &mm.to_checkpoint().fingerprint(),
                )?;
                inputs.push(file);
                inputs.push(self.work.model(stage, EncoderPath::Text));
                inputs.push(self.work.model(stage, EncoderPath::MultiModal));
                index_rankings(&index, &t, &mm, &builder, records, k)?
            }
            RetrieverKind::Text | RetrieverKind::MultiModal => {
                let path = if retriever == RetrieverKind::Text {
                    EncoderPath::Text
                } else {
                    EncoderPath::MultiModal
                };
                let enc = self.load_encoder(stage, path)?;
                inputs.push(self.work.model(stage, path));
                dense_rankings(&enc, &builder, records, k)?
            }
            RetrieverKind::Bm25 | RetrieverKind::Bm25Obj => {
                let index = InvertedIndex::build(&ds.passages, self.cfg.bm25());
                let none = Vec::new();
                records
                    .iter()
                    .map(|r| {
                        let list = if retriever == RetrieverKind::Bm25 {
                            bm25_search(&index, &r.question, k)
                        } else {
                            let names = ds.objects.get(&r.image_id).unwrap_or(&none);
                            bm25_obj_search(&index, &r.question, names, k)
                        };
                        (r.query_id.clone(), list)
                    })
                    .collect()
            }
        };
        let file = self.work.run(retriever, split);
        ensure_dir(&file)?;
        let tag = match retriever {
            RetrieverKind::Bm25 | RetrieverKind::Bm25Obj => retriever.name().to_string(),
            _ => format!("{}-{}", retriever.name(), stage.name()),
        };
        write_run(&file, &run, &tag)?;
        self.manifest(
            "retrieve",
            &[
                ("retriever", retriever.name().into()),
                ("split", split.name().into()),
                ("k", k.to_string()),
                ("stage", stage.name().into()),
            ],
            self.cfg.seed,
        )
        .write(&file, &inputs, &[file.clone()])?;
        let mrr = if records.iter().all(|r| !r.relevant_passage_ids.is_empty()) {
            format!(", MRR@5 {:.4}", mrr_at_k(&judge_run(records, &run)?, 5)?)
        } else {
            String::new()
        };
        println!(
            "retrieved top-{k} for {} {} questions with {}{mrr} -> {}",
            records.len(),
            split.name(),
            retriever.name(),
            file.display()
        );
        Ok(())
    }

    fn load_run(&self, retriever: RetrieverKind, split: Split, k: Option<usize>) -> CliResult<Run> {
        let file = self.work.run(retriever, split);
        let depth = k.map(|k| format!(" --k {k}")).unwrap_or_default();
        require(
            &file,
            format!(
                "retrieve --retriever {} --split {}{depth}",
                retriever.name(),
                split.name()
            ),
        )?;
        Ok(read_run(&file)?)
    }

    /// Gold support: relevant passages first, then stored or mined BM25
    /// negatives, up to `n` ids.
    fn gold_support(
        &self,
        ds: &Dataset,
        records: &[QueryRecord],
        n: usize,
    ) -> BTreeMap<String, Vec<String>> {
        let index = InvertedIndex::build(&ds.passages, self.cfg.bm25());
        records
            .iter()
            .map(|r| {
                let mut ids: Vec<String> = r.relevant_passage_ids.iter().take(n).cloned().collect();
                let negatives = if r.hard_negative_ids.len() >= n {
                    r.hard_negative_ids.clone()
                } else {
                    mine_hard_negatives(&index, r, n).ids
                };
                ids.extend(negatives.into_iter().take(n - ids.len()));
                (r.query_id.clone(), ids)
            })
            .collect()
    }

    pub fn train_reader(&self, support: Support, retriever: RetrieverKind) -> CliResult<()> {
        let (ds, vocab) = self.load_data()?;
        let rcfg = self.cfg.reader_config(vocab.len());
        let n = rcfg.n_passages;
        let mut inputs = self.data_inputs();
        let mut examples = Vec::new();
        for split in [Split::Train, Split::Validation] {
            let records = ds.split(split);
            let chosen = match support {
                Support::Gold => self.gold_support(&ds, records, n),
                Support::Retrieved => {
                    let run = self.load_run(retriever, split, None)?;
                    inputs.push(self.work.run(retriever, split));
                    supporting_passages(&run, n)
                }
            };
            examples.push(prepare_examples(&ds, records, &chosen, &vocab, &rcfg)?);
        }
        let val = examples.pop().expect("validation examples");
        let train = examples.pop().expect("train examples");
        let tcfg = self.cfg.reader_train_config();
        let metrics = self.work.reader_file("reader.metrics.jsonl");
        let mut log = MetricsLog::to_file(&metrics)?;
        let init = Reader::new(rcfg, self.cfg.init_seed())?;
        let out = train_reader(init, &vocab, &train, &val, &tcfg, &mut log)?;
        let ckpt = self.work.reader();
        out.reader.save(&ckpt)?;
        let summary = self.work.reader_file("reader.json");
        write_json(
            &summary,
            &serde_json::json!({
                "support": format!("{support:?}").to_lowercase(),
                "best_val_em": out.best_val_em,
                "best_step": out.best_step,
                "steps": out.steps,
                "history": out.history,
            }),
        )?;
        let support_name = match support {
            Support::Gold => "gold".to_string(),
            Support::Retrieved => retriever.name().to_string(),
        };
        self.manifest("train-reader", &[("support", support_name)], tcfg.seed)
            .write(&ckpt, &inputs, &[ckpt.clone(), metrics, summary])?;
        println!(
            "reader trained for {} updates: best validation EM {:.4} at update {} -> {}",
            out.steps,
            out.best_val_em,
            out.best_step,
            ckpt.display()
        );
        Ok(())
    }

    fn load_reader(&self) -> CliResult<Reader> {
        let file = self.work.reader();
        require(&file, "train-reader")?;
        Ok(Reader::load(&file)?)
    }

    /// Beam-search answers using the first `n` passages of each ranking.
    fn generate_answers(
        &self,
        reader: &Reader,
        ds: &Dataset,
        vocab: &Vocab,
        records: &[QueryRecord],
        run: &Run,
        n: usize,
    ) -> CliResult<Vec<AnswerRecord>> {
        let mut rcfg = reader.config().clone();
        rcfg.n_passages = n;
        let support = supporting_passages(run, n);
        records
            .iter()
            .map(|r| {
                let ids = support.get(&r.query_id).ok_or_else(|| {
                    Error::Lookup(format!("run has no ranking for query {}", r.query_id))
                })?;
                let passages = ids
                    .iter()
                    .map(|id| {
                        ds.passage(id)
                            .ok_or_else(|| Error::Lookup(format!("unknown passage {id} in run")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let inputs = assemble_fusion_inputs(r, &ds.visual, &passages, vocab, &rcfg)?;
                let out = reader.generate(vocab, &inputs, true)?;
                Ok(AnswerRecord {
                    query_id: r.query_id.clone(),
                    answer: out.answer,
                    score: out.log_prob,
                })
            })
            .collect()
    }

    pub fn answer(
        &self,
        retriever: RetrieverKind,
        split: Split,
        n: Option<usize>,
    ) -> CliResult<()> {
        let (ds, vocab) = self.load_data()?;
        let reader = self.load_reader()?;
        let n = n.unwrap_or(reader.config().n_passages);
        let run = self.load_run(retriever, split, None)?;
        let records = ds.split(split);
        let answers = self.generate_answers(&reader, &ds, &vocab, records, &run, n)?;
        let file = self.work.answers(retriever, split);
        write_answers(&file, &answers)?;
        let mut inputs = self.data_inputs();
        inputs.push(self.work.reader());
        inputs.push(self.work.run(retriever, split));
        self.manifest(
            "answer",
            &[
                ("retriever", retriever.name().into()),
                ("split", split.name().into()),
                ("n", n.to_string()),
            ],
            self.cfg.seed,
        )
        .write(&file, &inputs, &[file.clone()])?;
        println!(
            "answered {} {} questions from top-{n} {} passages -> {}",
            answers.len(),
            split.name(),
            retriever.name(),
            file.display()
        );
        Ok(())
    }

    pub fn evaluate(&self, retriever: RetrieverKind, split: Split) -> CliResult<EvalReport> {
        let (ds, _) = self.load_data()?;
        let records = ds.split(split);
        let run = self.load_run(retriever, split, None)?;
        let judged = judge_run(records, &run)?;
        let mut hit = BTreeMap::new();
        for &k in &self.cfg.sweep_ks {
            hit.insert(k, hit_at_k(&judged, k)?);
        }
        let mut inputs = self.data_inputs();
        inputs.push(self.work.run(retriever, split));
        let answers_file = self.work.answers(retriever, split);
        let (vqa, em) = if answers_file.exists() {
            inputs.push(answers_file.clone());
            let judgments = answer_judgments(records, &read_answers(&answers_file)?)?;
            (
                Some(vqa_accuracy(&judgments)?),
                Some(exact_match(&judgments)),
            )
        } else {
            info!(
                "no answer file at {}; skipping answer metrics",
                answers_file.display()
            );
            (None, None)
        };
        let report = EvalReport {
            retriever: retriever.name().into(),
            split: split.name().into(),
            queries: records.len(),
            mrr_at_5: mrr_at_k(&judged, 5)?,
            precision_at_5: precision_at_k(&judged, 5)?,
            precision_at_1: precision_at_k(&judged, 1)?,
            hit,
            vqa_accuracy: vqa,
            exact_match: em,
        };
        let stem = format!("eval_{}_{}", retriever.name(), split.name());
        let json = self.work.report(&format!("{stem}.json"));
        let txt = self.work.report(&format!("{stem}.txt"));
        write_json(&json, &report)?;
        write_text(&txt, &report.to_text())?;
        self.manifest(
            "evaluate",
            &[
                ("retriever", retriever.name().into()),
                ("split", split.name().into()),
            ],
            self.cfg.seed,
        )
        .write(&json, &inputs, &[json.clone(), txt])?;
        print!("{}", report.to_text());
        Ok(report)
    }

    pub fn sweep_k(
        &self,
        retriever: RetrieverKind,
        split: Split,
        ks: Option<Vec<usize>>,
    ) -> CliResult<Vec<SweepRow>> {
        let mut ks = ks.unwrap_or_else(|| self.cfg.sweep_ks.clone());
        ks.sort_unstable();
        ks.dedup();
        if ks.first().map_or(true, |&k| k == 0) {
            return Err(CliError::Config("--ks needs positive cut-offs".into()));
        }
        let max_k = *ks.last().expect("non-empty");
        let (ds, vocab) = self.load_data()?;
        let records = ds.split(split);
        let run = self.load_run(retriever, split, Some(max_k))?;
        let needed = max_k.min(ds.passages.len());
        if let Some((qid, _)) = run.iter().find(|(_, l)| l.len() < needed) {
            return Err(CliError::StaleArtifact {
                path: self.work.run(retriever, split),
                reason: format!("ranking of {qid} is shorter than {max_k}"),
                producer: format!(
                    "retrieve --retriever {} --split {} --k {max_k}",
                    retriever.name(),
                    split.name()
                ),
            });
        }
        let judged = judge_run(records, &run)?;
        let reader = self.load_reader()?;
        let mut rows = Vec::with_capacity(ks.len());
        for &k in &ks {
            let answers = self.generate_answers(&reader, &ds, &vocab, records, &run, k)?;
            let judgments = answer_judgments(records, &answers)?;
            rows.push(SweepRow {
                k,
                hit: hit_at_k(&judged, k)?,
                vqa_accuracy: vqa_accuracy(&judgments)?,
                exact_match: exact_match(&judgments),
            });
            info!("k = {k} done");
        }
        if rows.windows(2).any(|w| w[1].hit < w[0].hit) {
            warn!("hit@k decreased along the sweep");
        }
        let mut table = String::from("k\thit\taccuracy\tem\n");
        for r in &rows {
            writeln!(
                table,
                "{}\t{:.4}\t{:.4}\t{:.4}",
                r.k, r.hit, r.vqa_accuracy, r.exact_match
            )
            .expect("write to string");
        }
        let stem = format!("sweep_{}_{}", retriever.name(), split.name());
        let tsv = self.work.report(&format!("{stem}.tsv"));
        let json = self.work.report(&format!("{stem}.json"));
        write_text(&tsv, &table)?;
        write_json(&json, &rows)?;
        let mut inputs = self.data_inputs();
        inputs.push(self.work.run(retriever, split));
        inputs.push(self.work.reader());
        let ks_arg = ks
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        self.manifest(
            "sweep-k",
            &[
                ("retriever", retriever.name().into()),
                ("split", split.name().into()),
                ("ks", ks_arg),
            ],
            self.cfg.seed,
        )
        .write(&tsv, &inputs, &[tsv.clone(), json])?;
        print!("{table}");
        Ok(rows)
    }
}

fn answer_judgments(
    records: &[QueryRecord],
    answers: &[AnswerRecord],
) -> CliResult<Vec<AnswerJudgment>> {
    let by_id: BTreeMap<&str, &AnswerRecord> =
        answers.iter().map(|a| (a.query_id.as_str(), a)).collect();
    records
        .iter()
        .map(|r| {
            let a = by_id
                .get(r.query_id.as_str())
                .ok_or_else(|| Error::Lookup(format!("no answer for query {}", r.query_id)))?;
            Ok(AnswerJudgment {
                prediction: a.answer.clone(),
                references: r.answers.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub retriever: String,
    pub split: String,
    pub queries: usize,
    pub mrr_at_5: f64,
    pub precision_at_5: f64,
    pub precision_at_1: f64,
    pub hit: BTreeMap<usize, f64>,
    pub vqa_accuracy: Option<f64>,
    pub exact_match: Option<f64>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "retriever {} on {} ({} questions)\nMRR@5\t{:.4}\nP@5\t{:.4}\nP@1\t{:.4}\n",
            self.retriever,
            self.split,
            self.queries,
            self.mrr_at_5,
            self.precision_at_5,
            self.precision_at_1
        );
        for (k, v) in &self.hit {
            writeln!(s, "hit@{k}\t{v:.4}").expect("write to string");
        }
        if let (Some(acc), Some(em)) = (self.vqa_accuracy, self.exact_match) {
            writeln!(s, "accuracy\t{acc:.4}\nEM\t{em:.4}").expect("write to string");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub hit: f64,
    pub vqa_accuracy: f64,
    pub exact_match: f64,
}
