use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{EncoderBlock, LayerNormIds, LinearIds};
use super::{DenseEncoder, EncoderOutput, EncoderPath, TextSequence};
use crate::autograd::{Graph, Mat, Var};
use crate::corpus::VisualInput;
use crate::error::{Error, Result};
use crate::params::{normal_init, Checkpoint, ParamStore};
use crate::text::CLS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyEncoderConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub out_dim: usize,
    pub max_len: usize,
    pub feature_dim: usize,
    pub num_regions: usize,
}

impl ToyEncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            width: 64,
            heads: 4,
            layers: 2,
            ffn_hidden: 128,
            out_dim: 64,
            max_len: super::DEFAULT_MAX_INPUT_TOKENS,
            feature_dim: 8,
            num_regions: super::DEFAULT_NUM_REGIONS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.vocab_size < crate::text::RESERVED.len() || self.out_dim == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "vocab_size, out_dim and max_len must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Architecture plus the ids of its tensors inside some [`ParamStore`].
///
/// The model itself holds no weights, so two models can live in one store
/// under different name prefixes (used by joint training).
#[derive(Debug, Clone)]
pub struct ToyEncoderModel {
    cfg: ToyEncoderConfig,
    path: EncoderPath,
    tok_emb: usize,
    pos_emb: usize,
    visual: Option<LinearIds>,
    blocks: Vec<EncoderBlock>,
    ln_final: LayerNormIds,
    pool: LinearIds,
}

impl ToyEncoderModel {
    /// Adds freshly initialised tensors under `prefix` and returns the model.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: ToyEncoderConfig,
        path: EncoderPath,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let tok_emb = store.insert(
            &format!("{prefix}tok_emb"),
            normal_init(rng, cfg.vocab_size, w, 0.5),
        );
        let pos_emb = store.insert(
            &format!("{prefix}pos_emb"),
            normal_init(rng, cfg.max_len + 1, w, 0.1),
        );
        let visual = (path == EncoderPath::MultiModal).then(|| {
            LinearIds::init(
                store,
                &format!("{prefix}visual"),
                cfg.feature_dim + 4,
                w,
                0.5 / ((cfg.feature_dim + 4) as f64).sqrt(),
                rng,
            )
        });
        let blocks = (0..cfg.layers)
            .map(|l| {
                EncoderBlock::init(
                    store,
                    &format!("{prefix}block{l}"),
                    w,
                    cfg.heads,
                    cfg.ffn_hidden,
                    rng,
                )
            })
            .collect();
        let ln_final = LayerNormIds::init(store, &format!("{prefix}ln_f"), w);
        let pool = LinearIds::init(
            store,
            &format!("{prefix}pool"),
            w,
            cfg.out_dim,
            1.0 / (w as f64).sqrt(),
            rng,
        );
        Ok(Self {
            cfg,
            path,
            tok_emb,
            pos_emb,
            visual,
            blocks,
            ln_final,
            pool,
        })
    }

    pub fn resolve(
        store: &ParamStore,
        prefix: &str,
        cfg: ToyEncoderConfig,
        path: EncoderPath,
    ) -> Result<Self> {
        cfg.validate()?;
        let model = Self {
            cfg,
            path,
            tok_emb: store.id(&format!("{prefix}tok_emb"))?,
            pos_emb: store.id(&format!("{prefix}pos_emb"))?,
            visual: match path {
                EncoderPath::MultiModal => {
                    Some(LinearIds::resolve(store, &format!("{prefix}visual"))?)
                }
                EncoderPath::Text => None,
            },
            blocks: (0..cfg.layers)
                .map(|l| EncoderBlock::resolve(store, &format!("{prefix}block{l}"), cfg.heads))
                .collect::<Result<_>>()?,
            ln_final: LayerNormIds::resolve(store, &format!("{prefix}ln_f"))?,
            pool: LinearIds::resolve(store, &format!("{prefix}pool"))?,
        };
        let emb = store.tensor(model.tok_emb).dim();
        if emb != (cfg.vocab_size, cfg.width)
            || store.tensor(model.pos_emb).nrows() != cfg.max_len + 1
        {
            return Err(Error::Checkpoint(format!(
                "embedding tables {:?} do not match configuration",
                emb
            )));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ToyEncoderConfig {
        &self.cfg
    }

    pub fn path(&self) -> EncoderPath {
        self.path
    }

    pub fn token_embedding_id(&self) -> usize {
        self.tok_emb
    }

    fn check_inputs(&self, seq: &TextSequence, visual: Option<&VisualInput>) -> Result<()> {
        if seq.len() > self.cfg.max_len {
            return Err(Error::Contract(format!(
                "sequence of {} tokens exceeds the encoder limit {}; truncate before encoding",
                seq.len(),
                self.cfg.max_len
            )));
        }
        if let Some(&bad) = seq
            .token_ids
            .iter()
            .find(|&&t| t as usize >= self.cfg.vocab_size)
        {
            return Err(Error::Contract(format!(
                "token id {bad} outside the vocabulary"
            )));
        }
        match (self.path, visual) {
            (EncoderPath::Text, None) => Ok(()),
            (EncoderPath::Text, Some(_)) => Err(Error::Contract(
                "the text path does not take visual input".into(),
            )),
            (EncoderPath::MultiModal, None) => Err(Error::Contract(
                "the multi-modal path needs visual input".into(),
            )),
            (EncoderPath::MultiModal, Some(v)) => {
                if v.num_regions() != self.cfg.num_regions
                    || v.feature_dim() != self.cfg.feature_dim
                {
                    Err(Error::Shape(format!(
                        "visual input is {}×{}, encoder expects {}×{}",
                        v.num_regions(),
                        v.feature_dim(),
                        self.cfg.num_regions,
                        self.cfg.feature_dim
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Final-layer states for `[CLS] regions… tokens…`.
    ///
    /// With `merge_identical_regions`, byte-identical region rows are encoded
    /// once and their multiplicity enters attention as a `ln(count)` logit
    /// bias. Regions carry no positional embedding, so every copy of a row
    /// would compute the same state and the pooled output is unchanged; this
    /// makes masked passages cost one region position instead of all of them.
    pub fn states(
        &self,
        g: &mut Graph,
        seq: &TextSequence,
        visual: Option<&VisualInput>,
        merge_identical_regions: bool,
    ) -> Result<Var> {
        self.check_inputs(seq, visual)?;
        let mut ids = Vec::with_capacity(seq.len() + 1);
        ids.push(CLS as usize);
        ids.extend(seq.token_ids.iter().map(|&t| t as usize));
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok_table = g.param(self.tok_emb);
        let pos_table = g.param(self.pos_emb);
        let tok = g.gather(tok_table, &ids);
        let pos = g.gather(pos_table, &positions);
        let text = g.add(tok, pos);

        let mut bias = None;
        let x = match (visual, self.visual) {
            (Some(v), Some(proj)) => {
                let (rows, counts) = if merge_identical_regions {
                    merge_regions(v)
                } else {
                    (region_rows(v, 0..v.num_regions()), vec![1; v.num_regions()])
                };
                let n_regions = rows.nrows();
                let rows = g.leaf(rows);
                let regions = proj.forward(g, rows);
                if counts.iter().any(|&c| c > 1) {
                    let total = 1 + n_regions + seq.len();
                    let mut b = Mat::zeros((1, total));
                    for (i, &c) in counts.iter().enumerate() {
                        b[[0, 1 + i]] = (c as f64).ln();
                    }
                    bias = Some(b);
                }
                let cls = g.slice_rows(text, 0, 1);
                if seq.is_empty() {
                    g.concat_rows(&[cls, regions])
                } else {
                    let rest = g.slice_rows(text, 1, seq.len());
                    g.concat_rows(&[cls, regions, rest])
                }
            }
            _ => text,
        };
        let mut x = x;
        for block in &self.blocks {
            x = block.forward(g, x, bias.as_ref());
        }
        Ok(self.ln_final.forward(g, x))
    }

    /// Pooled `1 × out_dim` embedding taken from position 0.
    pub fn forward(
        &self,
        g: &mut Graph,
        seq: &TextSequence,
        visual: Option<&VisualInput>,
    ) -> Result<Var> {
        let states = self.states(g, seq, visual, true)?;
        let cls = g.slice_rows(states, 0, 1);
        Ok(self.pool.forward(g, cls))
    }
}

fn region_rows(v: &VisualInput, rows: impl Iterator<Item = usize>) -> Mat {
    let idx: Vec<usize> = rows.collect();
    let d = v.feature_dim();
    Mat::from_shape_fn((idx.len(), d + 4), |(i, j)| {
        if j < d {
            v.features[[idx[i], j]]
        } else {
            v.boxes[[idx[i], j - d]]
        }
    })
}

/// Distinct region rows (features ⊕ box) in first-seen order, with counts.
fn merge_regions(v: &VisualInput) -> (Mat, Vec<usize>) {
    let key = |r: usize| -> Vec<u64> {
        v.features
            .row(r)
            .iter()
            .chain(v.boxes.row(r).iter())
            .map(|x| x.to_bits())
            .collect()
    };
    let mut firsts: Vec<usize> = Vec::new();
    let mut keys: Vec<Vec<u64>> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for r in 0..v.num_regions() {
        let k = key(r);
        match keys.iter().position(|e| *e == k) {
            Some(i) => counts[i] += 1,
            None => {
                keys.push(k);
                firsts.push(r);
                counts.push(1);
            }
        }
    }
    (region_rows(v, firsts.into_iter()), counts)
}

/// A toy encoder that owns its parameters. Query and passage sides of a path
/// are encoded through the same instance, so they share one parameter store.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    model: ToyEncoderModel,
    params: ParamStore,
}

impl ToyEncoder {
    pub fn new(cfg: ToyEncoderConfig, path: EncoderPath, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let model = ToyEncoderModel::init(&mut params, "", cfg, path, &mut rng)?;
        Ok(Self { model, params })
    }

    pub fn from_parts(
        cfg: ToyEncoderConfig,
        path: EncoderPath,
        params: ParamStore,
    ) -> Result<Self> {
        let model = ToyEncoderModel::resolve(&params, "", cfg, path)?;
        Ok(Self { model, params })
    }

    pub fn model(&self) -> &ToyEncoderModel {
        &self.model
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn config(&self) -> &ToyEncoderConfig {
        &self.model.cfg
    }

    /// Embedding as a plain vector (inference; builds and drops a graph).
    pub fn embed(&self, seq: &TextSequence, visual: Option<&VisualInput>) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let out = self.model.forward(&mut g, seq, visual)?;
        Ok(g.value(out).iter().copied().collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("path".into(), serde_json::json!(self.model.path));
        meta.insert(
            "config".into(),
            serde_json::to_value(self.model.cfg).expect("config serialises"),
        );
        meta.insert("d".into(), serde_json::json!(self.model.cfg.out_dim));
        Checkpoint {
            kind: "toy-encoder".into(),
            meta,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.kind != "toy-encoder" {
            return Err(Error::Checkpoint(format!(
                "expected a toy-encoder checkpoint, found `{}`",
                ck.kind
            )));
        }
        let get = |k: &str| {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks `{k}`")))
        };
        let path: EncoderPath =
            serde_json::from_value(get("path")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let cfg: ToyEncoderConfig =
            serde_json::from_value(get("config")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Self::from_parts(cfg, path, ck.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

impl DenseEncoder for ToyEncoder {
    fn path(&self) -> EncoderPath {
        self.model.path
    }

    fn dim(&self) -> usize {
        self.model.cfg.out_dim
    }

    fn max_input_tokens(&self) -> usize {
        self.model.cfg.max_len
    }

    fn encode(&self, seq: &TextSequence, visual: Option<&VisualInput>) -> Result<EncoderOutput> {
        Ok(EncoderOutput {
            embedding: self.embed(seq, visual)?,
            path: self.model.path,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg() -> ToyEncoderConfig {
        ToyEncoderConfig {
            vocab_size: 30,
            width: 8,
            heads: 2,
            layers: 2,
            ffn_hidden: 12,
            out_dim: 6,
            max_len: 12,
            feature_dim: 3,
            num_regions: 5,
        }
    }

    fn random_visual(rng: &mut ChaCha8Rng, cfg: &ToyEncoderConfig) -> VisualInput {
        let features = Mat::from_shape_fn((cfg.num_regions, cfg.feature_dim), |_| {
            rng.gen_range(-1.0..1.0)
        });
        let mut boxes = Mat::zeros((cfg.num_regions, 4));
        for mut b in boxes.outer_iter_mut() {
            let (x1, y1): (f64, f64) = (rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5));
            b.assign(&ndarray::arr1(&[x1, y1, x1 + 0.4, y1 + 0.3]));
        }
        VisualInput::new(features, boxes).unwrap()
    }

    #[test]
    fn encoding_is_deterministic_and_reloads_bit_exactly() {
        let enc = ToyEncoder::new(small_cfg(), EncoderPath::Text, 5).unwrap();
        let seq = TextSequence::new(vec![7, 8, 9, 3, 10]);
        let a = enc.encode(&seq, None).unwrap();
        let b = enc.encode(&seq, None).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("t.ckpt");
        enc.save(&file).unwrap();
        let back = ToyEncoder::load(&file).unwrap();
        let c = back.encode(&seq, None).unwrap();
        assert_eq!(
            a.embedding.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            c.embedding.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn over_long_sequence_is_a_contract_violation() {
        let enc = ToyEncoder::new(small_cfg(), EncoderPath::Text, 5).unwrap();
        let seq = TextSequence::new(vec![7; 13]);
        assert!(matches!(enc.encode(&seq, None), Err(Error::Contract(_))));
    }

    #[test]
    fn multimodal_visual_stream_is_live() {
        let cfg = small_cfg();
        let enc = ToyEncoder::new(cfg, EncoderPath::MultiModal, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = TextSequence::new(vec![7, 8, 9]);
        let real = random_visual(&mut rng, &cfg);
        let masked = VisualInput::masked(cfg.num_regions, cfg.feature_dim);
        let a = enc.encode(&seq, Some(&real)).unwrap();
        let b = enc.encode(&seq, Some(&masked)).unwrap();
        assert_eq!(a.dim(), b.dim());
        assert_ne!(a.embedding, b.embedding);
        let wrong = VisualInput::masked(cfg.num_regions + 1, cfg.feature_dim);
        assert!(matches!(
            enc.encode(&seq, Some(&wrong)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(enc.encode(&seq, None), Err(Error::Contract(_))));
    }

    #[test]
    fn merged_regions_match_full_expansion() {
        let cfg = small_cfg();
        let enc = ToyEncoder::new(cfg, EncoderPath::MultiModal, 3).unwrap();
        let seq = TextSequence::new(vec![11, 12]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut v = random_visual(&mut rng, &cfg);
        // make rows 0, 2 and 4 identical
        let row = v.features.row(0).to_owned();
        let b = v.boxes.row(0).to_owned();
        for r in [2, 4] {
            v.features.row_mut(r).assign(&row);
            v.boxes.row_mut(r).assign(&b);
        }
        for visual in [v, VisualInput::masked(cfg.num_regions, cfg.feature_dim)] {
            let mut g = Graph::new(enc.params());
            let merged = enc
                .model()
                .states(&mut g, &seq, Some(&visual), true)
                .unwrap();
            let full = enc
                .model()
                .states(&mut g, &seq, Some(&visual), false)
                .unwrap();
            let (m, f) = (
                g.value(merged).row(0).to_owned(),
                g.value(full).row(0).to_owned(),
            );
            for (x, y) in m.iter().zip(f.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permuting_identical_regions_keeps_output() {
        let cfg = small_cfg();
        let enc = ToyEncoder::new(cfg, EncoderPath::MultiModal, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = random_visual(&mut rng, &cfg);
        let order = [3, 0, 4, 1, 2];
        let permuted = VisualInput::new(
            Mat::from_shape_fn(v.features.dim(), |(r, j)| v.features[[order[r], j]]),
            Mat::from_shape_fn(v.boxes.dim(), |(r, j)| v.boxes[[order[r], j]]),
        )
        .unwrap();
        let seq = TextSequence::new(vec![7, 8]);
        let a = enc.embed(&seq, Some(&v)).unwrap();
        let b = enc.embed(&seq, Some(&permuted)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
