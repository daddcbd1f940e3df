//! Seeded synthetic KI-VQA corpora for desk-scale experiments.
//!
//! Each query is built around a latent "scene": one topic word that the
//! question mentions, three objects that appear in the image, and an answer
//! word. The relevant passage mentions all of them; the caption names the
//! three objects (occasionally one is wrong), and the image carries noisy
//! visual prototypes of all three objects. Distractor passages are sampled
//! from the same generative process, so the text path and the multi-modal
//! path see overlapping but different evidence.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Passage, QueryRecord, Split, VisualInput};
use crate::autograd::Mat;
use crate::error::{Error, Result};

const FILLERS: [&str; 30] = [
    "of", "and", "in", "to", "is", "was", "for", "on", "as", "with", "by", "at", "from", "it",
    "be", "are", "or", "has", "its", "which", "also", "known", "used", "often", "many", "some",
    "can", "most", "other", "such",
];

const FRAMES: [&[&str]; 4] = [
    &["what", "is", "{}", "about", "this"],
    &["which", "{}", "relates", "to", "this"],
    &["how", "does", "{}", "apply", "here"],
    &["why", "would", "{}", "matter", "here"],
];

const BACKGROUND: [&str; 5] = ["sky", "wall", "floor", "grass", "tree"];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_queries: usize,
    pub n_passages: usize,
    /// Content-word scale: topics, objects and answers take fixed fractions
    /// (1/5, 1/25 and 1/8) of it.
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub num_regions: usize,
    pub caption_error_rate: f64,
}

impl SyntheticConfig {
    pub fn new(
        seed: u64,
        n_queries: usize,
        n_passages: usize,
        vocab_size: usize,
        feature_dim: usize,
    ) -> Self {
        Self {
            seed,
            n_queries,
            n_passages,
            vocab_size,
            feature_dim,
            num_regions: 36,
            caption_error_rate: 0.2,
        }
    }
}

/// Deterministic pseudo-word for an index: three consonant-vowel syllables.
fn word(index: usize) -> String {
    let syl = CONSONANTS.len() * VOWELS.len();
    // spread consecutive indices over the syllable space
    let mut k = (index.wrapping_mul(7919) + 13) % (syl * syl * syl);
    let mut out = String::with_capacity(6);
    for _ in 0..3 {
        let s = k % syl;
        k /= syl;
        out.push(CONSONANTS[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
    }
    out
}

struct Scene {
    topic: usize,
    objects: [usize; 3],
    answer: usize,
}

struct Pools {
    topics: Vec<String>,
    objects: Vec<String>,
    answers: Vec<String>,
}

impl Pools {
    fn new(vocab_size: usize) -> Self {
        let n_topics = (vocab_size / 5).max(4);
        let n_objects = (vocab_size / 25).max(8);
        let n_answers = (vocab_size / 8).max(4);
        let mut next = 0usize;
        let mut take = |n: usize| {
            let words: Vec<String> = (next..next + n).map(word).collect();
            next += n;
            words
        };
        Self {
            topics: take(n_topics),
            objects: take(n_objects),
            answers: take(n_answers),
        }
    }

    fn scene(&self, rng: &mut ChaCha8Rng) -> Scene {
        let objs: Vec<usize> = rand::seq::index::sample(rng, self.objects.len(), 3).into_vec();
        Scene {
            topic: rng.gen_range(0..self.topics.len()),
            objects: [objs[0], objs[1], objs[2]],
            answer: rng.gen_range(0..self.answers.len()),
        }
    }

    fn passage_text(&self, scene: &Scene, rng: &mut ChaCha8Rng) -> String {
        let mut tokens: Vec<&str> = vec![&self.topics[scene.topic], &self.answers[scene.answer]];
        tokens.extend(scene.objects.iter().map(|&o| self.objects[o].as_str()));
        for _ in 0..4 {
            tokens.push(FILLERS[rng.gen_range(0..FILLERS.len())]);
        }
        tokens.shuffle(rng);
        tokens.join(" ")
    }
}

/// Output of [`generate`]: a complete, integrity-checked dataset.
pub fn generate(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.n_queries == 0 || cfg.n_passages < cfg.n_queries {
        return Err(Error::Argument(format!(
            "need n_passages ≥ n_queries ≥ 1, got {} passages and {} queries",
            cfg.n_passages, cfg.n_queries
        )));
    }
    if cfg.vocab_size < 20 || cfg.feature_dim == 0 || cfg.num_regions < 6 {
        return Err(Error::Argument(
            "vocab_size must be ≥ 20, feature_dim ≥ 1 and num_regions ≥ 6".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pools = Pools::new(cfg.vocab_size);

    let proto_dist = Normal::new(0.0, 1.0).unwrap();
    let prototypes: Vec<Vec<f64>> = (0..pools.objects.len())
        .map(|_| {
            let v: Vec<f64> = (0..cfg.feature_dim)
                .map(|_| proto_dist.sample(&mut rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.into_iter().map(|x| 3.0 * x / norm).collect()
        })
        .collect();
    let noise = Normal::new(0.0, 0.3).unwrap();

    // Passage slots are shuffled so ids carry no information about relevance.
    let mut slots: Vec<usize> = (0..cfg.n_passages).collect();
    slots.shuffle(&mut rng);
    let mut passage_texts = vec![String::new(); cfg.n_passages];

    let mut records = Vec::with_capacity(cfg.n_queries);
    let mut captions = BTreeMap::new();
    let mut visual = BTreeMap::new();
    let mut objects = BTreeMap::new();
    for q in 0..cfg.n_queries {
        let scene = pools.scene(&mut rng);
        let slot = slots[q];
        passage_texts[slot] = pools.passage_text(&scene, &mut rng);

        let frame = FRAMES[rng.gen_range(0..FRAMES.len())];
        let question = frame
            .iter()
            .map(|w| {
                if *w == "{}" {
                    pools.topics[scene.topic].as_str()
                } else {
                    w
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
            + "?";

        let mut shown: Vec<usize> = scene.objects.to_vec();
        shown.shuffle(&mut rng);
        if rng.gen_bool(cfg.caption_error_rate) {
            let i = rng.gen_range(0..shown.len());
            shown[i] = rng.gen_range(0..pools.objects.len());
        }
        let caption = shown
            .iter()
            .map(|&o| {
                format!(
                    "a {} {}",
                    pools.objects[o],
                    FILLERS[rng.gen_range(0..FILLERS.len())]
                )
            })
            .collect::<Vec<_>>()
            .join(" ");

        let mut features = Mat::zeros((cfg.num_regions, cfg.feature_dim));
        let mut boxes = Mat::zeros((cfg.num_regions, 4));
        let mut names = Vec::with_capacity(cfg.num_regions);
        for r in 0..cfg.num_regions {
            let object = (r < 6).then(|| scene.objects[r / 2]);
            for j in 0..cfg.feature_dim {
                let base = object.map_or(0.0, |o| prototypes[o][j]);
                features[[r, j]] = base + noise.sample(&mut rng);
            }
            let (x1, x2) = ordered(&mut rng);
            let (y1, y2) = ordered(&mut rng);
            boxes.row_mut(r).assign(&ndarray::arr1(&[x1, y1, x2, y2]));
            names.push(match object {
                Some(o) => pools.objects[o].clone(),
                None => BACKGROUND[rng.gen_range(0..BACKGROUND.len())].to_string(),
            });
        }
        // shuffle region order so object regions are not always first
        let mut order: Vec<usize> = (0..cfg.num_regions).collect();
        order.shuffle(&mut rng);
        let features = Mat::from_shape_fn(features.dim(), |(r, j)| features[[order[r], j]]);
        let boxes = Mat::from_shape_fn(boxes.dim(), |(r, j)| boxes[[order[r], j]]);
        let names: Vec<String> = order.iter().map(|&r| names[r].clone()).collect();

        let query_id = format!("q{:05}", q + 1);
        let image_id = format!("img{:05}", q + 1);
        let answer = pools.answers[scene.answer].clone();
        records.push(QueryRecord {
            query_id,
            question,
            image_id: image_id.clone(),
            answers: vec![
                answer.clone(),
                answer.clone(),
                answer.clone(),
                format!("{answer}s"),
            ],
            relevant_passage_ids: vec![format!("p{:05}", slot + 1)],
            hard_negative_ids: Vec::new(),
        });
        captions.insert(image_id.clone(), caption);
        visual.insert(image_id.clone(), VisualInput::new(features, boxes)?);
        objects.insert(image_id, names);
    }
    for slot in &slots[cfg.n_queries..] {
        let scene = pools.scene(&mut rng);
        passage_texts[*slot] = pools.passage_text(&scene, &mut rng);
    }
    let passages = passage_texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| Passage {
            passage_id: format!("p{:05}", i + 1),
            text,
        })
        .collect();

    let n_train = ((cfg.n_queries as f64) * 0.7).round() as usize;
    let n_val = ((cfg.n_queries as f64) * 0.15).round() as usize;
    let mut queries = BTreeMap::new();
    let mut it = records.into_iter();
    queries.insert(Split::Train, it.by_ref().take(n_train).collect());
    queries.insert(Split::Validation, it.by_ref().take(n_val).collect());
    queries.insert(Split::Test, it.collect());
    Dataset::new(queries, passages, captions, visual, objects)
}

fn ordered(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let a: f64 = rng.gen();
    let b: f64 = rng.gen();
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn words_are_unique_over_the_pools() {
        let words: HashSet<String> = (0..2000).map(word).collect();
        assert_eq!(words.len(), 2000);
        assert!(words.iter().all(|w| !FILLERS.contains(&w.as_str())));
    }

    #[test]
    fn sizes_and_relevance_pairs() {
        let ds = generate(&SyntheticConfig::new(7, 200, 1000, 500, 8)).unwrap();
        let all: Vec<&QueryRecord> = ds.queries.values().flatten().collect();
        assert_eq!(all.len(), 200);
        assert_eq!(ds.passages.len(), 1000);
        let pairs: usize = all.iter().map(|r| r.relevant_passage_ids.len()).sum();
        assert_eq!(pairs, 200);
        let rel: HashSet<&str> = all
            .iter()
            .map(|r| r.relevant_passage_ids[0].as_str())
            .collect();
        assert_eq!(rel.len(), 200);
        // ids are disjoint across the stores
        let qids: HashSet<&str> = all.iter().map(|r| r.query_id.as_str()).collect();
        let pids: HashSet<&str> = ds.passages.iter().map(|p| p.passage_id.as_str()).collect();
        let iids: HashSet<&str> = ds.visual.keys().map(String::as_str).collect();
        assert!(qids.is_disjoint(&pids) && qids.is_disjoint(&iids) && pids.is_disjoint(&iids));
        assert_eq!(ds.split(Split::Train).len(), 140);
        assert_eq!(ds.split(Split::Validation).len(), 30);
        assert_eq!(ds.split(Split::Test).len(), 30);
    }

    #[test]
    fn invalid_sizes_are_rejected() {
        assert!(generate(&SyntheticConfig::new(1, 10, 5, 500, 8)).is_err());
        assert!(generate(&SyntheticConfig::new(1, 0, 5, 500, 8)).is_err());
    }
}
