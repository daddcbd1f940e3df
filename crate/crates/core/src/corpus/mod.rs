//! Questions, passages, captions, region features and relevance judgements.
//!
//! Stores are immutable once loaded. [`Dataset`] bundles them together with
//! the split manifests and checks referential integrity across all of them.

mod io;
pub mod synthetic;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};

pub use io::{
    ingest_captions, ingest_object_names, ingest_passages, ingest_questions,
    ingest_visual_features, read_visual_features, write_captions, write_object_names,
    write_passages, write_questions, write_visual_features, DataLayout,
};

/// One knowledge-intensive VQA instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub question: String,
    pub image_id: String,
    /// Annotator answers; repeated strings carry multiplicity.
    pub answers: Vec<String>,
    pub relevant_passage_ids: Vec<String>,
    #[serde(default)]
    pub hard_negative_ids: Vec<String>,
}

impl QueryRecord {
    /// Answer used as the generation target: the most frequent string in
    /// the multiset, ties broken lexicographically.
    pub fn target_answer(&self) -> Option<&str> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for a in &self.answers {
            *counts.entry(a.as_str()).or_default() += 1;
        }
        // BTreeMap iterates in lexicographic order, so the first maximum wins.
        let mut best: Option<(&str, usize)> = None;
        for (a, c) in counts {
            if best.map_or(true, |(_, bc)| c > bc) {
                best = Some((a, c));
            }
        }
        best.map(|(a, _)| a)
    }

    pub fn is_relevant(&self, passage_id: &str) -> bool {
        self.relevant_passage_ids.iter().any(|r| r == passage_id)
    }

    fn validate(&self, require_relevant: bool) -> Result<()> {
        if self.answers.is_empty() {
            return Err(Error::Validation(format!(
                "query {} has no answers",
                self.query_id
            )));
        }
        if require_relevant && self.relevant_passage_ids.is_empty() {
            return Err(Error::Validation(format!(
                "training query {} has no relevant passage",
                self.query_id
            )));
        }
        let rel: HashSet<&str> = self
            .relevant_passage_ids
            .iter()
            .map(String::as_str)
            .collect();
        if rel.len() != self.relevant_passage_ids.len() {
            return Err(Error::Validation(format!(
                "query {} lists a relevant passage twice",
                self.query_id
            )));
        }
        if let Some(n) = self
            .hard_negative_ids
            .iter()
            .find(|n| rel.contains(n.as_str()))
        {
            return Err(Error::Validation(format!(
                "query {}: passage {n} is both relevant and a hard negative",
                self.query_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: String,
    pub text: String,
}

/// Region features and normalised `(x1, y1, x2, y2)` boxes for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualInput {
    pub features: Mat,
    pub boxes: Mat,
}

impl VisualInput {
    pub fn new(features: Mat, boxes: Mat) -> Result<Self> {
        let v = Self { features, boxes };
        v.validate()?;
        Ok(v)
    }

    /// The masked visual input: every feature zero, every box the whole image.
    pub fn masked(num_regions: usize, feature_dim: usize) -> Self {
        let mut boxes = Mat::zeros((num_regions, 4));
        boxes.column_mut(2).fill(1.0);
        boxes.column_mut(3).fill(1.0);
        Self {
            features: Mat::zeros((num_regions, feature_dim)),
            boxes,
        }
    }

    pub fn num_regions(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.dim() != (self.features.nrows(), 4) {
            return Err(Error::Shape(format!(
                "boxes have shape {:?}, expected ({}, 4)",
                self.boxes.dim(),
                self.features.nrows()
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "region features contain non-finite values".into(),
            ));
        }
        for (i, b) in self.boxes.outer_iter().enumerate() {
            let (x1, y1, x2, y2) = (b[0], b[1], b[2], b[3]);
            let in_unit = [x1, y1, x2, y2].iter().all(|v| (0.0..=1.0).contains(v));
            if !in_unit || x2 < x1 || y2 < y1 {
                return Err(Error::Validation(format!(
                    "region {i} has invalid box ({x1}, {y1}, {x2}, {y2})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split_name: Split,
    pub query_ids: Vec<String>,
}

/// All stores of one dataset, checked for referential integrity.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub queries: BTreeMap<Split, Vec<QueryRecord>>,
    pub passages: Vec<Passage>,
    passage_index: HashMap<String, usize>,
    pub captions: BTreeMap<String, String>,
    pub visual: BTreeMap<String, VisualInput>,
    pub objects: BTreeMap<String, Vec<String>>,
}

impl Dataset {
    pub fn new(
        queries: BTreeMap<Split, Vec<QueryRecord>>,
        passages: Vec<Passage>,
        captions: BTreeMap<String, String>,
        visual: BTreeMap<String, VisualInput>,
        objects: BTreeMap<String, Vec<String>>,
    ) -> Result<Self> {
        let mut passage_index = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if passage_index.insert(p.passage_id.clone(), i).is_some() {
                return Err(Error::Integrity(format!(
                    "duplicate passage id {}",
                    p.passage_id
                )));
            }
        }
        let ds = Self {
            queries,
            passages,
            passage_index,
            captions,
            visual,
            objects,
        };
        ds.check_integrity()?;
        Ok(ds)
    }

    pub fn load(dir: &Path, num_regions: usize, feature_dim: usize) -> Result<Self> {
        let layout = DataLayout::new(dir);
        let mut queries = BTreeMap::new();
        for split in Split::ALL {
            let path = layout.questions(split);
            let records = if path.exists() {
                ingest_questions(&path, split)?
            } else {
                Vec::new()
            };
            queries.insert(split, records);
        }
        let passages = ingest_passages(&layout.passages())?;
        let captions = ingest_captions(&layout.captions())?;
        let visual = ingest_visual_features(&layout.visual(), num_regions, feature_dim)?;
        let objects = if layout.objects().exists() {
            ingest_object_names(&layout.objects())?
        } else {
            BTreeMap::new()
        };
        Self::new(queries, passages, captions, visual, objects)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let layout = DataLayout::new(dir);
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (split, records) in &self.queries {
            write_questions(&layout.questions(*split), records)?;
        }
        write_passages(&layout.passages(), &self.passages)?;
        write_captions(&layout.captions(), &self.captions)?;
        write_visual_features(&layout.visual(), &self.visual)?;
        write_object_names(&layout.objects(), &self.objects)?;
        let manifests: Vec<SplitManifest> = self.split_manifests();
        let body = serde_json::to_string_pretty(&manifests).expect("manifests serialise");
        std::fs::write(layout.splits(), body)
            .map_err(|e| Error::io(format!("writing {}", layout.splits().display()), e))
    }

    pub fn split_manifests(&self) -> Vec<SplitManifest> {
        self.queries
            .iter()
            .map(|(s, r)| SplitManifest {
                split_name: *s,
                query_ids: r.iter().map(|q| q.query_id.clone()).collect(),
            })
            .collect()
    }

    pub fn split(&self, split: Split) -> &[QueryRecord] {
        self.queries.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<QueryRecord> {
        self.queries.entry(split).or_default()
    }

    pub fn passage(&self, id: &str) -> Option<&Passage> {
        self.passage_index.get(id).map(|&i| &self.passages[i])
    }

    pub fn passage_position(&self, id: &str) -> Option<usize> {
        self.passage_index.get(id).copied()
    }

    pub fn caption(&self, image_id: &str) -> Result<&str> {
        self.captions
            .get(image_id)
            .map(String::as_str)
            .ok_or_else(|| Error::Lookup(format!("no caption for image {image_id}")))
    }

    pub fn visual_input(&self, image_id: &str) -> Result<&VisualInput> {
        self.visual
            .get(image_id)
            .ok_or_else(|| Error::Lookup(format!("no visual features for image {image_id}")))
    }

    /// Every text in the dataset, for building a vocabulary.
    pub fn all_texts(&self) -> impl Iterator<Item = &str> {
        let q = self.queries.values().flatten().flat_map(|r| {
            std::iter::once(r.question.as_str()).chain(r.answers.iter().map(String::as_str))
        });
        let p = self.passages.iter().map(|p| p.text.as_str());
        let c = self.captions.values().map(String::as_str);
        let o = self.objects.values().flatten().map(String::as_str);
        q.chain(p).chain(c).chain(o)
    }

    pub fn check_integrity(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (split, records) in &self.queries {
            for r in records {
                if !seen.insert(r.query_id.as_str()) {
                    return Err(Error::Integrity(format!(
                        "query id {} appears more than once across splits",
                        r.query_id
                    )));
                }
                r.validate(*split == Split::Train)?;
                for id in r.relevant_passage_ids.iter().chain(&r.hard_negative_ids) {
                    if !self.passage_index.contains_key(id) {
                        return Err(Error::Integrity(format!(
                            "query {} references unknown passage {id}",
                            r.query_id
                        )));
                    }
                }
                if !self.visual.contains_key(&r.image_id) {
                    return Err(Error::Integrity(format!(
                        "query {} references image {} without visual features",
                        r.query_id, r.image_id
                    )));
                }
                if !self.captions.contains_key(&r.image_id) {
                    return Err(Error::Integrity(format!(
                        "query {} references image {} without a caption",
                        r.query_id, r.image_id
                    )));
                }
            }
        }
        for p in &self.passages {
            if p.text.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "passage {} has empty text",
                    p.passage_id
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(answers: &[&str]) -> QueryRecord {
        QueryRecord {
            query_id: "q".into(),
            question: "what?".into(),
            image_id: "i".into(),
            answers: answers.iter().map(|s| s.to_string()).collect(),
            relevant_passage_ids: vec!["p1".into()],
            hard_negative_ids: vec![],
        }
    }

    #[test]
    fn target_answer_prefers_frequency_then_lexicographic() {
        assert_eq!(record(&["b", "a", "b"]).target_answer(), Some("b"));
        assert_eq!(record(&["zebra", "apple"]).target_answer(), Some("apple"));
        assert_eq!(record(&[]).target_answer(), None);
    }

    #[test]
    fn masked_visual_input_is_constant() {
        let v = VisualInput::masked(36, 8);
        assert_eq!(v.features.dim(), (36, 8));
        assert!(v.features.iter().all(|&x| x == 0.0));
        for b in v.boxes.outer_iter() {
            assert_eq!(b.to_vec(), vec![0.0, 0.0, 1.0, 1.0]);
        }
        v.validate().unwrap();
    }

    #[test]
    fn inverted_box_is_rejected() {
        let features = Mat::zeros((1, 2));
        let boxes = Mat::from_shape_vec((1, 4), vec![0.5, 0.2, 0.4, 0.9]).unwrap();
        assert!(matches!(
            VisualInput::new(features, boxes),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn relevant_and_negative_must_be_disjoint() {
        let mut r = record(&["a"]);
        r.hard_negative_ids = vec!["p1".into()];
        assert!(r.validate(true).is_err());
    }
}
