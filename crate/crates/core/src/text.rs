//! The shared tokenizer and vocabulary.
//!
//! One tokenizer serves BM25, both encoders, the reader, and answer
//! normalisation: lowercase, then split on every non-alphanumeric character.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const BOS: u32 = 4;
pub const EOS: u32 = 5;

/// Reserved entries, in id order. The two prompt markers are ordinary words
/// so the reader template survives tokenisation unchanged.
pub const RESERVED: [&str; 8] = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[BOS]", "[EOS]", "question", "context",
];

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Answer normalisation shared by exact match and VQA accuracy: lowercase,
/// punctuation stripped, standalone articles dropped, whitespace collapsed.
/// No stemming.
pub fn normalize_answer(text: &str) -> String {
    tokenize(text)
        .into_iter()
        .filter(|t| !matches!(t.as_str(), "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from every token in `texts`, sorted, after the
    /// reserved entries.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            words.extend(tokenize(t));
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            words
                .into_iter()
                .filter(|w| !RESERVED.contains(&w.as_str())),
        );
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or("[UNK]")
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins non-special tokens with single spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id as usize >= 6)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let tokens: Vec<String> = body.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Validation(format!(
                "{}: vocabulary does not start with the reserved tokens",
                path.display()
            )));
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(
            tokenize("How tall? Two-Giraffes!"),
            ["how", "tall", "two", "giraffes"]
        );
        assert!(tokenize("  ?! ").is_empty());
    }

    #[test]
    fn normalizer_table() {
        assert_eq!(normalize_answer("The Giraffe!"), "giraffe");
        assert_eq!(normalize_answer("a red panda"), "red panda");
        assert_eq!(normalize_answer("giraffes"), "giraffes");
        assert_eq!(normalize_answer("  An   apple, please. "), "apple please");
        assert_eq!(normalize_answer("theater"), "theater");
    }

    #[test]
    fn vocab_reserves_specials_and_maps_unknowns() {
        let v = Vocab::build(["red panda", "blue sky", "the question"]);
        assert_eq!(v.token(SEP), "[SEP]");
        assert_eq!(v.id("question"), 6);
        assert_eq!(v.id("zebra"), UNK);
        let ids = v.encode("Red sky");
        assert_eq!(v.decode(&ids), "red sky");
    }
}
