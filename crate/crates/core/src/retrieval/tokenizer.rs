//! The tokenizer shared by retrieval and the model, and the model vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util;

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const SEP: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<eos>", "<unk>", "<sep>"];

/// Lowercases and splits on every non-alphanumeric character, dropping empty
/// pieces. No stemming and no stopwords.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in text.split(|c: char| !c.is_alphanumeric()) {
        if piece.is_empty() {
            continue;
        }
        let lower = piece.to_lowercase();
        // Lowercasing can introduce combining marks (e.g. U+0130), which are
        // separators here too.
        out.extend(
            lower
                .split(|c: char| !c.is_alphanumeric())
                .filter(|s| !s.is_empty())
                .map(str::to_owned),
        );
    }
    out
}

/// Word-level vocabulary with the four special tokens at ids 0..=3.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from every token of `texts`, sorted so that the
    /// result does not depend on text order.
    pub fn build<'t>(texts: impl IntoIterator<Item = &'t str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            words.extend(tokenize(t));
        }
        Self::from_words(words.into_iter())
    }

    fn from_words(words: impl Iterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.filter(|w| !SPECIALS.contains(&w.as_str())));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary { tokens, index }
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
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    /// Tokenizes and maps to ids; out-of-vocabulary words become `UNK`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// One token per line, specials included.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        io_util::write_atomic(path, body.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(Error::format(path, "vocabulary must start with the special tokens"));
        }
        Ok(Self::from_words(lines[SPECIALS.len()..].iter().map(|s| s.to_string())))
    }
}
