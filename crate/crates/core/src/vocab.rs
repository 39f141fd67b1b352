//! Closed, whitespace-tokenized vocabulary shared by the text encoder,
//! the caption head and the corpus generator.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Object categories. Every label is a single token.
pub const LABELS: [&str; 20] = [
    "chair",
    "table",
    "bed",
    "sofa",
    "cabinet",
    "desk",
    "bookshelf",
    "lamp",
    "toilet",
    "sink",
    "bathtub",
    "refrigerator",
    "door",
    "box",
    "trashcan",
    "nightstand",
    "dresser",
    "ottoman",
    "piano",
    "counter",
];

pub const COLORS: [&str; 8] = [
    "red", "blue", "green", "yellow", "white", "black", "brown", "gray",
];

pub const SIZE_WORDS: [&str; 2] = ["large", "small"];

const FUNCTION_WORDS: [&str; 13] = [
    "the", "a", "this", "is", "it", "and", "that", "near", "next", "to", "close", "of", ".",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let tokens = SPECIALS
            .iter()
            .chain(LABELS.iter())
            .chain(COLORS.iter())
            .chain(SIZE_WORDS.iter())
            .chain(FUNCTION_WORDS.iter())
            .map(|s| s.to_string())
            .collect();
        Self { tokens }
    }
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len()
            || tokens.iter().zip(SPECIALS.iter()).any(|(t, s)| t != s)
        {
            return Err(Error::VocabularyMismatch(
                "vocabulary must start with <pad> <sos> <eos> <unk>".into(),
            ));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.tokens.iter().position(|t| t == token).map(|i| i as u32)
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::UnknownTokenId(id))
    }

    /// Lowercases, splits on whitespace and wraps the ids in SOS/EOS.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = vec![SOS];
        for word in text.split_whitespace() {
            let word = word.to_lowercase();
            ids.push(self.id(&word).ok_or(Error::UnknownToken(word))?);
        }
        ids.push(EOS);
        Ok(ids)
    }

    /// Inverse of [`Vocabulary::encode`]: drops specials and stops at the first EOS.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | SOS => continue,
                _ => words.push(self.token(id)?),
            }
        }
        Ok(words.join(" "))
    }

    /// One token per line; the line number is the token id.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

pub fn is_label(word: &str) -> bool {
    LABELS.contains(&word)
}
