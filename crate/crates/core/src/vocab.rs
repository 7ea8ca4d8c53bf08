//! Caption vocabulary: whitespace tokenizer over a line-delimited word list.
//!
//! The file format is one token per line; the token id is the line number
//! (zero-based).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FILLER_WORDS: &[&str] = &["a", "and", "left", "of", "above"];
pub const DEFAULT_COLORS: &[&str] = &["red", "green", "blue", "yellow"];
pub const DEFAULT_SHAPES: &[&str] = &["circle", "square", "triangle", "cross"];

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("bad vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Fillers, then the given colors and shapes, in listing order.
    pub fn for_attributes(colors: &[String], shapes: &[String]) -> Result<Self> {
        let mut tokens: Vec<String> = FILLER_WORDS.iter().map(|s| s.to_string()).collect();
        tokens.extend(colors.iter().cloned());
        tokens.extend(shapes.iter().cloned());
        Vocabulary::from_tokens(tokens)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Vocabulary::from_tokens(text.lines().map(|l| l.to_string()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Input(format!("word {w:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let words: Result<Vec<&str>> = ids
            .iter()
            .map(|&id| {
                self.word(id)
                    .ok_or_else(|| Error::Input(format!("token id {id} out of vocabulary")))
            })
            .collect();
        Ok(words?.join(" "))
    }
}
