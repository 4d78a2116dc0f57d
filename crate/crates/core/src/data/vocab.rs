use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
/// Number of reserved ids at the front of the vocabulary.
pub const NUM_SPECIAL: u32 = 2;

pub(crate) const COLOR_WORDS: [&str; 8] = ["red", "green", "blue", "yellow", "cyan", "magenta", "white", "black"];
pub(crate) const SHAPE_WORDS: [&str; 4] = ["circle", "square", "triangle", "bar"];
pub(crate) const SIZE_WORDS: [&str; 2] = ["small", "large"];
pub(crate) const ROW_WORDS: [&str; 4] = ["top", "upper", "lower", "bottom"];
pub(crate) const COL_WORDS: [&str; 4] = ["left", "midleft", "midright", "right"];
pub(crate) const RELATION_WORDS: [&str; 4] = ["above", "below", "leftof", "rightof"];
pub(crate) const COUNT_WORDS: [&str; 3] = ["one", "two", "three"];
const FUNCTION_WORDS: [&str; 8] = ["a", "and", "on", "background", "object", "objects", "alone", "with"];

/// Closed word list shared by every caption of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    pub fn standard() -> Self {
        let mut words = vec!["[PAD]".to_string(), "[MASK]".to_string()];
        for group in [
            &COLOR_WORDS[..],
            &SHAPE_WORDS,
            &SIZE_WORDS,
            &ROW_WORDS,
            &COL_WORDS,
            &RELATION_WORDS,
            &COUNT_WORDS,
            &FUNCTION_WORDS,
        ] {
            words.extend(group.iter().map(|w| w.to_string()));
        }
        Self { words }
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < NUM_SPECIAL as usize + 1 {
            return Err(Error::Data("vocabulary too small".into()));
        }
        Ok(Self { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    /// Id of a word known to be in the standard vocabulary.
    pub(crate) fn expect_id(&self, word: &str) -> u32 {
        self.id(word).unwrap_or_else(|| panic!("`{word}` missing from vocabulary"))
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Data(format!("word `{w}` not in vocabulary"))))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
