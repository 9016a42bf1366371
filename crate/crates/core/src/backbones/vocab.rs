use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";
pub const NEWLINE: &str = "\n";

pub const COLOR_WORDS: [&str; 10] = [
    "red", "green", "blue", "yellow", "purple", "orange", "black", "white", "pink", "brown",
];

const STRUCTURAL: [&str; 12] = [
    "colors",
    ":",
    "question",
    "color",
    "of",
    "?",
    "Please",
    "answer",
    "the",
    "question.",
    "Question:",
    "Answer:",
];

/// Word-level vocabulary: whitespace separates tokens, a line break is a
/// token of its own.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::toy()
    }
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate token {t:?}")));
            }
        }
        if !index.contains_key(EOS) {
            return Err(Error::Data("vocabulary lacks <eos>".into()));
        }
        Ok(Self { tokens, index })
    }

    /// Specials, newline, color words, digits and the prompt words.
    pub fn toy() -> Self {
        let tokens = [PAD, EOS, NEWLINE]
            .into_iter()
            .map(str::to_string)
            .chain(COLOR_WORDS.iter().map(|s| s.to_string()))
            .chain((0..10).map(|d| d.to_string()))
            .chain(STRUCTURAL.iter().map(|s| s.to_string()))
            .collect();
        Self::new(tokens).expect("toy vocabulary is well-formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn newline(&self) -> Option<usize> {
        self.id(NEWLINE)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for (i, line) in text.split('\n').enumerate() {
            if i > 0 {
                ids.push(
                    self.newline()
                        .ok_or_else(|| Error::Data("vocabulary has no newline token".into()))?,
                );
            }
            for word in line.split_whitespace() {
                ids.push(
                    self.id(word)
                        .ok_or_else(|| Error::Data(format!("unknown token {word:?}")))?,
                );
            }
        }
        Ok(ids)
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        let mut line_start = true;
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Index(format!("token id {id} outside vocabulary")))?;
            if tok == NEWLINE {
                out.push('\n');
                line_start = true;
                continue;
            }
            if !line_start {
                out.push(' ');
            }
            out.push_str(tok);
            line_start = false;
        }
        Ok(out)
    }

    /// One token per line; the newline token is written as `\n`.
    pub fn to_file_contents(&self) -> String {
        self.tokens
            .iter()
            .map(|t| if t == NEWLINE { "\\n" } else { t.as_str() })
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }

    pub fn from_file_contents(text: &str) -> Result<Self> {
        let tokens = text
            .lines()
            .map(|l| if l == "\\n" { NEWLINE.to_string() } else { l.to_string() })
            .collect();
        Self::new(tokens)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_contents(&text)
    }
}

/// Whitespace-collapsed form that a tokenize/detokenize round trip yields.
pub fn normalize_text(text: &str) -> String {
    text.split('\n')
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn toy_vocabulary_shape() {
        let v = Vocabulary::toy();
        assert_eq!(v.len(), 35);
        assert_eq!(v.eos(), 1);
        for w in ["colors", "question", "answer", ":", "?", "Answer:"] {
            assert!(v.id(w).is_some(), "{w}");
        }
    }

    #[test]
    fn unknown_word_is_a_data_error() {
        assert!(matches!(
            Vocabulary::toy().tokenize("colors : magenta"),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let v = Vocabulary::toy();
        let back = Vocabulary::from_file_contents(&v.to_file_contents()).unwrap();
        assert_eq!(back, v);
    }

    proptest! {
        #[test]
        fn round_trip_normalizes(words in prop::collection::vec(
            prop::sample::select(vec!["red", "colors", ":", "3", "\n", "Answer:", "<eos>"]), 0..20),
            pads in prop::collection::vec(prop::sample::select(vec![" ", "  ", "\t"]), 20)) {
            let v = Vocabulary::toy();
            let mut text = String::new();
            for (w, p) in words.iter().zip(&pads) {
                text.push_str(p);
                text.push_str(w);
            }
            let ids = v.tokenize(&text).unwrap();
            prop_assert_eq!(v.detokenize(&ids).unwrap(), normalize_text(&text));
        }
    }
}
