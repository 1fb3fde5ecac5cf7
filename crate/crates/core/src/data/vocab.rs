//! Word-level vocabulary. Ids 0..4 are reserved for the special tokens.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials followed by the sorted, deduplicated `words`.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut list: Vec<&str> = words.into_iter().filter(|w| !SPECIALS.contains(w)).collect();
        list.sort_unstable();
        list.dedup();
        let tokens: Vec<String> = SPECIALS.iter().chain(list.iter()).map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Parses the one-token-per-line file format.
    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Config { line, msg };
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let tok = raw.strip_suffix('\r').unwrap_or(raw);
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(err(i + 1, format!("invalid token {tok:?}")));
            }
            if i < SPECIALS.len() && tok != SPECIALS[i] {
                return Err(err(i + 1, format!("expected {} but found {tok:?}", SPECIALS[i])));
            }
            if index.insert(tok.to_string(), i).is_some() {
                return Err(err(i + 1, format!("duplicate token {tok:?}")));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < SPECIALS.len() {
            return Err(err(tokens.len() + 1, "vocabulary is missing special tokens".into()));
        }
        Ok(Self { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `BOS w1 .. wn EOS`, lowercased and whitespace-split.
    pub fn encode(&self, caption: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(caption.split_whitespace().map(|w| self.id(&w.to_lowercase())));
        ids.push(EOS);
        ids
    }

    /// Inverse of [`Vocab::encode`] with specials dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIALS.len() || i == UNK)
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let v = Vocab::from_words(["zebra", "apple", "apple"]);
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(4), Some("apple"));
        let parsed = Vocab::parse(&v.to_text()).unwrap();
        assert_eq!(parsed, v);
        assert_eq!(v.encode("Apple kiwi"), vec![BOS, 4, UNK, EOS]);
        assert_eq!(v.decode(&v.encode("zebra apple")), "zebra apple");
    }

    #[test]
    fn parse_rejects_bad_files() {
        assert!(Vocab::parse("").is_err());
        assert!(Vocab::parse("<bos>\n<pad>\n<eos>\n<unk>\n").is_err());
        assert!(Vocab::parse("<pad>\n<bos>\n<eos>\n<unk>\nx\nx\n").is_err());
        assert!(Vocab::parse("<pad>\n<bos>\n<eos>\n<unk>\na b\n").is_err());
        assert!(Vocab::parse("<pad>\n<bos>\n<eos>\n<unk>\n").is_ok());
    }
}
