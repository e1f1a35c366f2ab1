use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token ↔ id map. Ids 0..4 are reserved for PAD, BOS, EOS and UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Vocabulary { tokens, index }
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vocabulary from a token stream, most frequent first (ties
    /// broken lexicographically). Tokens seen fewer than `min_count` times
    /// are left out.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_insert(0) += 1;
        }
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && !SPECIALS.contains(&t))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut v = Vocabulary::new();
        for (t, _) in entries {
            v.push(t);
        }
        v
    }

    fn push(&mut self, token: &str) -> usize {
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of `token`, falling back to UNK.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Space-joined surface form, stopping at EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; line `n` (0-based) holds id `n + 4`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[SPECIALS.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut v = Vocabulary::new();
        for (line, tok) in text.lines().enumerate() {
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    line: line + 1,
                    msg: format!("invalid vocabulary token {tok:?}"),
                });
            }
            if v.index.contains_key(tok) {
                return Err(Error::Parse {
                    line: line + 1,
                    msg: format!("duplicate or reserved token {tok:?}"),
                });
            }
            v.push(tok);
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reserved_ids() {
        let v = Vocabulary::build(["b", "a", "b", "<s>"], 1);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("b"), 4);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("<s>"), BOS);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.decode(&[BOS, 4, 5, EOS, 4]), "b a");
    }

    #[test]
    fn file_format() {
        let v = Vocabulary::build(["x", "y", "y"], 1);
        let text = v.to_file_string();
        assert_eq!(text, "y\nx\n");
        assert_eq!(Vocabulary::from_file_string(&text).unwrap(), v);
        assert!(Vocabulary::from_file_string("a\na\n").is_err());
        assert!(Vocabulary::from_file_string("<pad>\n").is_err());
    }

    #[test]
    fn min_count_filters() {
        let v = Vocabulary::build(["a", "b", "b"], 2);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), UNK);
    }

    proptest! {
        #[test]
        fn mapping_is_total_and_invertible(words in prop::collection::vec("[a-z]{1,5}", 1..30), probe in "[a-z]{1,6}") {
            let v = Vocabulary::build(words.iter().map(String::as_str), 1);
            prop_assert!(v.id(&probe) < v.len());
            for id in 4..v.len() {
                prop_assert_eq!(v.id(v.token(id).unwrap()), id);
            }
        }
    }
}
