use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::encoder::{CLS_ID, UNK_ID};
use crate::error::{Error, Result};

use super::Report;

pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];

/// Lower-cased words: runs of alphanumerics (plus `<`, `>`, `'`, so
/// placeholders such as `<date>` stay whole); every other non-space
/// character is a token of its own.
pub fn tokenize_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() || matches!(c, '<' | '>' | '\'') {
            cur.push(c);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Word-level vocabulary: the four special tokens, then words by descending
/// frequency (ties broken lexicographically).
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, v_max: usize) -> Result<Self> {
        if v_max < SPECIAL_TOKENS.len() {
            return Err(Error::config("vocab_size", "must be at least 4"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for t in texts {
            any = true;
            for w in tokenize_words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(
                ranked
                    .into_iter()
                    .map(|(w, _)| w)
                    .filter(|w| !SPECIAL_TOKENS.contains(&w.as_str())),
            )
            .take(v_max)
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    pub fn from_reports(reports: &[Report], v_max: usize) -> Result<Self> {
        Self::build(reports.iter().map(|r| r.text.as_str()), v_max)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `[CLS]` followed by word ids, truncated to `s_max` positions.
    pub fn encode(&self, text: &str, s_max: usize) -> Vec<u32> {
        std::iter::once(CLS_ID)
            .chain(tokenize_words(text).iter().map(|w| self.id(w)))
            .take(s_max)
            .collect()
    }

    pub fn encode_all(&self, reports: &[Report], s_max: usize) -> Vec<Vec<u32>> {
        reports.iter().map(|r| self.encode(&r.text, s_max)).collect()
    }

    /// One token per line, in id order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let tokens = r.lines().collect::<std::io::Result<Vec<_>>>()?;
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..4] != SPECIAL_TOKENS {
            return Err(Error::Parse(
                "vocabulary must start with the four special tokens".into(),
            ));
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation_and_keeps_placeholders() {
        assert_eq!(
            tokenize_words("Since <date>, 1. Stable hepatic-cyst."),
            ["since", "<date>", ",", "1", ".", "stable", "hepatic", "-", "cyst", "."]
        );
    }

    #[test]
    fn ids_follow_frequency_rank() {
        let v = Vocabulary::build(["b a a c", "a b"], 10).unwrap();
        assert_eq!(v.token(4), Some("a"));
        assert_eq!(v.token(5), Some("b"));
        assert_eq!(v.token(6), Some("c"));
        assert_eq!(v.encode("a zzz", 8), vec![CLS_ID, 4, UNK_ID]);
        let small = Vocabulary::build(["b a a c", "a b"], 5).unwrap();
        assert_eq!(small.len(), 5);
        assert_eq!(small.id("b"), UNK_ID);
    }

    #[test]
    fn roundtrip_and_errors() {
        let v = Vocabulary::build(["x y z"], 100).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        assert_eq!(Vocabulary::read_from(&buf[..]).unwrap(), v);
        assert!(matches!(
            Vocabulary::build(std::iter::empty::<&str>(), 10),
            Err(Error::EmptyCorpus)
        ));
        assert_eq!(v.encode("x y z", 2), vec![CLS_ID, v.id("x")]);
    }
}
