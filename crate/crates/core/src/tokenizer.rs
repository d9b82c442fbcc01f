//! Word-level vocabulary with BERT-style special tokens.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::CorpusStore;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIALS: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Token-id sequence for one sentence.
pub type TokenSeq = Vec<u32>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_ascii() && !c.is_alphanumeric() && !c.is_whitespace())
}

/// Lowercases, splits on whitespace, and makes every punctuation character
/// its own token.
pub fn pre_tokenize(sentence: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in sentence.split_whitespace() {
        let mut cur = String::new();
        for c in word.chars() {
            if is_punct(c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_lowercase().collect());
            } else {
                cur.extend(c.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

impl Vocab {
    /// Vocabulary from an explicit non-special token list.
    pub fn from_tokens<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::format("vocab", format!("token {t:?} at id {i} is empty or has whitespace")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::format("vocab", format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
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
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, sentence: &str) -> TokenSeq {
        pre_tokenize(sentence)
            .iter()
            .map(|t| match self.index.get(t.as_str()) {
                Some(&id) if id as usize >= NUM_SPECIALS => id,
                _ => UNK,
            })
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();
        if lines.len() < NUM_SPECIALS || lines[..NUM_SPECIALS] != SPECIAL_TOKENS {
            return Err(Error::format("vocab", format!("{} must start with the special tokens", path.display())));
        }
        Self::from_tokens(lines[NUM_SPECIALS..].iter().copied())
    }
}

/// Frequency vocabulary: the `max_size - 5` most frequent tokens, ties broken
/// lexicographically.
pub fn build_vocab(store: &CorpusStore, max_size: usize) -> Result<Vocab> {
    if max_size <= NUM_SPECIALS {
        return Err(Error::invalid(format!("vocab size must be >= {}, got {max_size}", NUM_SPECIALS + 1)));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for s in store.sentences() {
        for t in pre_tokenize(s) {
            *counts.entry(t).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - NUM_SPECIALS);
    Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store(text: &str) -> CorpusStore {
        CorpusStore::from_documents(crate::corpus::parse_documents(text)).unwrap()
    }

    fn words(v: &Vocab) -> Vec<&str> {
        v.tokens()[NUM_SPECIALS..].iter().map(String::as_str).collect()
    }

    #[test]
    fn frequency_order() {
        let v = build_vocab(&store("a a b"), 7).unwrap();
        assert_eq!(v.tokens()[..NUM_SPECIALS], SPECIAL_TOKENS);
        assert_eq!(words(&v), vec!["a", "b"]);
    }

    #[test]
    fn lexical_tie_break() {
        let v = build_vocab(&store("b a"), 7).unwrap();
        assert_eq!(words(&v), vec!["a", "b"]);
    }

    #[test]
    fn size_cap_and_unk() {
        // t00 appears 100 times, t01 99 times, ... t99 once.
        let mut text = String::new();
        for i in 0..100 {
            for _ in 0..(100 - i) {
                text.push_str(&format!("t{i:02} "));
            }
            text.push('\n');
        }
        let v = build_vocab(&store(&text), 15).unwrap();
        assert_eq!(v.len(), 15);
        let expected: Vec<String> = (0..10).map(|i| format!("t{i:02}")).collect();
        assert_eq!(words(&v), expected);
        assert_eq!(v.encode("t09 t10 t99"), vec![14, UNK, UNK]);
    }

    #[test]
    fn encode_rules() {
        let v = Vocab::from_tokens(["a", "b", ",", "."]).unwrap();
        let a = v.id("a").unwrap();
        assert_eq!(v.encode("A a"), vec![a, a]);
        assert_eq!(v.encode("xyzzy"), vec![UNK]);
        assert_eq!(
            v.encode("a, b."),
            vec![a, v.id(",").unwrap(), v.id("b").unwrap(), v.id(".").unwrap()]
        );
        // Literal special spellings are split like any other text.
        assert!(!v.encode("[CLS] [MASK]").iter().any(|&t| t == CLS || t == MASK));
    }

    #[test]
    fn too_small() {
        assert!(build_vocab(&store("a"), 5).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = build_vocab(&store("x y, z.\nx"), 50).unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }

    proptest! {
        #[test]
        fn concat_on_whitespace(a in "[a-d ,.!]{0,12}", b in "[a-d ,.!]{0,12}") {
            let v = Vocab::from_tokens(["a", "b", "c", ",", "."]).unwrap();
            let joined = format!("{a} {b}");
            let mut expect = v.encode(&a);
            expect.extend(v.encode(&b));
            prop_assert_eq!(v.encode(&joined), expect);
        }

        #[test]
        fn never_emits_structural_specials(s in "\\PC{0,40}") {
            let v = Vocab::from_tokens(["a", "[", "]", "pad", "cls"]).unwrap();
            for id in v.encode(&s) {
                prop_assert!(id == UNK || id as usize >= NUM_SPECIALS);
                prop_assert!((id as usize) < v.len());
            }
        }
    }
}
