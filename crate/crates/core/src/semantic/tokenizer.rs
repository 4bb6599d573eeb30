//! Word-level tokenizer. Words are lowercased alphanumeric runs, every other
//! non-space character is its own token, and `<...>` spans that name a known
//! special token are kept whole.
//!
//! Vocabulary files are JSON objects `{"tokens": [...]}`; a token's id is its
//! position in the array.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const IMAGE_TOKEN: &str = "<image>";
pub const SEM_TOKEN: &str = "<SEM_prompt>";

const BASE_SPECIALS: [&str; 5] = [PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN, IMAGE_TOKEN];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

fn is_special(tok: &str) -> bool {
    tok.len() > 2 && tok.starts_with('<') && tok.ends_with('>')
}

fn pieces(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '<' {
            let close = chars[i..].iter().position(|&d| d == '>' || d.is_whitespace());
            match close {
                Some(j) if chars[i + j] == '>' && j > 1 => {
                    out.push(chars[i..=i + j].iter().collect());
                    i += j + 1;
                }
                _ => {
                    out.push("<".into());
                    i += 1;
                }
            }
        } else if c.is_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            out.push(chars[start..i].iter().collect::<String>().to_lowercase());
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

impl Vocab {
    /// Base specials followed by every distinct piece of the corpus, sorted.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for text in corpus {
            for p in pieces(text) {
                if !is_special(&p) {
                    words.insert(p);
                }
            }
        }
        let tokens = BASE_SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_tokens(tokens).expect("built vocabulary has unique tokens")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::TokenExists(t.clone()));
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

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Appends a new token and returns its id.
    pub fn push(&mut self, token: &str) -> Result<u32> {
        if self.index.contains_key(token) {
            return Err(Error::TokenExists(token.to_string()));
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        Ok(id)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let unk = self.id(UNK_TOKEN).unwrap_or(0);
        pieces(text)
            .into_iter()
            .map(|p| self.id(&p).unwrap_or(unk))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("vocab serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            tokens: Vec<String>,
        }
        let f: File = serde_json::from_str(text).map_err(|e| Error::parse("vocabulary", e))?;
        Self::from_tokens(f.tokens)
    }
}

/// A vocabulary that carries the segmentation-request token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtendedTokenizer {
    vocab: Vocab,
    base_size: usize,
    sem_id: u32,
    image_id: u32,
    bos_id: u32,
    eos_id: u32,
}

impl ExtendedTokenizer {
    /// Appends `<SEM_prompt>` to a base vocabulary.
    pub fn extend(mut base: Vocab) -> Result<Self> {
        let base_size = base.len();
        base.push(SEM_TOKEN)?;
        Self::from_vocab(base, base_size)
    }

    /// Wraps an already extended vocabulary, e.g. one read back from a file.
    pub fn from_extended(vocab: Vocab) -> Result<Self> {
        let sem = vocab.id(SEM_TOKEN).ok_or(Error::MissingSpecialToken(SEM_TOKEN))?;
        Self::from_vocab(vocab, sem as usize)
    }

    fn from_vocab(vocab: Vocab, base_size: usize) -> Result<Self> {
        let need = |t: &'static str| vocab.id(t).ok_or(Error::MissingSpecialToken(t));
        Ok(Self {
            sem_id: need(SEM_TOKEN)?,
            image_id: need(IMAGE_TOKEN)?,
            bos_id: need(BOS_TOKEN)?,
            eos_id: need(EOS_TOKEN)?,
            base_size,
            vocab,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn sem_token_id(&self) -> u32 {
        self.sem_id
    }

    pub fn image_token_id(&self) -> u32 {
        self.image_id
    }

    pub fn bos_id(&self) -> u32 {
        self.bos_id
    }

    pub fn eos_id(&self) -> u32 {
        self.eos_id
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.vocab.encode(text)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        self.vocab.decode(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::build(["A spoon has a shallow, oval or round bowl.", "Sure, the segmentation result is"])
    }

    #[test]
    fn pieces_split_words_and_punctuation() {
        assert_eq!(pieces("Sure, the <image>. a<b"), vec!["sure", ",", "the", "<image>", ".", "a", "<", "b"]);
    }

    #[test]
    fn extension_appends_one_token() {
        let base = vocab();
        let v = base.len();
        let ext = ExtendedTokenizer::extend(base).unwrap();
        assert_eq!(ext.sem_token_id() as usize, v);
        assert_eq!(ext.len(), v + 1);
        assert_eq!(ext.decode(&[ext.sem_token_id()]), SEM_TOKEN);
        assert_eq!(ext.encode("is <SEM_prompt>").last(), Some(&ext.sem_token_id()));
    }

    #[test]
    fn extending_twice_fails() {
        let ext = ExtendedTokenizer::extend(vocab()).unwrap();
        assert!(matches!(
            ExtendedTokenizer::extend(ext.vocab().clone()),
            Err(Error::TokenExists(_))
        ));
    }

    #[test]
    fn base_vocab_lacks_sem_token() {
        assert!(matches!(
            ExtendedTokenizer::from_extended(vocab()),
            Err(Error::MissingSpecialToken(SEM_TOKEN))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ext = ExtendedTokenizer::extend(vocab()).unwrap();
        let p = dir.path().join("vocab.json");
        ext.vocab().save(&p).unwrap();
        let back = ExtendedTokenizer::from_extended(Vocab::load(&p).unwrap()).unwrap();
        assert_eq!(back, ext);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trips(ids in proptest::collection::vec(0u32..25, 0..40)) {
            let ext = ExtendedTokenizer::extend(vocab()).unwrap();
            let ids: Vec<u32> = ids.into_iter().map(|i| i % ext.len() as u32).collect();
            prop_assert_eq!(ext.encode(&ext.decode(&ids)), ids);
        }
    }
}
