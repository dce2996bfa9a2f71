//! Whitespace-and-punctuation tokenizer over a closed vocabulary.
//!
//! Text is split on whitespace; inside each chunk every ASCII punctuation
//! character in [`PUNCT`] becomes its own token, except the two-character
//! operators `==` and `!=`. Every resulting piece must be in the vocabulary.
//! Decoding joins tokens with single spaces, so `decode` is the canonical
//! form: `encode(decode(t)) == t` for every sequence without special ids, and
//! `decode(encode(s)) == s` whenever `s` is already canonical.

use std::collections::HashMap;
use std::sync::Arc;

use crate::data::{TokenId, TokenSeq};
use crate::error::{Error, Result};

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];

/// Characters that always form a token on their own.
pub const PUNCT: &str = "()[]{}:,.;=+-*/%<>!";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    inner: Arc<Vocab>,
}

#[derive(Debug, PartialEq, Eq)]
struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Tokenizer {
    /// Builds a tokenizer from surface words. Special tokens occupy ids 0..4;
    /// duplicates are ignored and the first occurrence fixes the id.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut list: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut ids: HashMap<String, TokenId> = list
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary word {w:?} is empty or contains whitespace"
                )));
            }
            if pieces(w).len() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary word {w:?} would be split by the tokenizer"
                )));
            }
            if !ids.contains_key(w) {
                ids.insert(w.to_string(), list.len() as TokenId);
                list.push(w.to_string());
            }
        }
        Ok(Tokenizer {
            inner: Arc::new(Vocab { words: list, ids }),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.inner.words.len()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.inner.ids.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.inner.words.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        let mut out = Vec::new();
        for piece in pieces(text) {
            match self.inner.ids.get(piece) {
                Some(&id) if !Self::is_special(id) => out.push(id),
                _ => {
                    return Err(Error::UnknownToken {
                        token: piece.to_string(),
                    })
                }
            }
        }
        Ok(TokenSeq::new(out))
    }

    /// Splits text into surface pieces without vocabulary lookup.
    pub fn split(text: &str) -> Vec<&str> {
        pieces(text)
    }

    pub fn decode(&self, seq: &TokenSeq) -> String {
        self.decode_ids(seq.as_slice())
    }

    pub fn decode_ids(&self, ids: &[TokenId]) -> String {
        let mut s = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            s.push_str(self.word(id).unwrap_or("<?>"));
        }
        s
    }

    /// Checks every id of `seq` against the vocabulary size.
    pub fn check(&self, seq: &TokenSeq) -> Result<()> {
        let vocab = self.vocab_size();
        match seq.iter().find(|&&t| t as usize >= vocab) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }
}

fn pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let bytes = chunk.as_bytes();
        let mut start = 0;
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i];
            if c.is_ascii() && PUNCT.as_bytes().contains(&c) {
                if start < i {
                    out.push(&chunk[start..i]);
                }
                let len = if (c == b'=' || c == b'!') && bytes.get(i + 1) == Some(&b'=') {
                    2
                } else {
                    1
                };
                out.push(&chunk[i..i + len]);
                i += len;
                start = i;
            } else {
                i += 1;
            }
        }
        if start < bytes.len() {
            out.push(&chunk[start..]);
        }
    }
    out
}
