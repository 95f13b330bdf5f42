//! Closed word-level vocabulary over textualized streams.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::textualize::{special_lexicon, SequenceRecord, EOE, PAD, UNK};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const EOE_ID: TokenId = 1;
pub const UNK_ID: TokenId = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    n_reserved: usize,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, n_reserved: usize) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.contains('\n') || ids.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Validation(format!("bad or duplicate vocabulary token {t:?}")));
            }
        }
        if tokens.get(PAD_ID as usize).map(String::as_str) != Some(PAD)
            || tokens.get(EOE_ID as usize).map(String::as_str) != Some(EOE)
            || tokens.get(UNK_ID as usize).map(String::as_str) != Some(UNK)
        {
            return Err(Error::Validation("vocabulary must start with [PAD], [EOE], [UNK]".into()));
        }
        Ok(Vocabulary { tokens, ids, n_reserved })
    }

    /// Only the reserved lexicon.
    pub fn reserved_only() -> Self {
        let lex = special_lexicon();
        let n = lex.len();
        Self::from_tokens(lex, n).expect("lexicon is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_reserved(&self) -> usize {
        self.n_reserved
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.token(id).map(str::to_string).ok_or(Error::TokenOutOfRange {
                    id,
                    size: self.len(),
                })
            })
            .collect()
    }

    /// The on-disk form: one token per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let lex = special_lexicon();
        if tokens.len() < lex.len() || tokens[..lex.len()] != lex[..] {
            return Err(Error::Validation("vocabulary file does not start with the reserved lexicon".into()));
        }
        Self::from_tokens(tokens, lex.len())
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Reserved lexicon first, then corpus tokens by descending frequency with
/// lexicographic tie-break.
pub fn build_vocab<'a>(records: impl IntoIterator<Item = &'a SequenceRecord>) -> Vocabulary {
    let lex = special_lexicon();
    let n_reserved = lex.len();
    let reserved: std::collections::HashSet<&str> = lex.iter().map(String::as_str).collect();
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for r in records {
        for t in &r.tokens {
            if !reserved.contains(t.as_str()) {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let mut corpus: Vec<(&str, u64)> = counts.into_iter().collect();
    corpus.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens = lex.clone();
    tokens.extend(corpus.into_iter().map(|(t, _)| t.to_string()));
    Vocabulary::from_tokens(tokens, n_reserved).expect("corpus tokens are unique")
}
