use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const UNK: u32 = 2;
pub const CLS: u32 = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[MASK]", "[UNK]", "[CLS]"];
/// First id that is not a reserved token.
pub const FIRST_REGULAR: u32 = 4;

const CONTINUATION: &str = "##";
const MAX_WORD_CHARS: usize = 100;

/// 1,000-token toy vocabulary shipped with the crate.
pub const TOY_VOCAB: &str = include_str!("../../assets/vocab.txt");

/// Ordered token list with the reserved ids pinned at 0..4.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from regular tokens; reserved tokens are prepended
    /// unless the list already starts with them.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let given: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut all: Vec<String> = Vec::with_capacity(given.len() + 4);
        if !given.iter().take(4).map(String::as_str).eq(RESERVED) {
            all.extend(RESERVED.iter().map(|s| s.to_string()));
        }
        all.extend(given);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if i >= 4 && RESERVED.contains(&t.as_str()) {
                return Err(Error::invalid("vocab", format!("reserved token {t} at id {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid("vocab", format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    /// One token per line; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn toy() -> Self {
        Self::parse(TOY_VOCAB).expect("bundled vocabulary is valid")
    }

    /// Keeps the first `size` ids.
    pub fn truncated(&self, size: usize) -> Result<Self> {
        if size < 5 || size > self.len() {
            return Err(Error::invalid("vocab", format!("cannot truncate {} tokens to {size}", self.len())));
        }
        Self::from_tokens(self.tokens[..size].iter().cloned())
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

    /// Regular ids whose token can start a word (no continuation marker).
    pub fn word_ids(&self) -> Vec<u32> {
        (FIRST_REGULAR..self.len() as u32)
            .filter(|&i| !self.tokens[i as usize].starts_with(CONTINUATION))
            .collect()
    }

    /// Greedy longest-match sub-word segmentation of one lowercased word.
    /// Falls back to a single `[UNK]` when any position has no match.
    pub fn tokenize(&self, word: &str) -> Vec<u32> {
        let lower = word.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        if chars.is_empty() || chars.len() > MAX_WORD_CHARS {
            return vec![UNK];
        }
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let piece: String = chars[start..end].iter().collect();
                let key = if start == 0 { piece } else { format!("{CONTINUATION}{piece}") };
                if let Some(&id) = self.index.get(&key) {
                    if id >= FIRST_REGULAR {
                        found = Some(id);
                        break;
                    }
                }
                end -= 1;
            }
            match found {
                Some(id) => out.push(id),
                None => return vec![UNK],
            }
            start = end;
        }
        out
    }

    /// Joins sub-word ids back into a word, dropping continuation markers.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&i| self.token(i))
            .map(|t| t.strip_prefix(CONTINUATION).unwrap_or(t))
            .collect()
    }
}
