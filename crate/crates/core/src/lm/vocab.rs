use std::collections::HashMap;
use std::fmt;
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const REASON_START: &str = "<reason>";
/// Desk-scale stand-in for an opening `\boxed{`.
pub const BOX_OPEN: &str = "<box>";

pub const SPECIALS: [&str; 4] = [BOS, EOS, REASON_START, BOX_OPEN];

/// A sequence of token ids into some [`Vocabulary`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        TokenSequence(ids)
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }
}

impl Deref for TokenSequence {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(ids: Vec<usize>) -> Self {
        TokenSequence(ids)
    }
}

/// Word-level vocabulary. Special markers are always members.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    bos: usize,
    eos: usize,
    reason_start: usize,
    box_open: usize,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidVocabulary(format!(
                    "token {i} ({t:?}) is empty or contains whitespace"
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidVocabulary(format!("duplicate token `{t}`")));
            }
        }
        let special = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::InvalidVocabulary(format!("missing special marker `{name}`")))
        };
        let (bos, eos, reason_start, box_open) =
            (special(BOS)?, special(EOS)?, special(REASON_START)?, special(BOX_OPEN)?);
        Ok(Vocabulary {
            tokens,
            index,
            bos,
            eos,
            reason_start,
            box_open,
        })
    }

    /// Builds a vocabulary with the special markers first, then `words`.
    pub fn with_specials<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(Into::into))
            .collect();
        Vocabulary::new(tokens)
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

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn bos(&self) -> usize {
        self.bos
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn reason_start(&self) -> usize {
        self.reason_start
    }

    pub fn box_open(&self) -> usize {
        self.box_open
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.bos || id == self.eos || id == self.reason_start || id == self.box_open
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        text.split_whitespace()
            .map(|unit| self.id(unit).ok_or_else(|| Error::UnknownToken(unit.to_string())))
            .collect::<Result<Vec<_>>>()
            .map(TokenSequence)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&id| {
                self.token(id).ok_or(Error::IndexOutOfRange {
                    id,
                    size: self.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    pub fn check(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.len()) {
            Some(&id) => Err(Error::IndexOutOfRange {
                id,
                size: self.len(),
            }),
            None => Ok(()),
        }
    }

    /// Reads the one-token-per-line format. The first lines must be the
    /// special markers in their canonical order.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::UnreadablePath {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = crate::data::strip_text_stamp(text)
            .lines().filter(|l| !l.is_empty()).map(str::to_string).collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::InvalidVocabulary(format!(
                    "line {} must be the special marker `{s}`",
                    i + 1
                )));
            }
        }
        Vocabulary::new(tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // specials first, then the rest in id order
        let mut order: Vec<usize> = vec![self.bos, self.eos, self.reason_start, self.box_open];
        order.extend((0..self.len()).filter(|&i| !self.is_special(i)));
        for id in order {
            writeln!(f, "{}", self.tokens[id])?;
        }
        Ok(())
    }
}
