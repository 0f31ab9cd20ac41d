//! Vocabulary construction, tokenisation and training-sequence assembly.
//!
//! Tokens are either single characters or whitespace-separated words. Ids
//! 0 and 1 are always PAD and UNK; the remaining ids are assigned by
//! descending frequency, ties broken by the lexicographic order of the unit.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SedError};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    #[default]
    Char,
    Word,
}

impl FromStr for TokenizerMode {
    type Err = SedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(Self::Char),
            "word" => Ok(Self::Word),
            other => Err(SedError::InvalidArgument(format!(
                "unknown tokenizer mode {other:?} (expected char or word)"
            ))),
        }
    }
}

/// A sequence of token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<usize>);

impl TokenSeq {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Errors on the first id outside `[0, vocab_size)`.
    pub fn check_range(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&id| id >= vocab_size) {
            Some(&id) => Err(SedError::TokenOutOfRange {
                id,
                vocab: vocab_size,
            }),
            None => Ok(()),
        }
    }
}

impl From<Vec<usize>> for TokenSeq {
    fn from(ids: Vec<usize>) -> Self {
        Self(ids)
    }
}

/// Immutable id ↔ unit tables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    mode: TokenizerMode,
    units: Vec<String>,
    index: HashMap<String, usize>,
}

fn split_units(text: &str, mode: TokenizerMode) -> Vec<&str> {
    match mode {
        TokenizerMode::Char => text
            .char_indices()
            .map(|(i, c)| &text[i..i + c.len_utf8()])
            .collect(),
        TokenizerMode::Word => text.split_whitespace().collect(),
    }
}

impl Vocab {
    /// Builds a vocabulary of at most `max_size` entries, PAD and UNK
    /// included.
    pub fn build(corpus: &str, max_size: usize, mode: TokenizerMode) -> Result<Self> {
        if max_size < 2 {
            return Err(SedError::InvalidArgument(format!(
                "vocabulary size {max_size} cannot hold PAD and UNK"
            )));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for unit in split_units(corpus, mode) {
            if unit != PAD_TOKEN && unit != UNK_TOKEN {
                *counts.entry(unit).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(SedError::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let units = [PAD_TOKEN, UNK_TOKEN]
            .into_iter()
            .chain(ranked.into_iter().map(|(u, _)| u))
            .take(max_size)
            .map(str::to_owned)
            .collect();
        Ok(Self::from_units(units, mode))
    }

    fn from_units(units: Vec<String>, mode: TokenizerMode) -> Self {
        let index = units
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), i))
            .collect();
        Self { mode, units, index }
    }

    pub fn size(&self) -> usize {
        self.units.len()
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn pad_id(&self) -> usize {
        PAD_ID
    }

    pub fn unk_id(&self) -> usize {
        UNK_ID
    }

    pub fn unit(&self, id: usize) -> Option<&str> {
        self.units.get(id).map(String::as_str)
    }

    pub fn id(&self, unit: &str) -> Option<usize> {
        self.index.get(unit).copied()
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    /// Unknown units map to UNK.
    pub fn encode(&self, text: &str) -> TokenSeq {
        TokenSeq(
            split_units(text, self.mode)
                .into_iter()
                .map(|u| self.id(u).unwrap_or(UNK_ID))
                .collect(),
        )
    }

    /// Ids outside the vocabulary render as UNK.
    pub fn decode(&self, seq: &[usize], strip_pads: bool) -> String {
        let parts = seq
            .iter()
            .filter(|&&id| !(strip_pads && id == PAD_ID))
            .map(|&id| self.unit(id).unwrap_or(UNK_TOKEN));
        match self.mode {
            TokenizerMode::Char => parts.collect(),
            TokenizerMode::Word => parts.collect::<Vec<_>>().join(" "),
        }
    }

    /// One unit per line, line index = id. Backslash, newline and carriage
    /// return are escaped so every unit fits on one line.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for u in &self.units {
            out.push_str(&escape_unit(u));
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(text: &str, mode: TokenizerMode) -> Result<Self> {
        let units: Vec<String> = text
            .split_terminator('\n')
            .map(unescape_unit)
            .collect::<Result<_>>()?;
        if units.len() < 2 || units[PAD_ID] != PAD_TOKEN || units[UNK_ID] != UNK_TOKEN {
            return Err(SedError::Format {
                what: "vocab file",
                detail: format!("lines 0 and 1 must be {PAD_TOKEN} and {UNK_TOKEN}"),
            });
        }
        let vocab = Self::from_units(units, mode);
        if vocab.index.len() != vocab.units.len() {
            return Err(SedError::Format {
                what: "vocab file",
                detail: "duplicate unit".into(),
            });
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| SedError::io(path, e))
    }

    pub fn load(path: &Path, mode: TokenizerMode) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SedError::io(path, e))?;
        Self::from_file_string(&text, mode)
    }
}

/// Escapes a string so it can be written on one line.
pub fn escape_unit(u: &str) -> String {
    let mut s = String::with_capacity(u.len());
    for c in u.chars() {
        match c {
            '\\' => s.push_str("\\\\"),
            '\n' => s.push_str("\\n"),
            '\r' => s.push_str("\\r"),
            c => s.push(c),
        }
    }
    s
}

fn unescape_unit(line: &str) -> Result<String> {
    let mut s = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            s.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => s.push('\\'),
            Some('n') => s.push('\n'),
            Some('r') => s.push('\r'),
            other => {
                return Err(SedError::Format {
                    what: "vocab file",
                    detail: format!("bad escape \\{other:?} in {line:?}"),
                })
            }
        }
    }
    Ok(s)
}

/// Reads a corpus file: UTF-8, one document per line. Documents are joined
/// with `\n`, so in character mode the newline is itself a token.
pub fn read_corpus(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| SedError::io(path, e))?;
    let joined = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .collect::<Vec<_>>()
        .join("\n");
    if joined.is_empty() {
        return Err(SedError::EmptyCorpus);
    }
    Ok(joined)
}

/// An endless token stream over an encoded corpus. Reaching the end wraps
/// back to the start.
#[derive(Clone, Debug)]
pub struct TokenStream {
    tokens: Vec<usize>,
    cursor: usize,
}

impl TokenStream {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(SedError::EmptyCorpus);
        }
        Ok(Self { tokens, cursor: 0 })
    }

    pub fn with_cursor(tokens: Vec<usize>, cursor: usize) -> Result<Self> {
        let mut s = Self::new(tokens)?;
        s.cursor = cursor % s.tokens.len();
        Ok(s)
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn next_token(&mut self) -> usize {
        let t = self.tokens[self.cursor];
        self.cursor = (self.cursor + 1) % self.tokens.len();
        t
    }
}

/// `len` tokens where each position is independently PAD with probability
/// `pad_rate` and otherwise the next stream token.
pub fn make_training_sequence<R: Rng + ?Sized>(
    stream: &mut TokenStream,
    len: usize,
    pad_rate: f64,
    rng: &mut R,
) -> Result<TokenSeq> {
    if !(0.0..1.0).contains(&pad_rate) {
        return Err(SedError::InvalidArgument(format!(
            "pad rate {pad_rate} outside [0, 1)"
        )));
    }
    let ids = (0..len)
        .map(|_| {
            if pad_rate > 0.0 && rng.random::<f64>() < pad_rate {
                PAD_ID
            } else {
                stream.next_token()
            }
        })
        .collect();
    Ok(TokenSeq(ids))
}
