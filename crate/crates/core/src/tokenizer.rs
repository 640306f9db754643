//! Greedy longest-match subword tokenizer.
//!
//! Words are whitespace-delimited. Each word is split left to right into the
//! longest vocabulary pieces; every piece after the first carries the
//! continuation prefix (`##` by default). A word that cannot be covered
//! becomes a single UNK.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
const N_SPECIALS: usize = 4;

pub const DEFAULT_CONTINUATION_PREFIX: &str = "##";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary needs at least the four special entries, got {0}")]
    TooFewEntries(usize),
    #[error("vocabulary line {line}: empty entry")]
    EmptyEntry { line: usize },
    #[error("vocabulary line {line}: entry {entry:?} contains whitespace")]
    Whitespace { line: usize, entry: String },
    #[error("duplicate vocabulary entry {0:?}")]
    Duplicate(String),
    #[error("alphabet character {0:?} lacks its single-character piece {1:?}")]
    MissingAlphabetPiece(char, String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: TokenId, size: usize },
    #[error("keyword is empty")]
    EmptyKeyword,
}

/// An immutable subword vocabulary.
///
/// Ids 0..4 are PAD, UNK, BOS and EOS in that order. Every character that
/// occurs in a regular entry must be present both as a word-initial piece
/// and as a continuation piece, which makes tokenization total up to UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    entries: Vec<String>,
    index: HashMap<String, TokenId>,
    prefix: String,
    continuation: Vec<bool>,
    max_piece_chars: usize,
}

impl Vocab {
    pub fn new(entries: Vec<String>) -> Result<Self, TokenizerError> {
        Self::with_prefix(entries, DEFAULT_CONTINUATION_PREFIX)
    }

    pub fn with_prefix(entries: Vec<String>, prefix: &str) -> Result<Self, TokenizerError> {
        if entries.len() < N_SPECIALS {
            return Err(TokenizerError::TooFewEntries(entries.len()));
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.is_empty() {
                return Err(TokenizerError::EmptyEntry { line: i + 1 });
            }
            if e.chars().any(char::is_whitespace) {
                return Err(TokenizerError::Whitespace {
                    line: i + 1,
                    entry: e.clone(),
                });
            }
            if index.insert(e.clone(), i as TokenId).is_some() {
                return Err(TokenizerError::Duplicate(e.clone()));
            }
        }
        let continuation: Vec<bool> = entries
            .iter()
            .enumerate()
            .map(|(i, e)| i >= N_SPECIALS && !prefix.is_empty() && e.starts_with(prefix) && e.len() > prefix.len())
            .collect();

        let mut alphabet = BTreeSet::new();
        let mut max_piece_chars = 1;
        for (i, e) in entries.iter().enumerate().skip(N_SPECIALS) {
            let body = if continuation[i] { &e[prefix.len()..] } else { e.as_str() };
            max_piece_chars = max_piece_chars.max(body.chars().count());
            alphabet.extend(body.chars());
        }
        for c in alphabet {
            let initial = c.to_string();
            let cont = format!("{prefix}{c}");
            for piece in [initial, cont] {
                if !index.get(&piece).is_some_and(|&id| id as usize >= N_SPECIALS) {
                    return Err(TokenizerError::MissingAlphabetPiece(c, piece));
                }
            }
        }
        Ok(Self {
            entries,
            index,
            prefix: prefix.to_string(),
            continuation,
            max_piece_chars,
        })
    }

    /// One subtoken per line; the first four lines are PAD, UNK, BOS, EOS.
    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let entries = text
            .lines()
            .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
            .collect();
        Self::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{e}");
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_text())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn continuation_prefix(&self) -> &str {
        &self.prefix
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.entries.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, piece: &str) -> Option<TokenId> {
        self.index.get(piece).copied()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < N_SPECIALS
    }

    pub fn is_continuation(&self, id: TokenId) -> bool {
        self.continuation.get(id as usize).copied().unwrap_or(false)
    }

    /// Per-id continuation flags, indexed by token id.
    pub fn continuation_mask(&self) -> &[bool] {
        &self.continuation
    }

    fn lookup_piece(&self, piece: &str) -> Option<TokenId> {
        self.index
            .get(piece)
            .copied()
            .filter(|&id| id as usize >= N_SPECIALS)
    }

    fn encode_word(&self, word: &str, out: &mut Vec<TokenId>) {
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        let n_chars = bounds.len() - 1;
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut key = String::new();
        while start < n_chars {
            let longest = (start + self.max_piece_chars).min(n_chars);
            let found = (start + 1..=longest).rev().find_map(|end| {
                let piece = &word[bounds[start]..bounds[end]];
                key.clear();
                if start > 0 {
                    key.push_str(&self.prefix);
                }
                key.push_str(piece);
                self.lookup_piece(&key).map(|id| (id, end))
            });
            match found {
                Some((id, end)) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(UNK);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// NFC-normalizes, splits on whitespace, and tokenizes each word.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let normalized: String = text.nfc().collect();
        let mut out = Vec::new();
        for word in normalized.split_whitespace() {
            self.encode_word(word, &mut out);
        }
        out
    }

    /// Joins pieces back into text. Specials are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            let entry = self.token(id).ok_or(TokenizerError::IdOutOfRange {
                id,
                size: self.len(),
            })?;
            if self.is_special(id) {
                continue;
            }
            if self.is_continuation(id) {
                out.push_str(&entry[self.prefix.len()..]);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(entry);
            }
        }
        Ok(out)
    }

    /// Keyword surfaces use the same decomposition as article text.
    pub fn keyword_to_subtokens(&self, keyword: &str) -> Result<Vec<TokenId>, TokenizerError> {
        if keyword.trim().is_empty() {
            return Err(TokenizerError::EmptyKeyword);
        }
        Ok(self.encode(keyword))
    }
}

/// Derives a vocabulary from raw texts: the four specials, every character
/// seen (in both piece forms), then the `top_k` most frequent multi-character
/// words (frequency descending, ties lexicographic).
pub fn build_vocab<'a, I>(texts: I, top_k: usize) -> Vocab
where
    I: IntoIterator<Item = &'a str>,
{
    let mut chars = BTreeSet::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for t in texts {
        let normalized: String = t.nfc().collect();
        for w in normalized.split_whitespace() {
            chars.extend(w.chars());
            if w.chars().nth(1).is_some() {
                *counts.entry(w.to_string()).or_default() += 1;
            }
        }
    }
    let mut entries: Vec<String> = ["[PAD]", "[UNK]", "[BOS]", "[EOS]"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut taken: BTreeSet<String> = entries.iter().cloned().collect();
    let mut push = |s: String, entries: &mut Vec<String>| {
        if taken.insert(s.clone()) {
            entries.push(s);
        }
    };
    for &c in &chars {
        push(c.to_string(), &mut entries);
    }
    for &c in &chars {
        push(format!("{DEFAULT_CONTINUATION_PREFIX}{c}"), &mut entries);
    }
    let mut words: Vec<(String, usize)> = counts.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    for (w, _) in words.into_iter().take(top_k) {
        push(w, &mut entries);
    }
    Vocab::new(entries).expect("derived vocabulary is closed over its alphabet")
}
