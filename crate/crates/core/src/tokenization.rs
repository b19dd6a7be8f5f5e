//! Vocabulary, tokenizers and the template-aware encoder.
//!
//! Each wrapped segment is tokenized on its own and every token keeps the
//! flags of the segment it came from. Truncation only ever removes tokens
//! flagged shortenable, so template text, masks and soft placeholders
//! survive any `max_len` that can hold them.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wrapping::WrappedSequence;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const CONTINUATION_PREFIX: &str = "##";

/// Words longer than this (in chars) map straight to `[UNK]`.
pub const MAX_WORDPIECE_CHARS: usize = 100;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot read vocab file: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocab line {line} is empty")]
    EmptyToken { line: usize },
    #[error("token {token:?} appears twice (lines {first} and {second})")]
    DuplicateToken {
        token: String,
        first: usize,
        second: usize,
    },
    #[error("vocab is missing special token {0}")]
    MissingSpecialToken(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub mask: u32,
    pub cls: u32,
    pub sep: u32,
}

/// Token list where the line order defines ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(TokenizerError::EmptyToken { line: i + 1 });
            }
            if let Some(prev) = index.insert(tok.clone(), i as u32) {
                return Err(TokenizerError::DuplicateToken {
                    token: tok.clone(),
                    first: prev as usize + 1,
                    second: i + 1,
                });
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// One token per line; a trailing newline is not a token.
    pub fn parse(content: &str) -> Result<Self, TokenizerError> {
        Self::from_tokens(
            content
                .lines()
                .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
                .collect(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Self::parse(&fs::read_to_string(path)?)
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

    fn special_ids(&self) -> Result<SpecialIds, TokenizerError> {
        let get = |t: &'static str| self.id(t).ok_or(TokenizerError::MissingSpecialToken(t));
        Ok(SpecialIds {
            pad: get(PAD)?,
            unk: get(UNK)?,
            mask: get(MASK)?,
            cls: get(CLS)?,
            sep: get(SEP)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Whitespace,
    #[default]
    WordPiece,
}

/// Immutable tokenizer; cheap to clone.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    kind: TokenizerKind,
    vocab: Arc<Vocab>,
    special: SpecialIds,
}

pub fn build_tokenizer(kind: TokenizerKind, vocab: Vocab) -> Result<Tokenizer, TokenizerError> {
    let special = vocab.special_ids()?;
    Ok(Tokenizer {
        kind,
        vocab: Arc::new(vocab),
        special,
    })
}

impl Tokenizer {
    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        self.tokenize_into(text, &mut out);
        out
    }

    pub fn tokenize_to_strings(&self, text: &str) -> Vec<&str> {
        self.tokenize(text)
            .into_iter()
            .map(|id| self.vocab.token(id).unwrap_or(UNK))
            .collect()
    }

    pub fn tokenize_into(&self, text: &str, out: &mut Vec<u32>) {
        match self.kind {
            TokenizerKind::Whitespace => {
                out.extend(
                    text.split_whitespace()
                        .map(|w| self.vocab.id(w).unwrap_or(self.special.unk)),
                );
            }
            TokenizerKind::WordPiece => {
                let mut buf = String::new();
                for word in split_words(text) {
                    self.wordpiece_into(word, &mut buf, out);
                }
            }
        }
    }

    /// Greedy longest-match over one pre-split word. A word with any
    /// unmatchable remainder becomes a single `[UNK]`.
    fn wordpiece_into(&self, word: &str, buf: &mut String, out: &mut Vec<u32>) {
        if word.chars().count() > MAX_WORDPIECE_CHARS {
            out.push(self.special.unk);
            return;
        }
        let mark = out.len();
        let mut start = 0;
        while start < word.len() {
            let mut end = word.len();
            let mut found = None;
            while end > start {
                buf.clear();
                if start > 0 {
                    buf.push_str(CONTINUATION_PREFIX);
                }
                buf.push_str(&word[start..end]);
                if let Some(id) = self.vocab.id(buf) {
                    found = Some(id);
                    break;
                }
                end = prev_boundary(word, end);
            }
            match found {
                Some(id) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.truncate(mark);
                    out.push(self.special.unk);
                    return;
                }
            }
        }
    }
}

fn prev_boundary(s: &str, mut idx: usize) -> usize {
    idx -= 1;
    while !s.is_char_boundary(idx) {
        idx -= 1;
    }
    idx
}

/// Whitespace split, with every ASCII punctuation char as its own word.
fn split_words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace().flat_map(|chunk| {
        let mut pieces = Vec::new();
        let mut start = 0;
        for (i, c) in chunk.char_indices() {
            if c.is_ascii_punctuation() {
                if i > start {
                    pieces.push(&chunk[start..i]);
                }
                pieces.push(&chunk[i..i + 1]);
                start = i + 1;
            }
        }
        if start < chunk.len() {
            pieces.push(&chunk[start..]);
        }
        pieces
    })
}

/// Where masked positions sit for the configured model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PlmKind {
    #[default]
    Mlm,
    Lm,
    Seq2Seq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodeOptions {
    pub max_len: usize,
    pub add_special_tokens: bool,
    pub plm: PlmKind,
}

impl EncodeOptions {
    pub fn new(max_len: usize) -> Self {
        EncodeOptions {
            max_len,
            add_special_tokens: true,
            plm: PlmKind::Mlm,
        }
    }

    pub fn with_special_tokens(mut self, add: bool) -> Self {
        self.add_special_tokens = add;
        self
    }

    pub fn with_plm(mut self, plm: PlmKind) -> Self {
        self.plm = plm;
        self
    }
}

/// A token id with the flags inherited from its segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignedToken {
    pub id: u32,
    pub shortenable: bool,
    pub loss: bool,
    pub soft_slot: Option<u32>,
}

impl AlignedToken {
    pub fn fixed(id: u32) -> Self {
        AlignedToken {
            id,
            shortenable: false,
            loss: false,
            soft_slot: None,
        }
    }

    pub fn shortenable(id: u32) -> Self {
        AlignedToken {
            shortenable: true,
            ..Self::fixed(id)
        }
    }
}

/// Drops shortenable tokens from the right end of the stream until it fits
/// `budget`. Non-shortenable tokens are never removed, so the result may
/// stay longer than `budget` if the caller did not check the precondition.
pub fn truncate(mut stream: Vec<AlignedToken>, budget: usize) -> Vec<AlignedToken> {
    let mut excess = stream.len().saturating_sub(budget);
    if excess == 0 {
        return stream;
    }
    let mut keep = vec![true; stream.len()];
    for (i, tok) in stream.iter().enumerate().rev() {
        if excess == 0 {
            break;
        }
        if tok.shortenable && !tok.loss && tok.soft_slot.is_none() {
            keep[i] = false;
            excess -= 1;
        }
    }
    let mut flags = keep.into_iter();
    stream.retain(|_| flags.next().unwrap());
    stream
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenizedInput {
    pub input_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub loss_ids: Vec<u8>,
    pub shortenable_ids: Vec<u8>,
    pub soft_slot_ids: Vec<i64>,
    pub mask_positions: Vec<usize>,
}

impl TokenizedInput {
    /// Number of non-padding positions.
    pub fn len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn padded_len(&self) -> usize {
        self.input_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("template needs {required} positions but max_len is {max_len}")]
    TemplateTooLong { required: usize, max_len: usize },
    #[error("{0:?} layout supports one generation slot after all other content")]
    MaskNotTrailing(PlmKind),
    #[error("generation slot has no preceding context")]
    EmptyContext,
}

/// Flags-aligned token stream for a wrapped sequence, before truncation.
/// For LM layouts the mask segment emits nothing; the returned flag says
/// whether a generation slot was requested.
pub fn segment_stream(
    seq: &WrappedSequence,
    tok: &Tokenizer,
    plm: PlmKind,
) -> Result<(Vec<AlignedToken>, bool), EncodeError> {
    let mask = tok.special.mask;
    let mut stream = Vec::new();
    let mut generation = false;
    let mut ids = Vec::new();
    for seg in &seq.segments {
        if generation && (seg.is_mask || seg.soft_slot.is_some() || !seg.text.trim().is_empty()) {
            return Err(EncodeError::MaskNotTrailing(plm));
        }
        if seg.is_mask {
            match plm {
                PlmKind::Mlm => stream.push(AlignedToken {
                    loss: true,
                    ..AlignedToken::fixed(mask)
                }),
                PlmKind::Lm | PlmKind::Seq2Seq => generation = true,
            }
        } else if let Some(slot) = seg.soft_slot {
            stream.push(AlignedToken {
                soft_slot: Some(slot),
                ..AlignedToken::fixed(mask)
            });
        } else {
            ids.clear();
            tok.tokenize_into(&seg.text, &mut ids);
            stream.extend(ids.iter().map(|&id| AlignedToken {
                shortenable: seg.shortenable,
                ..AlignedToken::fixed(id)
            }));
        }
    }
    Ok((stream, generation))
}

pub fn encode_wrapped(
    seq: &WrappedSequence,
    tok: &Tokenizer,
    opts: &EncodeOptions,
) -> Result<TokenizedInput, EncodeError> {
    let (stream, generation) = segment_stream(seq, tok, opts.plm)?;
    let specials = if opts.add_special_tokens { 2 } else { 0 };
    let fixed = stream.iter().filter(|t| !t.shortenable).count();
    if fixed + specials > opts.max_len {
        return Err(EncodeError::TemplateTooLong {
            required: fixed + specials,
            max_len: opts.max_len,
        });
    }
    let mut body = truncate(stream, opts.max_len - specials);

    let sp = tok.special;
    if opts.add_special_tokens {
        body.insert(0, AlignedToken::fixed(sp.cls));
    }
    if generation {
        let last = body.last_mut().ok_or(EncodeError::EmptyContext)?;
        last.loss = true;
    }
    if opts.add_special_tokens {
        body.push(AlignedToken::fixed(sp.sep));
    }

    let n = opts.max_len;
    let mut out = TokenizedInput {
        input_ids: Vec::with_capacity(n),
        attention_mask: Vec::with_capacity(n),
        loss_ids: Vec::with_capacity(n),
        shortenable_ids: Vec::with_capacity(n),
        soft_slot_ids: Vec::with_capacity(n),
        mask_positions: Vec::new(),
    };
    for (i, t) in body.iter().enumerate() {
        out.input_ids.push(t.id);
        out.attention_mask.push(1);
        out.loss_ids.push(t.loss as u8);
        out.shortenable_ids.push(t.shortenable as u8);
        out.soft_slot_ids.push(t.soft_slot.map_or(-1, i64::from));
        if t.loss {
            out.mask_positions.push(i);
        }
    }
    let pad = n - body.len();
    out.input_ids.extend(std::iter::repeat_n(sp.pad, pad));
    out.attention_mask.extend(std::iter::repeat_n(0, pad));
    out.loss_ids.extend(std::iter::repeat_n(0, pad));
    out.shortenable_ids.extend(std::iter::repeat_n(0, pad));
    out.soft_slot_ids.extend(std::iter::repeat_n(-1, pad));
    Ok(out)
}
