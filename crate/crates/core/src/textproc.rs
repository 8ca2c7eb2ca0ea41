//! Tokenization, partial-context extraction and per-option input assembly.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::McqItem;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const DEFAULT_MAX_LEN: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TextError {
    #[error("expected a {expected:?} token sequence, got {found:?}")]
    WrongSource {
        expected: SourceKind,
        found: SourceKind,
    },
    #[error("tau {0} outside [0, 100]")]
    TauOutOfRange(u32),
    #[error("item `{item}`: option index {index} out of range for {n} options")]
    OptionIndex {
        item: String,
        index: usize,
        n: usize,
    },
    #[error("item `{item}`: question and option need {needed} tokens, max_len is {max_len}")]
    TooLong {
        item: String,
        needed: usize,
        max_len: usize,
    },
    #[error("unknown extract mode `{0}` (expected beginning, end or random_window)")]
    UnknownMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Context,
    Question,
    Option,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
    pub source_kind: SourceKind,
}

impl TokenSeq {
    pub fn new(tokens: Vec<String>, source_kind: SourceKind) -> Self {
        TokenSeq {
            tokens,
            source_kind,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Single-space join; re-tokenizing the result gives back the same tokens.
    pub fn to_text(&self) -> String {
        self.tokens.join(" ")
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'
                | '\u{2019}'
                | '\u{201C}'
                | '\u{201D}'
                | '\u{2026}'
                | '\u{2013}'
                | '\u{2014}'
        )
}

/// Whitespace split, then leading and trailing punctuation characters are
/// detached one token each. Case is preserved.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let lead = chars.iter().take_while(|c| is_punct(**c)).count();
        if lead == chars.len() {
            out.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let trail = chars.iter().rev().take_while(|c| is_punct(**c)).count();
        out.extend(chars[..lead].iter().map(|c| c.to_string()));
        out.push(chars[lead..chars.len() - trail].iter().collect());
        out.extend(chars[chars.len() - trail..].iter().map(|c| c.to_string()));
    }
    out
}

pub fn tokenize_as(text: &str, source_kind: SourceKind) -> TokenSeq {
    TokenSeq::new(tokenize(text), source_kind)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractMode {
    Beginning,
    End,
    RandomWindow,
}

impl ExtractMode {
    pub const ALL: [ExtractMode; 3] = [
        ExtractMode::Beginning,
        ExtractMode::RandomWindow,
        ExtractMode::End,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExtractMode::Beginning => "beginning",
            ExtractMode::End => "end",
            ExtractMode::RandomWindow => "random_window",
        }
    }
}

impl FromStr for ExtractMode {
    type Err = TextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "beginning" | "begin" | "start" => Ok(ExtractMode::Beginning),
            "end" => Ok(ExtractMode::End),
            "random_window" | "random" => Ok(ExtractMode::RandomWindow),
            other => Err(TextError::UnknownMode(other.to_string())),
        }
    }
}

/// Which contiguous τ% window of the context survives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExtractSpec {
    pub tau: u32,
    pub mode: ExtractMode,
    /// Only consulted by [`ExtractMode::RandomWindow`].
    pub seed: u64,
}

impl ExtractSpec {
    pub fn new(tau: u32, mode: ExtractMode, seed: u64) -> Result<Self, TextError> {
        if tau > 100 {
            return Err(TextError::TauOutOfRange(tau));
        }
        Ok(ExtractSpec { tau, mode, seed })
    }

    pub fn full() -> Self {
        ExtractSpec {
            tau: 100,
            mode: ExtractMode::Beginning,
            seed: 0,
        }
    }
}

/// Number of tokens kept out of `len` at `tau` percent, rounding half up.
pub fn window_len(tau: u32, len: usize) -> usize {
    (tau as usize * len + 50) / 100
}

/// Start offset of the random window for one item: uniform over `0..=max_start`,
/// seeded by `(seed, item_id)`.
pub fn random_window_start(seed: u64, item_id: &str, max_start: usize) -> usize {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(item_id.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(bytes));
    rng.random_range(0..=max_start)
}

/// Keeps `round(tau * L / 100)` contiguous context tokens.
pub fn extract_context(
    tokens: &TokenSeq,
    spec: &ExtractSpec,
    item_id: &str,
) -> Result<TokenSeq, TextError> {
    if tokens.source_kind != SourceKind::Context {
        return Err(TextError::WrongSource {
            expected: SourceKind::Context,
            found: tokens.source_kind,
        });
    }
    if spec.tau > 100 {
        return Err(TextError::TauOutOfRange(spec.tau));
    }
    let len = tokens.len();
    let k = window_len(spec.tau, len);
    let start = match spec.mode {
        ExtractMode::Beginning => 0,
        ExtractMode::End => len - k,
        ExtractMode::RandomWindow => random_window_start(spec.seed, item_id, len - k),
    };
    Ok(TokenSeq::new(
        tokens.tokens[start..start + k].to_vec(),
        SourceKind::Context,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Marker,
    Context,
    Question,
    Option,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssembledInput {
    pub tokens: Vec<String>,
    pub segment_map: Vec<Segment>,
}

impl AssembledInput {
    fn push(&mut self, tok: &str, seg: Segment) {
        self.tokens.push(tok.to_string());
        self.segment_map.push(seg);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Builds `[CLS] C [SEP] Q O_i [SEP]`, or `[CLS] Q O_i [SEP]` when the context
/// is absent or empty. Context tokens are dropped from the end to fit `max_len`;
/// question and option are never cut.
pub fn assemble_input(
    item: &McqItem,
    option_index: usize,
    context: Option<&TokenSeq>,
    max_len: usize,
) -> Result<AssembledInput, TextError> {
    let option = item
        .options
        .get(option_index)
        .ok_or_else(|| TextError::OptionIndex {
            item: item.id.clone(),
            index: option_index,
            n: item.options.len(),
        })?;
    let question = tokenize(&item.question);
    let option = tokenize(option);
    let needed = question.len() + option.len() + 3;
    if needed > max_len {
        return Err(TextError::TooLong {
            item: item.id.clone(),
            needed,
            max_len,
        });
    }
    let budget = max_len - needed;
    let mut out = AssembledInput {
        tokens: Vec::with_capacity(max_len.min(needed + context.map_or(0, TokenSeq::len))),
        segment_map: Vec::new(),
    };
    out.push(CLS, Segment::Marker);
    if let Some(ctx) = context.filter(|c| !c.is_empty()) {
        for tok in ctx.tokens.iter().take(budget) {
            out.push(tok, Segment::Context);
        }
        out.push(SEP, Segment::Marker);
    }
    for tok in &question {
        out.push(tok, Segment::Question);
    }
    for tok in &option {
        out.push(tok, Segment::Option);
    }
    out.push(SEP, Segment::Marker);
    Ok(out)
}

/// Context tokens as the scorer will see them: tokenized, cut to the length
/// budget left by the question and the longest option, then the τ extract.
pub fn prepare_context(
    item: &McqItem,
    extract: Option<&ExtractSpec>,
    max_len: usize,
) -> Result<TokenSeq, TextError> {
    let mut ctx = tokenize_as(&item.context, SourceKind::Context);
    let q = tokenize(&item.question).len();
    let longest = item
        .options
        .iter()
        .map(|o| tokenize(o).len())
        .max()
        .unwrap_or(0);
    let budget = max_len.saturating_sub(q + longest + 3);
    ctx.tokens.truncate(budget);
    match extract {
        Some(spec) => extract_context(&ctx, spec, &item.id),
        None => Ok(ctx),
    }
}
