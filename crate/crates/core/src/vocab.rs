//! The 41-token phoneme vocabulary: `<unk>`, the word boundary `_`, and the
//! 39 ARPAbet phonemes without stress markers.

use std::fmt;
use std::str::FromStr;

pub const TOKENS: [&str; 41] = [
    "<unk>", "_", "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH", "IH",
    "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z",
    "ZH",
];

pub const VOCAB_SIZE: usize = TOKENS.len();

const VOWELS: [&str; 15] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW",
];

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
#[error("unknown phoneme token `{0}`")]
pub struct UnknownToken(pub String);

/// One vocabulary entry, stored as its index into [`TOKENS`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(u8);

pub type PhonemeSequence = Vec<Token>;

impl Token {
    pub const UNK: Token = Token(0);
    pub const BOUNDARY: Token = Token(1);

    pub fn from_index(i: usize) -> Option<Self> {
        (i < VOCAB_SIZE).then_some(Token(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_str(self) -> &'static str {
        TOKENS[self.index()]
    }

    /// True for the 39 phonemes, false for `<unk>` and `_`.
    pub fn is_phoneme(self) -> bool {
        self.0 >= 2
    }

    pub fn is_vowel(self) -> bool {
        VOWELS.contains(&self.as_str())
    }

    /// The 39 phonemes in vocabulary order.
    pub fn phonemes() -> impl Iterator<Item = Token> {
        (2..VOCAB_SIZE as u8).map(Token)
    }

    pub fn all() -> impl Iterator<Item = Token> {
        (0..VOCAB_SIZE as u8).map(Token)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Token {
    type Err = UnknownToken;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TOKENS
            .iter()
            .position(|t| *t == s)
            .map(|i| Token(i as u8))
            .ok_or_else(|| UnknownToken(s.to_string()))
    }
}

/// Parses whitespace-separated tokens.
pub fn parse_sequence(text: &str) -> Result<PhonemeSequence, UnknownToken> {
    text.split_whitespace().map(str::parse).collect()
}

pub fn format_sequence(seq: &[Token]) -> String {
    seq.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(" ")
}

/// Splits a sequence at `_` tokens. Empty groups (leading, trailing or
/// doubled boundaries) are dropped.
pub fn split_words(seq: &[Token]) -> Vec<&[Token]> {
    seq.split(|t| *t == Token::BOUNDARY).filter(|w| !w.is_empty()).collect()
}
