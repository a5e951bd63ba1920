//! Text normalization and dictionary-based grapheme-to-phoneme conversion.

use crate::lexicon::Lexicon;
use crate::vocab::{PhonemeSequence, Token};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum TextError {
    /// Numbers, dates and currency amounts are not verbalized.
    #[error("text contains digits: {0:?}")]
    ContainsDigits(String),
}

/// Uppercases, keeps apostrophes, strips all other punctuation and splits
/// on whitespace.
pub fn normalize_text(raw: &str) -> Result<Vec<String>, TextError> {
    if raw.chars().any(|c| c.is_ascii_digit()) {
        return Err(TextError::ContainsDigits(raw.to_string()));
    }
    let cleaned: String = raw
        .chars()
        .filter(|c| c.is_alphabetic() || c.is_whitespace() || *c == '\'')
        .collect();
    Ok(cleaned.split_whitespace().map(str::to_uppercase).collect())
}

/// Primary pronunciations joined by `_`; a word missing from the lexicon
/// becomes a single `<unk>`.
pub fn g2p<S: AsRef<str>>(words: &[S], lexicon: &Lexicon) -> PhonemeSequence {
    let mut out = Vec::new();
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            out.push(Token::BOUNDARY);
        }
        match lexicon.primary(w.as_ref()) {
            Some(p) => out.extend_from_slice(p),
            None => out.push(Token::UNK),
        }
    }
    out
}
