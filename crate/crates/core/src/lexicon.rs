//! Pronunciation dictionary: one `WORD PH1 PH2 ...` entry per line.
//! A word may appear on several lines; the first line is its primary
//! pronunciation.

use std::collections::BTreeMap;
use std::path::Path;

use crate::vocab::{format_sequence, Token};

const LEXICON_V1: &str = include_str!("../data/lexicon_v1.txt");

#[derive(Debug, thiserror::Error)]
pub enum LexiconError {
    #[error("lexicon line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("reading lexicon {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub word: String,
    pub phonemes: Vec<Token>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: Vec<Entry>,
    by_word: BTreeMap<String, Vec<usize>>,
}

impl Lexicon {
    /// The starter lexicon bundled with the crate.
    pub fn shipped() -> Self {
        Self::parse(LEXICON_V1).expect("bundled lexicon is valid")
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Blank lines and `#` comments are ignored. Pronunciations may only
    /// use the 39 phonemes.
    pub fn parse(text: &str) -> Result<Self, LexiconError> {
        let mut lex = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| LexiconError::Parse { line: i + 1, msg };
            let mut fields = line.split_whitespace();
            let word = fields.next().unwrap_or_default().to_uppercase();
            let phonemes = fields
                .map(|f| match f.parse::<Token>() {
                    Ok(t) if t.is_phoneme() => Ok(t),
                    Ok(t) => Err(err(format!("`{t}` cannot appear in a pronunciation"))),
                    Err(e) => Err(err(e.to_string())),
                })
                .collect::<Result<Vec<_>, _>>()?;
            if phonemes.is_empty() {
                return Err(err(format!("`{word}` has no pronunciation")));
            }
            lex.push(Entry { word, phonemes });
        }
        Ok(lex)
    }

    pub fn from_entries(entries: impl IntoIterator<Item = Entry>) -> Self {
        let mut lex = Self::default();
        for e in entries {
            lex.push(e);
        }
        lex
    }

    fn push(&mut self, e: Entry) {
        self.by_word.entry(e.word.clone()).or_default().push(self.entries.len());
        self.entries.push(e);
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{} {}\n", e.word, format_sequence(&e.phonemes)))
            .collect()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.by_word.contains_key(word)
    }

    /// Distinct words in sorted order.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.by_word.keys().map(String::as_str)
    }

    pub fn pronunciations<'a>(&'a self, word: &str) -> impl Iterator<Item = &'a [Token]> + 'a {
        self.by_word
            .get(word)
            .into_iter()
            .flatten()
            .map(|&i| self.entries[i].phonemes.as_slice())
    }

    pub fn primary(&self, word: &str) -> Option<&[Token]> {
        self.pronunciations(word).next()
    }

    /// Entries for the listed words only, in the order given.
    pub fn subset<S: AsRef<str>>(&self, words: &[S]) -> Self {
        Self::from_entries(words.iter().flat_map(|w| {
            let w = w.as_ref();
            self.pronunciations(w).map(move |p| Entry {
                word: w.to_string(),
                phonemes: p.to_vec(),
            })
        }))
    }

    /// Words whose primary pronunciation no other word shares.
    pub fn unambiguous_words(&self) -> Vec<&str> {
        let mut count: BTreeMap<&[Token], usize> = BTreeMap::new();
        for w in self.words() {
            *count.entry(self.primary(w).unwrap()).or_default() += 1;
        }
        self.words().filter(|w| count[self.primary(w).unwrap()] == 1).collect()
    }
}
