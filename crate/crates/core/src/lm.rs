//! Word n-gram language model: absolute discounting with backoff, stored
//! and exchanged in ARPA form. Log-probabilities are natural logs in memory
//! and base 10 on disk.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

pub const UNK_WORD: &str = "<unk>";
pub const BOS_WORD: &str = "<s>";
pub const EOS_WORD: &str = "</s>";

pub type WordId = u32;
pub const UNK_ID: WordId = 0;
pub const BOS_ID: WordId = 1;
pub const EOS_ID: WordId = 2;

/// What ARPA writers put down for the never-predicted `<s>`.
const ARPA_BOS_LOG10: f64 = -99.0;

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("cannot estimate a language model from an empty corpus")]
    EmptyCorpus,
    #[error("n-gram order must be at least 1, got {0}")]
    InvalidOrder(usize),
    #[error("discount must lie in (0, 1), got {0}")]
    InvalidDiscount(f64),
    #[error("ARPA line {line}: {msg}")]
    Arpa { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// History of at most `order - 1` word ids, oldest first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LmState(Vec<WordId>);

impl LmState {
    pub fn words(&self) -> &[WordId] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NGramLM {
    order: usize,
    vocab: Vec<String>,
    ids: HashMap<String, WordId>,
    /// `probs[k]` holds the (k+1)-grams.
    probs: Vec<HashMap<Vec<WordId>, f64>>,
    backoffs: HashMap<Vec<WordId>, f64>,
}

impl NGramLM {
    fn empty(order: usize) -> Self {
        let mut lm = Self {
            order,
            vocab: Vec::new(),
            ids: HashMap::new(),
            probs: vec![HashMap::new(); order],
            backoffs: HashMap::new(),
        };
        for w in [UNK_WORD, BOS_WORD, EOS_WORD] {
            lm.intern(w);
        }
        lm
    }

    fn intern(&mut self, w: &str) -> WordId {
        if let Some(&id) = self.ids.get(w) {
            return id;
        }
        let id = self.vocab.len() as WordId;
        self.vocab.push(w.to_string());
        self.ids.insert(w.to_string(), id);
        id
    }

    /// Each sentence is scored as `<s> w1 .. wm </s>`. A literal `<unk>` in
    /// the corpus counts toward the out-of-vocabulary entry.
    pub fn estimate<S: AsRef<str>>(sentences: &[Vec<S>], order: usize, discount: f64) -> Result<Self, LmError> {
        if order == 0 {
            return Err(LmError::InvalidOrder(order));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(LmError::InvalidDiscount(discount));
        }
        if sentences.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        let mut lm = Self::empty(order);
        let mut seqs = Vec::with_capacity(sentences.len());
        for s in sentences {
            let mut seq = vec![BOS_ID];
            seq.extend(s.iter().map(|w| lm.intern(w.as_ref())));
            seq.push(EOS_ID);
            seqs.push(seq);
        }

        // counts[k][gram] for (k+1)-grams ending on a predicted token
        let mut counts: Vec<BTreeMap<Vec<WordId>, u64>> = vec![BTreeMap::new(); order];
        for seq in &seqs {
            for i in 1..seq.len() {
                for k in 1..=order.min(i + 1) {
                    *counts[k - 1].entry(seq[i + 1 - k..=i].to_vec()).or_default() += 1;
                }
            }
        }

        let total: u64 = counts[0].values().sum();
        let n = total as f64;
        let mut unk_mass = 0.0;
        for (gram, &c) in &counts[0] {
            let p = (c as f64 - discount) / n;
            unk_mass += discount / n;
            lm.probs[0].insert(gram.clone(), p);
        }
        let unk = lm.probs[0].entry(vec![UNK_ID]).or_insert(0.0);
        *unk += unk_mass;
        for p in lm.probs[0].values_mut() {
            *p = p.ln();
        }

        for k in 1..order {
            let mut by_context: BTreeMap<&[WordId], Vec<(WordId, u64)>> = BTreeMap::new();
            for (gram, &c) in &counts[k] {
                by_context.entry(&gram[..k]).or_default().push((gram[k], c));
            }
            let mut level = HashMap::new();
            for (ctx, conts) in by_context {
                let ctotal: u64 = conts.iter().map(|c| c.1).sum();
                let ct = ctotal as f64;
                let lower: f64 = conts.iter().map(|&(w, _)| lm.log_prob(&ctx[1..], w).exp()).sum();
                let seen_disc: f64 = conts.iter().map(|&(_, c)| (c as f64 - discount) / ct).sum();
                let denom = 1.0 - lower;
                if denom > 1e-12 {
                    for &(w, c) in &conts {
                        level.insert(gram_of(ctx, w), ((c as f64 - discount) / ct).ln());
                    }
                    lm.backoffs.insert(ctx.to_vec(), ((1.0 - seen_disc) / denom).ln());
                } else {
                    // nothing left to back off to: keep the undiscounted estimates
                    for &(w, c) in &conts {
                        level.insert(gram_of(ctx, w), (c as f64 / ct).ln());
                    }
                }
            }
            lm.probs[k] = level;
        }
        Ok(lm)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Every known word including `<unk>`, `<s>` and `</s>`.
    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn contains(&self, word: &str) -> bool {
        self.ids.contains_key(word)
    }

    /// Out-of-vocabulary words map to `<unk>`.
    pub fn word_id(&self, word: &str) -> WordId {
        self.ids.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: WordId) -> &str {
        &self.vocab[id as usize]
    }

    /// `ln p(word | history)` by standard backoff. Only the last
    /// `order - 1` history entries matter.
    pub fn log_prob(&self, history: &[WordId], word: WordId) -> f64 {
        let word = if (word as usize) < self.vocab.len() && word != BOS_ID { word } else { UNK_ID };
        let keep = history.len().min(self.order - 1);
        let mut ctx = &history[history.len() - keep..];
        let mut acc = 0.0;
        loop {
            if let Some(p) = self.probs[ctx.len()].get(&gram_of(ctx, word)) {
                return acc + p;
            }
            if ctx.is_empty() {
                // only reachable for a word with no unigram, e.g. a model read
                // from a file without `<unk>`
                return f64::NEG_INFINITY;
            }
            acc += self.backoffs.get(ctx).copied().unwrap_or(0.0);
            ctx = &ctx[1..];
        }
    }

    pub fn begin(&self) -> LmState {
        let mut s = LmState(vec![BOS_ID]);
        s.0.truncate(self.order - 1);
        s
    }

    /// Log-probability of `word` after `state`, and the state that follows.
    pub fn score(&self, state: &LmState, word: WordId) -> (f64, LmState) {
        let lp = self.log_prob(&state.0, word);
        let mut next = state.0.clone();
        next.push(word);
        let drop = next.len().saturating_sub(self.order - 1);
        next.drain(..drop);
        (lp, LmState(next))
    }

    pub fn end_score(&self, state: &LmState) -> f64 {
        self.log_prob(&state.0, EOS_ID)
    }

    /// `ln p(w1 .. wm </s>)` given `<s>`.
    pub fn sentence_log_prob<S: AsRef<str>>(&self, words: &[S]) -> f64 {
        let mut state = self.begin();
        let mut total = 0.0;
        for w in words {
            let (lp, next) = self.score(&state, self.word_id(w.as_ref()));
            total += lp;
            state = next;
        }
        total + self.end_score(&state)
    }

    /// Probability mass over every predictable word (including `</s>` and
    /// `<unk>`) after `history`. One, up to rounding, for an estimated model.
    pub fn context_mass(&self, history: &[WordId]) -> f64 {
        (0..self.vocab.len() as WordId)
            .filter(|&w| w != BOS_ID)
            .map(|w| self.log_prob(history, w).exp())
            .sum()
    }

    pub fn to_arpa(&self) -> String {
        let ln10 = std::f64::consts::LN_10;
        let mut sections: Vec<Vec<(Vec<&str>, f64, Option<f64>)>> = Vec::with_capacity(self.order);
        for (k, level) in self.probs.iter().enumerate() {
            let mut rows: Vec<_> = level
                .iter()
                .map(|(g, &p)| {
                    let words: Vec<&str> = g.iter().map(|&w| self.word(w)).collect();
                    let bo = if k + 1 < self.order { self.backoffs.get(g).map(|b| b / ln10) } else { None };
                    (words, p / ln10, bo)
                })
                .collect();
            if k == 0 {
                let bo = if self.order > 1 { self.backoffs.get(&vec![BOS_ID]).map(|b| b / ln10) } else { None };
                rows.push((vec![BOS_WORD], ARPA_BOS_LOG10, bo));
            }
            rows.sort_by(|a, b| a.0.cmp(&b.0));
            sections.push(rows);
        }
        let mut out = String::from("\\data\\\n");
        for (k, rows) in sections.iter().enumerate() {
            let _ = writeln!(out, "ngram {}={}", k + 1, rows.len());
        }
        for (k, rows) in sections.iter().enumerate() {
            let _ = writeln!(out, "\n\\{}-grams:", k + 1);
            for (words, p, bo) in rows {
                let _ = match bo {
                    Some(b) => writeln!(out, "{p}\t{}\t{b}", words.join(" ")),
                    None => writeln!(out, "{p}\t{}", words.join(" ")),
                };
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn from_arpa(text: &str) -> Result<Self, LmError> {
        let ln10 = std::f64::consts::LN_10;
        let mut declared: Vec<usize> = Vec::new();
        let mut lm: Option<Self> = None;
        let mut section: Option<usize> = None;
        let mut in_data = false;
        let mut seen = vec![];
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| LmError::Arpa { line: i + 1, msg };
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if line == "\\data\\" {
                in_data = true;
                continue;
            }
            if line == "\\end\\" {
                break;
            }
            if let Some(rest) = line.strip_prefix('\\') {
                let k: usize = rest
                    .strip_suffix("-grams:")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| err(format!("unexpected section header `{line}`")))?;
                if k == 0 || k > declared.len() {
                    return Err(err(format!("section {k} not declared in \\data\\")));
                }
                in_data = false;
                section = Some(k);
                if lm.is_none() {
                    lm = Some(Self::empty(declared.len()));
                    seen = vec![0usize; declared.len()];
                }
                continue;
            }
            if in_data {
                let (k, c) = line
                    .strip_prefix("ngram ")
                    .and_then(|r| r.split_once('='))
                    .and_then(|(k, c)| Some((k.trim().parse::<usize>().ok()?, c.trim().parse::<usize>().ok()?)))
                    .ok_or_else(|| err(format!("expected `ngram k=count`, got `{line}`")))?;
                if k != declared.len() + 1 {
                    return Err(err(format!("ngram orders must be listed in sequence, got {k}")));
                }
                declared.push(c);
                continue;
            }
            let (Some(k), Some(model)) = (section, lm.as_mut()) else {
                return Err(err(format!("entry `{line}` outside any n-gram section")));
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != k + 1 && fields.len() != k + 2 {
                return Err(err(format!("expected {} or {} fields, got {}", k + 1, k + 2, fields.len())));
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number `{s}`")));
            let p = parse(fields[0])?;
            let gram: Vec<WordId> = fields[1..=k].iter().map(|w| model.intern(w)).collect();
            if fields.len() == k + 2 {
                model.backoffs.insert(gram.clone(), parse(fields[k + 1])? * ln10);
            }
            seen[k - 1] += 1;
            if k == 1 && gram[0] == BOS_ID {
                continue;
            }
            model.probs[k - 1].insert(gram, p * ln10);
        }
        let lm = lm.ok_or(LmError::Arpa {
            line: text.lines().count(),
            msg: "no n-gram sections".into(),
        })?;
        for (k, (&d, &s)) in declared.iter().zip(&seen).enumerate() {
            if d != s {
                return Err(LmError::Arpa {
                    line: text.lines().count(),
                    msg: format!("{}-grams: header declares {d}, found {s}", k + 1),
                });
            }
        }
        Ok(lm)
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        let text = std::fs::read_to_string(path).map_err(|source| LmError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_arpa(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), LmError> {
        std::fs::write(path, self.to_arpa()).map_err(|source| LmError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn gram_of(ctx: &[WordId], w: WordId) -> Vec<WordId> {
    let mut g = Vec::with_capacity(ctx.len() + 1);
    g.extend_from_slice(ctx);
    g.push(w);
    g
}
