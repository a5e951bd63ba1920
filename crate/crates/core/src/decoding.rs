//! Stage-1 CTC decoding and Stage-2 phoneme-to-sentence reconstruction.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::lexicon::Lexicon;
use crate::lm::{LmState, NGramLM, WordId};
use crate::model::ctc_token;
use crate::tensor::kernels::log_add;
use crate::tensor::Tensor;
use crate::vocab::{PhonemeSequence, Token, VOCAB_SIZE};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DecodeError {
    #[error("nothing to reconstruct: the input has no phonemes")]
    EmptyInput,
    #[error("the lexicon has no entries")]
    EmptyLexicon,
    #[error("invalid decoding parameters: {0}")]
    InvalidParams(String),
    #[error("expected log-probabilities of shape [T, C], got {0:?}")]
    Shape(Vec<usize>),
}

fn dims(logprobs: &Tensor) -> Result<(usize, usize), DecodeError> {
    match *logprobs.shape() {
        [t, c] if c > 0 => Ok((t, c)),
        _ => Err(DecodeError::Shape(logprobs.shape().to_vec())),
    }
}

fn columns_to_tokens(cols: &[usize]) -> PhonemeSequence {
    cols.iter().filter_map(|&c| ctc_token(c)).collect()
}

/// Per-frame argmax (first maximum on ties), repeats merged, blanks
/// (column 0) dropped.
pub fn ctc_greedy_columns(logprobs: &Tensor) -> Result<Vec<usize>, DecodeError> {
    let (t, _) = dims(logprobs)?;
    let path: Vec<usize> = (0..t).map(|r| crate::model::argmax(logprobs.row(r))).collect();
    Ok(crate::loss::collapse(&path))
}

/// [`ctc_greedy_columns`] over the 42 CTC classes.
pub fn ctc_greedy(logprobs: &Tensor) -> Result<PhonemeSequence, DecodeError> {
    Ok(columns_to_tokens(&ctc_greedy_columns(logprobs)?))
}

#[derive(Clone, Copy)]
struct PrefixMass {
    blank: f64,
    non_blank: f64,
}

impl PrefixMass {
    const ZERO: Self = Self {
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    };

    fn total(self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

fn by_score_then_prefix<K: Ord>(a: &(K, f64), b: &(K, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Prefix beam search over column labels, blank at column 0. Returns at
/// most `beam_width` prefixes with their total log-probability, best first
/// and lexicographic among equal scores. A width of 0 is treated as 1.
///
/// Width 1 is not greedy decoding in general, because a prefix collects
/// the mass of every path that collapses to it. It agrees with greedy
/// decoding whenever the greedy path alone carries more than half of the
/// probability.
pub fn ctc_prefix_beam_columns(logprobs: &Tensor, beam_width: usize) -> Result<Vec<(Vec<usize>, f64)>, DecodeError> {
    let (t_len, c_len) = dims(logprobs)?;
    let width = beam_width.max(1);
    let mut beam: Vec<(Vec<usize>, PrefixMass)> = vec![(
        Vec::new(),
        PrefixMass {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    )];
    for t in 0..t_len {
        let row = logprobs.row(t);
        let mut next: HashMap<Vec<usize>, PrefixMass> = HashMap::new();
        for (prefix, mass) in &beam {
            let total = mass.total();
            let stay = next.entry(prefix.clone()).or_insert(PrefixMass::ZERO);
            stay.blank = log_add(stay.blank, total + row[0]);
            for (c, &p) in row.iter().enumerate().skip(1) {
                let mut extended = prefix.clone();
                extended.push(c);
                if prefix.last() == Some(&c) {
                    // a repeat only extends the prefix across a blank
                    let e = next.entry(extended).or_insert(PrefixMass::ZERO);
                    e.non_blank = log_add(e.non_blank, mass.blank + p);
                    let s = next.entry(prefix.clone()).or_insert(PrefixMass::ZERO);
                    s.non_blank = log_add(s.non_blank, mass.non_blank + p);
                } else {
                    let e = next.entry(extended).or_insert(PrefixMass::ZERO);
                    e.non_blank = log_add(e.non_blank, total + p);
                }
            }
        }
        let mut ranked: Vec<(Vec<usize>, PrefixMass)> = next.into_iter().collect();
        ranked.sort_by(|a, b| by_score_then_prefix(&(&a.0, a.1.total()), &(&b.0, b.1.total())));
        ranked.truncate(width);
        beam = ranked;
        debug_assert!(c_len > 0);
    }
    Ok(beam.into_iter().map(|(p, m)| (p, m.total())).collect())
}

/// [`ctc_prefix_beam_columns`] over the 42 CTC classes.
pub fn ctc_prefix_beam(logprobs: &Tensor, beam_width: usize) -> Result<Vec<(PhonemeSequence, f64)>, DecodeError> {
    Ok(ctc_prefix_beam_columns(logprobs, beam_width)?
        .into_iter()
        .map(|(p, s)| (columns_to_tokens(&p), s))
        .collect())
}

/// Substitution cost override for one phoneme pair, in either direction.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Confusion {
    pub a: String,
    pub b: String,
    pub cost: f64,
}

/// Stage-2 scoring weights. Costs are log-penalties and must be `<= 0`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructParams {
    pub beam_width: usize,
    pub sub_cost: f64,
    pub ins_cost: f64,
    pub del_cost: f64,
    pub lm_weight: f64,
    pub word_bonus: f64,
    /// Added whenever a word boundary falls where the input had `_`.
    pub boundary_bonus: f64,
    pub confusions: Vec<Confusion>,
}

impl Default for ReconstructParams {
    fn default() -> Self {
        Self {
            beam_width: 8,
            sub_cost: -2.0,
            ins_cost: -2.5,
            del_cost: -2.5,
            lm_weight: 1.0,
            word_bonus: 0.5,
            boundary_bonus: 1.0,
            confusions: Vec::new(),
        }
    }
}

impl ReconstructParams {
    /// Adds a confusion entry of `cost` for every pair inside each group.
    pub fn with_group_confusions<S: AsRef<str>>(mut self, groups: &[Vec<S>], cost: f64) -> Self {
        for g in groups {
            for (i, a) in g.iter().enumerate() {
                for b in &g[i + 1..] {
                    self.confusions.push(Confusion {
                        a: a.as_ref().to_string(),
                        b: b.as_ref().to_string(),
                        cost,
                    });
                }
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        self.cost_table().map(|_| ())
    }

    fn cost_table(&self) -> Result<CostTable, DecodeError> {
        let bad = |m: String| Err(DecodeError::InvalidParams(m));
        if self.beam_width == 0 {
            return bad("beam_width must be at least 1".into());
        }
        for (name, v) in [("sub_cost", self.sub_cost), ("ins_cost", self.ins_cost), ("del_cost", self.del_cost)] {
            if !(v <= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite value <= 0, got {v}"));
            }
        }
        for (name, v) in [("lm_weight", self.lm_weight), ("word_bonus", self.word_bonus), ("boundary_bonus", self.boundary_bonus)] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        if self.lm_weight < 0.0 {
            return bad(format!("lm_weight must be >= 0, got {}", self.lm_weight));
        }
        let mut sub = [[self.sub_cost; VOCAB_SIZE]; VOCAB_SIZE];
        for (i, row) in sub.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        for c in &self.confusions {
            let parse = |s: &str| s.parse::<Token>().map_err(|e| DecodeError::InvalidParams(e.to_string()));
            let (a, b) = (parse(&c.a)?, parse(&c.b)?);
            if !(c.cost <= 0.0) || !c.cost.is_finite() {
                return bad(format!("confusion {}/{} cost must be <= 0, got {}", c.a, c.b, c.cost));
            }
            if a != b {
                sub[a.index()][b.index()] = c.cost;
                sub[b.index()][a.index()] = c.cost;
            }
        }
        Ok(CostTable {
            sub,
            ins: self.ins_cost,
            del: self.del_cost,
        })
    }
}

struct CostTable {
    sub: [[f64; VOCAB_SIZE]; VOCAB_SIZE],
    ins: f64,
    del: f64,
}

impl CostTable {
    /// Best alignment score of `pron` against every prefix of `observed`;
    /// entry `j` covers `observed[..j]`. An observed phoneme with no
    /// counterpart is an insertion, a pronunciation phoneme with none is a
    /// deletion.
    fn prefix_scores(&self, pron: &[Token], observed: &[Token]) -> Vec<f64> {
        let m = observed.len();
        let mut prev: Vec<f64> = (0..=m).map(|j| j as f64 * self.ins).collect();
        let mut cur = vec![0.0; m + 1];
        for (i, &p) in pron.iter().enumerate() {
            cur[0] = (i + 1) as f64 * self.del;
            for j in 1..=m {
                let diag = prev[j - 1] + self.sub[p.index()][observed[j - 1].index()];
                let del = prev[j] + self.del;
                let ins = cur[j - 1] + self.ins;
                cur[j] = diag.max(del).max(ins);
            }
            std::mem::swap(&mut prev, &mut cur);
        }
        prev
    }
}

/// Longest input span a pronunciation of `n` phonemes may cover.
pub fn max_span(n: usize) -> usize {
    2 * n + 2
}

/// A word sequence aligned to the input. Spans index the input with `_`
/// removed, and tile it left to right once the hypothesis is complete.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub words: Vec<String>,
    pub pronunciations: Vec<PhonemeSequence>,
    pub spans: Vec<(usize, usize)>,
    pub edit_penalty: f64,
    pub boundary_hits: usize,
    /// Includes the end-of-sentence term.
    pub lm_log_prob: f64,
    /// `edit_penalty + boundary_bonus * boundary_hits + lm_weight *
    /// lm_log_prob + word_bonus * words.len()`.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub sentence: Vec<String>,
    /// Best first, at most `beam_width` long.
    pub nbest: Vec<BeamHypothesis>,
}

struct Node {
    parent: Option<usize>,
    entry: usize,
    span: (usize, usize),
    edit: f64,
    hit: bool,
    lm: f64,
    score: f64,
    state: LmState,
}

struct Search<'a> {
    lexicon: &'a Lexicon,
    nodes: Vec<Node>,
}

impl Search<'_> {
    fn path(&self, mut i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        loop {
            let n = &self.nodes[i];
            match n.parent {
                Some(p) => {
                    out.push(i);
                    i = p;
                }
                None => break,
            }
        }
        out.reverse();
        out
    }

    fn key(&self, i: usize) -> (Vec<&str>, Vec<(usize, usize)>, Vec<usize>) {
        let path = self.path(i);
        (
            path.iter().map(|&j| self.lexicon.entries()[self.nodes[j].entry].word.as_str()).collect(),
            path.iter().map(|&j| self.nodes[j].span).collect(),
            path.iter().map(|&j| self.nodes[j].entry).collect(),
        )
    }

    /// Higher score first, then lexicographic word sequence, then spans and
    /// entry order so the ranking is total.
    fn rank(&self, a: usize, sa: f64, b: usize, sb: f64) -> Ordering {
        sb.total_cmp(&sa).then_with(|| {
            if a == b {
                Ordering::Equal
            } else {
                self.key(a).cmp(&self.key(b))
            }
        })
    }

    fn hypothesis(&self, i: usize, end_lm: f64, params: &ReconstructParams) -> BeamHypothesis {
        let path = self.path(i);
        let mut h = BeamHypothesis {
            words: Vec::with_capacity(path.len()),
            pronunciations: Vec::with_capacity(path.len()),
            spans: Vec::with_capacity(path.len()),
            edit_penalty: 0.0,
            boundary_hits: 0,
            lm_log_prob: end_lm,
            score: self.nodes[i].score + params.lm_weight * end_lm,
        };
        for &j in &path {
            let n = &self.nodes[j];
            let e = &self.lexicon.entries()[n.entry];
            h.words.push(e.word.clone());
            h.pronunciations.push(e.phonemes.clone());
            h.spans.push(n.span);
            h.edit_penalty += n.edit;
            h.boundary_hits += n.hit as usize;
            h.lm_log_prob += n.lm;
        }
        h
    }
}

/// Input phonemes without `_`, and which positions had a `_` right before
/// them. Leading and trailing boundaries carry no information.
fn split_hints(phonemes: &[Token]) -> (Vec<Token>, Vec<bool>) {
    let q: Vec<Token> = phonemes.iter().copied().filter(|&t| t != Token::BOUNDARY).collect();
    let mut hints = vec![false; q.len() + 1];
    let mut pos = 0;
    for &t in phonemes {
        if t == Token::BOUNDARY {
            if pos > 0 && pos < q.len() {
                hints[pos] = true;
            }
        } else {
            pos += 1;
        }
    }
    (q, hints)
}

/// Beam search over word sequences whose pronunciations align to
/// consecutive spans of the input. Hypotheses are grouped by how much input
/// they have consumed; within a group, those sharing a language-model state
/// are merged and the best `beam_width` are expanded.
pub fn reconstruct(
    phonemes: &[Token],
    lexicon: &Lexicon,
    lm: &NGramLM,
    params: &ReconstructParams,
) -> Result<Reconstruction, DecodeError> {
    let costs = params.cost_table()?;
    if lexicon.is_empty() {
        return Err(DecodeError::EmptyLexicon);
    }
    let (q, hints) = split_hints(phonemes);
    if q.is_empty() {
        return Err(DecodeError::EmptyInput);
    }
    let l = q.len();
    let lm_ids: Vec<WordId> = lexicon.entries().iter().map(|e| lm.word_id(&e.word)).collect();
    let mut search = Search {
        lexicon,
        nodes: vec![Node {
            parent: None,
            entry: usize::MAX,
            span: (0, 0),
            edit: 0.0,
            hit: false,
            lm: 0.0,
            score: 0.0,
            state: lm.begin(),
        }],
    };
    let mut stacks: Vec<HashMap<LmState, usize>> = vec![HashMap::new(); l + 1];
    stacks[0].insert(lm.begin(), 0);

    for pos in 0..l {
        let mut live: Vec<usize> = stacks[pos].values().copied().collect();
        if live.is_empty() {
            continue;
        }
        live.sort_by(|&a, &b| search.rank(a, search.nodes[a].score, b, search.nodes[b].score));
        live.truncate(params.beam_width);
        let hit = pos > 0 && hints[pos];
        let bonus = if hit { params.boundary_bonus } else { 0.0 };
        for (entry, e) in lexicon.entries().iter().enumerate() {
            let end = l.min(pos + max_span(e.phonemes.len()));
            let scores = costs.prefix_scores(&e.phonemes, &q[pos..end]);
            for &h in &live {
                let (lp, state) = lm.score(&search.nodes[h].state, lm_ids[entry]);
                let base = search.nodes[h].score + bonus + params.lm_weight * lp + params.word_bonus;
                for (len, &edit) in scores.iter().enumerate().skip(1) {
                    let score = base + edit;
                    let target = pos + len;
                    let new = search.nodes.len();
                    search.nodes.push(Node {
                        parent: Some(h),
                        entry,
                        span: (pos, target),
                        edit,
                        hit,
                        lm: lp,
                        score,
                        state: state.clone(),
                    });
                    let slot = stacks[target].entry(state.clone()).or_insert(new);
                    if *slot != new && search.rank(new, score, *slot, search.nodes[*slot].score) == Ordering::Less {
                        *slot = new;
                    }
                    if *slot != new {
                        search.nodes.pop();
                    }
                }
            }
        }
    }

    let mut finals: Vec<(usize, f64)> = stacks[l]
        .values()
        .map(|&i| {
            let end = lm.end_score(&search.nodes[i].state);
            (i, end)
        })
        .collect();
    let total = |(i, end): (usize, f64)| search.nodes[i].score + params.lm_weight * end;
    finals.sort_by(|&a, &b| search.rank(a.0, total(a), b.0, total(b)));
    finals.truncate(params.beam_width);
    let nbest: Vec<BeamHypothesis> = finals.iter().map(|&(i, end)| search.hypothesis(i, end, params)).collect();
    Ok(Reconstruction {
        sentence: nbest.first().map(|h| h.words.clone()).unwrap_or_default(),
        nbest,
    })
}

/// Recomputes a hypothesis score from scratch: edit penalties from its
/// spans and pronunciations, boundary hits from the input, and the
/// language-model term from its words.
pub fn score_hypothesis(
    h: &BeamHypothesis,
    phonemes: &[Token],
    lm: &NGramLM,
    params: &ReconstructParams,
) -> Result<f64, DecodeError> {
    let costs = params.cost_table()?;
    let (q, hints) = split_hints(phonemes);
    if h.words.len() != h.spans.len() || h.words.len() != h.pronunciations.len() {
        return Err(DecodeError::InvalidParams("hypothesis fields disagree in length".into()));
    }
    let mut pos = 0;
    let (mut edit, mut hits) = (0.0, 0usize);
    for (pron, &(a, b)) in h.pronunciations.iter().zip(&h.spans) {
        if a != pos || b <= a || b > q.len() {
            return Err(DecodeError::InvalidParams(format!("span {a}..{b} does not continue at {pos}")));
        }
        edit += *costs.prefix_scores(pron, &q[a..b]).last().unwrap();
        hits += (a > 0 && hints[a]) as usize;
        pos = b;
    }
    if pos != q.len() {
        return Err(DecodeError::InvalidParams("hypothesis does not cover the input".into()));
    }
    Ok(edit
        + params.boundary_bonus * hits as f64
        + params.lm_weight * lm.sentence_log_prob(&h.words)
        + params.word_bonus * h.words.len() as f64)
}
