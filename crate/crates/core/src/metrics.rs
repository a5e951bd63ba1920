//! Word and phoneme error rates, `(S + D + I) / N`.

use crate::vocab::Token;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("error rate is undefined for an empty reference")]
pub struct EmptyReference;

/// Operation counts of one minimum-cost alignment with unit costs. Among
/// alignments of equal cost, the one with the most substitutions is used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditStats {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
}

impl EditStats {
    pub fn distance(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn rate(&self) -> Result<f64, EmptyReference> {
        if self.reference_len == 0 {
            return Err(EmptyReference);
        }
        Ok(self.distance() as f64 / self.reference_len as f64)
    }

    pub fn merge(&mut self, other: EditStats) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.reference_len += other.reference_len;
    }
}

impl std::iter::Sum for EditStats {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        let mut total = Self::default();
        iter.for_each(|s| total.merge(s));
        total
    }
}

/// Alignment of `hyp` against `reference`. Cells compare (distance,
/// insertions + deletions) lexicographically, so ties go to substitutions.
pub fn edit_stats<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditStats {
    #[derive(Clone, Copy)]
    struct Cell {
        s: usize,
        d: usize,
        i: usize,
    }
    impl Cell {
        fn key(self) -> (usize, usize) {
            (self.s + self.d + self.i, self.d + self.i)
        }
    }
    let m = hyp.len();
    let mut prev: Vec<Cell> = (0..=m).map(|j| Cell { s: 0, d: 0, i: j }).collect();
    let mut cur = prev.clone();
    for (r, rt) in reference.iter().enumerate() {
        cur[0] = Cell { s: 0, d: r + 1, i: 0 };
        for j in 1..=m {
            let diag = prev[j - 1];
            let diag = if *rt == hyp[j - 1] { diag } else { Cell { s: diag.s + 1, ..diag } };
            let del = Cell { d: prev[j].d + 1, ..prev[j] };
            let ins = Cell { i: cur[j - 1].i + 1, ..cur[j - 1] };
            cur[j] = [diag, del, ins].into_iter().min_by_key(|c| c.key()).unwrap();
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let c = prev[m];
    EditStats {
        substitutions: c.s,
        deletions: c.d,
        insertions: c.i,
        reference_len: reference.len(),
    }
}

pub fn wer<S: AsRef<str>>(reference: &[S], hyp: &[S]) -> Result<(EditStats, f64), EmptyReference> {
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = hyp.iter().map(AsRef::as_ref).collect();
    let stats = edit_stats(&r, &h);
    Ok((stats, stats.rate()?))
}

/// Phoneme error rate; `_` counts as a token.
pub fn per(reference: &[Token], hyp: &[Token]) -> Result<f64, EmptyReference> {
    edit_stats(reference, hyp).rate()
}
