//! Random phoneme corruption by substitution, deletion and insertion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::vocab::{PhonemeSequence, Token};

pub const MAX_ERROR_RATE: f64 = 0.5;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
#[error("error rate {0} outside [0, {MAX_ERROR_RATE}]")]
pub struct RateOutOfRange(pub f64);

/// What happened to one input sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentStats {
    /// Input tokens selected for corruption; equals the sum of the three
    /// operation counts.
    pub corrupted: usize,
    pub substituted: usize,
    pub deleted: usize,
    pub inserted: usize,
    pub input_len: usize,
}

impl AugmentStats {
    pub fn merge(&mut self, other: &AugmentStats) {
        self.corrupted += other.corrupted;
        self.substituted += other.substituted;
        self.deleted += other.deleted;
        self.inserted += other.inserted;
        self.input_len += other.input_len;
    }
}

/// Corrupts each token independently with probability `rate`.
///
/// A corrupted phoneme is, with equal odds, replaced by one of the other 38
/// phonemes, deleted, or kept and followed by a uniformly drawn phoneme.
/// `_` and `<unk>` are never substituted; they are either deleted or
/// followed by an inserted phoneme, so that insertions and deletions stay
/// balanced and the expected length is unchanged.
pub fn augment_phonemes(seq: &[Token], rate: f64, seed: u64) -> Result<(PhonemeSequence, AugmentStats), RateOutOfRange> {
    if !(0.0..=MAX_ERROR_RATE).contains(&rate) {
        return Err(RateOutOfRange(rate));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(seq.len() + seq.len() / 8);
    let mut stats = AugmentStats {
        input_len: seq.len(),
        ..Default::default()
    };
    let random_phoneme = |rng: &mut ChaCha8Rng| Token::from_index(rng.random_range(2..41)).unwrap();
    for &tok in seq {
        if rate == 0.0 || rng.random::<f64>() >= rate {
            out.push(tok);
            continue;
        }
        stats.corrupted += 1;
        let op = if tok.is_phoneme() {
            rng.random_range(0..3)
        } else {
            rng.random_range(1..3)
        };
        match op {
            0 => {
                // index among the 38 others, skipping the current token
                let mut i = rng.random_range(2..40);
                if i >= tok.index() {
                    i += 1;
                }
                out.push(Token::from_index(i).unwrap());
                stats.substituted += 1;
            }
            1 => stats.deleted += 1,
            _ => {
                out.push(tok);
                out.push(random_phoneme(&mut rng));
                stats.inserted += 1;
            }
        }
    }
    Ok((out, stats))
}
