//! CTC and cross-entropy objectives and their weighted combination.
//!
//! CTC columns follow the model's output layout: column 0 is the blank and
//! column `c >= 1` is a label. Targets are given as column indices.

use crate::tensor::kernels::log_sum_exp;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Tolerance on `logsumexp` of each CTC input row.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

/// Largest frame count [`ctc_brute_force`] accepts.
pub const BRUTE_FORCE_MAX_FRAMES: usize = 10;
const BRUTE_FORCE_MAX_PATHS: f64 = 5e7;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{frames} frames cannot align a target that needs at least {required}")]
    InfeasibleTarget { frames: usize, required: usize },
    #[error("row {row} is not a log-distribution (logsumexp = {logsumexp})")]
    InvalidDistribution { row: usize, logsumexp: f64 },
    #[error("target symbol {symbol} is not a label column (vocabulary has {columns} columns)")]
    InvalidTarget { symbol: usize, columns: usize },
    #[error("brute force over {frames} frames and {columns} columns is too large")]
    TooLarge { frames: usize, columns: usize },
    #[error("{rows} logit rows for {targets} targets")]
    LengthMismatch { rows: usize, targets: usize },
    #[error("alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("label smoothing {0} outside [0, 1)")]
    SmoothingOutOfRange(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Weights of the joint objective `alpha * CE + (1 - alpha) * CTC`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridLossConfig {
    pub alpha: f64,
    pub label_smoothing: f64,
}

impl Default for HybridLossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            label_smoothing: 0.0,
        }
    }
}

impl HybridLossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::AlphaOutOfRange(self.alpha));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(LossError::SmoothingOutOfRange(self.label_smoothing));
        }
        Ok(())
    }
}

fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    let m = a.max(b).max(c);
    if m == f64::NEG_INFINITY {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp() + (c - m).exp()).ln()
    }
}

fn dims(logprobs: &Tensor) -> Result<(usize, usize), LossError> {
    match *logprobs.shape() {
        [t, v] => Ok((t, v)),
        _ => Err(TensorError::ShapeMismatch {
            op: "ctc",
            detail: format!("expected [T, V+1], got {:?}", logprobs.shape()),
        }
        .into()),
    }
}

/// Frames needed to emit `target`: one per label plus a blank between
/// each adjacent repeat.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_inputs(logprobs: &Tensor, target: &[usize]) -> Result<(usize, usize), LossError> {
    let (t, v) = dims(logprobs)?;
    if let Some(&symbol) = target.iter().find(|&&s| s == 0 || s >= v) {
        return Err(LossError::InvalidTarget { symbol, columns: v });
    }
    let required = ctc_min_frames(target);
    if t < required {
        return Err(LossError::InfeasibleTarget { frames: t, required });
    }
    Ok((t, v))
}

fn check_distribution(logprobs: &Tensor) -> Result<(), LossError> {
    let (t, _) = dims(logprobs)?;
    for row in 0..t {
        let lse = log_sum_exp(logprobs.row(row));
        if !(lse.abs() <= DISTRIBUTION_TOLERANCE) {
            return Err(LossError::InvalidDistribution { row, logsumexp: lse });
        }
    }
    Ok(())
}

/// `-log p(target | scores)` and its gradient with respect to every score.
///
/// Scores need not be normalized; the recursion is the usual one over the
/// blank-interleaved target `l'` of length `2L + 1`.
pub(crate) fn ctc_forward_backward(scores: &Tensor, target: &[usize]) -> Result<(f64, Vec<f64>), LossError> {
    let (t_len, v) = check_inputs(scores, target)?;
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s % 2 == 0 { 0 } else { target[s / 2] };
    // a skip from s-2 to s is allowed when l'_s is a label different from l'_{s-2}
    let can_skip = |s: usize| s % 2 == 1 && s >= 2 && label(s) != label(s - 2);
    let y = |t: usize, s: usize| scores.data()[t * v + label(s)];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = y(0, 0);
    if s_len > 1 {
        alpha[1] = y(0, 1);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let a = prev[s];
            let b = if s >= 1 { prev[s - 1] } else { ninf };
            let c = if can_skip(s) { prev[s - 2] } else { ninf };
            cur[s] = lse3(a, b, c) + y(t, s);
        }
    }

    let mut beta = vec![ninf; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = y(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = y(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let next = &next[..s_len];
        for s in 0..s_len {
            let a = next[s];
            let b = if s + 1 < s_len { next[s + 1] } else { ninf };
            let c = if s + 2 < s_len && can_skip(s + 2) { next[s + 2] } else { ninf };
            cur[s] = lse3(a, b, c) + y(t, s);
        }
    }

    let log_p = if s_len > 1 {
        lse2(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_p == ninf {
        return Ok((f64::INFINITY, vec![0.0; scores.len()]));
    }

    // d(-log p)/d y_t(k) = -sum_{s: l'_s = k} exp(alpha_t(s) + beta_t(s) - y_t(k) - log p)
    let mut grad = vec![0.0; scores.len()];
    for t in 0..t_len {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab > ninf {
                grad[t * v + label(s)] -= (ab - y(t, s) - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// CTC negative log-likelihood of `target` under `logprobs [T, V+1]`,
/// recorded on the tape so that gradients reach `logprobs`.
pub fn ctc_log_likelihood(tape: &mut Tape, logprobs: Var, target: &[usize]) -> Result<Var, LossError> {
    let lp = tape.value(logprobs);
    check_distribution(lp)?;
    let (loss, grad) = ctc_forward_backward(lp, target)?;
    Ok(tape.fused_scalar(logprobs, loss, grad)?)
}

/// Same loss as [`ctc_log_likelihood`] without a tape.
pub fn ctc_loss(logprobs: &Tensor, target: &[usize]) -> Result<f64, LossError> {
    check_distribution(logprobs)?;
    Ok(ctc_forward_backward(logprobs, target)?.0)
}

/// Reference CTC loss by enumerating every frame labelling.
pub fn ctc_brute_force(logprobs: &Tensor, target: &[usize]) -> Result<f64, LossError> {
    let (t, v) = dims(logprobs)?;
    if t > BRUTE_FORCE_MAX_FRAMES || (v as f64).powi(t as i32) > BRUTE_FORCE_MAX_PATHS {
        return Err(LossError::TooLarge { frames: t, columns: v });
    }
    check_inputs(logprobs, target)?;
    let mut path = vec![0usize; t];
    let mut terms = Vec::new();
    loop {
        if collapse(&path) == target {
            terms.push(path.iter().enumerate().map(|(i, &k)| logprobs.data()[i * v + k]).sum::<f64>());
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == t {
                return Ok(-log_sum_exp(&terms));
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Merges adjacent repeats, then drops blanks (column 0).
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != 0 {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Mean token cross-entropy of `logits [L, C]` against `targets`, with
/// uniform label smoothing: `(1 - s) * NLL + s * mean_c(-log p_c)`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var, LossError> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(LossError::SmoothingOutOfRange(smoothing));
    }
    let rows = match *tape.shape(logits) {
        [l, _] => l,
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("expected [L, C], got {:?}", tape.shape(logits)),
            }
            .into())
        }
    };
    if rows != targets.len() {
        return Err(LossError::LengthMismatch {
            rows,
            targets: targets.len(),
        });
    }
    let lp = tape.log_softmax(logits);
    let picked = tape.pick(lp, targets)?;
    let nll = tape.mean(picked);
    let nll = tape.scale(nll, -(1.0 - smoothing));
    if smoothing == 0.0 {
        return Ok(nll);
    }
    let uniform = tape.mean(lp);
    let uniform = tape.scale(uniform, -smoothing);
    Ok(tape.add(nll, uniform)?)
}

/// `alpha * ce + (1 - alpha) * ctc` on plain numbers.
pub fn hybrid_loss(ce: f64, ctc: f64, cfg: &HybridLossConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    Ok(cfg.alpha * ce + (1.0 - cfg.alpha) * ctc)
}

/// [`hybrid_loss`] on the tape.
pub fn hybrid_loss_var(tape: &mut Tape, ce: Var, ctc: Var, cfg: &HybridLossConfig) -> Result<Var, LossError> {
    cfg.validate()?;
    let a = tape.scale(ce, cfg.alpha);
    let b = tape.scale(ctc, 1.0 - cfg.alpha);
    Ok(tape.add(a, b)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::grad_check;

    fn log_softmax_rows(z: &Tensor) -> Tensor {
        let mut out = z.clone();
        let c = *z.shape().last().unwrap();
        for row in out.data_mut().chunks_mut(c) {
            let l = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= l);
        }
        out
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
        loop {
            let t = rng.random_range(1..=6);
            let v = rng.random_range(2..=5);
            let l = rng.random_range(0..=3);
            let target: Vec<usize> = (0..l).map(|_| rng.random_range(1..v)).collect();
            if ctc_min_frames(&target) <= t {
                let z = Tensor::uniform(&[t, v], 3.0, rng);
                return (log_softmax_rows(&z), target);
            }
        }
    }

    #[test]
    fn one_hot_single_frame_has_zero_loss() {
        let lp = Tensor::new(&[1, 3], vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0]).unwrap();
        assert_eq!(ctc_loss(&lp, &[2]).unwrap(), 0.0);
    }

    #[test]
    fn two_uniform_frames_have_three_alignments() {
        let lp = Tensor::full(&[2, 3], (1.0f64 / 3.0).ln());
        let expect = -(1.0f64 / 3.0).ln();
        assert!((ctc_loss(&lp, &[1]).unwrap() - expect).abs() < 1e-12);
        assert!((ctc_brute_force(&lp, &[1]).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let (lp, target) = random_instance(&mut rng);
            let fast = ctc_loss(&lp, &target).unwrap();
            let slow = ctc_brute_force(&lp, &target).unwrap();
            assert!((fast - slow).abs() <= 1e-9, "{target:?}: {fast} vs {slow}");
        }
    }

    #[test]
    fn input_validation() {
        let lp = Tensor::full(&[2, 3], (1.0f64 / 3.0).ln());
        assert_eq!(
            ctc_loss(&lp, &[1, 1]).unwrap_err(),
            LossError::InfeasibleTarget { frames: 2, required: 3 }
        );
        assert!(matches!(ctc_loss(&lp, &[0]), Err(LossError::InvalidTarget { .. })));
        assert!(matches!(ctc_loss(&lp, &[3]), Err(LossError::InvalidTarget { .. })));
        let bad = Tensor::full(&[2, 3], -1.0);
        assert!(matches!(ctc_loss(&bad, &[1]), Err(LossError::InvalidDistribution { row: 0, .. })));
        let long = Tensor::full(&[11, 2], 0.5f64.ln());
        assert!(matches!(ctc_brute_force(&long, &[1]), Err(LossError::TooLarge { .. })));
        // the empty target is all blanks
        let lp = log_softmax_rows(&Tensor::new(&[2, 2], vec![0.3, -0.2, 1.0, 0.1]).unwrap());
        let expect = -(lp.at(&[0, 0]) + lp.at(&[1, 0]));
        assert!((ctc_loss(&lp, &[]).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let (lp, target) = random_instance(&mut rng);
            // direct derivative with respect to the (unnormalized) scores
            let (_, grad) = ctc_forward_backward(&lp, &target).unwrap();
            let eps = 1e-5;
            for i in 0..lp.len() {
                let mut p = lp.clone();
                p.data_mut()[i] += eps;
                let plus = ctc_forward_backward(&p, &target).unwrap().0;
                p.data_mut()[i] -= 2.0 * eps;
                let minus = ctc_forward_backward(&p, &target).unwrap().0;
                let numeric = (plus - minus) / (2.0 * eps);
                assert!(crate::tensor::relative_error(grad[i], numeric) <= 1e-5);
            }
            // and through a log-softmax on the tape
            let z = Tensor::uniform(lp.shape(), 2.0, &mut rng);
            let tgt = target.clone();
            let r = grad_check(
                |t, v| {
                    let lp = t.log_softmax(v[0]);
                    ctc_log_likelihood(t, lp, &tgt).map_err(|e| match e {
                        LossError::Tensor(e) => e,
                        other => panic!("{other}"),
                    })
                },
                &[z],
                1e-4,
            )
            .unwrap();
            assert!(r.max_rel_err <= 1e-5, "{r:?}");
        }
    }

    #[test]
    fn unused_columns_can_be_permuted() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z = Tensor::uniform(&[5, 6], 2.0, &mut rng);
        let lp = log_softmax_rows(&z);
        let target = [2, 4];
        let mut swapped = lp.clone();
        for t in 0..5 {
            let row = &mut swapped.data_mut()[t * 6..(t + 1) * 6];
            row.swap(1, 5);
            row.swap(3, 1);
        }
        let a = ctc_loss(&lp, &target).unwrap();
        let b = ctc_loss(&swapped, &target).unwrap();
        assert!((a - b).abs() < 1e-13);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let big = tape.constant(Tensor::new(&[2, 3], vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0]).unwrap());
        let ce = cross_entropy(&mut tape, big, &[0, 2], 0.0).unwrap();
        assert!(tape.value(ce).item() < 1e-20);
        let flat = tape.constant(Tensor::zeros(&[4, 41]));
        let ce = cross_entropy(&mut tape, flat, &[0, 5, 9, 40], 0.0).unwrap();
        assert!((tape.value(ce).item() - 41f64.ln()).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&mut tape, flat, &[0], 0.0),
            Err(LossError::LengthMismatch { rows: 4, targets: 1 })
        ));
        assert!(cross_entropy(&mut tape, flat, &[0; 4], 1.0).is_err());
    }

    #[test]
    fn label_smoothing_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z = Tensor::uniform(&[3, 5], 2.0, &mut rng);
        let targets = [1, 4, 0];
        let s = 0.2;
        let lp = log_softmax_rows(&z);
        let mut direct = 0.0;
        for (i, &k) in targets.iter().enumerate() {
            let nll = -lp.at(&[i, k]);
            let uniform = -lp.row(i).iter().sum::<f64>() / 5.0;
            direct += (1.0 - s) * nll + s * uniform;
        }
        direct /= 3.0;
        let mut tape = Tape::new();
        let x = tape.constant(z);
        let ce = cross_entropy(&mut tape, x, &targets, s).unwrap();
        assert!((tape.value(ce).item() - direct).abs() < 1e-14);
    }

    #[test]
    fn hybrid_endpoints() {
        let cfg = |alpha| HybridLossConfig { alpha, label_smoothing: 0.0 };
        assert_eq!(hybrid_loss(2.0, 4.0, &cfg(0.5)).unwrap(), 3.0);
        assert_eq!(hybrid_loss(1.7, 9.3, &cfg(1.0)).unwrap(), 1.7);
        assert_eq!(hybrid_loss(1.7, 9.3, &cfg(0.0)).unwrap(), 9.3);
        assert_eq!(hybrid_loss(1.0, 1.0, &cfg(1.5)).unwrap_err(), LossError::AlphaOutOfRange(1.5));
        assert!(hybrid_loss(1.0, 1.0, &cfg(-0.1)).is_err());
        let mut tape = Tape::new();
        let ce = tape.constant(Tensor::scalar(2.0));
        let ctc = tape.constant(Tensor::scalar(4.0));
        let h = hybrid_loss_var(&mut tape, ce, ctc, &cfg(0.25)).unwrap();
        assert_eq!(tape.value(h).item(), 3.5);
    }

    proptest! {
        #[test]
        fn forward_backward_equals_enumeration(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (lp, target) = random_instance(&mut rng);
            let fast = ctc_loss(&lp, &target).unwrap();
            let slow = ctc_brute_force(&lp, &target).unwrap();
            prop_assert!((fast - slow).abs() <= 1e-9);
        }

        #[test]
        fn hybrid_is_affine_in_alpha(ce in 0.0f64..20.0, ctc in 0.0f64..20.0, alpha in 0.0f64..=1.0) {
            let cfg = HybridLossConfig { alpha, label_smoothing: 0.0 };
            let h = hybrid_loss(ce, ctc, &cfg).unwrap();
            prop_assert!((h - (ctc + alpha * (ce - ctc))).abs() <= 1e-12);
        }
    }
}
