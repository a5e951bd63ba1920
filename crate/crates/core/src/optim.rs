//! AdamW, the warmup-plus-cosine schedule, and frame-capped batching.

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OptimError {
    #[error("parameter {index}: shape {param:?} but gradient {grad:?}")]
    ShapeMismatch {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("{params} parameters but {grads} gradients")]
    CountMismatch { params: usize, grads: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("utterance {index} has {frames} frames, above the batch cap of {cap}")]
    UtteranceTooLong { index: usize, frames: usize, cap: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter and the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// `p -= lr * wd * p`, then the bias-corrected Adam update.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<(), OptimError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(OptimError::CountMismatch {
            params: params.len(),
            grads: grads.len(),
        });
    }
    for (index, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[index].shape() {
            return Err(OptimError::ShapeMismatch {
                index,
                param: p.shape().to_vec(),
                grad: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((p, &g), (m, v)) in it {
            *p *= decay;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Linear ramp from 0 to `lr_init` over `warmup_steps`, then cosine decay
/// to `lr_min` at `total_steps`.
pub fn cosine_warmup_lr(step: u64, total_steps: u64, warmup_steps: u64, lr_init: f64, lr_min: f64) -> Result<f64, OptimError> {
    if warmup_steps >= total_steps {
        return Err(OptimError::InvalidSchedule(format!(
            "warmup ({warmup_steps}) must be shorter than the run ({total_steps})"
        )));
    }
    if step > total_steps {
        return Err(OptimError::InvalidSchedule(format!("step {step} past the end ({total_steps})")));
    }
    if step < warmup_steps {
        return Ok(lr_init * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(lr_min + (lr_init - lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Greedy first-fit packing in order of descending length (stable, so equal
/// lengths keep their input order). Returns indices into `frames`.
pub fn make_batches(frames: &[usize], cap: usize) -> Result<Vec<Vec<usize>>, OptimError> {
    if let Some((index, &f)) = frames.iter().enumerate().find(|(_, &f)| f > cap) {
        return Err(OptimError::UtteranceTooLong { index, frames: f, cap });
    }
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.sort_by(|&a, &b| frames[b].cmp(&frames[a]));
    let mut batches: Vec<(usize, Vec<usize>)> = Vec::new();
    for i in order {
        match batches.iter_mut().find(|(used, _)| used + frames[i] <= cap) {
            Some((used, b)) => {
                *used += frames[i];
                b.push(i);
            }
            None => batches.push((frames[i], vec![i])),
        }
    }
    Ok(batches.into_iter().map(|(_, b)| b).collect())
}
