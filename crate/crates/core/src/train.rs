//! Stage-1 training: per-utterance tapes, batch-mean gradients, AdamW under
//! a warmup-plus-cosine schedule, and a per-epoch metrics line.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, TrainConfig};
use crate::decoding::ctc_greedy;
use crate::loss::{ctc_log_likelihood, cross_entropy, hybrid_loss_var, LossError};
use crate::metrics::{edit_stats, EditStats};
use crate::model::{ctc_column, teacher_forcing, ModelError, Stage1Model};
use crate::optim::{adamw_step, cosine_warmup_lr, make_batches, AdamState, OptimError};
use crate::synth::Utterance;
use crate::tensor::{Tape, Tensor, TensorError};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("utterance {id}: {source}")]
    Utterance {
        id: String,
        #[source]
        source: Box<TrainError>,
    },
    #[error("no training utterances")]
    EmptyDataset,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One line of the metrics log. Losses are means over the epoch's training
/// utterances; `per` is the corpus phoneme error rate of greedy CTC
/// decoding on the held-out set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub hybrid_loss: f64,
    pub ctc_loss: f64,
    pub ce_loss: f64,
    pub per: Option<f64>,
}

/// Loss values of one utterance: hybrid, CTC (per target token) and CE.
pub struct UtteranceLoss {
    pub hybrid: f64,
    pub ctc: f64,
    pub ce: f64,
    pub grads: Vec<Tensor>,
}

/// Forward and backward for one utterance.
pub fn utterance_loss(model: &Stage1Model, utt: &Utterance, cfg: &TrainConfig) -> Result<UtteranceLoss, TrainError> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true);
    let (input, output) = teacher_forcing(&utt.phonemes);
    let landmarks = model.config().use_landmarks.then_some(&utt.landmarks);
    let out = model.forward(&mut tape, &p, &utt.frames, landmarks, Some(&input))?;
    let target: Vec<usize> = utt.phonemes.iter().map(|&t| ctc_column(t)).collect();
    let ctc = ctc_log_likelihood(&mut tape, out.ctc_logprobs, &target)?;
    let ctc = tape.scale(ctc, 1.0 / target.len().max(1) as f64);
    let ce = cross_entropy(&mut tape, out.ce_logits.expect("prefix given"), &output, cfg.label_smoothing)?;
    let hybrid = hybrid_loss_var(&mut tape, ce, ctc, &cfg.loss())?;
    tape.backward(hybrid)?;
    Ok(UtteranceLoss {
        hybrid: tape.value(hybrid).item(),
        ctc: tape.value(ctc).item(),
        ce: tape.value(ce).item(),
        grads: model.params().collect_grads(&tape, &p),
    })
}

/// Corpus edit statistics of greedy CTC decoding.
pub fn evaluate(model: &Stage1Model, utterances: &[Utterance]) -> Result<EditStats, TrainError> {
    let mut total = EditStats::default();
    for u in utterances {
        let landmarks = model.config().use_landmarks.then_some(&u.landmarks);
        let lp = model.ctc_logprobs(&u.frames, landmarks)?;
        let hyp = ctc_greedy(&lp).expect("[T, 42] log-probabilities");
        total.merge(edit_stats(&u.phonemes, &hyp));
    }
    Ok(total)
}

/// Model, optimizer and progress: everything a checkpoint restores.
pub struct TrainState {
    pub model: Stage1Model,
    pub optimizer: AdamState,
    pub epoch: u32,
}

impl TrainState {
    pub fn new(model: Stage1Model) -> Self {
        let optimizer = AdamState::new(model.params().values());
        Self {
            model,
            optimizer,
            epoch: 0,
        }
    }

    pub fn from_checkpoint(mut model: Stage1Model, ck: &Checkpoint) -> Result<Self, TrainError> {
        ck.restore_into(&mut model)?;
        Ok(Self {
            model,
            optimizer: ck.optimizer.clone(),
            epoch: ck.epoch,
        })
    }

    pub fn checkpoint(&self, config_echo: String) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.optimizer, self.epoch, config_echo)
    }
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    train: &'a [Utterance],
    heldout: &'a [Utterance],
    batches: Vec<Vec<usize>>,
}

impl<'a> Trainer<'a> {
    /// Batches are packed once; each epoch visits them in an order drawn
    /// from `(seed, epoch)`.
    pub fn new(cfg: TrainConfig, train: &'a [Utterance], heldout: &'a [Utterance]) -> Result<Self, TrainError> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let frames: Vec<usize> = train.iter().map(Utterance::num_frames).collect();
        let batches = make_batches(&frames, cfg.frame_cap)?;
        Ok(Self {
            cfg,
            train,
            heldout,
            batches,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.batches.len()
    }

    fn total_steps(&self) -> u64 {
        (self.batches.len() * self.cfg.epochs) as u64
    }

    /// Trains one epoch starting from `state.epoch` and advances it.
    pub fn run_epoch(&self, state: &mut TrainState) -> Result<EpochMetrics, TrainError> {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..self.batches.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let adam = self.cfg.adamw();
        let warmup = (self.batches.len() * self.cfg.warmup_epochs) as u64;
        let (mut sum_h, mut sum_ctc, mut sum_ce) = (0.0, 0.0, 0.0);
        for &b in &order {
            let batch = &self.batches[b];
            let mut grads: Option<Vec<Tensor>> = None;
            for &i in batch {
                let u = &self.train[i];
                let l = utterance_loss(&state.model, u, &self.cfg).map_err(|e| TrainError::Utterance {
                    id: u.id.clone(),
                    source: Box::new(e),
                })?;
                sum_h += l.hybrid;
                sum_ctc += l.ctc;
                sum_ce += l.ce;
                match grads.as_mut() {
                    None => grads = Some(l.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&l.grads) {
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += g);
                        }
                    }
                }
            }
            let mut grads = grads.expect("batches are non-empty");
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
            let step = (state.optimizer.step + 1).min(self.total_steps());
            let lr = cosine_warmup_lr(step, self.total_steps(), warmup, self.cfg.lr_init, self.cfg.lr_min)?;
            adamw_step(state.model.params_mut().values_mut(), &grads, &mut state.optimizer, lr, &adam)?;
        }
        state.epoch += 1;
        let n = self.train.len() as f64;
        let per = if self.heldout.is_empty() {
            None
        } else {
            Some(evaluate(&state.model, self.heldout)?.rate().unwrap_or(0.0))
        };
        Ok(EpochMetrics {
            epoch: state.epoch,
            hybrid_loss: sum_h / n,
            ctc_loss: sum_ctc / n,
            ce_loss: sum_ce / n,
            per,
        })
    }

    /// Runs the remaining epochs. With `out_dir`, appends one JSON line per
    /// epoch to `metrics.jsonl` and rewrites `checkpoint.bin` after each.
    pub fn run(
        &self,
        state: &mut TrainState,
        out_dir: Option<&Path>,
        config_echo: &str,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>, TrainError> {
        let mut all = Vec::new();
        while (state.epoch as usize) < self.cfg.epochs {
            let m = self.run_epoch(state)?;
            if let Some(dir) = out_dir {
                let io = |path: &Path| {
                    let path = path.display().to_string();
                    move |source| TrainError::Io { path, source }
                };
                std::fs::create_dir_all(dir).map_err(io(dir))?;
                let log = dir.join(METRICS_FILE);
                let mut f = OpenOptions::new().create(true).append(true).open(&log).map_err(io(&log))?;
                writeln!(f, "{}", serde_json::to_string(&m).expect("metrics serialize")).map_err(io(&log))?;
                state.checkpoint(config_echo.to_string()).save(&dir.join(CHECKPOINT_FILE))?;
            }
            on_epoch(&m);
            all.push(m);
        }
        Ok(all)
    }
}
