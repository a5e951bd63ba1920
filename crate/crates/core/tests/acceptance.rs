//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout.
//! `VISEMIC_ACCEPTANCE=1,4,7` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use visemic::augment::augment_phonemes;
use visemic::checkpoint::Checkpoint;
use visemic::config::TrainConfig;
use visemic::decoding::{reconstruct, ReconstructParams};
use visemic::frames::{FrameClip, FrameStats};
use visemic::graph::{LandmarkClip, LandmarkStats, LipTemplate, NODE_COUNT};
use visemic::lexicon::Lexicon;
use visemic::lm::NGramLM;
use visemic::loss::{ctc_log_likelihood, ctc_loss, cross_entropy};
use visemic::metrics::{edit_stats, EditStats};
use visemic::model::{Stage1Config, Stage1Model, BOS, EOS};
use visemic::nn::{Bound, MultiHeadAttention, ParamStore};
use visemic::synth::{generate_corpus, select_words, SentenceGenerator, SynthConfig, Utterance};
use visemic::tensor::{grad_check, grad_check_sampled, GradCheckReport, Padding, SparseAdjacency, Tape, Tensor, TensorError, Var};
use visemic::text::g2p;
use visemic::train::{evaluate, utterance_loss, TrainState, Trainer, CHECKPOINT_FILE, METRICS_FILE};
use visemic::vocab::Token;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- corpus

/// Seeds shared by the learning run and the Stage-2 checks.
const WORD_SEED: u64 = 1;
const GENERATOR_SEED: u64 = 2;
const TRAIN_SEED: u64 = 3;
const HELDOUT_SEED: u64 = 4;
const TRAIN_UTTERANCES: usize = 2000;
const HELDOUT_UTTERANCES: usize = 200;

struct Corpus {
    lexicon: Lexicon,
    train: Vec<Utterance>,
    heldout: Vec<Utterance>,
}

fn corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let cfg = SynthConfig::default();
        let shipped = Lexicon::shipped();
        let words = select_words(&shipped, 50, WORD_SEED);
        assert_eq!(words.len(), 50);
        let generator = SentenceGenerator::new(words.clone(), &cfg, GENERATOR_SEED).unwrap();
        let table = cfg.prototypes().unwrap();
        let gen = |prefix, n, seed| generate_corpus(prefix, &generator, &shipped, &table, &cfg, n, seed).unwrap();
        Corpus {
            lexicon: shipped.subset(&words),
            train: gen("train", TRAIN_UTTERANCES, TRAIN_SEED),
            heldout: gen("heldout", HELDOUT_UTTERANCES, HELDOUT_SEED),
        }
    })
}

// ------------------------------------------------------------ criterion 1

/// Independent CTC reference: enumerate every frame labelling, collapse
/// it, and sum matching path probabilities in the linear domain.
fn ctc_enumerate(lp: &[Vec<f64>], target: &[usize]) -> f64 {
    let (t, v) = (lp.len(), lp[0].len());
    let mut total = 0.0;
    for code in 0..v.pow(t as u32) {
        let mut c = code;
        let path: Vec<usize> = (0..t)
            .map(|_| {
                let k = c % v;
                c /= v;
                k
            })
            .collect();
        let mut collapsed = Vec::new();
        for (i, &k) in path.iter().enumerate() {
            if k != 0 && (i == 0 || path[i - 1] != k) {
                collapsed.push(k);
            }
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(i, &k)| lp[i][k]).sum::<f64>().exp();
        }
    }
    -total.ln()
}

fn criterion_ctc() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let t = rng.random_range(1..=6);
        let labels = rng.random_range(1..=4);
        let target: Vec<usize> = loop {
            let len = rng.random_range(0..=3);
            let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..=labels)).collect();
            let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
            if target.len() + repeats <= t {
                break target;
            }
        };
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| {
                let z: Vec<f64> = (0..=labels).map(|_| rng.random_range(-3.0..3.0)).collect();
                let lse = z.iter().map(|x| x.exp()).sum::<f64>().ln();
                z.iter().map(|x| x - lse).collect()
            })
            .collect();
        let tensor = Tensor::new(&[t, labels + 1], rows.concat()).unwrap();
        let got = ctc_loss(&tensor, &target).unwrap();
        worst = worst.max((got - ctc_enumerate(&rows, &target)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-9 && secs < 10.0,
        format!("200 instances, max |forward-backward - enumeration| = {worst:.2e} (<= 1e-9), {secs:.2} s (< 10 s)"),
    )
}

// ------------------------------------------------------------ criterion 2

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Entries at least 0.1 away from zero, so no probe crosses a ReLU kink.
fn off_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut t = rand_t(shape, seed);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + 0.9 * v.abs());
    }
    t
}

/// `sum(w * y)` with fixed random weights.
fn readout(tape: &mut Tape, y: Var) -> Result<Var, TensorError> {
    let w = tape.constant(rand_t(tape.shape(y), 999));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type Check = Box<dyn Fn() -> Result<GradCheckReport, TensorError>>;

fn op_check<F>(inputs: Vec<Tensor>, f: F) -> Check
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError> + 'static,
{
    Box::new(move || {
        grad_check(
            |tape: &mut Tape, v: &[Var]| {
                let y = f(tape, v)?;
                readout(tape, y)
            },
            &inputs,
            1e-4,
        )
    })
}

fn gradient_checks() -> Vec<(&'static str, f64, Check)> {
    const LINEAR: f64 = 1e-6;
    const OTHER: f64 = 1e-4;
    let adj = {
        let n = 5;
        let mut dense = vec![0.0; n * n];
        for (a, b) in [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)] {
            dense[a * n + b] = 0.3;
            dense[b * n + a] = 0.3;
        }
        for i in 0..n {
            dense[i * n + i] = 0.4;
        }
        Arc::new(SparseAdjacency::from_dense(n, &dense))
    };
    let attention = {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut ChaCha8Rng::seed_from_u64(3));
        (store, mha)
    };
    let n_attn = attention.0.len();
    let mut attn_inputs = attention.0.values().to_vec();
    attn_inputs.push(rand_t(&[3, 4], 31));
    attn_inputs.push(rand_t(&[5, 4], 32));
    let mha = attention.1;
    vec![
        ("matmul", LINEAR, op_check(vec![rand_t(&[3, 4], 1), rand_t(&[4, 2], 2)], |t, v| t.matmul(v[0], v[1]))),
        ("matmul_nt", LINEAR, op_check(vec![rand_t(&[3, 4], 3), rand_t(&[5, 4], 4)], |t, v| t.matmul_nt(v[0], v[1]))),
        ("add", LINEAR, op_check(vec![rand_t(&[2, 3], 5), rand_t(&[2, 3], 6)], |t, v| t.add(v[0], v[1]))),
        ("sub", LINEAR, op_check(vec![rand_t(&[2, 3], 7), rand_t(&[2, 3], 8)], |t, v| t.sub(v[0], v[1]))),
        ("mul", LINEAR, op_check(vec![rand_t(&[2, 3], 9), rand_t(&[2, 3], 10)], |t, v| t.mul(v[0], v[1]))),
        ("add_bias", LINEAR, op_check(vec![rand_t(&[3, 4], 11), rand_t(&[4], 12)], |t, v| t.add_bias(v[0], v[1]))),
        ("scale", LINEAR, op_check(vec![rand_t(&[5], 13)], |t, v| Ok(t.scale(v[0], -2.5)))),
        ("sum", LINEAR, op_check(vec![rand_t(&[2, 3], 14)], |t, v| Ok(t.sum(v[0])))),
        ("mean", LINEAR, op_check(vec![rand_t(&[2, 3], 15)], |t, v| Ok(t.mean(v[0])))),
        ("relu", LINEAR, op_check(vec![off_zero(&[4, 3], 16)], |t, v| Ok(t.relu(v[0])))),
        ("mish", LINEAR, op_check(vec![rand_t(&[4, 3], 17).reshape(&[12]).unwrap()], |t, v| Ok(t.mish(v[0])))),
        ("reshape", LINEAR, op_check(vec![rand_t(&[2, 6], 18)], |t, v| t.reshape(v[0], &[3, 4]))),
        ("transpose", LINEAR, op_check(vec![rand_t(&[2, 5], 19)], |t, v| t.transpose(v[0]))),
        ("slice_cols", LINEAR, op_check(vec![rand_t(&[3, 6], 20)], |t, v| t.slice_cols(v[0], 2, 3))),
        ("concat_cols", LINEAR, op_check(vec![rand_t(&[3, 2], 21), rand_t(&[3, 4], 22)], |t, v| t.concat_cols(&[v[0], v[1]]))),
        ("embedding", LINEAR, op_check(vec![rand_t(&[6, 3], 23)], |t, v| t.embedding(v[0], &[4, 0, 4, 2]))),
        ("pick", LINEAR, op_check(vec![rand_t(&[3, 5], 24)], |t, v| t.pick(v[0], &[4, 0, 2]))),
        (
            "conv3d",
            LINEAR,
            op_check(vec![rand_t(&[4, 6, 6, 2], 25), rand_t(&[3, 3, 3, 2, 3], 26)], |t, v| {
                t.conv3d(v[0], v[1], [1, 2, 2], [Padding::Same, Padding::Valid, Padding::Same])
            }),
        ),
        ("graph_mix", LINEAR, op_check(vec![rand_t(&[3, 5, 2], 27)], move |t, v| t.graph_mix(v[0], &adj))),
        ("temporal_conv", LINEAR, op_check(vec![rand_t(&[5, 3, 2], 28), rand_t(&[3, 2], 29)], |t, v| t.temporal_conv(v[0], v[1]))),
        ("mean_axis1", LINEAR, op_check(vec![rand_t(&[3, 4, 2], 30)], |t, v| t.mean_axis1(v[0]))),
        ("log_softmax", OTHER, op_check(vec![rand_t(&[3, 5], 33)], |t, v| Ok(t.log_softmax(v[0])))),
        ("softmax", OTHER, op_check(vec![rand_t(&[3, 5], 34)], |t, v| t.softmax(v[0], false))),
        ("softmax (causal)", OTHER, op_check(vec![rand_t(&[4, 4], 35)], |t, v| t.softmax(v[0], true))),
        (
            "layer_norm",
            OTHER,
            op_check(vec![rand_t(&[3, 5], 36), rand_t(&[5], 37), rand_t(&[5], 38)], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        (
            "multi-head attention",
            OTHER,
            op_check(attn_inputs, move |t, v| {
                let p = Bound::from_vars(v[..n_attn].to_vec());
                mha.forward(t, &p, v[n_attn], v[n_attn + 1], false)
            }),
        ),
        (
            "ctc",
            OTHER,
            Box::new(|| {
                grad_check(
                    |t: &mut Tape, v: &[Var]| {
                        let lp = t.log_softmax(v[0]);
                        ctc_log_likelihood(t, lp, &[1, 3, 3]).map_err(|e| match e {
                            visemic::loss::LossError::Tensor(e) => e,
                            other => panic!("{other}"),
                        })
                    },
                    &[rand_t(&[6, 4], 39)],
                    1e-4,
                )
            }),
        ),
        (
            "cross entropy (smoothed)",
            OTHER,
            Box::new(|| {
                grad_check(
                    |t: &mut Tape, v: &[Var]| {
                        cross_entropy(t, v[0], &[2, 0, 4], 0.1).map_err(|e| match e {
                            visemic::loss::LossError::Tensor(e) => e,
                            other => panic!("{other}"),
                        })
                    },
                    &[rand_t(&[3, 5], 40)],
                    1e-4,
                )
            }),
        ),
        ("full Stage-1 model", OTHER, Box::new(full_model_check)),
    ]
}

fn toy_model() -> Stage1Model {
    Stage1Model::new(Stage1Config {
        d_enc: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ff_hidden: 12,
        conv_width: 3,
        frontend_channels: 2,
        residual_blocks: 1,
        fusion_hidden: 8,
        gcn_channels: 3,
        gcn_blocks: 2,
        gcn_temporal_kernel: 3,
        seed: 5,
        ..Default::default()
    })
    .unwrap()
}

fn full_model_check() -> Result<GradCheckReport, TensorError> {
    let model = toy_model();
    let t = 4;
    // a probe point where no eps-step straddles a ReLU kink (seeds 1, 8 and 11
    // do: up to 1e-3 at eps 1e-4, within tolerance at eps 1e-6)
    let frames = FrameClip::new(rand_t(&[t, 16, 16], 2)).unwrap();
    let lm = Tensor::from_fn(&[t, NODE_COUNT, 2], |i| 0.3 + 0.4 * ((i * 7919 % 101) as f64 / 101.0));
    let lm = LandmarkClip::new(lm, vec![true; t]).unwrap();
    let params = model.params().values().to_vec();
    let f = |tape: &mut Tape, vars: &[Var]| {
        let p = Bound::from_vars(vars.to_vec());
        let out = model.forward(tape, &p, &frames, Some(&lm), Some(&[BOS, 2, 4])).unwrap();
        let ce = cross_entropy(tape, out.ce_logits.unwrap(), &[2, 4, EOS], 0.0).unwrap();
        let ctc = ctc_log_likelihood(tape, out.ctc_logprobs, &[3, 5]).unwrap();
        tape.add(ce, ctc)
    };
    grad_check_sampled(f, &params, 1e-4, 3, 1)
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut count = 0;
    for (name, tol, check) in gradient_checks() {
        count += 1;
        match check() {
            Ok(r) if r.max_rel_err <= tol => {}
            Ok(r) => failures.push(format!("{name}: rel err {:.2e} > {tol:.0e} at input {:?}", r.max_rel_err, r.worst)),
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mut detail = format!(
        "{count} checks (linear/elementwise <= 1e-6, others <= 1e-4, eps 1e-4), {}/{count} pass, {secs:.1} s (< 120 s)",
        count - failures.len()
    );
    for f in &failures {
        detail.push_str(&format!("\n        {f}"));
    }
    outcome(failures.is_empty() && secs < 120.0, detail)
}

// ------------------------------------------------------------ criterion 3

fn criterion_hybrid() -> Outcome {
    let model = Stage1Model::new(Stage1Config {
        d_enc: 16,
        heads: 2,
        ff_hidden: 16,
        fusion_hidden: 16,
        gcn_channels: 4,
        gcn_blocks: 1,
        ..Default::default()
    })
    .unwrap();
    let utt = &corpus().heldout[0];
    let at = |alpha: f64| utterance_loss(&model, utt, &TrainConfig { alpha, ..Default::default() }).unwrap();
    let (zero, one) = (at(0.0), at(1.0));
    let endpoints = zero.hybrid == zero.ctc && one.hybrid == one.ce && zero.ctc == one.ctc && zero.ce == one.ce;
    let mut worst = 0.0f64;
    for alpha in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let l = at(alpha);
        let line = zero.hybrid + alpha * (one.hybrid - zero.hybrid);
        worst = worst.max((l.hybrid - line).abs());
    }
    outcome(
        endpoints && worst <= 1e-12,
        format!(
            "alpha 0 -> CTC and alpha 1 -> CE {}, max deviation from the line at 5 interior points {worst:.1e} (<= 1e-12)",
            if endpoints { "exactly" } else { "NOT exactly" }
        ),
    )
}

// ------------------------------------------------------------ criterion 4

/// Textbook Levenshtein distance, written independently of the library.
fn levenshtein(a: &[u8], b: &[u8]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn criterion_wer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let alphabet = rng.random_range(2..6u8);
        let r: Vec<u8> = (0..rng.random_range(1..12)).map(|_| rng.random_range(0..alphabet)).collect();
        let h: Vec<u8> = (0..rng.random_range(0..12)).map(|_| rng.random_range(0..alphabet)).collect();
        let s = edit_stats(&r, &h);
        let consistent = s.reference_len == r.len()
            && r.len() - s.deletions + s.insertions == h.len()
            && s.rate().unwrap() == s.distance() as f64 / r.len() as f64;
        if s.distance() != levenshtein(&r, &h) || !consistent {
            mismatches += 1;
        }
    }
    let words = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
    let reference = words("a b c d e f g h i j");
    let identity = edit_stats(&reference, &reference).rate().unwrap();
    // substitute a, delete c, insert y after i
    let three = edit_stats(&reference, &words("x b d e f g h i y j"));
    let formula = identity == 0.0
        && (three.substitutions, three.deletions, three.insertions, three.reference_len) == (1, 1, 1, 10)
        && three.rate().unwrap() == 0.3;
    outcome(
        mismatches == 0 && formula,
        format!(
            "{mismatches}/1000 pairs disagree with the quadratic DP; identity {identity}, S=D=I=1 N=10 gives {}",
            three.rate().unwrap()
        ),
    )
}

// ------------------------------------------------------------ criterion 5

/// Training settings for the learning run; see README "Acceptance run".
fn learning_model_config(train: &[Utterance]) -> Stage1Config {
    Stage1Config {
        gcn_channels: 16,
        frame_stats: FrameStats::from_clips(train.iter().map(|u| &u.frames)),
        landmark_stats: LandmarkStats::from_clips(&LipTemplate::canonical(), train.iter().map(|u| &u.landmarks)),
        seed: 7,
        ..Default::default()
    }
}

fn learning_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 8,
        warmup_epochs: 1,
        frame_cap: 300,
        seed: 11,
        ..Default::default()
    }
}

fn criterion_learning() -> Outcome {
    let c = corpus();
    let start = Instant::now();
    let model = Stage1Model::new(learning_model_config(&c.train)).unwrap();
    let cfg = learning_train_config();
    let trainer = Trainer::new(cfg.clone(), &c.train, &c.heldout).unwrap();
    let mut state = TrainState::new(model);
    let mut curve = Vec::new();
    trainer
        .run(&mut state, None, "", |m| {
            let per = m.per.unwrap();
            println!(
                "        epoch {:>2}  loss {:.4}  ctc {:.4}  ce {:.4}  held-out PER {:.4}  ({:.0} s)",
                m.epoch,
                m.hybrid_loss,
                m.ctc_loss,
                m.ce_loss,
                per,
                start.elapsed().as_secs_f64()
            );
            curve.push(per);
        })
        .unwrap();
    let per = evaluate(&state.model, &c.heldout).unwrap().rate().unwrap();
    let empty: EditStats = c.heldout.iter().map(|u| edit_stats(&u.phonemes, &[])).sum();
    let baseline = empty.rate().unwrap();
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    outcome(
        per < 0.20 && per * 5.0 <= baseline,
        format!(
            "held-out greedy PER {per:.4} (< 0.20) vs empty-output baseline {baseline:.4} ({:.1}x, >= 5x), {} epochs in {minutes:.1} min (target < 30)",
            baseline / per.max(1e-12),
            cfg.epochs
        ),
    )
}

// ------------------------------------------------------------ criterion 6

fn training_lm() -> NGramLM {
    let sentences: Vec<&[String]> = corpus().train.iter().map(|u| u.words.as_slice()).collect();
    let sentences: Vec<Vec<&str>> = sentences.iter().map(|s| s.iter().map(String::as_str).collect()).collect();
    NGramLM::estimate(&sentences, 2, 0.5).unwrap()
}

fn corpus_wer(inputs: &[Vec<Token>], params: &ReconstructParams, lm: &NGramLM) -> f64 {
    let c = corpus();
    let mut total = EditStats::default();
    for (u, input) in c.heldout.iter().zip(inputs) {
        let r = reconstruct(input, &c.lexicon, lm, params).unwrap();
        total.merge(edit_stats(&u.words, &r.sentence));
    }
    total.rate().unwrap()
}

fn criterion_stage2() -> Outcome {
    let c = corpus();
    let lm = training_lm();
    let beam = ReconstructParams::default();
    assert_eq!(beam.beam_width, 8);
    let greedy = ReconstructParams {
        beam_width: 1,
        ..beam.clone()
    };
    let clean: Vec<Vec<Token>> = c.heldout.iter().map(|u| u.phonemes.clone()).collect();
    let clean_wer = corpus_wer(&clean, &beam, &lm);
    let mut ok = clean_wer == 0.0;
    let mut detail = format!("clean WER {clean_wer:.4} (== 0)");
    for rate in [0.10, 0.20] {
        let noisy: Vec<Vec<Token>> = clean
            .iter()
            .enumerate()
            .map(|(i, p)| augment_phonemes(p, rate, 6000 + i as u64).unwrap().0)
            .collect();
        let (b, g) = (corpus_wer(&noisy, &beam, &lm), corpus_wer(&noisy, &greedy, &lm));
        ok &= b <= g;
        detail.push_str(&format!("; {:.0}% noise: beam-8 WER {b:.4} <= width-1 WER {g:.4}", rate * 100.0));
    }
    outcome(ok, detail)
}

// ------------------------------------------------------------ criterion 7

const VISEME_LEXICON: &str = "COME K AH M\nBACK B AE K\nPACK P AE K\nCAME K EY M\nIT IH T\nBAT B AE T\n";
const VISEME_CORPUS: &str = "COME BACK\nCOME BACK\nCOME BACK\nCOME BACK\nPACK IT\nCAME BACK\nPACK IT";

/// Maps B, P and M onto one symbol and T onto D, as the lip renderer does.
fn viseme_key(seq: &[Token]) -> Vec<String> {
    seq.iter()
        .filter(|t| **t != Token::BOUNDARY)
        .map(|t| match t.as_str() {
            "P" | "M" => "B".to_string(),
            "T" => "D".to_string(),
            s => s.to_string(),
        })
        .collect()
}

/// Among all sentences of up to two lexicon words that look identical on the
/// lips to `observed`, the one the LM scores highest.
fn lm_favoured(observed: &[Token], lexicon: &Lexicon, lm: &NGramLM) -> Vec<String> {
    let words: Vec<&str> = lexicon.words().collect();
    let key = viseme_key(observed);
    let mut best: Option<(f64, Vec<String>)> = None;
    let mut candidates: Vec<Vec<&str>> = words.iter().map(|w| vec![*w]).collect();
    for a in &words {
        for b in &words {
            candidates.push(vec![a, b]);
        }
    }
    for cand in candidates {
        if viseme_key(&g2p(&cand, lexicon)) != key {
            continue;
        }
        let lp = lm.sentence_log_prob(&cand);
        if best.as_ref().is_none_or(|(b, _)| lp > *b) {
            best = Some((lp, cand.iter().map(|s| s.to_string()).collect()));
        }
    }
    best.expect("the observation itself is a candidate").1
}

fn criterion_viseme() -> Outcome {
    let lexicon = Lexicon::parse(VISEME_LEXICON).unwrap();
    let sentences: Vec<Vec<&str>> = VISEME_CORPUS.lines().map(|l| l.split(' ').collect()).collect();
    let lm = NGramLM::estimate(&sentences, 2, 0.5).unwrap();
    let with_lm = ReconstructParams::default().with_group_confusions(&[vec!["B", "P", "M"], vec!["T", "D"]], -0.2);
    let lexicon_only = ReconstructParams {
        lm_weight: 0.0,
        ..with_lm.clone()
    };
    // the LM-favoured reading of each observation, by enumeration
    let intents = [["COME", "BACK"], ["PACK", "IT"]];
    let mut enumerated = true;
    for intent in intents {
        for lip in ["B", "P"] {
            let observed = observation(&lexicon, &intent, lip);
            enumerated &= lm_favoured(&observed, &lexicon, &lm) == intent;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let (mut hits_lm, mut hits_lex) = (0, 0);
    for _ in 0..100 {
        let intent = intents[rng.random_range(0..2)];
        let lip = if rng.random_bool(0.5) { "B" } else { "P" };
        let observed = observation(&lexicon, &intent, lip);
        hits_lm += usize::from(reconstruct(&observed, &lexicon, &lm, &with_lm).unwrap().sentence == intent);
        hits_lex += usize::from(reconstruct(&observed, &lexicon, &lm, &lexicon_only).unwrap().sentence == intent);
    }
    outcome(
        enumerated && hits_lm >= 90 && (35..=65).contains(&hits_lex),
        format!(
            "enumeration {}; LM-favoured word recovered {hits_lm}/100 with the bigram LM (>= 90), {hits_lex}/100 lexicon-only (~50)",
            if enumerated { "confirms the targets" } else { "DISAGREES with the targets" }
        ),
    )
}

/// Phonemes of `intent` with its B/P consonant replaced by `lip`.
fn observation(lexicon: &Lexicon, intent: &[&str], lip: &str) -> Vec<Token> {
    let lip: Token = lip.parse().unwrap();
    g2p(intent, lexicon)
        .into_iter()
        .map(|t| if matches!(t.as_str(), "B" | "P") { lip } else { t })
        .collect()
}

// ------------------------------------------------------------ criterion 8

fn criterion_augment() -> Outcome {
    let c = corpus();
    let mut pool: Vec<&[Token]> = Vec::new();
    let mut tokens = 0;
    for u in c.train.iter() {
        if tokens >= 10_000 {
            break;
        }
        pool.push(&u.phonemes);
        tokens += u.phonemes.len();
    }
    let mut ok = true;
    let mut parts = Vec::new();
    for pct in [5u32, 10, 15, 20, 25] {
        let rate = f64::from(pct) / 100.0;
        let (mut corrupted, mut total) = (0, 0);
        for (i, seq) in pool.iter().enumerate() {
            let (_, s) = augment_phonemes(seq, rate, u64::from(pct) * 100_000 + i as u64).unwrap();
            corrupted += s.corrupted;
            total += s.input_len;
        }
        let frac = corrupted as f64 / total as f64;
        ok &= (frac - rate).abs() <= 0.02;
        parts.push(format!("{pct}% -> {:.2}%", frac * 100.0));
    }
    outcome(ok, format!("{tokens} tokens per rate, within +-2 points: {}", parts.join(", ")))
}

// ------------------------------------------------------------ criterion 9

fn tiny_run(dir: &Path) -> (Vec<u8>, Vec<u8>) {
    let c = corpus();
    let model = Stage1Model::new(Stage1Config {
        d_enc: 16,
        heads: 2,
        ff_hidden: 16,
        fusion_hidden: 16,
        gcn_channels: 4,
        gcn_blocks: 1,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        warmup_epochs: 1,
        frame_cap: 200,
        seed: 9,
        ..Default::default()
    };
    let trainer = Trainer::new(cfg, &c.train[..12], &c.heldout[..4]).unwrap();
    let mut state = TrainState::new(model);
    trainer.run(&mut state, Some(dir), "[train]\nepochs = 3\n", |_| {}).unwrap();
    (
        std::fs::read(dir.join(METRICS_FILE)).unwrap(),
        std::fs::read(dir.join(CHECKPOINT_FILE)).unwrap(),
    )
}

fn criterion_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (log_a, ck_a) = tiny_run(a.path());
    let (log_b, ck_b) = tiny_run(b.path());
    let logs = log_a == log_b && log_a.iter().filter(|&&c| c == b'\n').count() == 3;
    let loaded = Checkpoint::load(&a.path().join(CHECKPOINT_FILE)).unwrap();
    let resaved = a.path().join("resaved.bin");
    loaded.save(&resaved).unwrap();
    let round_trip = std::fs::read(&resaved).unwrap() == ck_a;
    outcome(
        logs && round_trip && ck_a == ck_b,
        format!(
            "metric logs {}, checkpoints of both runs {}, save/load/save {}",
            if logs { "bit-identical" } else { "DIFFER" },
            if ck_a == ck_b { "identical" } else { "DIFFER" },
            if round_trip { "byte-identical" } else { "DIFFERS" }
        ),
    )
}

// ------------------------------------------------------------------ main

fn main() -> ExitCode {
    let criteria: BTreeMap<u32, (&str, fn() -> Outcome)> = BTreeMap::from([
        (1, ("CTC oracle equivalence", criterion_ctc as fn() -> Outcome)),
        (2, ("gradient suite", criterion_gradients)),
        (3, ("hybrid loss endpoints and affinity", criterion_hybrid)),
        (4, ("WER oracle", criterion_wer)),
        (5, ("end-to-end toy learning", criterion_learning)),
        (6, ("Stage-2 denoising direction", criterion_stage2)),
        (7, ("viseme-ambiguity resolution", criterion_viseme)),
        (8, ("augmentation calibration", criterion_augment)),
        (9, ("determinism", criterion_determinism)),
    ]);
    let only: Option<Vec<u32>> = std::env::var("VISEMIC_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (n, (name, run)) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(n)) {
            println!("SKIP  {n}. {name}");
            continue;
        }
        let start = Instant::now();
        let o = run();
        println!(
            "{}  {n}. {name}: {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(*n);
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
