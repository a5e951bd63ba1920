use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use visemic::augment::{augment_phonemes, AugmentStats};
use visemic::checkpoint::Checkpoint;
use visemic::config::RunConfig;
use visemic::decoding::{ctc_greedy, ctc_prefix_beam, reconstruct};
use visemic::frames::FrameStats;
use visemic::graph::{LandmarkStats, LipTemplate};
use visemic::lexicon::Lexicon;
use visemic::lm::NGramLM;
use visemic::manifest::{load_manifest, write_manifest};
use visemic::metrics::{edit_stats, EditStats};
use visemic::model::Stage1Model;
use visemic::synth::{generate_corpus, select_words, SentenceGenerator, Utterance};
use visemic::text::{g2p, normalize_text};
use visemic::train::{TrainState, Trainer, CHECKPOINT_FILE};
use visemic::vocab::{format_sequence, parse_sequence};

#[derive(Parser)]
#[command(name = "visemic", version, about = "Phoneme-level lip reading toolkit")]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (manifest plus per-utterance files) into --out.
    Synth(SynthArgs),
    /// Train the stage-1 model; writes metrics.jsonl and checkpoint.bin into --out.
    Train(TrainArgs),
    /// Decode a manifest to phonemes with a trained checkpoint.
    Decode(DecodeArgs),
    /// Turn phoneme lines into sentences with a lexicon and an ARPA language model.
    Reconstruct(ReconstructArgs),
    /// Corrupt phoneme lines with random substitutions, deletions and insertions.
    Augment(AugmentArgs),
    /// Convert text lines to phonemes with a lexicon.
    G2p(G2pArgs),
    /// Word (or phoneme) error rate of hypothesis lines against reference lines.
    Score(ScoreArgs),
    /// Estimate an n-gram language model from sentence lines and write it as ARPA.
    LmTrain(LmTrainArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Lexicon file; defaults to the bundled one.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Vocabulary size drawn from the lexicon.
    #[arg(long, default_value_t = 50)]
    words: usize,
    #[arg(long, default_value_t = 2000)]
    count: usize,
    /// Held-out utterances written to heldout.jsonl.
    #[arg(long, default_value_t = 200)]
    heldout: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Head {
    Ctc,
    Attention,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "ctc")]
    head: Head,
    /// CTC prefix beam width; 1 decodes greedily.
    #[arg(long, default_value_t = 1)]
    beam: usize,
    /// Longest phoneme output of the attention head.
    #[arg(long, default_value_t = 200)]
    max_len: usize,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    lm: PathBuf,
    /// Phoneme lines, optionally `id<TAB>phonemes`; stdin when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Overrides decode.beam_width.
    #[arg(long)]
    beam: Option<usize>,
    /// Print every hypothesis with its score instead of only the best.
    #[arg(long)]
    nbest: bool,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    rate: f64,
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct G2pArgs {
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Text to convert; otherwise lines from --input or stdin.
    #[arg(long)]
    text: Option<String>,
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    hyp: PathBuf,
    /// Report PER over phoneme tokens instead of WER over words.
    #[arg(long)]
    phonemes: bool,
}

#[derive(Args)]
struct LmTrainArgs {
    /// Sentence lines; stdin when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    discount: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    let seed = cli.seed.unwrap_or(0);
    let out = cli.out.as_deref();
    match cli.command {
        Command::Synth(a) => synth(&cfg, seed, out, a),
        Command::Train(a) => train(cfg, out, a),
        Command::Decode(a) => decode(out, a),
        Command::Reconstruct(a) => reconstruct_cmd(&cfg, out, a),
        Command::Augment(a) => augment(seed, out, a),
        Command::G2p(a) => g2p_cmd(out, a),
        Command::Score(a) => score(out, a),
        Command::LmTrain(a) => lm_train(&cfg, out, a),
    }
}

fn load_lexicon(path: Option<&Path>) -> Result<Lexicon> {
    Ok(match path {
        Some(p) => Lexicon::load(p)?,
        None => Lexicon::shipped(),
    })
}

fn read_lines(input: Option<&Path>) -> Result<Vec<String>> {
    let lines = match input {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .lines()
            .map(String::from)
            .collect(),
        None => io::stdin().lock().lines().collect::<io::Result<Vec<_>>>()?,
    };
    Ok(lines)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            io::stdout().lock().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

/// `id<TAB>payload` or just `payload`.
fn split_id(line: &str) -> (Option<&str>, &str) {
    match line.split_once('\t') {
        Some((id, rest)) => (Some(id), rest),
        None => (None, line),
    }
}

fn with_id(id: Option<&str>, body: &str) -> String {
    match id {
        Some(id) => format!("{id}\t{body}\n"),
        None => format!("{body}\n"),
    }
}

fn synth(cfg: &RunConfig, seed: u64, out: Option<&Path>, a: SynthArgs) -> Result<()> {
    let Some(dir) = out else { bail!("synth needs --out <directory>") };
    let lexicon = load_lexicon(a.lexicon.as_deref())?;
    let words = select_words(&lexicon, a.words, seed);
    if words.len() < a.words {
        bail!("the lexicon has only {} usable words, {} requested", words.len(), a.words);
    }
    let generator = SentenceGenerator::new(words.clone(), &cfg.synth, seed)?;
    let prototypes = cfg.synth.prototypes()?;
    let train = generate_corpus("train", &generator, &lexicon, &prototypes, &cfg.synth, a.count, seed)?;
    let heldout = generate_corpus("heldout", &generator, &lexicon, &prototypes, &cfg.synth, a.heldout, seed ^ 0x5eed)?;
    write_manifest(&dir.join("train.jsonl"), &train)?;
    if a.heldout > 0 {
        write_manifest(&dir.join("heldout.jsonl"), &heldout)?;
    }
    fs::write(dir.join("lexicon.txt"), lexicon.subset(&words).to_text())?;
    let sentences: String = train.iter().map(|u| format!("{}\n", u.text())).collect();
    fs::write(dir.join("sentences.txt"), sentences)?;
    eprintln!(
        "wrote {} training and {} held-out utterances over {} words to {}",
        train.len(),
        heldout.len(),
        words.len(),
        dir.display()
    );
    Ok(())
}

fn load_utterances(path: &Path) -> Result<Vec<Utterance>> {
    load_manifest(path)?
        .collect::<Result<Vec<_>, _>>()
        .with_context(|| format!("loading {}", path.display()))
}

fn train(mut cfg: RunConfig, out: Option<&Path>, a: TrainArgs) -> Result<()> {
    let Some(dir) = out else { bail!("train needs --out <directory>") };
    let train = load_utterances(&a.train)?;
    let heldout = match &a.heldout {
        Some(p) => load_utterances(p)?,
        None => Vec::new(),
    };
    let mut state = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            cfg.model = RunConfig::from_toml(&ck.config)?.model;
            TrainState::from_checkpoint(Stage1Model::new(cfg.model.clone())?, &ck)?
        }
        None => {
            cfg.model.frame_stats = FrameStats::from_clips(train.iter().map(|u| &u.frames));
            cfg.model.landmark_stats =
                LandmarkStats::from_clips(&LipTemplate::canonical(), train.iter().map(|u| &u.landmarks));
            TrainState::new(Stage1Model::new(cfg.model.clone())?)
        }
    };
    fs::create_dir_all(dir)?;
    let echo = cfg.to_toml();
    fs::write(dir.join("config.toml"), &echo)?;
    let trainer = Trainer::new(cfg.train.clone(), &train, &heldout)?;
    trainer.run(&mut state, Some(dir), &echo, |m| {
        let per = m.per.map_or("-".to_string(), |p| format!("{p:.4}"));
        eprintln!(
            "epoch {:>3}  loss {:.4}  ctc {:.4}  ce {:.4}  per {per}",
            m.epoch, m.hybrid_loss, m.ctc_loss, m.ce_loss
        );
    })?;
    eprintln!("checkpoint: {}", dir.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn decode(out: Option<&Path>, a: DecodeArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = RunConfig::from_toml(&ck.config)?;
    let mut model = Stage1Model::new(cfg.model)?;
    ck.restore_into(&mut model)?;
    let mut text = String::new();
    for u in load_utterances(&a.manifest)? {
        let landmarks = model.config().use_landmarks.then_some(&u.landmarks);
        let hyp = match a.head {
            Head::Attention => model.decode_greedy(&u.frames, landmarks, a.max_len)?,
            Head::Ctc => {
                let lp = model.ctc_logprobs(&u.frames, landmarks)?;
                if a.beam <= 1 {
                    ctc_greedy(&lp)?
                } else {
                    ctc_prefix_beam(&lp, a.beam)?.swap_remove(0).0
                }
            }
        };
        text.push_str(&with_id(Some(&u.id), &format_sequence(&hyp)));
    }
    emit(out, &text)
}

fn reconstruct_cmd(cfg: &RunConfig, out: Option<&Path>, a: ReconstructArgs) -> Result<()> {
    let lexicon = load_lexicon(a.lexicon.as_deref())?;
    let lm = NGramLM::load(&a.lm)?;
    let mut params = cfg.decode.clone();
    if let Some(b) = a.beam {
        params.beam_width = b;
    }
    let mut text = String::new();
    for (n, line) in read_lines(a.input.as_deref())?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = split_id(line);
        let phonemes = parse_sequence(body).with_context(|| format!("input line {}", n + 1))?;
        let r = reconstruct(&phonemes, &lexicon, &lm, &params).with_context(|| format!("input line {}", n + 1))?;
        if a.nbest {
            for h in &r.nbest {
                text.push_str(&with_id(id, &format!("{:.6}\t{}", h.score, h.words.join(" "))));
            }
        } else {
            text.push_str(&with_id(id, &r.sentence.join(" ")));
        }
    }
    emit(out, &text)
}

fn augment(seed: u64, out: Option<&Path>, a: AugmentArgs) -> Result<()> {
    let mut text = String::new();
    let mut total = AugmentStats::default();
    for (n, line) in read_lines(a.input.as_deref())?.iter().enumerate() {
        let (id, body) = split_id(line);
        let phonemes = parse_sequence(body).with_context(|| format!("input line {}", n + 1))?;
        let (noisy, stats) = augment_phonemes(&phonemes, a.rate, seed.wrapping_add(n as u64))?;
        total.merge(&stats);
        text.push_str(&with_id(id, &format_sequence(&noisy)));
    }
    emit(out, &text)?;
    if total.input_len > 0 {
        eprintln!(
            "corrupted {} of {} tokens ({:.2}%)",
            total.corrupted,
            total.input_len,
            100.0 * total.corrupted as f64 / total.input_len as f64
        );
    }
    Ok(())
}

fn g2p_cmd(out: Option<&Path>, a: G2pArgs) -> Result<()> {
    let lexicon = load_lexicon(a.lexicon.as_deref())?;
    let lines = match a.text {
        Some(t) => vec![t],
        None => read_lines(a.input.as_deref())?,
    };
    let mut text = String::new();
    for (n, line) in lines.iter().enumerate() {
        let (id, body) = split_id(line);
        let words = normalize_text(body).with_context(|| format!("input line {}", n + 1))?;
        text.push_str(&with_id(id, &format_sequence(&g2p(&words, &lexicon))));
    }
    emit(out, &text)
}

fn score(out: Option<&Path>, a: ScoreArgs) -> Result<()> {
    let refs = read_lines(Some(&a.reference))?;
    let hyps = read_lines(Some(&a.hyp))?;
    if refs.len() != hyps.len() {
        bail!("{} reference lines but {} hypothesis lines", refs.len(), hyps.len());
    }
    let mut total = EditStats::default();
    for (n, (r, h)) in refs.iter().zip(&hyps).enumerate() {
        let (r, h) = (split_id(r).1, split_id(h).1);
        let stats = if a.phonemes {
            let r = parse_sequence(r).with_context(|| format!("reference line {}", n + 1))?;
            let h = parse_sequence(h).with_context(|| format!("hypothesis line {}", n + 1))?;
            edit_stats(&r, &h)
        } else {
            let r: Vec<&str> = r.split_whitespace().collect();
            let h: Vec<&str> = h.split_whitespace().collect();
            edit_stats(&r, &h)
        };
        total.merge(stats);
    }
    let rate = total.rate()?;
    let label = if a.phonemes { "PER" } else { "WER" };
    emit(
        out,
        &format!(
            "{label} {rate:.4} (S={} D={} I={} N={})\n",
            total.substitutions, total.deletions, total.insertions, total.reference_len
        ),
    )
}

fn lm_train(cfg: &RunConfig, out: Option<&Path>, a: LmTrainArgs) -> Result<()> {
    let sentences: Vec<Vec<String>> = read_lines(a.input.as_deref())?
        .iter()
        .map(|l| split_id(l).1.split_whitespace().map(str::to_uppercase).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect();
    let lm = NGramLM::estimate(
        &sentences,
        a.order.unwrap_or(cfg.lm.order),
        a.discount.unwrap_or(cfg.lm.discount),
    )?;
    emit(out, &lm.to_arpa())
}
