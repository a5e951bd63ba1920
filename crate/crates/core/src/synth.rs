//! Synthetic articulatory data: per-phoneme lip shapes, landmark
//! trajectories, rendered frames, and a seeded sentence generator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::frames::{render_frame, FrameClip};
use crate::graph::{LandmarkClip, LipTemplate, INNER_LIP, JAW, OUTER_LIP, PERIORAL};
use crate::lexicon::Lexicon;
use crate::tensor::Tensor;
use crate::text::g2p;
use crate::vocab::{PhonemeSequence, Token, VOCAB_SIZE};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("word `{0}` is not in the lexicon")]
    OOVWord(String),
    #[error("nothing to synthesize")]
    EmptyInput,
    #[error("invalid synthesis setting: {0}")]
    InvalidConfig(String),
}

const MOUTH_CENTRE: [f64; 2] = [0.5, 0.58];

/// Articulatory settings for one phoneme: jaw/lip opening, lip spreading,
/// lip rounding, lower lip tucked under the teeth, and lip compression.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Articulation {
    pub open: f64,
    pub spread: f64,
    pub round: f64,
    pub tuck: f64,
    pub press: f64,
}

const fn art(open: f64, spread: f64, round: f64, tuck: f64, press: f64) -> Articulation {
    Articulation {
        open,
        spread,
        round,
        tuck,
        press,
    }
}

/// Articulation of every vocabulary token; `<unk>` and `_` are the
/// relaxed, nearly closed mouth.
pub fn articulation(tok: Token) -> Articulation {
    match tok.as_str() {
        "AA" => art(1.0, 0.1, 0.0, 0.0, 0.0),
        "AE" => art(0.8, 0.5, 0.0, 0.0, 0.0),
        "AH" => art(0.6, 0.1, 0.0, 0.0, 0.0),
        "AO" => art(0.8, -0.1, 0.5, 0.0, 0.0),
        "AW" => art(0.7, -0.2, 0.3, 0.0, 0.0),
        "AY" => art(0.7, 0.25, 0.15, 0.0, 0.0),
        "EH" => art(0.5, 0.45, 0.0, 0.0, 0.0),
        "ER" => art(0.3, -0.1, 0.4, 0.0, 0.0),
        "EY" => art(0.4, 0.65, 0.0, 0.0, 0.0),
        "IH" => art(0.3, 0.5, 0.0, 0.0, 0.0),
        "IY" => art(0.2, 0.85, 0.0, 0.0, 0.0),
        "OW" => art(0.5, -0.2, 0.8, 0.0, 0.0),
        "OY" => art(0.65, 0.0, 0.65, 0.0, 0.0),
        "UH" => art(0.4, -0.05, 0.65, 0.0, 0.0),
        "UW" => art(0.15, -0.3, 1.0, 0.0, 0.0),
        "B" => art(0.0, 0.0, 0.0, 0.0, 1.0),
        "P" => art(0.0, 0.05, 0.0, 0.0, 0.9),
        "M" => art(0.0, -0.05, 0.0, 0.0, 0.8),
        "T" => art(0.25, 0.15, 0.0, 0.0, 0.0),
        "D" => art(0.22, 0.15, 0.0, 0.0, 0.0),
        "N" => art(0.38, 0.3, 0.0, 0.0, 0.0),
        "L" => art(0.5, 0.3, 0.0, 0.0, 0.0),
        "S" => art(0.08, 0.7, 0.0, 0.0, 0.0),
        "Z" => art(0.18, 0.55, 0.0, 0.0, 0.0),
        "SH" => art(0.15, -0.3, 0.85, 0.0, 0.0),
        "ZH" => art(0.02, 0.1, 1.0, 0.0, 0.0),
        "CH" => art(0.28, -0.55, 0.55, 0.0, 0.0),
        "JH" => art(0.3, -0.2, 0.9, 0.0, 0.0),
        "F" => art(0.1, 0.2, 0.0, 1.0, 0.0),
        "V" => art(0.15, 0.1, 0.0, 0.8, 0.0),
        "TH" => art(0.12, 0.4, 0.0, 0.2, 0.0),
        "DH" => art(0.32, 0.25, 0.0, 0.6, 0.0),
        "K" => art(0.45, 0.0, 0.0, 0.0, 0.0),
        "G" => art(0.55, -0.05, 0.15, 0.0, 0.0),
        "NG" => art(0.35, 0.15, 0.35, 0.0, 0.0),
        "HH" => art(0.45, 0.35, 0.2, 0.0, 0.0),
        "R" => art(0.2, -0.35, 0.5, 0.0, 0.0),
        "W" => art(0.1, -0.5, 1.2, 0.0, 0.0),
        "Y" => art(0.12, 1.1, 0.0, 0.0, 0.0),
        _ => art(0.05, 0.0, 0.0, 0.0, 0.0),
    }
}

/// Deforms the template into the lip shape of `a`.
pub fn articulate(template: &LipTemplate, a: Articulation) -> Vec<[f64; 2]> {
    let [cx, cy] = MOUTH_CENTRE;
    let sx = 1.0 + 0.5 * a.spread - 0.5 * a.round;
    let lip_sy = 1.0 + 0.6 * a.round;
    (0..template.len())
        .map(|i| {
            let [x, y] = template.point(i);
            let (dx, dy) = (x - cx, y - cy);
            let lower = dy > 0.0;
            let (nx, ny) = if JAW.indices().contains(&i) {
                let depth = ((y - 0.45) / 0.5).clamp(0.0, 1.0);
                (cx + dx * (1.0 + 0.05 * a.spread), y + 0.045 * a.open * depth)
            } else {
                let outer = OUTER_LIP.indices().contains(&i);
                let inner = INNER_LIP.indices().contains(&i);
                let gain = if PERIORAL.indices().contains(&i) { 0.5 } else { 1.0 };
                // taper the vertical motion towards the mouth corners
                let half_width = if inner { 0.15 } else if outer { 0.22 } else { 0.32 };
                let taper = (1.0 - (dx / half_width).powi(2)).max(0.0).sqrt();
                let mut sy = 1.0 + gain * (lip_sy - 1.0);
                if inner {
                    sy *= 1.0 - a.press;
                } else if outer {
                    sy *= 1.0 - 0.3 * a.press;
                }
                let mut ny = cy + dy * sy;
                if lower {
                    ny += gain * taper * (0.16 * a.open - 0.06 * a.tuck);
                } else {
                    ny -= gain * taper * 0.05 * a.open;
                }
                (cx + dx * (1.0 + gain * (sx - 1.0)), ny)
            };
            [nx.clamp(0.0, 1.0), ny.clamp(0.0, 1.0)]
        })
        .collect()
}

/// Lip shape and dwell time for every vocabulary token.
#[derive(Clone, Debug, PartialEq)]
pub struct VisemePrototypeTable {
    shapes: Vec<Vec<[f64; 2]>>,
    dwell: Vec<usize>,
}

impl VisemePrototypeTable {
    /// Articulatory prototypes with every member of each `collapse` group
    /// sharing the shape of the group's first member.
    pub fn articulatory(template: &LipTemplate, collapse: &[Vec<Token>], dwell: usize) -> Self {
        let mut shapes: Vec<Vec<[f64; 2]>> = Token::all().map(|t| articulate(template, articulation(t))).collect();
        for group in collapse {
            if let Some(&head) = group.first() {
                for &t in &group[1..] {
                    shapes[t.index()] = shapes[head.index()].clone();
                }
            }
        }
        Self {
            shapes,
            dwell: vec![dwell; VOCAB_SIZE],
        }
    }

    pub fn shape(&self, tok: Token) -> &[[f64; 2]] {
        &self.shapes[tok.index()]
    }

    pub fn dwell(&self, tok: Token) -> usize {
        self.dwell[tok.index()]
    }

    pub fn set_dwell(&mut self, tok: Token, frames: usize) {
        self.dwell[tok.index()] = frames;
    }

    pub fn nodes(&self) -> usize {
        self.shapes[0].len()
    }
}

pub fn default_collapse_groups() -> Vec<Vec<String>> {
    vec![vec!["B".into(), "P".into(), "M".into()], vec!["T".into(), "D".into()]]
}

fn parse_groups(groups: &[Vec<String>]) -> Result<Vec<Vec<Token>>, SynthError> {
    groups
        .iter()
        .map(|g| {
            g.iter()
                .map(|s| s.parse::<Token>().map_err(|e| SynthError::InvalidConfig(e.to_string())))
                .collect()
        })
        .collect()
}

/// Generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Frames per phoneme.
    pub dwell: usize,
    /// Landmark jitter, unit-square standard deviation.
    pub noise_sigma: f64,
    /// Half-range of the per-utterance speaker scale, rotation and shift.
    pub speaker_variation: f64,
    /// Probability that a frame's landmarks are missing.
    pub landmark_dropout: f64,
    pub frame_height: usize,
    pub frame_width: usize,
    /// Blob radius in pixels.
    pub blob_sigma: f64,
    /// Phonemes sharing one lip shape.
    pub collapse: Vec<Vec<String>>,
    pub min_words: usize,
    pub max_words: usize,
    /// Successors per word in the sentence generator's bigram chain.
    pub fanout: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dwell: 3,
            noise_sigma: 0.01,
            speaker_variation: 0.0,
            landmark_dropout: 0.0,
            frame_height: 16,
            frame_width: 16,
            blob_sigma: 0.7,
            collapse: default_collapse_groups(),
            min_words: 2,
            max_words: 6,
            fanout: 6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.dwell == 0 {
            return bad("dwell must be at least 1");
        }
        if !(self.noise_sigma >= 0.0 && self.speaker_variation >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if !(0.0..1.0).contains(&self.landmark_dropout) {
            return bad("landmark_dropout must lie in [0, 1)");
        }
        if self.frame_height == 0 || self.frame_width == 0 || !(self.blob_sigma > 0.0) {
            return bad("frame size and blob_sigma must be positive");
        }
        if self.min_words == 0 || self.min_words > self.max_words || self.fanout == 0 {
            return bad("need 1 <= min_words <= max_words and fanout >= 1");
        }
        parse_groups(&self.collapse).map(|_| ())
    }

    pub fn prototypes(&self) -> Result<VisemePrototypeTable, SynthError> {
        Ok(VisemePrototypeTable::articulatory(
            &LipTemplate::canonical(),
            &parse_groups(&self.collapse)?,
            self.dwell,
        ))
    }
}

/// One synthetic recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub words: Vec<String>,
    pub phonemes: PhonemeSequence,
    pub landmarks: LandmarkClip,
    pub frames: FrameClip,
}

impl Utterance {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    pub fn num_frames(&self) -> usize {
        self.landmarks.len()
    }
}

/// Random similarity transform about the mouth centre.
fn speaker_transform(rng: &mut ChaCha8Rng, v: f64) -> impl Fn([f64; 2]) -> [f64; 2] {
    let (scale, angle, sx, sy) = if v > 0.0 {
        (
            1.0 + rng.random_range(-v..v),
            rng.random_range(-v..v) * 0.5,
            rng.random_range(-v..v) * 0.3,
            rng.random_range(-v..v) * 0.3,
        )
    } else {
        (1.0, 0.0, 0.0, 0.0)
    };
    let (s, c) = angle.sin_cos();
    let [cx, cy] = MOUTH_CENTRE;
    move |[x, y]: [f64; 2]| {
        let (dx, dy) = (x - cx, y - cy);
        [cx + sx + scale * (c * dx - s * dy), cy + sy + scale * (s * dx + c * dy)]
    }
}

/// Renders one utterance. Each token's shape is reached at frame
/// `start + dwell / 2` of its slot; frames between keyframes interpolate
/// linearly and frames outside the first and last keyframe hold them.
pub fn synth_utterance<S: AsRef<str>>(
    id: &str,
    words: &[S],
    lexicon: &Lexicon,
    prototypes: &VisemePrototypeTable,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<Utterance, SynthError> {
    cfg.validate()?;
    if words.is_empty() {
        return Err(SynthError::EmptyInput);
    }
    if let Some(w) = words.iter().find(|w| !lexicon.contains(w.as_ref())) {
        return Err(SynthError::OOVWord(w.as_ref().to_string()));
    }
    let phonemes = g2p(words, lexicon);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speaker = speaker_transform(&mut rng, cfg.speaker_variation);
    let nodes = prototypes.nodes();

    let mut keys: Vec<(usize, Vec<[f64; 2]>)> = Vec::with_capacity(phonemes.len());
    let mut total = 0;
    for &tok in &phonemes {
        let d = prototypes.dwell(tok);
        keys.push((total + d / 2, prototypes.shape(tok).iter().map(|&p| speaker(p)).collect()));
        total += d;
    }

    let jitter = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut rows = Vec::with_capacity(total);
    let mut images = Vec::with_capacity(total * cfg.frame_height * cfg.frame_width);
    let mut next = 0;
    for t in 0..total {
        while next < keys.len() && keys[next].0 <= t {
            next += 1;
        }
        let points: Vec<[f64; 2]> = if next == 0 {
            keys[0].1.clone()
        } else if next == keys.len() {
            keys[next - 1].1.clone()
        } else {
            let (t0, a) = &keys[next - 1];
            let (t1, b) = &keys[next];
            let w = (t - t0) as f64 / (t1 - t0) as f64;
            a.iter().zip(b).map(|(p, q)| [p[0] + w * (q[0] - p[0]), p[1] + w * (q[1] - p[1])]).collect()
        };
        let points: Vec<[f64; 2]> = if cfg.noise_sigma > 0.0 {
            points
                .into_iter()
                .map(|[x, y]| {
                    [
                        (x + jitter.sample(&mut rng)).clamp(0.0, 1.0),
                        (y + jitter.sample(&mut rng)).clamp(0.0, 1.0),
                    ]
                })
                .collect()
        } else {
            points
        };
        images.extend(render_frame(&points, cfg.frame_height, cfg.frame_width, cfg.blob_sigma));
        let dropped = cfg.landmark_dropout > 0.0 && rng.random::<f64>() < cfg.landmark_dropout;
        rows.push(if dropped {
            vec![0.0; nodes * 2]
        } else {
            points.iter().flatten().copied().collect()
        });
    }

    let landmarks = LandmarkClip::from_rows(&rows, nodes).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let frames = Tensor::new(&[total, cfg.frame_height, cfg.frame_width], images).expect("frame buffer size");
    Ok(Utterance {
        id: id.to_string(),
        words: words.iter().map(|w| w.as_ref().to_string()).collect(),
        phonemes,
        landmarks,
        frames: FrameClip::new(frames).expect("3-d frames"),
    })
}

/// Sparse first-order Markov chain over a word list: every word has
/// `fanout` successors with random weights, and sentence lengths are
/// uniform in `[min_words, max_words]`.
#[derive(Clone, Debug)]
pub struct SentenceGenerator {
    words: Vec<String>,
    successors: Vec<Vec<(usize, f64)>>,
    min_words: usize,
    max_words: usize,
}

impl SentenceGenerator {
    pub fn new(words: Vec<String>, cfg: &SynthConfig, seed: u64) -> Result<Self, SynthError> {
        if words.is_empty() {
            return Err(SynthError::EmptyInput);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = words.len();
        let fanout = cfg.fanout.min(n);
        let successors = (0..n)
            .map(|_| {
                let picks = rand::seq::index::sample(&mut rng, n, fanout);
                let mut succ: Vec<(usize, f64)> = picks.iter().map(|j| (j, rng.random_range(0.2..1.0))).collect();
                let total: f64 = succ.iter().map(|s| s.1).sum();
                succ.iter_mut().for_each(|s| s.1 /= total);
                succ
            })
            .collect();
        Ok(Self {
            words,
            successors,
            min_words: cfg.min_words,
            max_words: cfg.max_words,
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<String> {
        let len = rng.random_range(self.min_words..=self.max_words);
        let mut cur = rng.random_range(0..self.words.len());
        let mut out = vec![self.words[cur].clone()];
        while out.len() < len {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let succ = &self.successors[cur];
            cur = succ[succ.len() - 1].0;
            for &(j, p) in succ {
                acc += p;
                if u < acc {
                    cur = j;
                    break;
                }
            }
            out.push(self.words[cur].clone());
        }
        out
    }
}

/// `count` words with unique pronunciations, chosen by `seed`.
pub fn select_words(lexicon: &Lexicon, count: usize, seed: u64) -> Vec<String> {
    let mut words: Vec<String> = lexicon.unambiguous_words().into_iter().map(String::from).collect();
    words.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    words.truncate(count);
    words.sort();
    words
}

/// `count` utterances with ids `{prefix}{index:05}`. Utterance `i` uses
/// its own random stream, so any prefix of a larger corpus is identical to
/// a smaller one generated with the same seed.
pub fn generate_corpus(
    prefix: &str,
    generator: &SentenceGenerator,
    lexicon: &Lexicon,
    prototypes: &VisemePrototypeTable,
    cfg: &SynthConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<Utterance>, SynthError> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let words = generator.sample(&mut rng);
            let utt_seed = rng.random();
            synth_utterance(&format!("{prefix}{i:05}"), &words, lexicon, prototypes, cfg, utt_seed)
        })
        .collect()
}
