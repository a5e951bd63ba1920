//! The stage-1 phoneme recognizer: a frame encoder, a landmark encoder, an
//! MLP fusing the two streams, a CTC head and an autoregressive decoder.
//!
//! Class layouts:
//! * CTC head, 42 columns: blank at 0, vocabulary token `k` at `k + 1`.
//! * Decoder output, 42 columns: token `k` at `k`, end-of-sequence at 41.
//! * Decoder input ids: token `k` as `k`, begin-of-sequence as 41.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::frames::{FrameClip, FrameStats};
use crate::graph::{
    GraphError, LandmarkClip, LandmarkStats, LipGraph, LipTemplate, PasrDims, PasrEncoder,
};
use crate::nn::{sinusoidal_positions, Bound, DecoderBlock, EncoderBlock, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Padding, Tape, Tensor, TensorError, Var};
use crate::vocab::{Token, VOCAB_SIZE};

pub const CTC_CLASSES: usize = VOCAB_SIZE + 1;
pub const BLANK: usize = 0;
pub const DECODER_CLASSES: usize = VOCAB_SIZE + 1;
pub const EOS: usize = VOCAB_SIZE;
pub const BOS: usize = VOCAB_SIZE;

pub fn ctc_column(tok: Token) -> usize {
    tok.index() + 1
}

/// Inverse of [`ctc_column`]; `None` for the blank.
pub fn ctc_token(column: usize) -> Option<Token> {
    column.checked_sub(1).and_then(Token::from_index)
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("decoder prefix must start with the begin-of-sequence id")]
    EmptyPrefix,
    #[error("landmarks are required when the landmark stream is enabled")]
    MissingLandmarks,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture and input settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub d_enc: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    /// Width of the depthwise convolution inside encoder blocks; 0 turns
    /// the sub-block off.
    pub conv_width: usize,
    pub conv3d_kernel: [usize; 3],
    pub conv3d_stride: [usize; 3],
    pub frontend_channels: usize,
    pub residual_blocks: usize,
    pub fusion_hidden: usize,
    pub vocab_size: usize,
    /// Disable to train on frames alone; fusion then sees a zero landmark
    /// block.
    pub use_landmarks: bool,
    pub gcn_channels: usize,
    pub gcn_blocks: usize,
    pub gcn_temporal_kernel: usize,
    pub graph_neighbors: usize,
    /// Height and width of the square mouth crops.
    pub frame_size: usize,
    pub frame_stats: FrameStats,
    /// Landmarks enter the encoder as offsets from the canonical template
    /// divided by this scale.
    pub landmark_stats: LandmarkStats,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            d_enc: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            ff_hidden: 128,
            conv_width: 5,
            conv3d_kernel: [5, 7, 7],
            conv3d_stride: [1, 2, 2],
            frontend_channels: 8,
            residual_blocks: 2,
            fusion_hidden: 128,
            vocab_size: VOCAB_SIZE,
            use_landmarks: true,
            gcn_channels: 64,
            gcn_blocks: 6,
            gcn_temporal_kernel: 5,
            graph_neighbors: 4,
            frame_size: 16,
            frame_stats: FrameStats::default(),
            landmark_stats: LandmarkStats::default(),
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size != VOCAB_SIZE {
            return bad(format!("vocab_size must be {VOCAB_SIZE}"));
        }
        if self.heads == 0 || self.d_enc == 0 || self.d_enc % self.heads != 0 {
            return bad(format!("d_enc {} is not divisible by {} heads", self.d_enc, self.heads));
        }
        if self.conv_width != 0 && self.conv_width % 2 == 0 {
            return bad("conv_width must be odd or 0".into());
        }
        if self.gcn_temporal_kernel % 2 == 0 || self.conv3d_kernel[0] % 2 == 0 {
            return bad("temporal kernels must be odd".into());
        }
        if self.conv3d_stride[0] != 1 {
            return bad("the front end must keep the frame rate (temporal stride 1)".into());
        }
        if self.conv3d_stride.contains(&0) || self.conv3d_kernel.contains(&0) {
            return bad("conv3d kernel and stride must be positive".into());
        }
        if [self.ff_hidden, self.fusion_hidden, self.frontend_channels, self.frame_size].contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if self.use_landmarks && (self.gcn_channels == 0 || self.gcn_blocks == 0 || self.graph_neighbors == 0) {
            return bad("landmark encoder needs gcn_channels, gcn_blocks and graph_neighbors >= 1".into());
        }
        if !(self.frame_stats.std > 0.0) {
            return bad("frame_stats.std must be positive".into());
        }
        if !(self.landmark_stats.scale > 0.0) {
            return bad("landmark_stats.scale must be positive".into());
        }
        Ok(())
    }

    fn conv_width(&self) -> Option<usize> {
        (self.conv_width > 0).then_some(self.conv_width)
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: ParamId,
    bias1: ParamId,
    conv2: ParamId,
    bias2: ParamId,
}

/// Frame encoder: 3-D convolution front end, residual 2-D blocks applied
/// per frame, global spatial average, projection and encoder blocks.
#[derive(Clone, Debug)]
pub struct VasrEncoder {
    front: ParamId,
    front_bias: ParamId,
    blocks: Vec<ResidualBlock>,
    project: Linear,
    encoder: Vec<EncoderBlock>,
    norm: LayerNorm,
    stride: [usize; 3],
}

fn conv_init(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in = shape[0] * shape[1] * shape[2] * shape[3];
    Tensor::randn(&shape, (2.0 / fan_in as f64).sqrt(), rng)
}

impl VasrEncoder {
    fn new(store: &mut ParamStore, cfg: &Stage1Config, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.frontend_channels;
        let [kt, kh, kw] = cfg.conv3d_kernel;
        let front = store.add("vasr.front.kernel", conv_init([kt, kh, kw, 1, c], rng));
        let front_bias = store.add("vasr.front.bias", Tensor::zeros(&[c]));
        let blocks = (0..cfg.residual_blocks)
            .map(|i| {
                let mut conv = |n: &str| store.add(format!("vasr.res{i}.{n}"), conv_init([1, 3, 3, c, c], rng));
                let conv1 = conv("conv1");
                let conv2 = conv("conv2");
                ResidualBlock {
                    conv1,
                    bias1: store.add(format!("vasr.res{i}.bias1"), Tensor::zeros(&[c])),
                    conv2,
                    bias2: store.add(format!("vasr.res{i}.bias2"), Tensor::zeros(&[c])),
                }
            })
            .collect();
        let project = Linear::new(store, "vasr.project", c, cfg.d_enc, rng);
        let encoder = (0..cfg.encoder_layers)
            .map(|i| {
                EncoderBlock::new(
                    store,
                    &format!("vasr.enc{i}"),
                    cfg.d_enc,
                    cfg.heads,
                    cfg.ff_hidden,
                    cfg.conv_width(),
                    rng,
                )
            })
            .collect();
        let norm = LayerNorm::new(store, "vasr.norm", cfg.d_enc);
        Self {
            front,
            front_bias,
            blocks,
            project,
            encoder,
            norm,
            stride: cfg.conv3d_stride,
        }
    }

    /// `frames [T, H, W] -> [T, d_enc]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, frames: Var) -> Result<Var, TensorError> {
        let &[t, h, w] = tape.shape(frames) else {
            return Err(TensorError::ShapeMismatch {
                op: "vasr_encode",
                detail: format!("expected [T, H, W], got {:?}", tape.shape(frames)),
            });
        };
        let same = [Padding::Same; 3];
        let x = tape.reshape(frames, &[t, h, w, 1])?;
        let x = tape.conv3d(x, p.get(self.front), self.stride, same)?;
        let x = tape.add_bias(x, p.get(self.front_bias))?;
        let mut x = tape.relu(x);
        for b in &self.blocks {
            let y = tape.conv3d(x, p.get(b.conv1), [1, 1, 1], same)?;
            let y = tape.add_bias(y, p.get(b.bias1))?;
            let y = tape.relu(y);
            let y = tape.conv3d(y, p.get(b.conv2), [1, 1, 1], same)?;
            let y = tape.add_bias(y, p.get(b.bias2))?;
            let y = tape.add(y, x)?;
            x = tape.relu(y);
        }
        let s = tape.shape(x).to_vec();
        let x = tape.reshape(x, &[s[0], s[1] * s[2], s[3]])?;
        let pooled = tape.mean_axis1(x)?;
        let mut h = self.project.forward(tape, p, pooled)?;
        let d = tape.shape(h)[1];
        let pos = tape.constant(sinusoidal_positions(t, d));
        h = tape.add(h, pos)?;
        for e in &self.encoder {
            h = e.forward(tape, p, h)?;
        }
        self.norm.forward(tape, p, h)
    }
}

/// Two-layer MLP over the concatenated streams.
#[derive(Clone, Debug)]
pub struct Fusion {
    hidden: Linear,
    out: Linear,
}

impl Fusion {
    fn new(store: &mut ParamStore, cfg: &Stage1Config, rng: &mut ChaCha8Rng) -> Self {
        Self {
            hidden: Linear::new(store, "fusion.hidden", 2 * cfg.d_enc, cfg.fusion_hidden, rng),
            out: Linear::new(store, "fusion.out", cfg.fusion_hidden, cfg.d_enc, rng),
        }
    }

    /// `visual [Tv, d]`, `landmark [Tl, d]` -> `[Tv, d]`; the landmark
    /// stream is linearly resampled to `Tv` frames when the lengths differ.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, visual: Var, landmark: Var) -> Result<Var, ModelError> {
        let (tv, tl) = (tape.shape(visual)[0], tape.shape(landmark)[0]);
        if tv == 0 || tl == 0 {
            return Err(ModelError::EmptyInput("fuse"));
        }
        let landmark = if tl == tv {
            landmark
        } else {
            let m = tape.constant(interpolation_matrix(tv, tl));
            tape.matmul(m, landmark)?
        };
        let x = tape.concat_cols(&[visual, landmark])?;
        let h = self.hidden.forward(tape, p, x)?;
        let h = tape.mish(h);
        Ok(self.out.forward(tape, p, h)?)
    }
}

/// `[to, from]` matrix resampling a sequence by linear interpolation with
/// aligned endpoints.
pub fn interpolation_matrix(to: usize, from: usize) -> Tensor {
    let mut m = Tensor::zeros(&[to, from]);
    for i in 0..to {
        let pos = if to == 1 {
            0.0
        } else {
            i as f64 * (from - 1) as f64 / (to - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(from - 1);
        let w = pos - lo as f64;
        m.data_mut()[i * from + lo] += 1.0 - w;
        m.data_mut()[i * from + hi] += w;
    }
    m
}

/// Autoregressive phoneme decoder.
#[derive(Clone, Debug)]
pub struct PhonemeDecoder {
    embed: ParamId,
    blocks: Vec<DecoderBlock>,
    norm: LayerNorm,
    out: Linear,
}

impl PhonemeDecoder {
    fn new(store: &mut ParamStore, cfg: &Stage1Config, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_enc;
        Self {
            embed: store.add("decoder.embed", Tensor::randn(&[VOCAB_SIZE + 1, d], 1.0, rng)),
            blocks: (0..cfg.decoder_layers)
                .map(|i| DecoderBlock::new(store, &format!("decoder.block{i}"), d, cfg.heads, cfg.ff_hidden, rng))
                .collect(),
            norm: LayerNorm::new(store, "decoder.norm", d),
            out: Linear::new(store, "decoder.out", d, DECODER_CLASSES, rng),
        }
    }

    /// Logits `[prefix.len(), 42]` for the next symbol after each prefix
    /// position.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, memory: Var, prefix: &[usize]) -> Result<Var, ModelError> {
        if prefix.first() != Some(&BOS) {
            return Err(ModelError::EmptyPrefix);
        }
        let d = tape.shape(memory)[1];
        let x = tape.embedding(p.get(self.embed), prefix)?;
        let pos = tape.constant(sinusoidal_positions(prefix.len(), d));
        let mut x = tape.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(tape, p, x, memory)?;
        }
        let x = self.norm.forward(tape, p, x)?;
        Ok(self.out.forward(tape, p, x)?)
    }
}

/// Both heads of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Output {
    pub fused: Var,
    /// `[T, 42]` log-probabilities.
    pub ctc_logprobs: Var,
    /// `[L, 42]` decoder logits, present when a prefix was supplied.
    pub ce_logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Stage1Model {
    config: Stage1Config,
    store: ParamStore,
    vasr: VasrEncoder,
    pasr: Option<(PasrEncoder, LipGraph, LipTemplate)>,
    fusion: Fusion,
    ctc_head: Linear,
    decoder: PhonemeDecoder,
}

impl Stage1Model {
    /// Freshly initialized parameters drawn from `config.seed`.
    pub fn new(config: Stage1Config) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let vasr = VasrEncoder::new(&mut store, &config, &mut rng);
        let pasr = if config.use_landmarks {
            let dims = PasrDims {
                gcn_channels: config.gcn_channels,
                gcn_blocks: config.gcn_blocks,
                temporal_kernel: config.gcn_temporal_kernel,
                d_enc: config.d_enc,
                heads: config.heads,
                ff_hidden: config.ff_hidden,
                encoder_layers: config.encoder_layers,
                conv_width: config.conv_width(),
            };
            let enc = PasrEncoder::new(&mut store, "pasr", &dims, &mut rng);
            Some((enc, LipGraph::canonical(config.graph_neighbors)?, LipTemplate::canonical()))
        } else {
            None
        };
        let fusion = Fusion::new(&mut store, &config, &mut rng);
        let ctc_head = Linear::new(&mut store, "ctc_head", config.d_enc, CTC_CLASSES, &mut rng);
        let decoder = PhonemeDecoder::new(&mut store, &config, &mut rng);
        Ok(Self {
            config,
            store,
            vasr,
            pasr,
            fusion,
            ctc_head,
            decoder,
        })
    }

    pub fn config(&self) -> &Stage1Config {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn ctc_head(&self) -> &Linear {
        &self.ctc_head
    }

    fn frames_var(&self, tape: &mut Tape, frames: &FrameClip) -> Result<Var, ModelError> {
        let s = self.config.frame_size;
        if frames.height() != s || frames.width() != s {
            return Err(TensorError::ShapeMismatch {
                op: "vasr_encode",
                detail: format!("frames are {}x{}, model expects {s}x{s}", frames.height(), frames.width()),
            }
            .into());
        }
        Ok(tape.constant(frames.normalized(self.config.frame_stats).into_tensor()))
    }

    /// Fused `[T, d_enc]` features.
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        frames: &FrameClip,
        landmarks: Option<&LandmarkClip>,
    ) -> Result<Var, ModelError> {
        if frames.is_empty() {
            return Err(ModelError::EmptyInput("frames"));
        }
        let fv = self.frames_var(tape, frames)?;
        let visual = self.vasr.forward(tape, p, fv)?;
        let landmark = match &self.pasr {
            Some((enc, graph, template)) => {
                let clip = landmarks.ok_or(ModelError::MissingLandmarks)?;
                if clip.is_empty() {
                    return Err(ModelError::EmptyInput("landmarks"));
                }
                let x = tape.constant(clip.normalized(template, self.config.landmark_stats));
                enc.forward(tape, p, x, graph)?
            }
            None => {
                let shape = tape.shape(visual).to_vec();
                tape.constant(Tensor::zeros(&shape))
            }
        };
        self.fusion.forward(tape, p, visual, landmark)
    }

    pub fn ctc_project(&self, tape: &mut Tape, p: &Bound, fused: Var) -> Result<Var, ModelError> {
        let logits = self.ctc_head.forward(tape, p, fused)?;
        Ok(tape.log_softmax(logits))
    }

    pub fn decode_head(&self, tape: &mut Tape, p: &Bound, fused: Var, prefix: &[usize]) -> Result<Var, ModelError> {
        self.decoder.forward(tape, p, fused, prefix)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        frames: &FrameClip,
        landmarks: Option<&LandmarkClip>,
        prefix: Option<&[usize]>,
    ) -> Result<Stage1Output, ModelError> {
        let fused = self.encode(tape, p, frames, landmarks)?;
        let ctc_logprobs = self.ctc_project(tape, p, fused)?;
        let ce_logits = prefix.map(|pre| self.decode_head(tape, p, fused, pre)).transpose()?;
        Ok(Stage1Output {
            fused,
            ctc_logprobs,
            ce_logits,
        })
    }

    /// CTC log-probabilities `[T, 42]` without gradients.
    pub fn ctc_logprobs(&self, frames: &FrameClip, landmarks: Option<&LandmarkClip>) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, frames, landmarks, None)?;
        Ok(tape.value(out.ctc_logprobs).clone())
    }

    /// Greedy autoregressive decoding, stopping at end-of-sequence or after
    /// `max_len` symbols.
    pub fn decode_greedy(
        &self,
        frames: &FrameClip,
        landmarks: Option<&LandmarkClip>,
        max_len: usize,
    ) -> Result<Vec<Token>, ModelError> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let fused = self.encode(&mut tape, &p, frames, landmarks)?;
        let memory = tape.value(fused).clone();
        let mut prefix = vec![BOS];
        let mut out = Vec::new();
        while out.len() < max_len {
            let mut step = Tape::new();
            let p = self.store.bind(&mut step, false);
            let m = step.constant(memory.clone());
            let logits = self.decoder.forward(&mut step, &p, m, &prefix)?;
            let last = step.value(logits).row(prefix.len() - 1);
            let next = argmax(last);
            if next == EOS {
                break;
            }
            out.push(Token::from_index(next).expect("decoder class is a token"));
            prefix.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value; the first on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Decoder input and output ids for one target: `[BOS, y..]` and
/// `[y.., EOS]`.
pub fn teacher_forcing(target: &[Token]) -> (Vec<usize>, Vec<usize>) {
    let mut input = vec![BOS];
    input.extend(target.iter().map(|t| t.index()));
    let mut output: Vec<usize> = target.iter().map(|t| t.index()).collect();
    output.push(EOS);
    (input, output)
}
