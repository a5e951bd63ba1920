//! Parameter storage and the layer building blocks shared by both encoders
//! and the decoder.

use rand::Rng;

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone(), requires_grad)).collect(),
        }
    }

    /// Gradients collected from `tape` after backward; parameters that did
    /// not take part in the loss get zeros.
    pub fn collect_grads(&self, tape: &Tape, bound: &Bound) -> Vec<Tensor> {
        self.values
            .iter()
            .zip(&bound.vars)
            .map(|(v, var)| tape.grad(*var).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }
}

/// Tape handles for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, shape: &[usize], rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(fan_in, fan_out, &[fan_in, fan_out], rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    /// `x [rows, in] -> [rows, out]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let y = tape.matmul(x, p.get(self.weight))?;
        tape.add_bias(y, p.get(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        tape.layer_norm(x, p.get(self.gamma), p.get(self.beta), Self::EPS)
    }
}

/// Scaled dot-product attention split over `heads` column groups:
/// `q [Tq, d]`, `k, v [Tk, d]` -> `[Tq, d]`. With `causal`, query `i`
/// attends to keys `0..=i` only (requires `Tq == Tk`).
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    causal: bool,
) -> Result<Var, TensorError> {
    let d = tape.shape(q)[1];
    if heads == 0 || d % heads != 0 || tape.shape(k)[1] != d || tape.shape(v) != tape.shape(k) {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            detail: format!(
                "q {:?}, k {:?}, v {:?}, heads {heads}",
                tape.shape(q),
                tape.shape(k),
                tape.shape(v)
            ),
        });
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax(s, causal)?;
        outs.push(tape.matmul(a, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Multi-head attention with query/key/value input projections and an
/// output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        queries: Var,
        memory: Var,
        causal: bool,
    ) -> Result<Var, TensorError> {
        let q = self.query.forward(tape, p, queries)?;
        let k = self.key.forward(tape, p, memory)?;
        let v = self.value.forward(tape, p, memory)?;
        let a = scaled_dot_attention(tape, q, k, v, self.heads, causal)?;
        self.output.forward(tape, p, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.mish(h);
        self.down.forward(tape, p, h)
    }
}

/// Depthwise temporal convolution sub-block: conv over time, Mish, then a
/// pointwise projection.
#[derive(Clone, Debug)]
pub struct TemporalConvModule {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub pointwise: Linear,
}

impl TemporalConvModule {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, width: usize, rng: &mut R) -> Self {
        let bound = (3.0 / width as f64).sqrt();
        Self {
            kernel: store.add(format!("{name}.dw"), Tensor::uniform(&[width, dim], bound, rng)),
            bias: store.add(format!("{name}.dw_bias"), Tensor::zeros(&[dim])),
            pointwise: Linear::new(store, &format!("{name}.pw"), dim, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let h = tape.temporal_conv(x, p.get(self.kernel))?;
        let h = tape.add_bias(h, p.get(self.bias))?;
        let h = tape.mish(h);
        self.pointwise.forward(tape, p, h)
    }
}

/// Pre-norm self-attention encoder block with an optional convolution
/// sub-block between attention and feed-forward.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub conv: Option<(LayerNorm, TemporalConvModule)>,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        conv_width: Option<usize>,
        rng: &mut R,
    ) -> Self {
        Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            conv: conv_width.map(|w| {
                (
                    LayerNorm::new(store, &format!("{name}.conv_norm"), dim),
                    TemporalConvModule::new(store, &format!("{name}.conv"), dim, w, rng),
                )
            }),
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_hidden, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let h = self.attn_norm.forward(tape, p, x)?;
        let h = self.attn.forward(tape, p, h, h, false)?;
        let mut x = tape.add(x, h)?;
        if let Some((norm, conv)) = &self.conv {
            let h = norm.forward(tape, p, x)?;
            let h = conv.forward(tape, p, h)?;
            x = tape.add(x, h)?;
        }
        let h = self.ff_norm.forward(tape, p, x)?;
        let h = self.ff.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention over an
/// encoder memory, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), dim),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng),
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng),
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_hidden, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, memory: Var) -> Result<Var, TensorError> {
        let h = self.self_norm.forward(tape, p, x)?;
        let h = self.self_attn.forward(tape, p, h, h, true)?;
        let x = tape.add(x, h)?;
        let h = self.cross_norm.forward(tape, p, x)?;
        let h = self.cross_attn.forward(tape, p, h, memory, false)?;
        let x = tape.add(x, h)?;
        let h = self.ff_norm.forward(tape, p, x)?;
        let h = self.ff.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[len, dim], |i| {
        let (pos, j) = (i / dim, i % dim);
        let rate = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        let angle = pos as f64 * rate;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
