use std::sync::Arc;

use super::kernels::{self, Conv3dGeom, MatView, Padding, SparseAdjacency};
use super::{mismatch, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Mish(Var),
    Reshape(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    LogSoftmax(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    Conv3d { x: Var, kernel: Var, geom: Box<Conv3dGeom>, cols: Vec<f64> },
    GraphMix { x: Var, adj: Arc<SparseAdjacency> },
    TemporalConv { x: Var, kernel: Var },
    MeanAxis1 { x: Var },
    Fused { x: Var, local_grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Append-only record of a computation, replayed in reverse by
/// [`Tape::backward`].
///
/// Nodes are stored in creation order, so every node's inputs precede it.
/// A tape is single-threaded; independent forward/backward passes use
/// independent tapes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(
            !inputs.iter().all(|v| self.value(*v).all_finite()) || value.all_finite(),
            "non-finite output from {op:?}"
        );
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Results that cannot carry gradient need no backward bookkeeping.
        let op = if rg { op } else { Op::Leaf };
        self.push_raw(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(mismatch(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    /// `a [m,k] · b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m,k] · bᵀ` for `b [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (br, bc) = self.matrix_dims("matmul", b)?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(mismatch(
                "matmul",
                format!("inner dims {k} vs {bk} ({:?} x {:?})", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        let bv = if trans_b {
            MatView::row_major(n, k).t()
        } else {
            MatView::row_major(k, n)
        };
        kernels::gemm(
            self.value(a).data(),
            MatView::row_major(m, k),
            self.value(b).data(),
            bv,
            &mut out,
            false,
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        self.same_shape(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `bias [n]` to every length-`n` row of `x [..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let n = self.value(x).cols();
        if self.shape(bias) != [n] {
            return Err(mismatch(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(n) {
            for (r, bb) in row.iter_mut().zip(b) {
                *r += bb;
            }
        }
        Ok(self.push(v, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut v = self.value(x).clone();
        v.data_mut().iter_mut().for_each(|e| *e *= s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|e| f(*e)).collect(),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |e| e.max(0.0));
        self.push(v, Op::Relu(x), &[x])
    }

    /// `x · tanh(ln(1 + eˣ))`, elementwise.
    pub fn mish(&mut self, x: Var) -> Var {
        let v = self.map(x, kernels::mish);
        self.push(v, Op::Mish(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let v = Tensor::new(&[c, r], out)?;
        Ok(self.push(v, Op::Transpose(x), &[x]))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.matrix_dims("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(mismatch("slice_cols", format!("{start}+{len} of {c} columns")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let v = Tensor::new(&[r, len], out)?;
        Ok(self.push(v, Op::SliceCols { x, start }, &[x]))
    }

    /// Feature-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput("concat_cols"));
        }
        let (r, _) = self.matrix_dims("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix_dims("concat_cols", p)?;
            if pr != r {
                return Err(mismatch("concat_cols", format!("row counts {r} vs {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let v = Tensor::new(&[r, total], out)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Row-wise `log softmax` over the last axis, via a max shift.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let n = v.cols();
        for row in v.data_mut().chunks_mut(n) {
            let lse = kernels::log_sum_exp(row);
            row.iter_mut().for_each(|e| *e -= lse);
        }
        self.push(v, Op::LogSoftmax(x), &[x])
    }

    /// Row-wise softmax over the last axis. With `causal`, row `i` of a
    /// square matrix puts zero mass on columns `j > i`.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var, TensorError> {
        let mut v = self.value(x).clone();
        let n = v.cols();
        if causal && (v.shape().len() != 2 || v.rows() != n) {
            return Err(mismatch("softmax", format!("causal mask needs a square matrix, got {:?}", v.shape())));
        }
        for (i, row) in v.data_mut().chunks_mut(n).enumerate() {
            let live = if causal { i + 1 } else { n };
            let m = row[..live].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in &mut row[..live] {
                *e = (*e - m).exp();
                z += *e;
            }
            row[..live].iter_mut().for_each(|e| *e /= z);
            row[live..].iter_mut().for_each(|e| *e = 0.0);
        }
        Ok(self.push(v, Op::Softmax(x), &[x]))
    }

    /// Normalizes each row of the last axis to zero mean and unit variance,
    /// then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let n = self.value(x).cols();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(mismatch("layer_norm", format!("features {n}, gamma {:?}", self.shape(gamma))));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, e) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (e - mean) * rs;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, xh)| xh * g[i % n] + b[i % n])
            .collect();
        let v = Tensor::new(self.shape(x), out)?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Rows of `table [V, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (vocab, d) = self.matrix_dims("embedding", table)?;
        if ids.is_empty() {
            return Err(TensorError::EmptyInput("embedding"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(mismatch("embedding", format!("id {bad} out of range for {vocab} rows")));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let v = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(v, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// `out[i] = x[i, idx[i]]` for `x [L, V]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (l, vocab) = self.matrix_dims("pick", x)?;
        if idx.len() != l || idx.iter().any(|&i| i >= vocab) {
            return Err(mismatch("pick", format!("{} indices into [{l}, {vocab}]", idx.len())));
        }
        let src = self.value(x).data();
        let out = idx.iter().enumerate().map(|(i, &j)| src[i * vocab + j]).collect();
        let v = Tensor::new(&[l], out)?;
        Ok(self.push(v, Op::Pick { x, idx: idx.to_vec() }, &[x]))
    }

    /// Cross-correlation of `input [T,H,W,Cin]` with `kernel [kt,kh,kw,Cin,Cout]`.
    pub fn conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: [usize; 3],
        padding: [Padding; 3],
    ) -> Result<Var, TensorError> {
        if stride.iter().any(|&s| s < 1) {
            return Err(TensorError::InvalidStride(stride.to_vec()));
        }
        let &[t, h, w, cin] = self.shape(input) else {
            return Err(mismatch("conv3d", format!("input must be [T,H,W,C], got {:?}", self.shape(input))));
        };
        let &[kt, kh, kw, kcin, cout] = self.shape(kernel) else {
            return Err(mismatch("conv3d", format!("kernel must be 5-D, got {:?}", self.shape(kernel))));
        };
        if kcin != cin {
            return Err(mismatch("conv3d", format!("input channels {cin} vs kernel {kcin}")));
        }
        let ext = [t, h, w];
        let ks = [kt, kh, kw];
        let mut output = [0; 3];
        let mut pad_before = [0; 3];
        for a in 0..3 {
            let (pb, pa) = padding[a].amounts(ks[a]);
            let padded = ext[a] + pb + pa;
            if ks[a] > padded {
                return Err(mismatch(
                    "conv3d",
                    format!("kernel {ks:?} does not fit input {ext:?} with padding {padding:?}"),
                ));
            }
            output[a] = (padded - ks[a]) / stride[a] + 1;
            pad_before[a] = pb;
        }
        let geom = Conv3dGeom {
            input: [t, h, w, cin],
            kernel: ks,
            cin,
            cout,
            stride,
            pad_before,
            output,
        };
        let cols = geom.im2col(self.value(input).data());
        let p = geom.positions();
        let k = geom.patch_len();
        let mut out = vec![0.0; p * cout];
        kernels::gemm(
            &cols,
            MatView::row_major(p, k),
            self.value(kernel).data(),
            MatView::row_major(k, cout),
            &mut out,
            false,
        );
        let v = Tensor::new(&[output[0], output[1], output[2], cout], out)?;
        let op = Op::Conv3d {
            x: input,
            kernel,
            geom: Box::new(geom),
            cols,
        };
        Ok(self.push(v, op, &[input, kernel]))
    }

    /// Per-frame graph mixing `y[t] = A · x[t]` for `x [T, N, C]`.
    pub fn graph_mix(&mut self, x: Var, adj: &Arc<SparseAdjacency>) -> Result<Var, TensorError> {
        let &[t, n, c] = self.shape(x) else {
            return Err(mismatch("graph_mix", format!("expected [T,N,C], got {:?}", self.shape(x))));
        };
        if n != adj.size() {
            return Err(mismatch("graph_mix", format!("{n} nodes vs adjacency of size {}", adj.size())));
        }
        let mut out = vec![0.0; t * n * c];
        adj.mix(self.value(x).data(), t, c, &mut out);
        let v = Tensor::new(&[t, n, c], out)?;
        Ok(self.push(v, Op::GraphMix { x, adj: Arc::clone(adj) }, &[x]))
    }

    /// Depthwise convolution along the leading (time) axis with "same"
    /// zero padding: `x [T, ..., C]`, `kernel [k, C]`, `k` odd.
    pub fn temporal_conv(&mut self, x: Var, kernel: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let &[k, kc] = self.shape(kernel) else {
            return Err(mismatch("temporal_conv", format!("kernel must be [k, C], got {:?}", self.shape(kernel))));
        };
        if xs.len() < 2 || *xs.last().unwrap() != kc || k % 2 == 0 {
            return Err(mismatch(
                "temporal_conv",
                format!("input {xs:?} with kernel [{k}, {kc}] (k must be odd)"),
            ));
        }
        let t = xs[0];
        let frame = self.value(x).len() / t;
        let half = k / 2;
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let mut out = vec![0.0; t * frame];
        for ti in 0..t {
            for j in 0..k {
                let src = ti as isize + j as isize - half as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let src = src as usize * frame;
                let krow = &kd[j * kc..(j + 1) * kc];
                let o = &mut out[ti * frame..(ti + 1) * frame];
                for (i, ov) in o.iter_mut().enumerate() {
                    *ov += krow[i % kc] * xd[src + i];
                }
            }
        }
        let v = Tensor::new(&xs, out)?;
        Ok(self.push(v, Op::TemporalConv { x, kernel }, &[x, kernel]))
    }

    /// Mean over the middle axis: `[A, B, C] -> [A, C]`.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var, TensorError> {
        let &[a, b, c] = self.shape(x) else {
            return Err(mismatch("mean_axis1", format!("expected 3-D, got {:?}", self.shape(x))));
        };
        let xd = self.value(x).data();
        let mut out = vec![0.0; a * c];
        let inv = 1.0 / b as f64;
        for i in 0..a {
            for j in 0..b {
                let row = &xd[(i * b + j) * c..(i * b + j + 1) * c];
                for (o, e) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *o += e * inv;
                }
            }
        }
        let v = Tensor::new(&[a, c], out)?;
        Ok(self.push(v, Op::MeanAxis1 { x }, &[x]))
    }

    /// Records a scalar computed outside the tape from `x`, together with
    /// its gradient with respect to `x`. Used by fused losses.
    pub fn fused_scalar(&mut self, x: Var, value: f64, local_grad: Vec<f64>) -> Result<Var, TensorError> {
        if local_grad.len() != self.value(x).len() {
            return Err(mismatch("fused_scalar", "gradient length differs from input"));
        }
        Ok(self.push(Tensor::scalar(value), Op::Fused { x, local_grad }, &[x]))
    }

    /// Reverse sweep from a scalar `loss`, accumulating `∂loss/∂leaf` into
    /// every differentiable leaf. Repeated calls add to existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(TensorError::DetachedGraph);
        };
        if !node.value.is_scalar() {
            return Err(TensorError::NotScalar(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(TensorError::DetachedGraph);
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let out = &node.value;
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::MatMul { a, b, trans_b } => {
                    let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let n = out.shape()[1];
                    let gv = MatView::row_major(m, n);
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        // dA = dC · Bᵀ (or dC · B when B is stored transposed)
                        let bv = if *trans_b {
                            MatView::row_major(n, k)
                        } else {
                            MatView::row_major(k, n).t()
                        };
                        kernels::gemm(&g, gv, nodes[b.0].value.data(), bv, da, true);
                    }
                    if let Some(db) = slot(&mut grads, nodes, *b) {
                        let av = MatView::row_major(m, k);
                        if *trans_b {
                            kernels::gemm(&g, gv.t(), nodes[a.0].value.data(), av, db, true);
                        } else {
                            kernels::gemm(nodes[a.0].value.data(), av.t(), &g, gv, db, true);
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if let Some(d) = slot(&mut grads, nodes, *v) {
                            add_into(d, &g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        add_into(d, &g);
                    }
                    if let Some(d) = slot(&mut grads, nodes, *b) {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d -= g);
                    }
                }
                Op::Mul(a, b) => {
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        let bv = nodes[b.0].value.data();
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(bv) {
                            *d += g * y;
                        }
                    }
                    if let Some(d) = slot(&mut grads, nodes, *b) {
                        let av = nodes[a.0].value.data();
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(av) {
                            *d += g * x;
                        }
                    }
                }
                Op::AddBias { x, bias } => {
                    if let Some(d) = slot(&mut grads, nodes, *x) {
                        add_into(d, &g);
                    }
                    if let Some(d) = slot(&mut grads, nodes, *bias) {
                        let n = d.len();
                        for row in g.chunks(n) {
                            add_into(d, row);
                        }
                    }
                }
                Op::Scale(x, s) => {
                    if let Some(d) = slot(&mut grads, nodes, *x) {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += s * g);
                    }
                }
                Op::Sum(x) => {
                    if let Some(d) = slot(&mut grads, nodes, *x) {
                        d.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    if let Some(d) = slot(&mut grads, nodes, *x) {
                        for ((d, g), e) in d.iter_mut().zip(&g).zip(xv) {
                            if *e > 0.0 {
                                *d += g;
                            }
                        }
                    }
                }
                Op::Mish(x) => {
                    let xv = nodes[x.0].value.data();
                    if let Some(d) = slot(&mut grads, nodes, *x) {
                        for ((d, g), e) in d.iter_mut().zip(&g).zip(xv) {
                            *d += g * kernels::mish_grad(*e);
                        }
                    }
                }
                Op::Reshape(x) => {
                    if let Some(d) = slot(&mut grads, nodes, *x) {
                        add_into(d, &g);
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                    if let Some(d) = slot(&mut grads, nodes, *x) {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] += g[j * r + i];
                            }
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let c = nodes[x.0].value.shape()[1];
                    let len = out.shape()[1];
                    if let Some(d) = slot(&mut grads, nodes, *x) {
                        for (i, grow) in g.chunks(len).enumerate() {
                            add_into(&mut d[i * c + start..i * c + start + len], grow);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = out.shape()[1];
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].value.shape()[1];
                        if let Some(d) = slot(&mut grads, nodes, *p) {
                            for (i, grow) in g.chunks(total).enumerate() {
                                add_into(&mut d[i * w..(i + 1) * w], &grow[offset..offset + w]);
                            }
                        }
                        offset += w;
                    }
                }
                Op::LogSoftmax(x) => {
                    let n = out.cols();
                    if let Some(d) = slot(&mut grads, nodes, *x) {
                        for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                            let gs: f64 = grow.iter().sum();
                            for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += g - y.exp() * gs;
                            }
                        }
                    }
                }
                Op::Softmax(x) => {
                    let n = out.cols();
                    if let Some(d) = slot(&mut grads, nodes, *x) {
                        for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                            let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                            for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += y * (g - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let n = out.cols();
                    let gam = nodes[gamma.0].value.data();
                    if let Some(d) = slot(&mut grads, nodes, *gamma) {
                        for (grow, xrow) in g.chunks(n).zip(xhat.chunks(n)) {
                            for ((d, g), xh) in d.iter_mut().zip(grow).zip(xrow) {
                                *d += g * xh;
                            }
                        }
                    }
                    if let Some(d) = slot(&mut grads, nodes, *beta) {
                        for grow in g.chunks(n) {
                            add_into(d, grow);
                        }
                    }
                    if let Some(d) = slot(&mut grads, nodes, *x) {
                        let mut dxhat = vec![0.0; n];
                        for (r, ((drow, grow), xrow)) in
                            d.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate()
                        {
                            for ((dx, g), gm) in dxhat.iter_mut().zip(grow).zip(gam) {
                                *dx = g * gm;
                            }
                            let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                            let mean_dx = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                            for ((d, dx), xh) in drow.iter_mut().zip(&dxhat).zip(xrow) {
                                *d += rstd[r] * (dx - mean_d - xh * mean_dx);
                            }
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let dcols = out.cols();
                    if let Some(d) = slot(&mut grads, nodes, *table) {
                        for (grow, &id) in g.chunks(dcols).zip(ids) {
                            add_into(&mut d[id * dcols..(id + 1) * dcols], grow);
                        }
                    }
                }
                Op::Pick { x, idx } => {
                    let v = nodes[x.0].value.shape()[1];
                    if let Some(d) = slot(&mut grads, nodes, *x) {
                        for (i, (&j, gv)) in idx.iter().zip(&g).enumerate() {
                            d[i * v + j] += gv;
                        }
                    }
                }
                Op::Conv3d { x, kernel, geom, cols } => {
                    let p = geom.positions();
                    let k = geom.patch_len();
                    let gv = MatView::row_major(p, geom.cout);
                    if let Some(dk) = slot(&mut grads, nodes, *kernel) {
                        kernels::gemm(cols, MatView::row_major(p, k).t(), &g, gv, dk, true);
                    }
                    if nodes[x.0].requires_grad {
                        let mut dcols = vec![0.0; p * k];
                        let kv = MatView::row_major(k, geom.cout).t();
                        kernels::gemm(&g, gv, nodes[kernel.0].value.data(), kv, &mut dcols, false);
                        if let Some(dx) = slot(&mut grads, nodes, *x) {
                            geom.col2im_add(&dcols, dx);
                        }
                    }
                }
                Op::GraphMix { x, adj } => {
                    let (t, c) = (out.shape()[0], out.shape()[2]);
                    if let Some(d) = slot(&mut grads, nodes, *x) {
                        adj.mix_transposed(&g, t, c, d);
                    }
                }
                Op::TemporalConv { x, kernel } => {
                    let t = out.shape()[0];
                    let frame = out.len() / t;
                    let (k, kc) = (nodes[kernel.0].value.shape()[0], nodes[kernel.0].value.shape()[1]);
                    let half = k / 2;
                    let xd = nodes[x.0].value.data();
                    let kd = nodes[kernel.0].value.data();
                    let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                        for ti in 0..t {
                            for j in 0..k {
                                let src = ti as isize + j as isize - half as isize;
                                if src >= 0 && (src as usize) < t {
                                    f(ti, j, src as usize);
                                }
                            }
                        }
                    };
                    if let Some(dk) = slot(&mut grads, nodes, *kernel) {
                        taps(&mut |ti, j, src| {
                            let grow = &g[ti * frame..(ti + 1) * frame];
                            let xrow = &xd[src * frame..(src + 1) * frame];
                            for (i, (gv, xv)) in grow.iter().zip(xrow).enumerate() {
                                dk[j * kc + i % kc] += gv * xv;
                            }
                        });
                    }
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        taps(&mut |ti, j, src| {
                            let grow = &g[ti * frame..(ti + 1) * frame];
                            let krow = &kd[j * kc..(j + 1) * kc];
                            for (i, (d, gv)) in dx[src * frame..(src + 1) * frame].iter_mut().zip(grow).enumerate() {
                                *d += krow[i % kc] * gv;
                            }
                        });
                    }
                }
                Op::MeanAxis1 { x } => {
                    let s = nodes[x.0].value.shape();
                    let (a, b, c) = (s[0], s[1], s[2]);
                    let inv = 1.0 / b as f64;
                    if let Some(d) = slot(&mut grads, nodes, *x) {
                        for i in 0..a {
                            let grow = &g[i * c..(i + 1) * c];
                            for j in 0..b {
                                for (dv, gv) in d[(i * b + j) * c..(i * b + j + 1) * c].iter_mut().zip(grow) {
                                    *dv += gv * inv;
                                }
                            }
                        }
                    }
                }
                Op::Fused { x, local_grad } => {
                    if let Some(d) = slot(&mut grads, nodes, *x) {
                        d.iter_mut().zip(local_grad).for_each(|(d, l)| *d += g[0] * l);
                    }
                }
            }
        }

        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => add_into(acc.data_mut(), &g),
                None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
