//! Numeric kernels shared by forward and backward passes.

/// Dense matrix view descriptor: `rows x cols` with arbitrary strides.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl MatView {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = a * b + (accumulate ? c : 0)` where `c` is row-major.
pub(crate) fn gemm(a: &[f64], av: MatView, b: &[f64], bv: MatView, c: &mut [f64], accumulate: bool) {
    assert_eq!(av.cols, bv.rows);
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: the views describe in-bounds regions of `a`, `b` and `c`
    // (checked by the callers' shape validation), and `c` does not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            av.row_stride,
            av.col_stride,
            b.as_ptr(),
            bv.row_stride,
            bv.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
/// Numerically stable `ln(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x + (-x).exp()
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `x * tanh(softplus(x))`. With `n = e^x (e^x + 2)`, `tanh(softplus(x)) =
/// n / (n + 2)`, so one `exp` suffices.
pub(crate) fn mish(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        let e = x.exp();
        let n = e * (e + 2.0);
        x * n / (n + 2.0)
    }
}

pub(crate) fn mish_grad(x: f64) -> f64 {
    if x > 20.0 {
        1.0
    } else {
        let e = x.exp();
        let n = e * (e + 2.0);
        let d = n + 2.0;
        // sech^2(softplus(x)) = 4 (n + 1) / (n + 2)^2, sigmoid(x) = e / (1 + e)
        n / d + x * 4.0 * (n + 1.0) / (d * d) * e / (1.0 + e)
    }
}

/// `ln(e^a + e^b)`, exact when either side is `-inf`.
pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Zero-padding mode for one convolution axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No padding; the kernel must fit inside the input.
    Valid,
    /// `(k - 1) / 2` zeros before and the remainder after, so that with
    /// stride 1 the output extent equals the input extent.
    Same,
}

impl Padding {
    pub(crate) fn amounts(self, kernel: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let before = (kernel - 1) / 2;
                (before, kernel - 1 - before)
            }
        }
    }
}

/// Geometry of one conv3d call, resolved from shapes, strides and padding.
#[derive(Clone, Debug)]
pub(crate) struct Conv3dGeom {
    pub input: [usize; 4],
    pub kernel: [usize; 3],
    pub cin: usize,
    pub cout: usize,
    pub stride: [usize; 3],
    pub pad_before: [usize; 3],
    pub output: [usize; 3],
}

impl Conv3dGeom {
    pub fn patch_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.cin
    }

    pub fn positions(&self) -> usize {
        self.output.iter().product()
    }

    /// Calls `f(column_offset, input_offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let [_, h, w, cin] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [ot, oh, ow] = self.output;
        let k = self.patch_len();
        let mut p = 0;
        for to in 0..ot {
            for ho in 0..oh {
                for wo in 0..ow {
                    for dt in 0..kt {
                        let t = (to * self.stride[0] + dt) as isize - self.pad_before[0] as isize;
                        if t < 0 || t as usize >= self.input[0] {
                            continue;
                        }
                        for dh in 0..kh {
                            let y = (ho * self.stride[1] + dh) as isize - self.pad_before[1] as isize;
                            if y < 0 || y as usize >= h {
                                continue;
                            }
                            for dw in 0..kw {
                                let x = (wo * self.stride[2] + dw) as isize - self.pad_before[2] as isize;
                                if x < 0 || x as usize >= w {
                                    continue;
                                }
                                let col = ((dt * kh + dh) * kw + dw) * cin;
                                let off = ((t as usize * h + y as usize) * w + x as usize) * cin;
                                f(p * k + col, off);
                            }
                        }
                    }
                    p += 1;
                }
            }
        }
    }

    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let cin = self.cin;
        let mut cols = vec![0.0; self.positions() * self.patch_len()];
        self.for_each_tap(|dst, src| {
            cols[dst..dst + cin].copy_from_slice(&input[src..src + cin]);
        });
        cols
    }

    pub fn col2im_add(&self, cols: &[f64], input_grad: &mut [f64]) {
        let cin = self.cin;
        self.for_each_tap(|src, dst| {
            for c in 0..cin {
                input_grad[dst + c] += cols[src + c];
            }
        });
    }
}

/// Sparse symmetric-or-not square matrix in CSR form, used for graph mixing.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseAdjacency {
    /// Build from a dense row-major `n x n` matrix, dropping exact zeros.
    pub fn from_dense(n: usize, dense: &[f64]) -> Self {
        assert_eq!(dense.len(), n * n);
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for r in 0..n {
            for c in 0..n {
                let v = dense[r * n + c];
                if v != 0.0 {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for r in 0..self.n {
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                d[r * self.n + self.cols[i]] = self.vals[i];
            }
        }
        d
    }

    /// `y[t, r, :] += sum_c A[r, c] * x[t, c, :]` for every frame `t`.
    pub(crate) fn mix(&self, x: &[f64], frames: usize, channels: usize, y: &mut [f64]) {
        let n = self.n;
        for t in 0..frames {
            let base = t * n * channels;
            for r in 0..n {
                let yr = base + r * channels;
                for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                    let xc = base + self.cols[i] * channels;
                    let w = self.vals[i];
                    for ch in 0..channels {
                        y[yr + ch] += w * x[xc + ch];
                    }
                }
            }
        }
    }

    /// Transposed mixing, `dx[t, c, :] += sum_r A[r, c] * dy[t, r, :]`.
    pub(crate) fn mix_transposed(&self, dy: &[f64], frames: usize, channels: usize, dx: &mut [f64]) {
        let n = self.n;
        for t in 0..frames {
            let base = t * n * channels;
            for r in 0..n {
                let yr = base + r * channels;
                for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                    let xc = base + self.cols[i] * channels;
                    let w = self.vals[i];
                    for ch in 0..channels {
                        dx[xc + ch] += w * dy[yr + ch];
                    }
                }
            }
        }
    }
}
