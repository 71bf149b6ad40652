//! Dense row-major tensors and a tape for reverse-mode differentiation.
//!
//! Values are `f64` throughout. A [`Tape`] records every primitive applied
//! to [`Var`] handles in execution order; [`Tape::backward`] walks the record
//! in reverse and accumulates gradients for every node that depends on a
//! leaf created with `requires_grad = true`.
//!
//! The primitive set is deliberately small: what a pre-norm transformer
//! block, a softmax gate and binary cross-entropy need. Multi-head attention
//! is a single fused primitive so that a whole batch of sequences costs one
//! tape node instead of thousands.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("softmax row {row} has no unmasked entry")]
    DegenerateRow { row: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward was already run on this tape")]
    BackwardAlreadyRun,
    #[error("loss does not depend on any leaf that requires grad")]
    DetachedGraph,
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when the tensor is viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        let d = self.last_dim();
        if d == 0 {
            0
        } else {
            self.data.len() / d
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[r * d..(r + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::BadLength {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [m, n] => Ok((*m, *n)),
        other => Err(TensorError::InvalidArgument {
            op,
            reason: format!("expected a matrix, got shape {other:?}"),
        }),
    }
}

/// `c = a·b + beta·c` with arbitrary strides, so transposed operands cost nothing.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    gemm_strided(
        m,
        k,
        n,
        1.0,
        (a, rsa, csa),
        (b, rsb, csb),
        beta,
        (c, n as isize, 1),
    );
}

/// `c = alpha·a·b + beta·c` where every operand is a strided view into a slice.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    (a, rsa, csa): (&[f64], isize, isize),
    (b, rsb, csb): (&[f64], isize, isize),
    beta: f64,
    (c, rsc, csc): (&mut [f64], isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows.max(1) - 1) * rs as usize + (cols.max(1) - 1) * cs as usize
    };
    assert!(
        extent(m, k, rsa, csa) < a.len().max(1)
            && extent(k, n, rsb, csb) < b.len().max(1)
            && extent(m, n, rsc, csc) < c.len(),
        "gemm operand out of bounds"
    );
    // SAFETY: the assertion above keeps every strided access inside its
    // slice (strides are non-negative at all call sites); `c` is borrowed
    // mutably, so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// `alpha·a·b` into a fresh dense row-major `m×n` buffer.
fn gemm_new(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * n);
    if m > 0 && n > 0 {
        let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
            (rows - 1) * rs as usize + (cols.max(1) - 1) * cs as usize
        };
        assert!(
            extent(m, k, a.1, a.2) < a.0.len().max(1)
                && extent(k.max(1), n, b.1, b.2) < b.0.len().max(1),
            "gemm operand out of bounds"
        );
        // SAFETY: operands are in bounds per the assertion; with beta = 0
        // dgemm writes every element of the m×n output without reading it,
        // after which all m·n values are initialized.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                0.0,
                out.spare_capacity_mut().as_mut_ptr().cast::<f64>(),
                n as isize,
                1,
            );
            out.set_len(m * n);
        }
    }
    out
}

/// Plain matrix product without recording, used outside of tapes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims("matmul", a)?;
    let (k2, n) = matrix_dims("matmul", b)?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(
        m, k, n, &a.data, k as isize, 1, &b.data, n as isize, 1, 0.0, &mut out,
    );
    Tensor::new(vec![m, n], out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU (tanh approximation) and its derivative, evaluated through the
/// identity `(1 + tanh u) / 2 = sigmoid(2u)`.
fn gelu_with_grad(x: f64) -> (f64, f64) {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let s = sigmoid(2.0 * u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    (x * s, s + 2.0 * x * s * (1.0 - s) * du)
}

/// log(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Masked, max-stabilized softmax of one row written into `out`.
/// Returns `false` when every entry is masked.
fn softmax_row(input: &[f64], mask: impl Fn(usize) -> bool, out: &mut [f64]) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in input.iter().enumerate() {
        if mask(j) && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for (j, &x) in input.iter().enumerate() {
        if mask(j) {
            let e = (x - max).exp();
            out[j] = e;
            sum += e;
        } else {
            out[j] = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    true
}

/// Standalone masked row softmax (no tape).
pub fn softmax_rows(a: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if mask.len() != a.numel() {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_rows",
            left: a.shape.clone(),
            right: vec![mask.len()],
        });
    }
    let d = a.last_dim();
    let mut out = vec![0.0; a.numel()];
    for r in 0..a.rows() {
        let row_mask = &mask[r * d..(r + 1) * d];
        if !softmax_row(a.row(r), |j| row_mask[j], &mut out[r * d..(r + 1) * d]) {
            return Err(TensorError::DegenerateRow { row: r });
        }
    }
    Tensor::new(a.shape.clone(), out)
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        bias: Var,
    },
    AddBias(Var, Var),
    Combine(Vec<(Var, f64)>),
    Mul(Var, Var),
    Gelu {
        a: Var,
        slope: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        q_len: usize,
        kv_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    RowMap {
        x: Var,
        entries: Vec<(usize, usize, f64)>,
    },
    ConcatCols(Vec<Var>),
    Mixture {
        weights: Var,
        experts: Vec<Var>,
    },
    BceWithLogits {
        x: Var,
        targets: Vec<f64>,
    },
    KlUniform(Var),
    Dot {
        x: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Execution record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to leaf `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Softmax probabilities recorded by an attention node, `[batch, heads, q_len, kv_len]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// Affine map `x·w + bias` with the bias added to every row.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(bias));
        let (m, k) = matrix_dims("linear", xv)?;
        let (k2, n) = matrix_dims("linear", wv)?;
        if k != k2 || bv.numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: xv.shape.clone(),
                right: wv.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(&bv.data);
        }
        gemm(
            m, k, n, &xv.data, k as isize, 1, &wv.data, n as isize, 1, 1.0, &mut data,
        );
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(&[x, w, bias]);
        self.push(out, Op::Linear { x, w, bias }, rg)
    }

    /// Adds a length-`n` bias to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let n = av.last_dim();
        if bv.numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: av.shape.clone(),
                right: bv.shape.clone(),
            });
        }
        let mut data = av.data.clone();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(&bv.data) {
                *x += b;
            }
        }
        let out = Tensor::new(av.shape.clone(), data)?;
        let rg = self.rg(&[a, bias]);
        self.push(out, Op::AddBias(a, bias), rg)
    }

    /// Weighted sum `Σ c_i · x_i` of same-shape tensors.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(TensorError::InvalidArgument {
                op: "combine",
                reason: "no terms".into(),
            });
        };
        let shape = self.value(first).shape.clone();
        let mut data = vec![0.0; self.value(first).numel()];
        for &(v, c) in terms {
            let t = self.value(v);
            if t.shape != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "combine",
                    left: shape,
                    right: t.shape.clone(),
                });
            }
            for (o, x) in data.iter_mut().zip(&t.data) {
                *o += c * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        self.push(Tensor::new(shape, data)?, Op::Combine(terms.to_vec()), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.combine(&[(a, 1.0), (b, 1.0)])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.combine(&[(a, c)])
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: av.shape.clone(),
                right: bv.shape.clone(),
            });
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape.clone(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let rg = self.rg(&[a]);
        let mut out = Vec::with_capacity(av.numel());
        let mut slope = Vec::with_capacity(if rg { av.numel() } else { 0 });
        for &x in &av.data {
            let (y, dy) = gelu_with_grad(x);
            out.push(y);
            if rg {
                slope.push(dy);
            }
        }
        let out = Tensor::new(av.shape.clone(), out)?;
        self.push(out, Op::Gelu { a, slope }, rg)
    }

    /// Normalizes each row over the last axis, then applies `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "layer_norm",
                reason: format!("eps must be positive, got {eps}"),
            });
        }
        let xv = self.value(x);
        let d = xv.last_dim();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.numel() != d || bv.numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape.clone(),
                right: gv.shape.clone(),
            });
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data[j] + bv.data[j];
            }
        }
        let out = Tensor::new(xv.shape.clone(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Row softmax over the last axis; masked entries are exactly zero.
    pub fn softmax_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let out = softmax_rows(self.value(a), mask)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch·seq, d]` with `d` divisible by `heads`.
    /// `mask[(b·seq + i)·seq + j]` says whether query `i` of sequence `b`
    /// may attend to key `j`. Output has the shape of `q`.
    /// Multi-head self-attention over `batch` sequences of `seq` rows each.
    /// `mask[b, i, j]` allows query `i` to attend to key `j`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        mask: &[bool],
    ) -> Result<Var> {
        self.cross_attention(q, k, v, batch, seq, seq, heads, mask)
    }

    /// Multi-head attention where each of `batch` groups has `q_len` query
    /// rows and `kv_len` key/value rows; `mask` is `[batch, q_len, kv_len]`.
    #[allow(clippy::too_many_arguments)]
    pub fn cross_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        q_len: usize,
        kv_len: usize,
        heads: usize,
        mask: &[bool],
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = matrix_dims("attention", qv)?;
        if kv.shape != vv.shape || kv.shape != [batch * kv_len, d] || rows != batch * q_len {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                left: qv.shape.clone(),
                right: kv.shape.clone(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                reason: format!("{d} channels cannot be split into {heads} heads"),
            });
        }
        if mask.len() != batch * q_len * kv_len {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                left: vec![batch, q_len, kv_len],
                right: vec![mask.len()],
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let di = d as isize;
        let mut probs = vec![0.0; batch * heads * q_len * kv_len];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; q_len * kv_len];
        for b in 0..batch {
            let (qb, kb) = (b * q_len * d, b * kv_len * d);
            for h in 0..heads {
                // scores = Q_h · K_hᵀ · scale
                gemm_strided(
                    q_len,
                    dh,
                    kv_len,
                    scale,
                    (&qv.data[qb + h * dh..], di, 1),
                    (&kv.data[kb + h * dh..], 1, di),
                    0.0,
                    (&mut scores, kv_len as isize, 1),
                );
                let p_head = &mut probs[(b * heads + h) * q_len * kv_len..][..q_len * kv_len];
                for i in 0..q_len {
                    let row_mask = &mask[(b * q_len + i) * kv_len..][..kv_len];
                    let s_row = &scores[i * kv_len..][..kv_len];
                    if !softmax_row(s_row, |j| row_mask[j], &mut p_head[i * kv_len..][..kv_len]) {
                        return Err(TensorError::DegenerateRow { row: b * q_len + i });
                    }
                }
                // out_h = P · V_h
                gemm_strided(
                    q_len,
                    kv_len,
                    dh,
                    1.0,
                    (p_head, kv_len as isize, 1),
                    (&vv.data[kb + h * dh..], di, 1),
                    0.0,
                    (&mut out[qb + h * dh..], di, 1),
                );
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                q_len,
                kv_len,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Sparse linear map over rows: `out[o] += w · x[i]` for each `(o, i, w)`.
    /// Covers row gathers and masked mean pooling.
    pub fn row_map(
        &mut self,
        x: Var,
        out_rows: usize,
        entries: &[(usize, usize, f64)],
    ) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let rows = xv.rows();
        let mut out = vec![0.0; out_rows * d];
        for &(o, i, w) in entries {
            if o >= out_rows || i >= rows {
                return Err(TensorError::InvalidArgument {
                    op: "row_map",
                    reason: format!("entry ({o}, {i}) outside {out_rows}×{rows}"),
                });
            }
            for (oc, xc) in out[o * d..(o + 1) * d].iter_mut().zip(xv.row(i)) {
                *oc += w * xc;
            }
        }
        let out = Tensor::new(vec![out_rows, d], out)?;
        let rg = self.rg(&[x]);
        self.push(
            out,
            Op::RowMap {
                x,
                entries: entries.to_vec(),
            },
            rg,
        )
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape.clone(),
                    right: t.shape.clone(),
                });
            }
            total += t.last_dim();
        }
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.last_dim();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + c].copy_from_slice(t.row(r));
            }
            offset += c;
        }
        let out = Tensor::new(vec![rows, total], out)?;
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// `out[b, c] = Σ_i weights[b, i] · experts[i][b, c]`.
    pub fn mixture(&mut self, weights: Var, experts: &[Var]) -> Result<Var> {
        let wv = self.value(weights);
        let (batch, n) = matrix_dims("mixture", wv)?;
        if n != experts.len() {
            return Err(TensorError::ShapeMismatch {
                op: "mixture",
                left: wv.shape.clone(),
                right: vec![experts.len()],
            });
        }
        let shape = self.value(experts[0]).shape.clone();
        let (eb, c) = matrix_dims("mixture", self.value(experts[0]))?;
        if eb != batch {
            return Err(TensorError::ShapeMismatch {
                op: "mixture",
                left: wv.shape.clone(),
                right: shape,
            });
        }
        let mut out = vec![0.0; batch * c];
        for (i, &e) in experts.iter().enumerate() {
            let ev = self.value(e);
            if ev.shape != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "mixture",
                    left: shape,
                    right: ev.shape.clone(),
                });
            }
            for b in 0..batch {
                let w = wv.data[b * n + i];
                for j in 0..c {
                    out[b * c + j] += w * ev.data[b * c + j];
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        let mut deps = experts.to_vec();
        deps.push(weights);
        let rg = self.rg(&deps);
        self.push(
            out,
            Op::Mixture {
                weights,
                experts: experts.to_vec(),
            },
            rg,
        )
    }

    /// Mean binary cross-entropy of sigmoid(x) against `targets` in [0, 1].
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if targets.len() != xv.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                left: xv.shape.clone(),
                right: vec![targets.len()],
            });
        }
        let n = xv.numel() as f64;
        let loss = xv
            .data
            .iter()
            .zip(targets)
            .map(|(&z, &t)| softplus(z) - t * z)
            .sum::<f64>()
            / n;
        let rg = self.rg(&[x]);
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                x,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Mean KL(Bernoulli(sigmoid(x)) ‖ Bernoulli(1/2)) over all entries.
    pub fn kl_to_uniform(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.numel() as f64;
        let kl = xv
            .data
            .iter()
            .map(|&z| {
                let p = sigmoid(z);
                // ln p = -softplus(-z), ln(1-p) = -softplus(z)
                std::f64::consts::LN_2 - p * softplus(-z) - (1.0 - p) * softplus(z)
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(kl.max(0.0)), Op::KlUniform(x), rg)
    }

    /// Scalar `Σ_j x_j · w_j` against constant weights.
    pub fn dot(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                left: xv.shape.clone(),
                right: vec![weights.len()],
            });
        }
        let s = xv.data.iter().zip(weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::scalar(s),
            Op::Dot {
                x,
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ones = vec![1.0; self.value(x).numel()];
        self.dot(x, &ones)
    }

    /// Reverse pass from a scalar `loss`. Gradients are then available via
    /// [`Tape::grad`]. A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape.clone(),
            });
        }
        if !self.requires_grad(loss) {
            return Err(TensorError::DetachedGraph);
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            backprop(&self.nodes, node, &g, &mut grads);
            // Only leaf gradients are kept once propagated.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad).map(|g| Tensor {
                    shape: n.value.shape.clone(),
                    data: g,
                })
            })
            .collect();
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Linear { .. } => "linear",
        Op::AddBias(..) => "add_bias",
        Op::Combine(..) => "combine",
        Op::Mul(..) => "mul",
        Op::Gelu { .. } => "gelu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::Attention { .. } => "attention",
        Op::RowMap { .. } => "row_map",
        Op::ConcatCols(..) => "concat_cols",
        Op::Mixture { .. } => "mixture",
        Op::BceWithLogits { .. } => "bce_with_logits",
        Op::KlUniform(..) => "kl_to_uniform",
        Op::Dot { .. } => "dot",
    }
}

/// Adds `local` into the gradient of `v`, taking the buffer over when
/// nothing has been accumulated yet.
fn accumulate_owned(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, local: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => {
            for (x, y) in g.iter_mut().zip(local) {
                *x += y;
            }
        }
        slot @ None => *slot = Some(local),
    }
}

fn accumulate_iter(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
    local: impl Iterator<Item = f64>,
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => {
            for (x, y) in g.iter_mut().zip(local) {
                *x += y;
            }
        }
        slot @ None => *slot = Some(local.collect()),
    }
}

/// Adds `a·b` (strided views) into the gradient of `v`.
#[allow(clippy::too_many_arguments)]
fn accumulate_gemm(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => gemm_strided(m, k, n, 1.0, a, b, 1.0, (g, n as isize, 1)),
        slot @ None => *slot = Some(gemm_new(m, k, n, 1.0, a, b)),
    }
}

fn accumulate<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
            let n = val(*b).shape[1];
            let (ad, bd) = (&val(*a).data, &val(*b).data);
            let (ki, ni) = (k as isize, n as isize);
            // dA = dOut · Bᵀ ; dB = Aᵀ · dOut
            accumulate_gemm(grads, nodes, *a, m, n, k, (g, ni, 1), (bd, 1, ni));
            accumulate_gemm(grads, nodes, *b, k, m, n, (ad, 1, ki), (g, ni, 1));
        }
        Op::Linear { x, w, bias } => {
            let (m, k) = (val(*x).shape[0], val(*x).shape[1]);
            let n = val(*w).shape[1];
            let (xd, wd) = (&val(*x).data, &val(*w).data);
            let (ki, ni) = (k as isize, n as isize);
            accumulate_gemm(grads, nodes, *x, m, n, k, (g, ni, 1), (wd, 1, ni));
            accumulate_gemm(grads, nodes, *w, k, m, n, (xd, 1, ki), (g, ni, 1));
            if let Some(gb) = accumulate(grads, nodes, *bias) {
                for row in g.chunks(n) {
                    for (x, y) in gb.iter_mut().zip(row) {
                        *x += y;
                    }
                }
            }
        }
        Op::AddBias(a, bias) => {
            accumulate_iter(grads, nodes, *a, g.iter().copied());
            if let Some(gb) = accumulate(grads, nodes, *bias) {
                let n = gb.len();
                for row in g.chunks(n) {
                    for (x, y) in gb.iter_mut().zip(row) {
                        *x += y;
                    }
                }
            }
        }
        Op::Combine(terms) => {
            for &(v, c) in terms {
                accumulate_iter(grads, nodes, v, g.iter().map(|y| c * y));
            }
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (&val(*a).data, &val(*b).data);
            accumulate_iter(grads, nodes, *a, g.iter().zip(bd).map(|(y, bv)| y * bv));
            accumulate_iter(grads, nodes, *b, g.iter().zip(ad).map(|(y, av)| y * av));
        }
        Op::Gelu { a, slope } => {
            accumulate_iter(grads, nodes, *a, g.iter().zip(slope).map(|(y, s)| y * s));
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = val(*x).last_dim();
            let gain_v = &val(*gain).data;
            if let Some(gg) = accumulate(grads, nodes, *gain) {
                for (r, row) in g.chunks(d).enumerate() {
                    for j in 0..d {
                        gg[j] += row[j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(gb) = accumulate(grads, nodes, *bias) {
                for row in g.chunks(d) {
                    for j in 0..d {
                        gb[j] += row[j];
                    }
                }
            }
            if nodes[x.0].requires_grad {
                let mut local = Vec::with_capacity(g.len());
                let mut dxhat = vec![0.0; d];
                for (r, row) in g.chunks(d).enumerate() {
                    let xh = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        dxhat[j] = row[j] * gain_v[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    local
                        .extend((0..d).map(|j| inv_std[r] * (dxhat[j] - mean_d - xh[j] * mean_dx)));
                }
                accumulate_owned(grads, nodes, *x, local);
            }
        }
        Op::SoftmaxRows(a) => {
            let out = &node.value;
            let d = out.last_dim();
            let p = &out.data;
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for r in 0..out.rows() {
                    let pr = &p[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..d {
                        ga[r * d + j] += pr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            batch,
            q_len,
            kv_len,
            heads,
            probs,
        } => {
            let (batch, q_len, kv_len, heads) = (*batch, *q_len, *kv_len, *heads);
            let d = val(*q).last_dim();
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qd, kd, vd) = (&val(*q).data, &val(*k).data, &val(*v).data);
            let di = d as isize;
            let kl = kv_len as isize;
            let mut dq = vec![0.0; qd.len()];
            let mut dk = vec![0.0; kd.len()];
            let mut dv = vec![0.0; vd.len()];
            let mut ds = vec![0.0; q_len * kv_len];
            for b in 0..batch {
                let (qb, kb) = (b * q_len * d, b * kv_len * d);
                for h in 0..heads {
                    let p_head = &probs[(b * heads + h) * q_len * kv_len..][..q_len * kv_len];
                    let go = &g[qb + h * dh..];
                    // dV_h += Pᵀ · dO_h
                    gemm_strided(
                        kv_len,
                        q_len,
                        dh,
                        1.0,
                        (p_head, 1, kl),
                        (go, di, 1),
                        1.0,
                        (&mut dv[kb + h * dh..], di, 1),
                    );
                    // dP = dO_h · V_hᵀ
                    gemm_strided(
                        q_len,
                        dh,
                        kv_len,
                        1.0,
                        (go, di, 1),
                        (&vd[kb + h * dh..], 1, di),
                        0.0,
                        (&mut ds, kl, 1),
                    );
                    // dS = P ⊙ (dP − rowsum(P ⊙ dP))
                    for (p_row, d_row) in p_head.chunks(kv_len).zip(ds.chunks_mut(kv_len)) {
                        let dot: f64 = p_row.iter().zip(d_row.iter()).map(|(p, x)| p * x).sum();
                        for (x, p) in d_row.iter_mut().zip(p_row) {
                            *x = p * (*x - dot);
                        }
                    }
                    // dQ_h += dS · K_h · scale ; dK_h += dSᵀ · Q_h · scale
                    gemm_strided(
                        q_len,
                        kv_len,
                        dh,
                        scale,
                        (&ds, kl, 1),
                        (&kd[kb + h * dh..], di, 1),
                        1.0,
                        (&mut dq[qb + h * dh..], di, 1),
                    );
                    gemm_strided(
                        kv_len,
                        q_len,
                        dh,
                        scale,
                        (&ds, 1, kl),
                        (&qd[qb + h * dh..], di, 1),
                        1.0,
                        (&mut dk[kb + h * dh..], di, 1),
                    );
                }
            }
            for (var, local) in [(*q, dq), (*k, dk), (*v, dv)] {
                accumulate_owned(grads, nodes, var, local);
            }
        }
        Op::RowMap { x, entries } => {
            let d = val(*x).last_dim();
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for &(o, i, w) in entries {
                    for c in 0..d {
                        gx[i * d + c] += w * g[o * d + c];
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.last_dim();
            let rows = node.value.rows();
            let mut offset = 0;
            for &p in parts {
                let c = val(p).last_dim();
                if let Some(gp) = accumulate(grads, nodes, p) {
                    for r in 0..rows {
                        for j in 0..c {
                            gp[r * c + j] += g[r * total + offset + j];
                        }
                    }
                }
                offset += c;
            }
        }
        Op::Mixture { weights, experts } => {
            let wv = &val(*weights).data;
            let n = experts.len();
            let c = node.value.last_dim();
            let batch = node.value.rows();
            let mut gw = vec![0.0; batch * n];
            for (i, &e) in experts.iter().enumerate() {
                let ed = &val(e).data;
                for b in 0..batch {
                    let mut s = 0.0;
                    for j in 0..c {
                        s += g[b * c + j] * ed[b * c + j];
                    }
                    gw[b * n + i] = s;
                }
                if let Some(ge) = accumulate(grads, nodes, e) {
                    for b in 0..batch {
                        let w = wv[b * n + i];
                        for j in 0..c {
                            ge[b * c + j] += w * g[b * c + j];
                        }
                    }
                }
            }
            if let Some(gwt) = accumulate(grads, nodes, *weights) {
                for (x, y) in gwt.iter_mut().zip(gw) {
                    *x += y;
                }
            }
        }
        Op::BceWithLogits { x, targets } => {
            let xd = &val(*x).data;
            let n = xd.len() as f64;
            let local: Vec<f64> = xd
                .iter()
                .zip(targets)
                .map(|(&z, &t)| g[0] * (sigmoid(z) - t) / n)
                .collect();
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for (a, b) in gx.iter_mut().zip(local) {
                    *a += b;
                }
            }
        }
        Op::KlUniform(x) => {
            let xd = &val(*x).data;
            let n = xd.len() as f64;
            let local: Vec<f64> = xd
                .iter()
                .map(|&z| {
                    let p = sigmoid(z);
                    g[0] * z * p * (1.0 - p) / n
                })
                .collect();
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for (a, b) in gx.iter_mut().zip(local) {
                    *a += b;
                }
            }
        }
        Op::Dot { x, weights } => {
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for (a, w) in gx.iter_mut().zip(weights) {
                    *a += g[0] * w;
                }
            }
        }
    }
}
