//! Dense f64 tensors and a tape-based reverse-mode differentiation graph.
//!
//! Values live in a [`Graph`] while a forward pass is recorded. Each op
//! appends one node holding its output and enough metadata to run its
//! vector-Jacobian product. [`Graph::backward`] consumes the tape, so the
//! whole graph is freed after one backward pass.
//!
//! Masked attention logits are encoded as [`MASKED`] (negative infinity).
//! Any logit at or below `-1e30` is treated as masked by
//! [`Graph::softmax_rows`]: its probability is exactly zero and it receives
//! exactly zero gradient.

use std::rc::Rc;

use thiserror::Error;

/// Sentinel for a masked attention logit.
pub const MASKED: f64 = f64::NEG_INFINITY;

/// Logits at or below this value are treated as masked inside softmax.
pub const MASK_FLOOR: f64 = -1e30;

/// Variance epsilon used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Lower clamp applied to Gaussian widths at their use site.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape extents must be positive, got {0:?}")]
    EmptyExtent(Vec<usize>),
    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::EmptyExtent(shape));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// A trainable tensor.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let mut t = Self::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::ShapeMismatch {
                op: "from_rows",
                lhs: vec![cols],
                rhs: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Scales an existing gradient buffer in place.
    pub fn scale_grad(&mut self, factor: f64) {
        if let Some(buf) = &mut self.grad {
            buf.iter_mut().for_each(|b| *b *= factor);
        }
    }
}

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed inputs for [`Graph::gaussian_energy`].
#[derive(Clone, Debug)]
pub struct GaussianKernel {
    pub rows: usize,
    pub cols: usize,
    pub dist: Rc<Vec<f64>>,
    pub masked: Rc<Vec<bool>>,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Scale { a: Var, c: f64 },
    Relu { a: Var },
    Exp { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    SoftmaxRows { a: Var },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Rope { a: Var, cos: Vec<f64>, sin: Vec<f64> },
    GaussianEnergy {
        sigmas: Var,
        index: usize,
        kernel: GaussianKernel,
    },
    ConcatCols { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Recording tape for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient of `v` into `tensor`, if any flowed to it.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) if tensor.requires_grad() => tensor.accumulate_grad(g),
            _ => Ok(()),
        }
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, rest @ ..] => (*r, rest.iter().product()),
        [] => (1, 1),
    }
}

/// `c += op(a) · op(b)` for row-major operands.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
) {
    // Row-major a is (m×k) or, transposed, stored as (k×m).
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        // SAFETY: the slices hold at least m*k, k*n and m*n elements and
        // the strides address only within those bounds.
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Rotation tables for rotary position encoding over `rows` positions and
/// `dim` features: pair `(2i, 2i+1)` at position `m` turns by `m·base^(-2i/dim)`.
pub fn rope_tables(rows: usize, dim: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let half = dim / 2;
    let mut cos = Vec::with_capacity(rows * half);
    let mut sin = Vec::with_capacity(rows * half);
    for m in 0..rows {
        for i in 0..half {
            let theta = rope_theta(i, dim, base);
            let angle = m as f64 * theta;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (cos, sin)
}

/// Frequency of the `i`-th (zero-based) coordinate pair.
pub fn rope_theta(i: usize, dim: usize, base: f64) -> f64 {
    base.powf(-2.0 * i as f64 / dim as f64)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Records a leaf. Gradients flow to it when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape.clone(),
            tensor.data.clone(),
            Op::Leaf,
            tensor.requires_grad,
        )
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).tracked)
    }

    /// Matrix product `a[n×k] · b[k×m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Product with the second operand transposed: `a[n×k] · b[m×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch("matmul", sa, sb));
        }
        let (n, k) = (sa[0], sa[1]);
        let (kb, m) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(mismatch("matmul", sa, sb));
        }
        let mut out = vec![0.0; n * m];
        gemm_acc(n, k, m, self.value(a), false, self.value(b), trans_b, &mut out);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(vec![n, m], out, Op::MatMul { a, b, trans_b }, tracked))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(shape, value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a length-`d` bias to every row of an `n×d` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, d) = as_matrix(self.shape(a));
        if self.node(bias).value.len() != d {
            return Err(mismatch("add_row", self.shape(a), self.shape(bias)));
        }
        let b = &self.node(bias).value;
        let value = self
            .value(a)
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a, bias]);
        Ok(self.push(shape, value, Op::AddRow { a, bias }, tracked))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a]);
        self.push(shape, value, Op::Scale { a, c }, tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a]);
        self.push(shape, value, Op::Relu { a }, tracked)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a]);
        self.push(shape, value, Op::Exp { a }, tracked)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let tracked = self.tracked(&[a]);
        self.push(vec![1], vec![s], Op::Sum { a }, tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let tracked = self.tracked(&[a]);
        self.push(vec![1], vec![s], Op::Mean { a }, tracked)
    }

    /// Row-wise softmax with masking (see module docs).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = as_matrix(self.shape(a));
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let or = &mut out[r * cols..(r + 1) * cols];
            let max = xr
                .iter()
                .copied()
                .filter(|v| *v > MASK_FLOOR)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::DegenerateRow { row: r });
            }
            let mut total = 0.0;
            for (o, &v) in or.iter_mut().zip(xr) {
                if v > MASK_FLOOR {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            let inv = 1.0 / total;
            or.iter_mut().for_each(|o| *o *= inv);
        }
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a]);
        Ok(self.push(shape, out, Op::SoftmaxRows { a }, tracked))
    }

    /// Per-row normalization followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, d) = as_matrix(self.shape(x));
        if d < 2 {
            return Err(TensorError::Contract(format!(
                "layer_norm needs at least 2 features, got {d}"
            )));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x, gain, bias]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            tracked,
        ))
    }

    /// Rotary position encoding applied to the rows of `a`; row index is the position.
    pub fn rope(&mut self, a: Var, base: f64) -> Result<Var> {
        let (rows, d) = as_matrix(self.shape(a));
        if d % 2 != 0 {
            return Err(TensorError::Contract(format!(
                "rotary encoding needs an even feature count, got {d}"
            )));
        }
        let (cos, sin) = rope_tables(rows, d, base);
        let x = self.value(a);
        let half = d / 2;
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            for i in 0..half {
                let (c, s) = (cos[r * half + i], sin[r * half + i]);
                let (x0, x1) = (x[r * d + 2 * i], x[r * d + 2 * i + 1]);
                out[r * d + 2 * i] = c * x0 - s * x1;
                out[r * d + 2 * i + 1] = s * x0 + c * x1;
            }
        }
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a]);
        Ok(self.push(shape, out, Op::Rope { a, cos, sin }, tracked))
    }

    /// Gaussian attention energy `exp(-dist² / 2σ²)` with `σ = sigmas[index]`
    /// clamped to [`SIGMA_FLOOR`]; masked cells hold [`MASKED`]. Positivity of
    /// configured widths is checked by the caller; the clamp only guards a
    /// learnable width that drifts too low.
    pub fn gaussian_energy(&mut self, sigmas: Var, index: usize, kernel: GaussianKernel) -> Result<Var> {
        let raw = *self.value(sigmas).get(index).ok_or_else(|| {
            TensorError::Contract(format!("sigma index {index} out of range"))
        })?;
        if raw.is_nan() {
            return Err(TensorError::Contract("gaussian width is NaN".into()));
        }
        let sigma = raw.max(SIGMA_FLOOR);
        let denom = 2.0 * sigma * sigma;
        let value = kernel
            .dist
            .iter()
            .zip(kernel.masked.iter())
            .map(|(&e, &m)| if m { MASKED } else { (-e * e / denom).exp() })
            .collect();
        let tracked = self.tracked(&[sigmas]);
        Ok(self.push(
            vec![kernel.rows, kernel.cols],
            value,
            Op::GaussianEnergy {
                sigmas,
                index,
                kernel,
            },
            tracked,
        ))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(mismatch("concat_cols", self.shape(parts[0]), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let tracked = self.tracked(parts);
        Ok(self.push(
            vec![rows, total],
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            tracked,
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = as_matrix(self.shape(a));
        if start >= end || end > rows {
            return Err(TensorError::Contract(format!(
                "row range {start}..{end} invalid for {rows} rows"
            )));
        }
        let value = self.value(a)[start * cols..end * cols].to_vec();
        let tracked = self.tracked(&[a]);
        Ok(self.push(vec![end - start, cols], value, Op::SliceRows { a, start }, tracked))
    }

    /// Output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = as_matrix(self.shape(a));
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Contract(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let x = self.value(a);
        let value = idx
            .iter()
            .flat_map(|&i| x[i * cols..(i + 1) * cols].iter().copied())
            .collect();
        let tracked = self.tracked(&[a]);
        Ok(self.push(
            vec![idx.len(), cols],
            value,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            tracked,
        ))
    }

    /// Runs reverse-mode differentiation from a scalar `loss` and frees the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.node(loss).value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.node(loss).shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
            if !nodes[v.0].tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        }

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let nodes = &self.nodes;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::MatMul { a, b, trans_b } => {
                    let (n, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let m = node.shape[1];
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    // dA = dC · op(B)ᵀ
                    acc(&mut grads, nodes, *a, |ga| {
                        gemm_acc(n, m, k, &gout, false, bv, !trans_b, ga)
                    });
                    // dB = Aᵀ · dC, or (dCᵀ · A) when B was transposed
                    if *trans_b {
                        acc(&mut grads, nodes, *b, |gb| gemm_acc(m, n, k, &gout, true, av, false, gb));
                    } else {
                        acc(&mut grads, nodes, *b, |gb| gemm_acc(k, n, m, av, true, &gout, false, gb));
                    }
                }
                Op::Add { a, b } => {
                    acc(&mut grads, nodes, *a, |g| add_into(g, &gout));
                    acc(&mut grads, nodes, *b, |g| add_into(g, &gout));
                }
                Op::Sub { a, b } => {
                    acc(&mut grads, nodes, *a, |g| add_into(g, &gout));
                    acc(&mut grads, nodes, *b, |g| {
                        g.iter_mut().zip(&gout).for_each(|(x, y)| *x -= y)
                    });
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(&mut grads, nodes, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] * bv[i];
                        }
                    });
                    acc(&mut grads, nodes, *b, |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] * av[i];
                        }
                    });
                }
                Op::AddRow { a, bias } => {
                    acc(&mut grads, nodes, *a, |g| add_into(g, &gout));
                    let d = nodes[bias.0].value.len();
                    acc(&mut grads, nodes, *bias, |g| {
                        for row in gout.chunks(d) {
                            add_into(g, row);
                        }
                    });
                }
                Op::Scale { a, c } => {
                    acc(&mut grads, nodes, *a, |g| {
                        g.iter_mut().zip(&gout).for_each(|(x, y)| *x += c * y)
                    });
                }
                Op::Relu { a } => {
                    let av = &nodes[a.0].value;
                    acc(&mut grads, nodes, *a, |g| {
                        for i in 0..g.len() {
                            if av[i] > 0.0 {
                                g[i] += gout[i];
                            }
                        }
                    });
                }
                Op::Exp { a } => {
                    let y = &node.value;
                    acc(&mut grads, nodes, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] * y[i];
                        }
                    });
                }
                Op::Sum { a } => {
                    acc(&mut grads, nodes, *a, |g| g.iter_mut().for_each(|x| *x += gout[0]));
                }
                Op::Mean { a } => {
                    let s = gout[0] / nodes[a.0].value.len() as f64;
                    acc(&mut grads, nodes, *a, |g| g.iter_mut().for_each(|x| *x += s));
                }
                Op::SoftmaxRows { a } => {
                    let (_, cols) = as_matrix(&node.shape);
                    let y = &node.value;
                    acc(&mut grads, nodes, *a, |g| {
                        for ((gr, yr), dr) in g
                            .chunks_mut(cols)
                            .zip(y.chunks(cols))
                            .zip(gout.chunks(cols))
                        {
                            let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                            for j in 0..cols {
                                // masked entries have y == 0 and get exactly 0
                                if yr[j] != 0.0 {
                                    gr[j] += yr[j] * (dr[j] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = nodes[gain.0].value.len();
                    let gv = &nodes[gain.0].value;
                    acc(&mut grads, nodes, *gain, |g| {
                        for (dr, hr) in gout.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                g[j] += dr[j] * hr[j];
                            }
                        }
                    });
                    acc(&mut grads, nodes, *bias, |g| {
                        for dr in gout.chunks(d) {
                            add_into(g, dr);
                        }
                    });
                    acc(&mut grads, nodes, *x, |g| {
                        let mut dh = vec![0.0; d];
                        for (r, ((gr, dr), hr)) in g
                            .chunks_mut(d)
                            .zip(gout.chunks(d))
                            .zip(xhat.chunks(d))
                            .enumerate()
                        {
                            for j in 0..d {
                                dh[j] = dr[j] * gv[j];
                            }
                            let mean_dh = dh.iter().sum::<f64>() / d as f64;
                            let mean_dh_h =
                                dh.iter().zip(hr).map(|(p, q)| p * q).sum::<f64>() / d as f64;
                            for j in 0..d {
                                gr[j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                    });
                }
                Op::Rope { a, cos, sin } => {
                    let (_, d) = as_matrix(&node.shape);
                    let half = d / 2;
                    acc(&mut grads, nodes, *a, |g| {
                        for (r, (gr, dr)) in g.chunks_mut(d).zip(gout.chunks(d)).enumerate() {
                            for i in 0..half {
                                let (c, s) = (cos[r * half + i], sin[r * half + i]);
                                let (d0, d1) = (dr[2 * i], dr[2 * i + 1]);
                                gr[2 * i] += c * d0 + s * d1;
                                gr[2 * i + 1] += -s * d0 + c * d1;
                            }
                        }
                    });
                }
                Op::GaussianEnergy {
                    sigmas,
                    index,
                    kernel,
                } => {
                    let raw = nodes[sigmas.0].value[*index];
                    if raw > SIGMA_FLOOR {
                        let s3 = raw * raw * raw;
                        let mut total = 0.0;
                        for (i, (&e, &m)) in kernel.dist.iter().zip(kernel.masked.iter()).enumerate() {
                            if !m {
                                total += gout[i] * node.value[i] * e * e / s3;
                            }
                        }
                        acc(&mut grads, nodes, *sigmas, |g| g[*index] += total);
                    }
                }
                Op::ConcatCols { parts } => {
                    let rows = node.shape[0];
                    let total = node.shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p.0].shape[1];
                        acc(&mut grads, nodes, p, |g| {
                            for r in 0..rows {
                                add_into(
                                    &mut g[r * w..(r + 1) * w],
                                    &gout[r * total + offset..r * total + offset + w],
                                );
                            }
                        });
                        offset += w;
                    }
                }
                Op::SliceRows { a, start } => {
                    let (_, cols) = as_matrix(&node.shape);
                    acc(&mut grads, nodes, *a, |g| {
                        add_into(&mut g[start * cols..start * cols + gout.len()], &gout)
                    });
                }
                Op::GatherRows { a, idx } => {
                    let (_, cols) = as_matrix(&node.shape);
                    acc(&mut grads, nodes, *a, |g| {
                        for (k, &i) in idx.iter().enumerate() {
                            add_into(&mut g[i * cols..(i + 1) * cols], &gout[k * cols..(k + 1) * cols]);
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(g: &mut Graph, rows: usize, cols: usize, data: &[f64], grad: bool) -> Var {
        let t = if grad {
            Tensor::param(vec![rows, cols], data.to_vec()).unwrap()
        } else {
            Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
        };
        g.leaf(&t)
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central-difference check of `f` at `x` against an analytic gradient.
    fn check_grad(
        x: &[f64],
        analytic: &[f64],
        f: impl Fn(&[f64]) -> f64,
        tol: f64,
    ) {
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
            let rel = (fd - analytic[i]).abs() / denom;
            assert!(
                rel < tol || (fd - analytic[i]).abs() < 1e-9,
                "entry {i}: fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn tensor_rejects_bad_lengths() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = mat(&mut g, 2, 2, &[1.0, 0.0, 0.0, 1.0], false);
        let a = mat(&mut g, 2, 2, &[3.0, -1.0, 2.5, 7.0], false);
        let c = g.matmul(i, a).unwrap();
        assert_eq!(g.value(c), &[3.0, -1.0, 2.5, 7.0]);
    }

    #[test]
    fn hand_product() {
        let mut g = Graph::new();
        let a = mat(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0], false);
        let b = mat(&mut g, 2, 1, &[0.0, 1.0], false);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let mut g = Graph::new();
        let a = mat(&mut g, 2, 3, &[0.0; 6], false);
        let b = mat(&mut g, 2, 3, &[0.0; 6], false);
        assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
        assert!(g.matmul_nt(a, b).is_ok());
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let av = pseudo(12, 1);
        let bv = pseudo(20, 2);
        for trans in [false, true] {
            let f = |a: &[f64], b: &[f64]| {
                let mut g = Graph::new();
                let va = mat(&mut g, 3, 4, a, false);
                let vb = if trans { mat(&mut g, 5, 4, b, false) } else { mat(&mut g, 4, 5, b, false) };
                let c = if trans { g.matmul_nt(va, vb) } else { g.matmul(va, vb) }.unwrap();
                // weight entries so the gradient is not uniform
                let w = g.constant(vec![3, 5], pseudo(15, 3)).unwrap();
                let p = g.mul(c, w).unwrap();
                let s = g.sum(p);
                g.scalar_value(s)
            };
            let mut g = Graph::new();
            let va = mat(&mut g, 3, 4, &av, true);
            let vb = if trans { mat(&mut g, 5, 4, &bv, true) } else { mat(&mut g, 4, 5, &bv, true) };
            let c = if trans { g.matmul_nt(va, vb) } else { g.matmul(va, vb) }.unwrap();
            let w = g.constant(vec![3, 5], pseudo(15, 3)).unwrap();
            let p = g.mul(c, w).unwrap();
            let s = g.sum(p);
            let grads = g.backward(s).unwrap();
            check_grad(&av, grads.get(va).unwrap(), |a| f(a, &bv), 1e-6);
            check_grad(&bv, grads.get(vb).unwrap(), |b| f(&av, b), 1e-6);
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = mat(&mut g, 3, 3, &[0.0, 0.0, 0.0, MASKED, 0.0, MASKED, 1.0, 2.0, 3.0], false);
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y);
        for j in 0..3 {
            assert!((v[j] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(&v[3..6], &[0.0, 1.0, 0.0]);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|t| t.exp()).sum();
        for (j, t) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((v[6 + j] - t.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_error() {
        let mut g = Graph::new();
        let x = mat(&mut g, 2, 2, &[0.0, 1.0, MASKED, -1e31], false);
        assert_eq!(g.softmax_rows(x), Err(TensorError::DegenerateRow { row: 1 }));
    }

    #[test]
    fn masked_softmax_entries_get_zero_gradient() {
        let xv = [0.3, MASKED, -0.2, 1.1, 0.5, MASKED];
        let mut g = Graph::new();
        let x = mat(&mut g, 2, 3, &xv, true);
        let y = g.softmax_rows(x).unwrap();
        let w = g.constant(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let p = g.mul(y, w).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx[1], 0.0);
        assert_eq!(gx[5], 0.0);
        assert!(gx.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let xv = pseudo(12, 4);
        let wv = pseudo(12, 5);
        let f = |x: &[f64]| {
            let mut g = Graph::new();
            let vx = mat(&mut g, 3, 4, x, false);
            let y = g.softmax_rows(vx).unwrap();
            let w = g.constant(vec![3, 4], wv.clone()).unwrap();
            let p = g.mul(y, w).unwrap();
            let s = g.sum(p);
            g.scalar_value(s)
        };
        let mut g = Graph::new();
        let vx = mat(&mut g, 3, 4, &xv, true);
        let y = g.softmax_rows(vx).unwrap();
        let w = g.constant(vec![3, 4], wv.clone()).unwrap();
        let p = g.mul(y, w).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        check_grad(&xv, grads.get(vx).unwrap(), f, 1e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = mat(&mut g, 2, 2, &[5.0, 5.0, 1.0, -1.0], false);
        let gain = g.constant(vec![2], vec![1.0, 1.0]).unwrap();
        let bias = g.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        let v = g.value(y);
        assert_eq!(&v[..2], &[0.0, 0.0]);
        // [1,-1]: mean 0, variance 1 -> scaled by 1/sqrt(1 + eps)
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((v[2] - expect).abs() < 1e-15);
        assert!((v[3] + expect).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_needs_two_features() {
        let mut g = Graph::new();
        let x = mat(&mut g, 2, 1, &[1.0, 2.0], false);
        let gain = g.constant(vec![1], vec![1.0]).unwrap();
        let bias = g.constant(vec![1], vec![0.0]).unwrap();
        assert!(g.layer_norm(x, gain, bias).is_err());
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let xv = pseudo(15, 6);
        let gv: Vec<f64> = pseudo(5, 7).iter().map(|v| 1.0 + v).collect();
        let bv = pseudo(5, 8);
        let wv = pseudo(15, 9);
        let run = |x: &[f64], gn: &[f64], b: &[f64], grad: bool| {
            let mut g = Graph::new();
            let vx = mat(&mut g, 3, 5, x, grad);
            let vg = g.leaf(&if grad { Tensor::param(vec![5], gn.to_vec()) } else { Tensor::new(vec![5], gn.to_vec()) }.unwrap());
            let vb = g.leaf(&if grad { Tensor::param(vec![5], b.to_vec()) } else { Tensor::new(vec![5], b.to_vec()) }.unwrap());
            let y = g.layer_norm(vx, vg, vb).unwrap();
            let w = g.constant(vec![3, 5], wv.clone()).unwrap();
            let p = g.mul(y, w).unwrap();
            let s = g.sum(p);
            (g, s, vx, vg, vb)
        };
        let (g, s, vx, vg, vb) = run(&xv, &gv, &bv, true);
        let grads = g.backward(s).unwrap();
        let eval = |x: &[f64], gn: &[f64], b: &[f64]| {
            let (g, s, ..) = run(x, gn, b, false);
            g.scalar_value(s)
        };
        check_grad(&xv, grads.get(vx).unwrap(), |x| eval(x, &gv, &bv), 1e-5);
        check_grad(&gv, grads.get(vg).unwrap(), |gn| eval(&xv, gn, &bv), 1e-5);
        check_grad(&bv, grads.get(vb).unwrap(), |b| eval(&xv, &gv, b), 1e-5);
    }

    #[test]
    fn elementwise_ops() {
        let mut g = Graph::new();
        let x = g.constant(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);
        let z = g.constant(vec![1], vec![0.0]).unwrap();
        let e = g.exp(z);
        assert_eq!(g.value(e), &[1.0]);
    }

    #[test]
    fn add_gradient_goes_to_both_operands() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::param(vec![2], vec![1.0, 2.0]).unwrap());
        let b = g.leaf(&Tensor::param(vec![2], vec![3.0, 4.0]).unwrap());
        let c = g.add(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::param(vec![3], vec![0.5, -2.0, 9.0]).unwrap());
        let s = g.sum(x);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(&Tensor::param(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::param(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_accumulates_until_zero_grad() {
        let mut p = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        for _ in 0..2 {
            let mut g = Graph::new();
            let x = g.leaf(&p);
            let s = g.sum(x);
            g.backward(s).unwrap().accumulate_into(x, &mut p).unwrap();
        }
        assert_eq!(p.grad().unwrap(), &[2.0, 2.0]);
        p.zero_grad();
        assert!(p.grad().is_none());
    }

    #[test]
    fn rope_gradient_and_identity_at_origin() {
        let xv = pseudo(16, 10);
        let wv = pseudo(16, 11);
        let run = |x: &[f64], grad: bool| {
            let mut g = Graph::new();
            let vx = mat(&mut g, 4, 4, x, grad);
            let y = g.rope(vx, 10000.0).unwrap();
            let w = g.constant(vec![4, 4], wv.clone()).unwrap();
            let p = g.mul(y, w).unwrap();
            let s = g.sum(p);
            (g, s, vx, y)
        };
        let (g, s, vx, y) = run(&xv, true);
        // position 0 is left untouched
        assert_eq!(&g.value(y)[..4], &xv[..4]);
        let grads = g.backward(s).unwrap();
        check_grad(&xv, grads.get(vx).unwrap(), |x| {
            let (g, s, ..) = run(x, false);
            g.scalar_value(s)
        }, 1e-6);
    }

    #[test]
    fn rope_rejects_odd_width() {
        let mut g = Graph::new();
        let x = mat(&mut g, 2, 3, &[0.0; 6], false);
        assert!(g.rope(x, 10000.0).is_err());
    }

    #[test]
    fn rope_theta_values() {
        assert_eq!(rope_theta(0, 64, 10000.0), 1.0);
        let expect = 10000f64.powf(-62.0 / 64.0);
        assert!((rope_theta(31, 64, 10000.0) - expect).abs() < 1e-18);
    }

    #[test]
    fn structural_ops_gradients() {
        let av = pseudo(6, 12);
        let bv = pseudo(4, 13);
        let wv = pseudo(6, 14);
        let run = |a: &[f64], b: &[f64], grad: bool| {
            let mut g = Graph::new();
            let va = mat(&mut g, 2, 3, a, grad);
            let vb = mat(&mut g, 2, 2, b, grad);
            let c = g.concat_cols(&[va, vb]).unwrap();
            let s1 = g.slice_rows(c, 1, 2).unwrap();
            let gth = g.gather_rows(c, &[1, 0, 1]).unwrap();
            let w = g.constant(vec![3, 5], pseudo(15, 15)).unwrap();
            let p = g.mul(gth, w).unwrap();
            let t1 = g.sum(p);
            let t2 = g.sum(s1);
            let bias = g.leaf(&if grad { Tensor::param(vec![3], wv[..3].to_vec()) } else { Tensor::new(vec![3], wv[..3].to_vec()) }.unwrap());
            let ar = g.add_row(va, bias).unwrap();
            let sq = g.mul(ar, ar).unwrap();
            let t3 = g.mean(sq);
            let t = g.add(t1, t2).unwrap();
            let t = g.add(t, t3).unwrap();
            let t = g.scale(t, 0.7);
            (g, t, va, vb)
        };
        let (g, t, va, vb) = run(&av, &bv, true);
        let grads = g.backward(t).unwrap();
        let eval = |a: &[f64], b: &[f64]| {
            let (g, t, ..) = run(a, b, false);
            g.scalar_value(t)
        };
        check_grad(&av, grads.get(va).unwrap(), |a| eval(a, &bv), 1e-6);
        check_grad(&bv, grads.get(vb).unwrap(), |b| eval(&av, b), 1e-6);
    }

    #[test]
    fn gaussian_energy_sigma_gradient() {
        let dist = Rc::new(vec![0.0, 0.3, 0.7, 0.0, 0.2, 1.1, 0.4, 0.0, 0.5]);
        let masked = Rc::new(vec![false, false, true, false, false, false, true, false, false]);
        let kernel = GaussianKernel { rows: 3, cols: 3, dist, masked };
        let wv = pseudo(9, 16);
        let run = |s: f64, grad: bool| {
            let mut g = Graph::new();
            let t = if grad { Tensor::param(vec![2], vec![0.1, s]) } else { Tensor::new(vec![2], vec![0.1, s]) }.unwrap();
            let vs = g.leaf(&t);
            let e = g.gaussian_energy(vs, 1, kernel.clone()).unwrap();
            let y = g.softmax_rows(e).unwrap();
            let w = g.constant(vec![3, 3], wv.clone()).unwrap();
            let p = g.mul(y, w).unwrap();
            let s = g.sum(p);
            (g, s, vs, e)
        };
        let (g, s, vs, e) = run(0.45, true);
        assert_eq!(g.value(e)[0], 1.0);
        assert_eq!(g.value(e)[2], MASKED);
        let grads = g.backward(s).unwrap();
        let gs = grads.get(vs).unwrap();
        assert_eq!(gs[0], 0.0);
        check_grad(&[0.45], &[gs[1]], |x| {
            let (g, s, ..) = run(x[0], false);
            g.scalar_value(s)
        }, 1e-6);
    }

    #[test]
    fn gaussian_energy_clamps_small_sigma() {
        let kernel = GaussianKernel {
            rows: 1,
            cols: 2,
            dist: Rc::new(vec![0.0, 0.001]),
            masked: Rc::new(vec![false, false]),
        };
        let mut g = Graph::new();
        let s = g.constant(vec![1], vec![1e-6]).unwrap();
        let e = g.gaussian_energy(s, 0, kernel.clone()).unwrap();
        assert!((g.value(e)[1] - (-0.5f64).exp()).abs() < 1e-12);
        let nan = g.constant(vec![1], vec![f64::NAN]).unwrap();
        assert!(g.gaussian_energy(nan, 0, kernel).is_err());
    }
}
