use std::sync::Arc;

use super::kernels::{dot, matmul_a_bt, matmul_at_b, matmul_into};
use super::{Real, Result, Tensor, TensorError, MASK_SENTINEL};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Blocked/visible grid for [`Graph::masked_softmax`]. `blocked[r * cols + c]`
/// marks a position that receives the negative-infinity sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    rows: usize,
    cols: usize,
    blocked: Vec<bool>,
}

impl MaskGrid {
    pub fn new(rows: usize, cols: usize, blocked: Vec<bool>) -> Result<Self> {
        if blocked.len() != rows * cols {
            return Err(TensorError::DataLength {
                shape: vec![rows, cols],
                len: blocked.len(),
            });
        }
        Ok(Self { rows, cols, blocked })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_blocked(&self, r: usize, c: usize) -> bool {
        self.blocked[r * self.cols + c]
    }

    pub fn blocked(&self) -> &[bool] {
        &self.blocked
    }

    /// First row with no visible position, if any.
    pub fn degenerate_row(&self) -> Option<usize> {
        (0..self.rows).find(|&r| self.blocked[r * self.cols..(r + 1) * self.cols].iter().all(|&b| b))
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    RowNorm {
        x: Var,
        squared: bool,
    },
    RowCosine {
        a: Var,
        b: Var,
        norm_a: Vec<T>,
        norm_b: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape. Ops are recorded in execution order; [`Graph::backward`]
/// replays them in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    layer_norm_eps: T,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;
pub(crate) const COSINE_EPS: f64 = 1e-8;

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            layer_norm_eps: T::lit(LAYER_NORM_EPS),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::RowCosine { a, b, .. } => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::RowNorm { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SliceCols { x, .. }
            | Op::Reshape(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }

    /// Records an input tensor. Leaves with `requires_grad` receive
    /// accumulated gradients on every [`Graph::backward`] call.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, `None` before any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaf_grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_vec(&[m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err("matmul_t", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_a_bt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_vec(&[m, n], out)?, Op::MatMulT(a, b), "matmul_t")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose2()?;
        self.push(t, Op::Transpose(x), "transpose")
    }

    fn zip_same(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale(x, s), "scale")
    }

    /// Adds a length-`C` bias to every row of an `N×C` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c) = self.dims2(x)?;
        let b = self.value(bias);
        if b.len() != c {
            return Err(shape_err("add_bias", self.value(x).shape(), b.shape()));
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        self.push(Tensor::from_vec(&[n, c], data)?, Op::AddBias(x, bias), "add_bias")
    }

    /// `x · weight (+ bias)` with `weight` stored as `Cin×Cout`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        let t = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        self.push(t, Op::Gelu(x), "gelu")
    }

    /// Row-wise layer normalisation of an `N×C` matrix with affine gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, c) = self.dims2(x)?;
        if c < 2 {
            return Err(TensorError::Invalid(format!("layer_norm needs at least 2 columns, got {c}")));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != c || b.len() != c {
            return Err(shape_err("layer_norm", &[n, c], g.shape()));
        }
        let cn = T::from_usize(c).unwrap();
        let mut xhat = vec![T::zero(); n * c];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * c];
        let xs = self.value(x).data();
        for i in 0..n {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let r = T::one() / (var + self.layer_norm_eps).sqrt();
            rstd[i] = r;
            for j in 0..c {
                let h = (row[j] - mean) * r;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        self.push(
            Tensor::from_vec(&[n, c], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Row-wise softmax of `logits + mask`, where blocked mask positions carry
    /// the negative sentinel and are forced to exactly zero afterwards.
    pub fn masked_softmax(&mut self, logits: Var, mask: Option<&Arc<MaskGrid>>) -> Result<Var> {
        let (n, m) = self.dims2(logits)?;
        if let Some(mask) = mask {
            if mask.rows != n || mask.cols != m {
                return Err(shape_err("masked_softmax", &[n, m], &[mask.rows, mask.cols]));
            }
            if let Some(row) = mask.degenerate_row() {
                return Err(TensorError::DegenerateMaskRow { row });
            }
        }
        let sentinel = T::lit(MASK_SENTINEL);
        let xs = self.value(logits).data();
        let mut out = vec![T::zero(); n * m];
        let mut z = vec![T::zero(); m];
        for i in 0..n {
            for j in 0..m {
                z[j] = xs[i * m + j];
                if mask.is_some_and(|mk| mk.blocked[i * m + j]) {
                    z[j] += sentinel;
                }
            }
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..m {
                let e = (z[j] - max).exp();
                out[i * m + j] = e;
                total += e;
            }
            for j in 0..m {
                let o = &mut out[i * m + j];
                if mask.is_some_and(|mk| mk.blocked[i * m + j]) {
                    *o = T::zero();
                } else {
                    *o = *o / total;
                }
            }
        }
        self.push(Tensor::from_vec(&[n, m], out)?, Op::Softmax(logits), "masked_softmax")
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        self.masked_softmax(logits, None)
    }

    /// Per-row L2 norm (or squared norm) of an `N×C` matrix, giving `N×1`.
    pub fn row_norm(&mut self, x: Var, squared: bool) -> Result<Var> {
        let (n, c) = self.dims2(x)?;
        let xs = self.value(x).data();
        let out = (0..n)
            .map(|i| {
                let row = &xs[i * c..(i + 1) * c];
                let sq = dot(row, row);
                if squared {
                    sq
                } else {
                    sq.sqrt()
                }
            })
            .collect();
        self.push(Tensor::from_vec(&[n, 1], out)?, Op::RowNorm { x, squared }, "row_norm")
    }

    /// Per-row cosine similarity of two `N×C` matrices, giving `N×1`. Norms are
    /// guarded from below by `1e-8`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("row_cosine", ta.shape(), tb.shape()));
        }
        let (n, c) = ta.dims2()?;
        let eps = T::lit(COSINE_EPS);
        let mut norm_a = vec![T::zero(); n];
        let mut norm_b = vec![T::zero(); n];
        let mut out = vec![T::zero(); n];
        for i in 0..n {
            let ra = &ta.data()[i * c..(i + 1) * c];
            let rb = &tb.data()[i * c..(i + 1) * c];
            norm_a[i] = dot(ra, ra).sqrt();
            norm_b[i] = dot(rb, rb).sqrt();
            out[i] = dot(ra, rb) / (norm_a[i].max(eps) * norm_b[i].max(eps));
        }
        self.push(
            Tensor::from_vec(&[n, 1], out)?,
            Op::RowCosine { a, b, norm_a, norm_b },
            "row_cosine",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.sum() / T::from_usize(t.len()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.dims2(x)?;
        if start + len > c || len == 0 {
            return Err(TensorError::Invalid(format!(
                "column slice {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&xs[i * c + start..i * c + start + len]);
        }
        self.push(Tensor::from_vec(&[n, len], out)?, Op::SliceCols { x, start }, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols of nothing".into()))?;
        let (n, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc) = self.dims2(p)?;
            if pn != n {
                return Err(shape_err("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::from_vec(&[n, total], out)?, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let needs = |v: &Var| nodes[v.0].requires_grad;
        let val = |v: &Var| &nodes[v.0].value;
        match &nodes[idx].op {
            Op::Leaf => {
                let slot = &mut self.leaf_grads[idx];
                match slot {
                    Some(t) => {
                        for (a, &b) in t.data_mut().iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(Tensor::from_vec(nodes[idx].value.shape(), g.to_vec())?),
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = val(a).dims2()?;
                let n = val(b).dims2()?.1;
                if needs(a) {
                    let da = slot(grads, *a, m * k);
                    matmul_a_bt(g, val(b).data(), da, m, n, k);
                }
                if needs(b) {
                    let db = slot(grads, *b, k * n);
                    matmul_at_b(val(a).data(), g, db, m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                // y = a·bᵀ, a: m×k, b: n×k, g: m×n
                let (m, k) = val(a).dims2()?;
                let n = val(b).dims2()?.0;
                if needs(a) {
                    let da = slot(grads, *a, m * k);
                    matmul_into(g, val(b).data(), da, m, n, k);
                }
                if needs(b) {
                    let db = slot(grads, *b, n * k);
                    matmul_at_b(g, val(a).data(), db, m, n, k);
                }
            }
            Op::Transpose(x) => {
                if needs(x) {
                    let (r, c) = val(x).dims2()?;
                    let dx = slot(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        add_into(slot(grads, *v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if needs(b) {
                    for (d, &gv) in slot(grads, *b, g.len()).iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let bv = val(b).data();
                    for ((d, &gv), &y) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if needs(b) {
                    let av = val(a).data();
                    for ((d, &gv), &y) in slot(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                        *d += gv * y;
                    }
                }
            }
            Op::Scale(x, s) => {
                if needs(x) {
                    for (d, &gv) in slot(grads, *x, g.len()).iter_mut().zip(g) {
                        *d += gv * *s;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if needs(x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if needs(b) {
                    let c = val(b).len();
                    let db = slot(grads, *b, c);
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                }
            }
            Op::Gelu(x) => {
                if needs(x) {
                    let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
                    let half = T::lit(0.5);
                    let three = T::lit(3.0);
                    let xs = val(x).data();
                    for ((d, &gv), &v) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(xs) {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let dt = c * (T::one() + three * a * v * v);
                        let deriv = half * (T::one() + t) + half * v * (T::one() - t * t) * dt;
                        *d += gv * deriv;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = val(gain).len();
                let n = g.len() / c;
                if needs(gain) {
                    let dg = slot(grads, *gain, c);
                    for i in 0..n {
                        for j in 0..c {
                            dg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if needs(bias) {
                    let db = slot(grads, *bias, c);
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                }
                if needs(x) {
                    let gv = val(gain).data();
                    let cn = T::from_usize(c).unwrap();
                    let dx = slot(grads, *x, n * c);
                    let mut dxhat = vec![T::zero(); c];
                    for i in 0..n {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            dxhat[j] = g[i * c + j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[i * c + j];
                        }
                        mean_d /= cn;
                        mean_dx /= cn;
                        for j in 0..c {
                            dx[i * c + j] += rstd[i] * (dxhat[j] - mean_d - xhat[i * c + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if needs(x) {
                    let y = nodes[idx].value.data();
                    let (n, m) = nodes[idx].value.dims2()?;
                    let dx = slot(grads, *x, n * m);
                    for i in 0..n {
                        let yr = &y[i * m..(i + 1) * m];
                        let gr = &g[i * m..(i + 1) * m];
                        let inner = dot(yr, gr);
                        for j in 0..m {
                            dx[i * m + j] += yr[j] * (gr[j] - inner);
                        }
                    }
                }
            }
            Op::RowNorm { x, squared } => {
                if needs(x) {
                    let (n, c) = val(x).dims2()?;
                    let xs = val(x).data();
                    let norms = nodes[idx].value.data();
                    let dx = slot(grads, *x, n * c);
                    let two = T::lit(2.0);
                    for i in 0..n {
                        let factor = if *squared {
                            two * g[i]
                        } else if norms[i] > T::zero() {
                            g[i] / norms[i]
                        } else {
                            T::zero()
                        };
                        for j in 0..c {
                            dx[i * c + j] += factor * xs[i * c + j];
                        }
                    }
                }
            }
            Op::RowCosine { a, b, norm_a, norm_b } => {
                let (n, c) = val(a).dims2()?;
                let eps = T::lit(COSINE_EPS);
                let cos = nodes[idx].value.data();
                let (av, bv) = (val(a).data(), val(b).data());
                for (this, other, norm_this, norm_other) in [(a, bv, norm_a, norm_b), (b, av, norm_b, norm_a)] {
                    if !needs(this) {
                        continue;
                    }
                    let own = val(this).data();
                    let d = slot(grads, *this, n * c);
                    for i in 0..n {
                        let denom = norm_this[i].max(eps) * norm_other[i].max(eps);
                        let self_term = if norm_this[i] > eps {
                            cos[i] / (norm_this[i] * norm_this[i])
                        } else {
                            T::zero()
                        };
                        for j in 0..c {
                            d[i * c + j] +=
                                g[i] * (other[i * c + j] / denom - self_term * own[i * c + j]);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if needs(x) {
                    for d in slot(grads, *x, val(x).len()).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if needs(x) {
                    let len = val(x).len();
                    let share = g[0] / T::from_usize(len).unwrap();
                    for d in slot(grads, *x, len).iter_mut() {
                        *d += share;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if needs(x) {
                    let (n, c) = val(x).dims2()?;
                    let len = g.len() / n;
                    let dx = slot(grads, *x, n * c);
                    for i in 0..n {
                        add_into(&mut dx[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = nodes[idx].value.dims2()?.0;
                let total = g.len() / n;
                let mut offset = 0;
                for p in parts {
                    let w = val(p).dims2()?.1;
                    if needs(p) {
                        let dp = slot(grads, *p, n * w);
                        for i in 0..n {
                            add_into(&mut dp[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => {
                if needs(x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
            }
        }
        Ok(())
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
