//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation appends one node to an arena; node indices are therefore a
//! topological order, and the backward pass is a single reverse sweep that
//! visits each recorded operation exactly once. Gradients accumulate
//! additively, so a value used in several places receives the sum of all its
//! downstream contributions.
//!
//! The primitive set is the minimal closure needed by the completion model:
//! matrix product, element-wise arithmetic, relu/tanh, row softmax, layer
//! normalization, max-over-rows, sum/mean, concatenation, row selection and
//! replication, row-wise l2 norms, straight-through quantization, and fused
//! Chamfer losses. Attention is provided as a composite over these primitives.

use crate::autodiff::tensor::{matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Layer-normalization epsilon, fixed across the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddConst { x: Var, c: f64 },
    MulScalar { x: Var, s: Var },
    Relu { x: Var },
    Tanh { x: Var },
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    MaxOverRows { x: Var, argmax: Vec<usize> },
    MeanAll { x: Var },
    SumAll { x: Var },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    SelectRows { x: Var, indices: Vec<usize> },
    RepeatRows { x: Var, times: usize },
    TileRows { x: Var, times: usize },
    L2NormRows { x: Var },
    Reshape { x: Var },
    Detach,
    StraightThrough { f: Var },
    Chamfer { p: Var, q: Var, pq: Vec<usize>, qp: Vec<usize>, squared: bool },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient tape: an arena of recorded operations plus, after
/// [`Tape::backward`], one gradient buffer per node that needs one.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input; gradients never flow into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable parameter; gradients accumulate into it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The forward value of a recorded node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// The gradient buffer of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the node's value; zeros when backward
    /// never reached the node (e.g. a parameter unused under some ablation).
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad matches node shape"),
            None => Tensor::zeros(shape),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn require_matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if !t.is_matrix() {
            return Err(Error::shape(format!(
                "{what} must be 2-D, found shape {:?}",
                t.shape()
            )));
        }
        Ok((t.rows(), t.cols()))
    }

    // ── forward primitives ──────────────────────────────────────────────

    /// `a (m x k)` times `b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.require_matrix(a, "matmul lhs")?;
        let (kb, n) = self.require_matrix(b, "matmul rhs")?;
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul inner dimensions disagree: lhs {:?} vs rhs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Matmul { a, b }, needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.require_matrix(x, "transpose input")?;
        let out = transpose_raw(self.value(x).data(), m, n);
        let needs = self.needs(x);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose { x }, needs))
    }

    /// Element-wise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    /// Element-wise difference of two same-shape tensors.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    /// Element-wise (Hadamard) product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    /// Element-wise quotient of two same-shape tensors.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "div", |x, y| x / y, |a, b| Op::Div { a, b })
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{name} operands disagree: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, op(a, b), needs))
    }

    /// Adds a `1 x n` row vector to every row of an `m x n` matrix (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.require_matrix(a, "add_row matrix")?;
        let (rr, rn) = self.require_matrix(row, "add_row bias")?;
        if rr != 1 || rn != n {
            return Err(Error::shape(format!(
                "add_row bias must be [1, {n}], found {:?}",
                self.value(row).shape()
            )));
        }
        let mut data = self.value(a).data().to_vec();
        let bias = self.value(row).data().to_vec();
        for r in 0..m {
            for j in 0..n {
                data[r * n + j] += bias[j];
            }
        }
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::AddRow { a, row }, needs))
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Scale { x, c }, needs)
    }

    /// Adds the constant `c` to every element.
    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v + c).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data).expect("same shape"), Op::AddConst { x, c }, needs)
    }

    /// Multiplies a tensor by a `[1, 1]` scalar variable (broadcast).
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).scalar_value()?;
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * sv).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(Tensor::new(shape, data)?, Op::MulScalar { x, s }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Relu { x }, needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data).expect("same shape"), Op::Tanh { x }, needs)
    }

    /// Row-wise softmax with max subtraction for stability. Each output row
    /// sums to one.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.require_matrix(x, "softmax input")?;
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = self.value(x).row(r);
            let hi = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = row.iter().map(|v| (v - hi).exp()).collect();
            let total: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / total));
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::SoftmaxRows { x }, needs))
    }

    /// Row-wise layer normalization with learnable gain and bias (both `1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.require_matrix(x, "layer_norm input")?;
        for (v, what) in [(gamma, "gain"), (beta, "bias")] {
            let (r, c) = self.require_matrix(v, "layer_norm parameter")?;
            if r != 1 || c != n {
                return Err(Error::shape(format!(
                    "layer_norm {what} must be [1, {n}], found {:?}",
                    self.value(v).shape()
                )));
            }
        }
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = self.value(x).row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..n {
                let xhat = (row[j] - mean) * inv;
                data.push(xhat * self.value(gamma).data()[j] + self.value(beta).data()[j]);
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::LayerNorm { x, gamma, beta }, needs))
    }

    /// Column-wise maximum over all rows: `m x n` becomes `1 x n`. Ties pick
    /// the lowest row index, which keeps the reduction deterministic.
    pub fn max_over_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.require_matrix(x, "max_over_rows input")?;
        if m == 0 {
            return Err(Error::shape("max_over_rows over zero rows".to_string()));
        }
        let mut out = vec![f64::NEG_INFINITY; n];
        let mut argmax = vec![0usize; n];
        for r in 0..m {
            let row = self.value(x).row(r);
            for j in 0..n {
                if row[j] > out[j] {
                    out[j] = row[j];
                    argmax[j] = r;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::matrix(1, n, out)?, Op::MaxOverRows { x, argmax }, needs))
    }

    /// Mean of all elements, as a `[1, 1]` scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(mean), Op::MeanAll { x }, needs)
    }

    /// Sum of all elements, as a `[1, 1]` scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum::<f64>();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::SumAll { x }, needs)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows of zero parts".to_string()));
        }
        let (_, n) = self.require_matrix(parts[0], "concat_rows part")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.require_matrix(p, "concat_rows part")?;
            if pn != n {
                return Err(Error::shape(format!(
                    "concat_rows column mismatch: {n} vs {pn}"
                )));
            }
            rows += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::matrix(rows, n, data)?,
            Op::ConcatRows { parts: parts.to_vec() },
            needs,
        ))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols of zero parts".to_string()));
        }
        let (m, _) = self.require_matrix(parts[0], "concat_cols part")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.require_matrix(p, "concat_cols part")?;
            if pm != m {
                return Err(Error::shape(format!(
                    "concat_cols row mismatch: {m} vs {pm}"
                )));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for r in 0..m {
                data[r * n + offset..r * n + offset + w].copy_from_slice(self.value(p).row(r));
            }
            offset += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::matrix(m, n, data)?,
            Op::ConcatCols { parts: parts.to_vec() },
            needs,
        ))
    }

    /// Columns `start .. start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.require_matrix(x, "slice_cols input")?;
        if start + len > n {
            return Err(Error::shape(format!(
                "slice_cols {start}..{} exceeds {n} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&self.value(x).row(r)[start..start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::matrix(m, len, data)?, Op::SliceCols { x, start }, needs))
    }

    /// Gathers rows by index (repeats allowed). Backward scatter-adds.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.require_matrix(x, "select_rows input")?;
        if indices.is_empty() {
            return Err(Error::shape("select_rows with zero indices".to_string()));
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::shape(format!(
                    "select_rows index {i} out of range for {m} rows"
                )));
            }
            data.extend_from_slice(self.value(x).row(i));
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::matrix(indices.len(), n, data)?,
            Op::SelectRows { x, indices: indices.to_vec() },
            needs,
        ))
    }

    /// Repeats each row `times` consecutive times: `m x n` becomes `(m*times) x n`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (m, n) = self.require_matrix(x, "repeat_rows input")?;
        if times == 0 {
            return Err(Error::shape("repeat_rows with times = 0".to_string()));
        }
        let mut data = Vec::with_capacity(m * times * n);
        for r in 0..m {
            for _ in 0..times {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::matrix(m * times, n, data)?,
            Op::RepeatRows { x, times },
            needs,
        ))
    }

    /// Repeats the whole row block `times` times: `m x n` becomes `(m*times) x n`.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (m, n) = self.require_matrix(x, "tile_rows input")?;
        if times == 0 {
            return Err(Error::shape("tile_rows with times = 0".to_string()));
        }
        let mut data = Vec::with_capacity(m * times * n);
        for _ in 0..times {
            data.extend_from_slice(self.value(x).data());
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::matrix(m * times, n, data)?,
            Op::TileRows { x, times },
            needs,
        ))
    }

    /// Euclidean norm of each row: `m x n` becomes `m x 1`. The subgradient at
    /// an all-zero row is taken to be zero.
    pub fn l2_norm_rows(&mut self, x: Var) -> Result<Var> {
        let (m, _) = self.require_matrix(x, "l2_norm_rows input")?;
        let data: Vec<f64> = (0..m)
            .map(|r| self.value(x).row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::matrix(m, 1, data)?, Op::L2NormRows { x }, needs))
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.value(x).shape(),
                shape
            )));
        }
        let data = self.value(x).data().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Reshape { x }, needs))
    }

    /// Copies the value and blocks all gradient flow through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, false)
    }

    /// Straight-through estimator: the forward value is `code`, the backward
    /// pass routes the full gradient to `f`, and no gradient reaches `code`
    /// through this node.
    pub fn straight_through(&mut self, f: Var, code: Var) -> Result<Var> {
        if self.value(f).shape() != self.value(code).shape() {
            return Err(Error::shape(format!(
                "straight_through shapes disagree: {:?} vs {:?}",
                self.value(f).shape(),
                self.value(code).shape()
            )));
        }
        let value = self.value(code).clone();
        let needs = self.needs(f);
        Ok(self.push(value, Op::StraightThrough { f }, needs))
    }

    /// Fused Chamfer distance between two point sets `p (n x 3)` and
    /// `q (m x 3)`: mean nearest-neighbor distance in both directions, summed.
    /// `chamfer_l1` uses Euclidean distances, [`Tape::chamfer_l2`] squared ones.
    pub fn chamfer_l1(&mut self, p: Var, q: Var) -> Result<Var> {
        self.chamfer(p, q, false)
    }

    /// Squared-distance Chamfer; see [`Tape::chamfer_l1`].
    pub fn chamfer_l2(&mut self, p: Var, q: Var) -> Result<Var> {
        self.chamfer(p, q, true)
    }

    fn chamfer(&mut self, p: Var, q: Var, squared: bool) -> Result<Var> {
        for (v, what) in [(p, "first"), (q, "second")] {
            let (m, n) = self.require_matrix(v, "chamfer input")?;
            if n != 3 || m == 0 {
                return Err(Error::shape(format!(
                    "chamfer {what} cloud must be non-empty with 3 columns, found {:?}",
                    self.value(v).shape()
                )));
            }
        }
        let (pn, qn) = (self.value(p).rows(), self.value(q).rows());
        let mut total = 0.0;
        let mut pq = vec![0usize; pn];
        let mut qp = vec![0usize; qn];
        for (i, nearest) in pq.iter_mut().enumerate() {
            let (j, d2) = nearest_row(self.value(q), self.value(p).row(i));
            *nearest = j;
            total += if squared { d2 } else { d2.sqrt() } / pn as f64;
        }
        for (j, nearest) in qp.iter_mut().enumerate() {
            let (i, d2) = nearest_row(self.value(p), self.value(q).row(j));
            *nearest = i;
            total += if squared { d2 } else { d2.sqrt() } / qn as f64;
        }
        let needs = self.needs(p) || self.needs(q);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Chamfer { p, q, pq, qp, squared },
            needs,
        ))
    }

    // ── composites ──────────────────────────────────────────────────────

    /// Scaled dot-product attention `softmax(q k^T / sqrt(d)) v` with
    /// `q: n x d`, `k: m x d`, `v: m x d_v`. Built from recorded primitives,
    /// so gradients flow through all three inputs.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (_, d) = self.require_matrix(q, "attention queries")?;
        let (mk, dk) = self.require_matrix(k, "attention keys")?;
        let (mv, _) = self.require_matrix(v, "attention values")?;
        if mk == 0 {
            return Err(Error::shape("attention over empty memory (zero keys)".to_string()));
        }
        if d != dk || mk != mv {
            return Err(Error::shape(format!(
                "attention shapes disagree: q {:?}, k {:?}, v {:?}",
                self.value(q).shape(),
                self.value(k).shape(),
                self.value(v).shape()
            )));
        }
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = self.softmax_rows(scaled)?;
        self.matmul(weights, v)
    }

    // ── replay ──────────────────────────────────────────────────────────

    /// Re-evaluates the recorded graph with some leaf or parameter values
    /// replaced and returns the value `target` takes under those inputs.
    ///
    /// The recorded structure stays fixed: gathered row indices, pooling
    /// argmaxes and Chamfer pairings are reused as recorded, [`Tape::detach`]
    /// nodes keep their original values, and a straight-through node moves
    /// with its differentiable input (`value + (f_new - f_old)`). The
    /// replayed quantity is therefore exactly the function whose gradient
    /// [`Tape::backward`] reports, which makes replay the right objective
    /// for finite-difference checks of graphs containing stop-gradients or
    /// hard assignments: differentiating the raw recomputed forward instead
    /// would measure dependence through the frozen paths that the estimator
    /// deliberately ignores.
    ///
    /// Nodes not reachable from any override keep their recorded values and
    /// are not recomputed.
    pub fn replay_value(&self, target: Var, overrides: &[(Var, Tensor)]) -> Result<Tensor> {
        if target.0 >= self.nodes.len() {
            return Err(Error::shape(format!(
                "replay target {} out of range for {} recorded nodes",
                target.0,
                self.nodes.len()
            )));
        }
        let mut scratch: Vec<Option<Tensor>> = vec![None; target.0 + 1];
        for (v, t) in overrides {
            let node = self.nodes.get(v.0).ok_or_else(|| {
                Error::shape(format!(
                    "replay override {} out of range for {} recorded nodes",
                    v.0,
                    self.nodes.len()
                ))
            })?;
            if !matches!(node.op, Op::Leaf) {
                return Err(Error::shape(format!(
                    "replay can only override leaf or parameter nodes; node {} is an operation",
                    v.0
                )));
            }
            if t.shape() != node.value.shape() {
                return Err(Error::shape(format!(
                    "replay override for node {} has shape {:?}, recorded {:?}",
                    v.0,
                    t.shape(),
                    node.value.shape()
                )));
            }
            if v.0 <= target.0 {
                scratch[v.0] = Some(t.clone());
            }
        }
        for i in 0..=target.0 {
            if scratch[i].is_none() {
                scratch[i] = self.replay_node(i, &scratch)?;
            }
        }
        Ok(match scratch[target.0].take() {
            Some(t) => t,
            None => self.nodes[target.0].value.clone(),
        })
    }

    /// Current value of `v` during a replay: the recomputed tensor if the
    /// node was reached by an override, the recorded one otherwise.
    fn replayed<'a>(&'a self, scratch: &'a [Option<Tensor>], v: Var) -> &'a Tensor {
        scratch[v.0].as_ref().unwrap_or(&self.nodes[v.0].value)
    }

    /// Recomputes node `i` from replayed inputs, or returns `None` when no
    /// input changed and the recorded value stands. Mirrors each forward
    /// builder exactly (including summation order) so that a replay without
    /// overrides reproduces the recorded values bitwise.
    #[allow(clippy::too_many_lines)]
    fn replay_node(&self, i: usize, scratch: &[Option<Tensor>]) -> Result<Option<Tensor>> {
        let touched = |vs: &[Var]| vs.iter().any(|v| scratch[v.0].is_some());
        let out = match &self.nodes[i].op {
            // Leaves keep their values; detach freezes its recorded copy.
            Op::Leaf | Op::Detach => None,
            &Op::Matmul { a, b } => {
                if !touched(&[a, b]) {
                    return Ok(None);
                }
                let (av, bv) = (self.replayed(scratch, a), self.replayed(scratch, b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                Some(Tensor::matrix(m, n, matmul_raw(av.data(), bv.data(), m, k, n))?)
            }
            &Op::Transpose { x } => {
                if !touched(&[x]) {
                    return Ok(None);
                }
                let xv = self.replayed(scratch, x);
                let (m, n) = (xv.rows(), xv.cols());
                Some(Tensor::matrix(n, m, transpose_raw(xv.data(), m, n))?)
            }
            &Op::Add { a, b } => self.replay_zip(scratch, a, b, |x, y| x + y)?,
            &Op::Sub { a, b } => self.replay_zip(scratch, a, b, |x, y| x - y)?,
            &Op::Mul { a, b } => self.replay_zip(scratch, a, b, |x, y| x * y)?,
            &Op::Div { a, b } => self.replay_zip(scratch, a, b, |x, y| x / y)?,
            &Op::AddRow { a, row } => {
                if !touched(&[a, row]) {
                    return Ok(None);
                }
                let (av, rv) = (self.replayed(scratch, a), self.replayed(scratch, row));
                let (m, n) = (av.rows(), av.cols());
                let mut data = av.data().to_vec();
                for r in 0..m {
                    for j in 0..n {
                        data[r * n + j] += rv.data()[j];
                    }
                }
                Some(Tensor::matrix(m, n, data)?)
            }
            &Op::Scale { x, c } => self.replay_map(scratch, x, |v| v * c)?,
            &Op::AddConst { x, c } => self.replay_map(scratch, x, |v| v + c)?,
            &Op::MulScalar { x, s } => {
                if !touched(&[x, s]) {
                    return Ok(None);
                }
                let sv = self.replayed(scratch, s).data()[0];
                let xv = self.replayed(scratch, x);
                let data: Vec<f64> = xv.data().iter().map(|v| v * sv).collect();
                Some(Tensor::new(xv.shape().to_vec(), data)?)
            }
            &Op::Relu { x } => self.replay_map(scratch, x, |v| v.max(0.0))?,
            &Op::Tanh { x } => self.replay_map(scratch, x, f64::tanh)?,
            &Op::SoftmaxRows { x } => {
                if !touched(&[x]) {
                    return Ok(None);
                }
                let xv = self.replayed(scratch, x);
                let (m, n) = (xv.rows(), xv.cols());
                let mut data = Vec::with_capacity(m * n);
                for r in 0..m {
                    let row = xv.row(r);
                    let hi = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let exps: Vec<f64> = row.iter().map(|v| (v - hi).exp()).collect();
                    let total: f64 = exps.iter().sum();
                    data.extend(exps.iter().map(|e| e / total));
                }
                Some(Tensor::matrix(m, n, data)?)
            }
            &Op::LayerNorm { x, gamma, beta } => {
                if !touched(&[x, gamma, beta]) {
                    return Ok(None);
                }
                let xv = self.replayed(scratch, x);
                let gv = self.replayed(scratch, gamma);
                let bv = self.replayed(scratch, beta);
                let (m, n) = (xv.rows(), xv.cols());
                let mut data = Vec::with_capacity(m * n);
                for r in 0..m {
                    let row = xv.row(r);
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv;
                        data.push(xhat * gv.data()[j] + bv.data()[j]);
                    }
                }
                Some(Tensor::matrix(m, n, data)?)
            }
            Op::MaxOverRows { x, argmax } => {
                if !touched(&[*x]) {
                    return Ok(None);
                }
                let xv = self.replayed(scratch, *x);
                let n = argmax.len();
                let data: Vec<f64> =
                    argmax.iter().enumerate().map(|(j, &r)| xv.row(r)[j]).collect();
                Some(Tensor::matrix(1, n, data)?)
            }
            &Op::MeanAll { x } => {
                if !touched(&[x]) {
                    return Ok(None);
                }
                let xv = self.replayed(scratch, x);
                Some(Tensor::scalar(xv.data().iter().sum::<f64>() / xv.numel() as f64))
            }
            &Op::SumAll { x } => {
                if !touched(&[x]) {
                    return Ok(None);
                }
                Some(Tensor::scalar(self.replayed(scratch, x).data().iter().sum::<f64>()))
            }
            Op::ConcatRows { parts } => {
                if !touched(parts) {
                    return Ok(None);
                }
                let n = self.replayed(scratch, parts[0]).cols();
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let pv = self.replayed(scratch, p);
                    rows += pv.rows();
                    data.extend_from_slice(pv.data());
                }
                Some(Tensor::matrix(rows, n, data)?)
            }
            Op::ConcatCols { parts } => {
                if !touched(parts) {
                    return Ok(None);
                }
                let m = self.replayed(scratch, parts[0]).rows();
                let n = self.nodes[i].value.cols();
                let mut data = vec![0.0; m * n];
                let mut offset = 0;
                for &p in parts {
                    let pv = self.replayed(scratch, p);
                    let w = pv.cols();
                    for r in 0..m {
                        data[r * n + offset..r * n + offset + w].copy_from_slice(pv.row(r));
                    }
                    offset += w;
                }
                Some(Tensor::matrix(m, n, data)?)
            }
            &Op::SliceCols { x, start } => {
                if !touched(&[x]) {
                    return Ok(None);
                }
                let xv = self.replayed(scratch, x);
                let (m, len) = (xv.rows(), self.nodes[i].value.cols());
                let mut data = Vec::with_capacity(m * len);
                for r in 0..m {
                    data.extend_from_slice(&xv.row(r)[start..start + len]);
                }
                Some(Tensor::matrix(m, len, data)?)
            }
            Op::SelectRows { x, indices } => {
                if !touched(&[*x]) {
                    return Ok(None);
                }
                let xv = self.replayed(scratch, *x);
                let n = xv.cols();
                let mut data = Vec::with_capacity(indices.len() * n);
                for &r in indices {
                    data.extend_from_slice(xv.row(r));
                }
                Some(Tensor::matrix(indices.len(), n, data)?)
            }
            &Op::RepeatRows { x, times } => {
                if !touched(&[x]) {
                    return Ok(None);
                }
                let xv = self.replayed(scratch, x);
                let (m, n) = (xv.rows(), xv.cols());
                let mut data = Vec::with_capacity(m * times * n);
                for r in 0..m {
                    for _ in 0..times {
                        data.extend_from_slice(xv.row(r));
                    }
                }
                Some(Tensor::matrix(m * times, n, data)?)
            }
            &Op::TileRows { x, times } => {
                if !touched(&[x]) {
                    return Ok(None);
                }
                let xv = self.replayed(scratch, x);
                let (m, n) = (xv.rows(), xv.cols());
                let mut data = Vec::with_capacity(m * times * n);
                for _ in 0..times {
                    data.extend_from_slice(xv.data());
                }
                Some(Tensor::matrix(m * times, n, data)?)
            }
            &Op::L2NormRows { x } => {
                if !touched(&[x]) {
                    return Ok(None);
                }
                let xv = self.replayed(scratch, x);
                let data: Vec<f64> = (0..xv.rows())
                    .map(|r| xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                Some(Tensor::matrix(xv.rows(), 1, data)?)
            }
            &Op::Reshape { x } => {
                if !touched(&[x]) {
                    return Ok(None);
                }
                let data = self.replayed(scratch, x).data().to_vec();
                Some(Tensor::new(self.nodes[i].value.shape().to_vec(), data)?)
            }
            &Op::StraightThrough { f } => {
                if !touched(&[f]) {
                    return Ok(None);
                }
                let data: Vec<f64> = self
                    .nodes[i]
                    .value
                    .data()
                    .iter()
                    .zip(self.replayed(scratch, f).data().iter().zip(self.nodes[f.0].value.data()))
                    .map(|(&v, (&fnew, &fold))| v + (fnew - fold))
                    .collect();
                Some(Tensor::new(self.nodes[i].value.shape().to_vec(), data)?)
            }
            Op::Chamfer { p, q, pq, qp, squared } => {
                if !touched(&[*p, *q]) {
                    return Ok(None);
                }
                let (pv, qv) = (self.replayed(scratch, *p), self.replayed(scratch, *q));
                let (pn, qn) = (pv.rows(), qv.rows());
                let d2 = |a: &[f64], b: &[f64]| {
                    (0..3).map(|c| (a[c] - b[c]) * (a[c] - b[c])).sum::<f64>()
                };
                let mut total = 0.0;
                for (i_p, &j_q) in pq.iter().enumerate() {
                    let d = d2(pv.row(i_p), qv.row(j_q));
                    total += if *squared { d } else { d.sqrt() } / pn as f64;
                }
                for (j_q, &i_p) in qp.iter().enumerate() {
                    let d = d2(qv.row(j_q), pv.row(i_p));
                    total += if *squared { d } else { d.sqrt() } / qn as f64;
                }
                Some(Tensor::scalar(total))
            }
        };
        Ok(out)
    }

    /// Replay helper for element-wise unary maps.
    fn replay_map(
        &self,
        scratch: &[Option<Tensor>],
        x: Var,
        f: impl Fn(f64) -> f64,
    ) -> Result<Option<Tensor>> {
        if scratch[x.0].is_none() {
            return Ok(None);
        }
        let xv = self.replayed(scratch, x);
        let data: Vec<f64> = xv.data().iter().map(|&v| f(v)).collect();
        Ok(Some(Tensor::new(xv.shape().to_vec(), data)?))
    }

    /// Replay helper for element-wise binary zips.
    fn replay_zip(
        &self,
        scratch: &[Option<Tensor>],
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Option<Tensor>> {
        if scratch[a.0].is_none() && scratch[b.0].is_none() {
            return Ok(None);
        }
        let (av, bv) = (self.replayed(scratch, a), self.replayed(scratch, b));
        let data: Vec<f64> =
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Some(Tensor::new(av.shape().to_vec(), data)?))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Fills gradient buffers for every
    /// node that transitively requires them; other nodes stay `None`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, found shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.grads[i].clone().expect("checked above");
            self.step_backward(i, &g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let buf = self.grads[v.0]
            .get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        for (b, d) in buf.iter_mut().zip(delta) {
            *b += d;
        }
    }

    fn accum_at(&mut self, v: Var, index: usize, delta: f64) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; numel]);
        buf[index] += delta;
    }

    #[allow(clippy::too_many_lines)]
    fn step_backward(&mut self, i: usize, g: &[f64]) {
        // `self.nodes[i].op` is only read here; cloning the small index
        // payloads keeps the borrow checker out of the way.
        match &self.nodes[i].op {
            Op::Leaf | Op::Detach => {}
            &Op::Matmul { a, b } => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).cols();
                if self.needs(a) {
                    let bt = transpose_raw(self.value(b).data(), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.accum(a, &da);
                }
                if self.needs(b) {
                    let at = transpose_raw(self.value(a).data(), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.accum(b, &db);
                }
            }
            &Op::Transpose { x } => {
                let (m, n) = (self.value(x).rows(), self.value(x).cols());
                let dx = transpose_raw(g, n, m);
                self.accum(x, &dx);
            }
            &Op::Add { a, b } => {
                self.accum(a, g);
                self.accum(b, g);
            }
            &Op::Sub { a, b } => {
                self.accum(a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accum(b, &neg);
            }
            &Op::Mul { a, b } => {
                if self.needs(a) {
                    let da: Vec<f64> =
                        g.iter().zip(self.value(b).data()).map(|(&gv, &bv)| gv * bv).collect();
                    self.accum(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> =
                        g.iter().zip(self.value(a).data()).map(|(&gv, &av)| gv * av).collect();
                    self.accum(b, &db);
                }
            }
            &Op::Div { a, b } => {
                if self.needs(a) {
                    let da: Vec<f64> =
                        g.iter().zip(self.value(b).data()).map(|(&gv, &bv)| gv / bv).collect();
                    self.accum(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.value(a).data().iter().zip(self.value(b).data()))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect();
                    self.accum(b, &db);
                }
            }
            &Op::AddRow { a, row } => {
                self.accum(a, g);
                if self.needs(row) {
                    let n = self.value(row).cols();
                    let m = self.value(a).rows();
                    let mut drow = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            drow[j] += g[r * n + j];
                        }
                    }
                    self.accum(row, &drow);
                }
            }
            &Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accum(x, &dx);
            }
            &Op::AddConst { x, .. } => {
                self.accum(x, g);
            }
            &Op::MulScalar { x, s } => {
                let sv = self.value(s).data()[0];
                if self.needs(x) {
                    let dx: Vec<f64> = g.iter().map(|v| v * sv).collect();
                    self.accum(x, &dx);
                }
                if self.needs(s) {
                    let ds: f64 =
                        g.iter().zip(self.value(x).data()).map(|(&gv, &xv)| gv * xv).sum();
                    self.accum_at(s, 0, ds);
                }
            }
            &Op::Relu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accum(x, &dx);
            }
            &Op::Tanh { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[i].value.data())
                    .map(|(&gv, &yv)| gv * (1.0 - yv * yv))
                    .collect();
                self.accum(x, &dx);
            }
            &Op::SoftmaxRows { x } => {
                let (m, n) = (self.nodes[i].value.rows(), self.nodes[i].value.cols());
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let y = self.nodes[i].value.row(r);
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..n {
                        dx[r * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accum(x, &dx);
            }
            &Op::LayerNorm { x, gamma, beta } => {
                let (m, n) = (self.value(x).rows(), self.value(x).cols());
                let mut dx = vec![0.0; m * n];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..m {
                    let row = self.value(x).row(r);
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let gr = &g[r * n..(r + 1) * n];
                    let mut mean_dyg = 0.0;
                    let mut mean_dyg_xhat = 0.0;
                    let mut xhat = vec![0.0; n];
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * inv;
                        let dyg = gr[j] * self.value(gamma).data()[j];
                        mean_dyg += dyg / n as f64;
                        mean_dyg_xhat += dyg * xhat[j] / n as f64;
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    for j in 0..n {
                        let dyg = gr[j] * self.value(gamma).data()[j];
                        dx[r * n + j] = (dyg - mean_dyg - xhat[j] * mean_dyg_xhat) * inv;
                    }
                }
                self.accum(x, &dx);
                self.accum(gamma, &dgamma);
                self.accum(beta, &dbeta);
            }
            Op::MaxOverRows { x, argmax } => {
                let (x, argmax) = (*x, argmax.clone());
                let n = argmax.len();
                for (j, &r) in argmax.iter().enumerate() {
                    self.accum_at(x, r * n + j, g[j]);
                }
            }
            &Op::MeanAll { x } => {
                let numel = self.value(x).numel();
                let dx = vec![g[0] / numel as f64; numel];
                self.accum(x, &dx);
            }
            &Op::SumAll { x } => {
                let numel = self.value(x).numel();
                let dx = vec![g[0]; numel];
                self.accum(x, &dx);
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let numel = self.value(p).numel();
                    let slice: Vec<f64> = g[offset..offset + numel].to_vec();
                    self.accum(p, &slice);
                    offset += numel;
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let m = self.nodes[i].value.rows();
                let n = self.nodes[i].value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(p).cols();
                    let mut dp = vec![0.0; m * w];
                    for r in 0..m {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * n + offset..r * n + offset + w]);
                    }
                    self.accum(p, &dp);
                    offset += w;
                }
            }
            &Op::SliceCols { x, start } => {
                let (m, n) = (self.value(x).rows(), self.value(x).cols());
                let len = self.nodes[i].value.cols();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for j in 0..len {
                        dx[r * n + start + j] = g[r * len + j];
                    }
                }
                self.accum(x, &dx);
            }
            Op::SelectRows { x, indices } => {
                let (x, indices) = (*x, indices.clone());
                let n = self.value(x).cols();
                let mut dx = vec![0.0; self.value(x).numel()];
                for (r, &src) in indices.iter().enumerate() {
                    for j in 0..n {
                        dx[src * n + j] += g[r * n + j];
                    }
                }
                self.accum(x, &dx);
            }
            &Op::RepeatRows { x, times } => {
                let (m, n) = (self.value(x).rows(), self.value(x).cols());
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for t in 0..times {
                        let grow = &g[(r * times + t) * n..(r * times + t + 1) * n];
                        for j in 0..n {
                            dx[r * n + j] += grow[j];
                        }
                    }
                }
                self.accum(x, &dx);
            }
            &Op::TileRows { x, times } => {
                let (m, n) = (self.value(x).rows(), self.value(x).cols());
                let mut dx = vec![0.0; m * n];
                for t in 0..times {
                    for r in 0..m {
                        let grow = &g[(t * m + r) * n..(t * m + r + 1) * n];
                        for j in 0..n {
                            dx[r * n + j] += grow[j];
                        }
                    }
                }
                self.accum(x, &dx);
            }
            &Op::L2NormRows { x } => {
                let (m, n) = (self.value(x).rows(), self.value(x).cols());
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let norm = self.nodes[i].value.data()[r];
                    if norm > 0.0 {
                        let row = self.value(x).row(r);
                        for j in 0..n {
                            dx[r * n + j] = g[r] * row[j] / norm;
                        }
                    }
                }
                self.accum(x, &dx);
            }
            &Op::Reshape { x } => {
                self.accum(x, g);
            }
            &Op::StraightThrough { f } => {
                self.accum(f, g);
            }
            Op::Chamfer { p, q, pq, qp, squared } => {
                let (p, q, pq, qp, squared) = (*p, *q, pq.clone(), qp.clone(), *squared);
                let (pn, qn) = (self.value(p).rows(), self.value(q).rows());
                let mut dp = vec![0.0; pn * 3];
                let mut dq = vec![0.0; qn * 3];
                let gs = g[0];
                for (i_p, &j_q) in pq.iter().enumerate() {
                    chamfer_pair_grad(
                        self.value(p).row(i_p),
                        self.value(q).row(j_q),
                        gs / pn as f64,
                        squared,
                        &mut dp[i_p * 3..i_p * 3 + 3],
                        &mut dq[j_q * 3..j_q * 3 + 3],
                    );
                }
                for (j_q, &i_p) in qp.iter().enumerate() {
                    chamfer_pair_grad(
                        self.value(q).row(j_q),
                        self.value(p).row(i_p),
                        gs / qn as f64,
                        squared,
                        &mut dq[j_q * 3..j_q * 3 + 3],
                        &mut dp[i_p * 3..i_p * 3 + 3],
                    );
                }
                self.accum(p, &dp);
                self.accum(q, &dq);
            }
        }
    }
}

/// Gradient of one nearest-neighbor term `d(a, b)` (or its square) scaled by
/// `w`, accumulated into the slices for `a` and `b`. The subgradient at
/// coincident points is zero.
fn chamfer_pair_grad(
    a: &[f64],
    b: &[f64],
    w: f64,
    squared: bool,
    da: &mut [f64],
    db: &mut [f64],
) {
    let diff = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    if squared {
        for c in 0..3 {
            da[c] += w * 2.0 * diff[c];
            db[c] -= w * 2.0 * diff[c];
        }
    } else {
        let dist = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
        if dist > 0.0 {
            for c in 0..3 {
                da[c] += w * diff[c] / dist;
                db[c] -= w * diff[c] / dist;
            }
        }
    }
}

/// Index and squared distance of the row of `cloud` nearest to `point`.
/// Ties resolve to the lowest index.
fn nearest_row(cloud: &Tensor, point: &[f64]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for r in 0..cloud.rows() {
        let row = cloud.row(r);
        let d2 = (0..3).map(|c| (row[c] - point[c]) * (row[c] - point[c])).sum::<f64>();
        if d2 < best.1 {
            best = (r, d2);
        }
    }
    best
}

fn transpose_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_returns_operand() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(t(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let out = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_by_column_is_dot_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, 2, &[1.0, 2.0]));
        let b = tape.leaf(t(2, 1, &[3.0, 4.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 3, &[0.0; 6]));
        let b = tape.leaf(t(2, 2, &[0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "got: {msg}");
    }

    #[test]
    fn backward_of_x_squared_at_three_is_six() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(t(1, 2, &[1.0, 2.0]));
        let y = tape.relu(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn gradients_accumulate_across_reuses() {
        // loss = x*x + 3x => dloss/dx = 2x + 3 = 7 at x = 2
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let sq = tape.mul(x, x).unwrap();
        let tripled = tape.scale(x, 3.0);
        let sum = tape.add(sq, tripled).unwrap();
        let loss = tape.sum_all(sum);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(2, 3, &[0.1, 2.0, -1.0, 5.0, 5.0, 5.0]));
        let y = tape.softmax_rows(x).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
        }
        // Equal logits give uniform weights.
        assert!((tape.value(y).get(1, 0) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn attention_with_single_key_copies_the_value_row() {
        let mut tape = Tape::new();
        let q = tape.leaf(t(2, 4, &[0.3, -1.0, 0.5, 2.0, 0.0, 0.0, 1.0, -2.0]));
        let k = tape.leaf(t(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        let v = tape.leaf(t(1, 4, &[9.0, 8.0, 7.0, 6.0]));
        let out = tape.scaled_dot_attention(q, k, v).unwrap();
        for r in 0..2 {
            assert_eq!(tape.value(out).row(r), &[9.0, 8.0, 7.0, 6.0]);
        }
    }

    #[test]
    fn attention_with_identical_keys_averages_values() {
        let mut tape = Tape::new();
        let q = tape.leaf(t(1, 2, &[0.4, -0.2]));
        let k = tape.leaf(t(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]));
        let v = tape.leaf(t(3, 2, &[0.0, 3.0, 6.0, 0.0, 0.0, 3.0]));
        let out = tape.scaled_dot_attention(q, k, v).unwrap();
        assert!((tape.value(out).get(0, 0) - 2.0).abs() < 1e-12);
        assert!((tape.value(out).get(0, 1) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn attention_rejects_empty_memory() {
        let mut tape = Tape::new();
        let q = tape.leaf(t(1, 2, &[0.0, 0.0]));
        let k = tape.leaf(t(0, 2, &[]));
        let v = tape.leaf(t(0, 2, &[]));
        let err = tape.scaled_dot_attention(q, k, v).unwrap_err();
        assert!(err.to_string().contains("empty memory"), "got: {err}");
    }

    #[test]
    fn attention_is_row_permutation_consistent() {
        let mut tape = Tape::new();
        let q = tape.leaf(t(2, 3, &[0.1, 0.2, 0.3, -0.5, 0.4, 0.0]));
        let qswap = tape.leaf(t(2, 3, &[-0.5, 0.4, 0.0, 0.1, 0.2, 0.3]));
        let k = tape.leaf(t(4, 3, &[0.0, 1.0, 0.5, 1.0, -1.0, 0.2, 0.3, 0.3, 0.3, -0.2, 0.8, 1.0]));
        let v = tape.leaf(t(4, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 0.0, 0.5, 1.0]));
        let a = tape.scaled_dot_attention(q, k, v).unwrap();
        let b = tape.scaled_dot_attention(qswap, k, v).unwrap();
        assert_eq!(tape.value(a).row(0), tape.value(b).row(1));
        assert_eq!(tape.value(a).row(1), tape.value(b).row(0));
    }

    #[test]
    fn max_over_rows_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.param(t(3, 2, &[1.0, 9.0, 5.0, 2.0, 4.0, 9.0]));
        let m = tape.max_over_rows(x).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0, 9.0]);
        let loss = tape.sum_all(m);
        tape.backward(loss).unwrap();
        // Column 1 ties between rows 0 and 2; the lowest row index wins.
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn straight_through_passes_code_forward_and_grad_to_features() {
        let mut tape = Tape::new();
        let f = tape.param(t(1, 2, &[0.3, 0.4]));
        let code = tape.param(t(1, 2, &[1.0, -1.0]));
        let st = tape.straight_through(f, code).unwrap();
        assert_eq!(tape.value(st).data(), &[1.0, -1.0]);
        let doubled = tape.scale(st, 2.0);
        let loss = tape.sum_all(doubled);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(f).unwrap(), &[2.0, 2.0]);
        assert!(tape.grad(code).is_none(), "no gradient reaches the code through ST");
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap(); // y = x * const(2)
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn chamfer_l1_unit_separation_is_two() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(1, 3, &[0.0, 0.0, 0.0]));
        let q = tape.leaf(t(1, 3, &[1.0, 0.0, 0.0]));
        let d = tape.chamfer_l1(p, q).unwrap();
        assert_eq!(tape.value(d).scalar_value().unwrap(), 2.0);
    }

    #[test]
    fn chamfer_l2_distance_two_gives_eight() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(1, 3, &[0.0, 0.0, 0.0]));
        let q = tape.leaf(t(1, 3, &[2.0, 0.0, 0.0]));
        let d = tape.chamfer_l2(p, q).unwrap();
        assert_eq!(tape.value(d).scalar_value().unwrap(), 8.0);
    }

    #[test]
    fn gradient_accumulation_is_order_independent_to_float_tolerance() {
        let data = [0.3, -0.7, 1.1, 0.2];
        let build = |swap: bool| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.param(t(2, 2, &data));
            let sq = tape.mul(x, x).unwrap();
            let rl = tape.relu(x);
            let sum = if swap { tape.add(rl, sq).unwrap() } else { tape.add(sq, rl).unwrap() };
            let loss = tape.mean_all(sum);
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let (a, b) = (build(false), build(true));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn select_rows_scatter_adds_on_backward() {
        let mut tape = Tape::new();
        let x = tape.param(t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let sel = tape.select_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(sel).row(0), &[5.0, 6.0]);
        let loss = tape.sum_all(sel);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn repeat_and_tile_rows_lay_out_blocks_differently() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(2, 1, &[1.0, 2.0]));
        let rep = tape.repeat_rows(x, 2).unwrap();
        let til = tape.tile_rows(x, 2).unwrap();
        assert_eq!(tape.value(rep).data(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(tape.value(til).data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn layer_norm_output_rows_are_standardized_under_unit_gain() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(2, 4, &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]));
        let gamma = tape.leaf(t(1, 4, &[1.0; 4]));
        let beta = tape.leaf(t(1, 4, &[0.0; 4]));
        let y = tape.layer_norm(x, gamma, beta).unwrap();
        for r in 0..2 {
            let row = tape.value(y).row(r);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "row {r} var {var}");
        }
    }

    /// A graph touching every primitive, with the parameters returned so the
    /// replay tests can override them.
    fn every_op_graph() -> (Tape, Vec<(Var, Tensor)>) {
        let mut rng_vals = [
            0.31, -0.62, 0.47, 0.88, -0.15, 0.74, -0.93, 0.22, 0.56, -0.41, 0.09, -0.77,
        ];
        rng_vals[0] += 0.001; // keep entries away from relu kinks
        let mut tape = Tape::new();
        let a = tape.param(t(3, 4, &rng_vals));
        let b = tape.param(t(4, 2, &[0.2, -0.5, 0.8, 0.1, -0.3, 0.6, 0.4, -0.9]));
        let row = tape.param(t(1, 4, &[0.7, -0.2, 0.5, -0.6]));
        let gamma = tape.param(t(1, 4, &[1.1, 0.9, -0.8, 1.3]));
        let beta = tape.param(t(1, 4, &[0.05, -0.1, 0.2, 0.0]));
        let s = tape.param(Tensor::scalar(0.65));
        let p = tape.param(t(4, 3, &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6, 0.7, -0.8, 0.9, 0.0, 0.25, -0.5]));
        let q = tape.param(t(3, 3, &[0.15, -0.22, 0.31, 0.44, 0.05, -0.66, -0.72, 0.81, 0.09]));
        let f = tape.param(t(3, 2, &[0.3, -0.8, 0.5, 0.9, -0.2, 0.4]));
        let book = tape.param(t(4, 2, &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8]));

        let mm = tape.matmul(a, b).unwrap();
        let _tr = tape.transpose(mm).unwrap();
        let ad = tape.add(a, a).unwrap();
        let _sb = tape.sub(a, ad).unwrap();
        let _ml = tape.mul(a, ad).unwrap();
        let off = tape.add_const(a, 3.0);
        let _dv = tape.div(a, off).unwrap();
        let _ar = tape.add_row(a, row).unwrap();
        let _sc = tape.scale(a, -1.7);
        let _ms = tape.mul_scalar(a, s).unwrap();
        let _rl = tape.relu(a);
        let _th = tape.tanh(a);
        let _sm = tape.softmax_rows(a).unwrap();
        let _ln = tape.layer_norm(a, gamma, beta).unwrap();
        let _mx = tape.max_over_rows(a).unwrap();
        let _mn = tape.mean_all(a);
        let _sa = tape.sum_all(a);
        let _cr = tape.concat_rows(&[a, ad]).unwrap();
        let _cc = tape.concat_cols(&[a, ad]).unwrap();
        let _sl = tape.slice_cols(a, 1, 2).unwrap();
        let _sr = tape.select_rows(a, &[2, 0, 2]).unwrap();
        let _rr = tape.repeat_rows(a, 2).unwrap();
        let _tl = tape.tile_rows(a, 2).unwrap();
        let _l2 = tape.l2_norm_rows(a).unwrap();
        let _rs = tape.reshape(a, vec![2, 6]).unwrap();
        let _dt = tape.detach(a);
        let codes = tape.select_rows(book, &[0, 2, 1]).unwrap();
        let _st = tape.straight_through(f, codes).unwrap();
        let _c1 = tape.chamfer_l1(p, q).unwrap();
        let _c2 = tape.chamfer_l2(p, q).unwrap();
        let _at = tape.scaled_dot_attention(mm, mm, mm).unwrap();

        let params = [a, b, row, gamma, beta, s, p, q, f, book]
            .into_iter()
            .map(|v| (v, tape.value(v).clone()))
            .collect();
        (tape, params)
    }

    #[test]
    fn replay_with_unchanged_params_reproduces_every_node_bitwise() {
        // Overriding each parameter with its own value forces the recompute
        // path through every operation; any drift between a forward builder
        // and its replay (including summation order) shows up as a mismatch.
        let (tape, params) = every_op_graph();
        for i in 0..tape.len() {
            let replayed = tape.replay_value(Var(i), &params).unwrap();
            assert_eq!(
                replayed,
                *tape.value(Var(i)),
                "node {i} replays to a different value"
            );
        }
    }

    #[test]
    fn replay_without_overrides_returns_recorded_values() {
        let (tape, _params) = every_op_graph();
        for i in 0..tape.len() {
            assert_eq!(tape.replay_value(Var(i), &[]).unwrap(), *tape.value(Var(i)));
        }
    }

    #[test]
    fn replay_keeps_detach_frozen_and_shifts_straight_through() {
        let mut tape = Tape::new();
        let x = tape.param(t(1, 2, &[1.0, 2.0]));
        let c = tape.leaf(t(1, 2, &[10.0, 20.0]));
        let d = tape.detach(x);
        let st = tape.straight_through(x, c).unwrap();

        let ovr = [(x, t(1, 2, &[2.0, 3.5]))];
        assert_eq!(
            tape.replay_value(d, &ovr).unwrap().data(),
            &[1.0, 2.0],
            "a detached value must not move with its source"
        );
        assert_eq!(
            tape.replay_value(st, &ovr).unwrap().data(),
            &[11.0, 21.5],
            "a straight-through value must shift with its differentiable input"
        );
    }

    #[test]
    fn replay_rejects_bad_overrides_and_targets() {
        let mut tape = Tape::new();
        let x = tape.param(t(1, 2, &[1.0, 2.0]));
        let y = tape.relu(x);

        let wrong_shape = tape.replay_value(y, &[(x, t(2, 1, &[1.0, 2.0]))]);
        assert!(wrong_shape.is_err(), "shape mismatch must be rejected");
        let non_leaf = tape.replay_value(y, &[(y, t(1, 2, &[0.0, 0.0]))]);
        assert!(non_leaf.is_err(), "operation nodes cannot be overridden");
        let oob = tape.replay_value(Var(99), &[]);
        assert!(oob.is_err(), "out-of-range targets must be rejected");
    }

    #[test]
    fn quantized_composition_gradchecks_via_replay_but_not_via_rerun() {
        use crate::autodiff::check::{finite_diff_check, FdPlan};

        // A miniature quantization block: gathered codes feed the forward
        // value of the straight-through node, plus a commitment-style term
        // against the detached codes.
        let f0 = t(3, 2, &[0.3, -0.8, 0.5, 0.9, -0.2, 0.4]);
        let book0 = t(4, 2, &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8]);
        let indices = [0usize, 2, 1];

        let mut tape = Tape::new();
        let f = tape.param(f0.clone());
        let book = tape.param(book0.clone());
        let codes = tape.select_rows(book, &indices).unwrap();
        let st = tape.straight_through(f, codes).unwrap();
        let sq = tape.mul(st, st).unwrap();
        let dense = tape.sum_all(sq);
        let frozen = tape.detach(codes);
        let diff = tape.sub(f, frozen).unwrap();
        let d2 = tape.mul(diff, diff).unwrap();
        let commit = tape.sum_all(d2);
        let total = tape.add(dense, commit).unwrap();
        tape.backward(total).unwrap();
        let analytic = [tape.grad_tensor(f), tape.grad_tensor(book)];
        let params = [f0.clone(), book0.clone()];

        // Replaying the recorded graph differentiates the same surrogate the
        // backward pass reports, so the comparison is tight.
        let replay_obj = |ps: &[Tensor]| {
            tape.replay_value(total, &[(f, ps[0].clone()), (book, ps[1].clone())])?
                .scalar_value()
        };
        let good = finite_diff_check(replay_obj, &params, &analytic, 1e-5, &FdPlan::All).unwrap();
        assert!(
            good.passes(1e-6),
            "replay-based check must pass, max rel err {}",
            good.max_rel_err
        );
        assert_eq!(good.checked, params.iter().map(|p| p.numel()).sum::<usize>());

        // Rebuilding the forward pass measures the true dependence through
        // the gathered code values, which the estimator ignores: that
        // comparison must fail even though the backward pass is correct.
        let rerun_obj = |ps: &[Tensor]| {
            let mut fresh = Tape::new();
            let f2 = fresh.param(ps[0].clone());
            let book2 = fresh.param(ps[1].clone());
            let codes2 = fresh.select_rows(book2, &indices)?;
            let st2 = fresh.straight_through(f2, codes2)?;
            let sq2 = fresh.mul(st2, st2)?;
            let dense2 = fresh.sum_all(sq2);
            let frozen2 = fresh.detach(codes2);
            let diff2 = fresh.sub(f2, frozen2)?;
            let dd2 = fresh.mul(diff2, diff2)?;
            let commit2 = fresh.sum_all(dd2);
            let total2 = fresh.add(dense2, commit2)?;
            fresh.value(total2).scalar_value()
        };
        let naive = finite_diff_check(rerun_obj, &params, &analytic, 1e-5, &FdPlan::All).unwrap();
        assert!(
            !naive.passes(1e-2),
            "differencing the true function must expose the estimator's bias"
        );
    }
}
