//! Tape-based reverse-mode differentiation over a fixed matrix op vocabulary.
//!
//! Forward computation records one node per op. `backward` walks the nodes in
//! exact reverse recording order, accumulating vector-Jacobian products, and
//! returns a gradient for every registered parameter (zeros for parameters the
//! output does not depend on).

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::linalg::{dot, log_sum_exp, softmax_in_place, Matrix};
use crate::scalar::Scalar;

/// Ordered name → tensor map used for parameters and their gradients.
pub type NamedTensors<T> = BTreeMap<String, Matrix<T>>;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    SoftmaxRows(usize),
    L2NormalizeRows(usize, T),
    LayerNormRows {
        x: usize,
        gain: usize,
        offset: usize,
        eps: T,
    },
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    BceWithLogits { logits: usize, targets: Matrix<T> },
    DiagonalCrossEntropy(usize),
    RowDot(usize, usize),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass.
///
/// A tape is single-use and single-threaded; concurrent training builds one
/// tape per worker.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: Vec<(String, usize)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Lineage(format!(
                "variable {} does not belong to tape {}",
                v.index, self.id
            )));
        }
        Ok(v.index)
    }

    fn grad_flag(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a value that is not differentiated.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Matrix<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), v.index));
        v
    }

    /// Registers every tensor of `params` and returns the vars under the same names.
    pub fn params(&mut self, params: &NamedTensors<T>) -> BTreeMap<String, Var> {
        params
            .iter()
            .map(|(name, m)| (name.clone(), self.param(name.clone(), m.clone())))
            .collect()
    }

    pub fn value(&self, v: Var) -> Result<&Matrix<T>> {
        let i = self.idx(v)?;
        Ok(&self.nodes[i].value)
    }

    fn unary(&mut self, a: Var, f: impl FnOnce(&Matrix<T>) -> Result<Matrix<T>>, op: impl FnOnce(usize) -> Op<T>) -> Result<Var> {
        let ai = self.idx(a)?;
        let value = f(&self.nodes[ai].value)?;
        let rg = self.grad_flag(&[ai]);
        Ok(self.push(value, op(ai), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl FnOnce(&Matrix<T>, &Matrix<T>) -> Result<Matrix<T>>,
        op: impl FnOnce(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let value = f(&self.nodes[ai].value, &self.nodes[bi].value)?;
        let rg = self.grad_flag(&[ai, bi]);
        Ok(self.push(value, op(ai, bi), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.matmul(y), Op::MatMul)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.matmul_nt(y), Op::MatMulNt)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(x.transpose()), Op::Transpose)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.add(y), Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.sub(y), Op::Sub)
    }

    /// Adds a `1 x cols` bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.binary(a, bias, |x, y| x.add_row(y), Op::AddRow)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.hadamard(y), Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary(a, |x| Ok(x.scale(s)), |i| Op::Scale(i, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(x.map(|v| v.max(T::zero()))), Op::Relu)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(x.softmax_rows()), Op::SoftmaxRows)
    }

    pub fn l2_normalize_rows(&mut self, a: Var, eps: T) -> Result<Var> {
        self.unary(a, |x| Ok(x.l2_normalize_rows(eps)), |i| Op::L2NormalizeRows(i, eps))
    }

    /// Per-row layer normalization with a `1 x cols` gain and offset.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, offset: Var, eps: T) -> Result<Var> {
        let (xi, gi, oi) = (self.idx(x)?, self.idx(gain)?, self.idx(offset)?);
        let xv = &self.nodes[xi].value;
        let (g, o) = (&self.nodes[gi].value, &self.nodes[oi].value);
        if g.shape() != (1, xv.cols()) || o.shape() != (1, xv.cols()) {
            return Err(Error::dim("layer_norm_rows", xv.shape(), g.shape()));
        }
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let (normed, _) = standardize(xv.row(r), eps);
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = g.get(0, c) * normed[c] + o.get(0, c);
            }
        }
        let rg = self.grad_flag(&[xi, gi, oi]);
        Ok(self.push(
            out,
            Op::LayerNormRows {
                x: xi,
                gain: gi,
                offset: oi,
                eps,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(Matrix::scalar(x.sum())), Op::Sum)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |x| {
                if x.is_empty() {
                    return Err(Error::Argument("mean of an empty matrix".into()));
                }
                Ok(Matrix::scalar(x.sum() / T::of_usize(x.len())))
            },
            Op::Mean,
        )
    }

    /// Column means as a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(x.mean_rows()), Op::MeanRows)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.unary(a, |x| x.slice_cols(start, len), |x| Op::SliceCols { x, start })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.unary(
            a,
            |x| {
                if start + len > x.rows() {
                    return Err(Error::dim("slice_rows", x.shape(), (start + len, x.cols())));
                }
                x.select_rows(&(start..start + len).collect::<Vec<_>>())
            },
            |x| Op::SliceRows { x, start },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix<T>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let value = Matrix::concat_cols(&refs)?;
        let rg = self.grad_flag(&idx);
        Ok(self.push(value, Op::ConcatCols(idx), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix<T>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let value = Matrix::concat_rows(&refs)?;
        let rg = self.grad_flag(&idx);
        Ok(self.push(value, Op::ConcatRows(idx), rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        self.unary(a, |x| x.reshape(rows, cols), Op::Reshape)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 `targets`,
    /// evaluated in the stable logit form `softplus(x) - y·x`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Matrix<T>) -> Result<Var> {
        let li = self.idx(logits)?;
        let x = &self.nodes[li].value;
        if x.shape() != targets.shape() {
            return Err(Error::dim("bce_with_logits", x.shape(), targets.shape()));
        }
        if x.is_empty() {
            return Err(Error::Argument("classification loss over zero entries".into()));
        }
        let total: T = x
            .as_slice()
            .iter()
            .zip(targets.as_slice())
            .map(|(&x, &y)| softplus(x) - y * x)
            .sum();
        let value = Matrix::scalar(total / T::of_usize(x.len()));
        let rg = self.grad_flag(&[li]);
        Ok(self.push(value, Op::BceWithLogits { logits: li, targets }, rg))
    }

    /// Mean over rows of `logsumexp(row) - row[i]` for a square matrix, i.e.
    /// softmax cross-entropy with the diagonal as targets.
    pub fn diagonal_cross_entropy(&mut self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |s| {
                if s.rows() != s.cols() || s.rows() == 0 {
                    return Err(Error::dim("diagonal_cross_entropy", s.shape(), s.shape()));
                }
                let total: T = (0..s.rows()).map(|i| log_sum_exp(s.row(i)) - s.get(i, i)).sum();
                Ok(Matrix::scalar(total / T::of_usize(s.rows())))
            },
            Op::DiagonalCrossEntropy,
        )
    }

    /// Row-wise dot product of two equally shaped matrices, as a `rows x 1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            |x, y| {
                if x.shape() != y.shape() {
                    return Err(Error::dim("row_dot", x.shape(), y.shape()));
                }
                Matrix::new(x.rows(), 1, (0..x.rows()).map(|r| dot(x.row(r), y.row(r))).collect())
            },
            Op::RowDot,
        )
    }

    /// Reverse pass from a `1x1` output. Returns one gradient per registered
    /// parameter, keyed by name, each shaped like its parameter.
    pub fn backward(&self, output: Var) -> Result<NamedTensors<T>> {
        let out = self.idx(output)?;
        if self.nodes[out].value.shape() != (1, 1) {
            return Err(Error::Argument(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[out].value.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; out + 1];
        grads[out] = Some(Matrix::scalar(T::one()));

        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }

        let mut result = NamedTensors::new();
        for (name, i) in &self.params {
            let shape = self.nodes[*i].value.shape();
            let g = grads
                .get(*i)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
            result.insert(name.clone(), g);
        }
        Ok(result)
    }

    fn propagate(&self, i: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let mut acc = |j: usize, d: Matrix<T>| -> Result<()> {
            if !self.nodes[j].requires_grad {
                return Ok(());
            }
            match &mut grads[j] {
                Some(existing) => existing.add_assign(&d),
                slot => {
                    *slot = Some(d);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[*a].requires_grad {
                    acc(*a, g.matmul_nt(val(*b))?)?;
                }
                if self.nodes[*b].requires_grad {
                    acc(*b, val(*a).matmul_tn(g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if self.nodes[*a].requires_grad {
                    acc(*a, g.matmul(val(*b))?)?;
                }
                if self.nodes[*b].requires_grad {
                    acc(*b, g.matmul_tn(val(*a))?)?;
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-T::one()))?;
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.sum_rows())?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.hadamard(val(*b))?)?;
                acc(*b, g.hadamard(val(*a))?)?;
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s))?,
            Op::Relu(a) => {
                let d = g.zip_map(val(*a), "relu", |g, x| if x > T::zero() { g } else { T::zero() })?;
                acc(*a, d)?;
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner = dot(g.row(r), y.row(r));
                    for (c, v) in d.row_mut(r).iter_mut().enumerate() {
                        *v = y.get(r, c) * (g.get(r, c) - inner);
                    }
                }
                acc(*a, d)?;
            }
            Op::L2NormalizeRows(a, eps) => {
                let x = val(*a);
                let y = &node.value;
                let mut d = g.clone();
                for r in 0..x.rows() {
                    let norm = dot(x.row(r), x.row(r)).sqrt();
                    if norm < *eps {
                        continue;
                    }
                    let inner = dot(g.row(r), y.row(r));
                    for (c, v) in d.row_mut(r).iter_mut().enumerate() {
                        *v = (g.get(r, c) - y.get(r, c) * inner) / norm;
                    }
                }
                acc(*a, d)?;
            }
            Op::LayerNormRows { x, gain, offset, eps } => {
                let xv = val(*x);
                let gv = val(*gain);
                let n = T::of_usize(xv.cols());
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                let mut dgain = Matrix::zeros(1, xv.cols());
                let mut doffset = Matrix::zeros(1, xv.cols());
                for r in 0..xv.rows() {
                    let (normed, inv_std) = standardize(xv.row(r), *eps);
                    let gr = g.row(r);
                    let dn: Vec<T> = gr.iter().zip(gv.row(0)).map(|(&a, &b)| a * b).collect();
                    let sum_dn: T = dn.iter().copied().sum();
                    let sum_dn_n = dot(&dn, &normed);
                    for c in 0..xv.cols() {
                        dgain.set(0, c, dgain.get(0, c) + gr[c] * normed[c]);
                        doffset.set(0, c, doffset.get(0, c) + gr[c]);
                        dx.set(r, c, inv_std / n * (n * dn[c] - sum_dn - normed[c] * sum_dn_n));
                    }
                }
                acc(*x, dx)?;
                acc(*gain, dgain)?;
                acc(*offset, doffset)?;
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item()))?;
            }
            Op::Mean(a) => {
                let x = val(*a);
                let (r, c) = x.shape();
                acc(*a, Matrix::filled(r, c, g.item() / T::of_usize(x.len())))?;
            }
            Op::MeanRows(a) => {
                let x = val(*a);
                let n = T::of_usize(x.rows());
                acc(*a, Matrix::from_fn(x.rows(), x.cols(), |_, c| g.get(0, c) / n))?;
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, d)?;
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let w = xv.cols();
                let mut d = Matrix::zeros(xv.rows(), w);
                d.as_mut_slice()[start * w..(start + g.rows()) * w].copy_from_slice(g.as_slice());
                acc(*x, d)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, g.slice_cols(start, w)?)?;
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = val(p).rows();
                    let rows: Vec<usize> = (start..start + h).collect();
                    acc(p, g.select_rows(&rows)?)?;
                    start += h;
                }
            }
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, g.reshape(r, c)?)?;
            }
            Op::BceWithLogits { logits, targets } => {
                let x = val(*logits);
                let scale = g.item() / T::of_usize(x.len());
                let d = x.zip_map(targets, "bce_with_logits", |x, y| (sigmoid(x) - y) * scale)?;
                acc(*logits, d)?;
            }
            Op::DiagonalCrossEntropy(a) => {
                let s = val(*a);
                let scale = g.item() / T::of_usize(s.rows());
                let mut d = s.clone();
                for r in 0..d.rows() {
                    let row = d.row_mut(r);
                    softmax_in_place(row);
                    row[r] = row[r] - T::one();
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                acc(*a, d)?;
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let da = Matrix::from_fn(av.rows(), av.cols(), |r, c| g.get(r, 0) * bv.get(r, c));
                let db = Matrix::from_fn(av.rows(), av.cols(), |r, c| g.get(r, 0) * av.get(r, c));
                acc(*a, da)?;
                acc(*b, db)?;
            }
        }
        Ok(())
    }
}

/// `(x - mean) / sqrt(var + eps)` and the inverse standard deviation.
fn standardize<T: Scalar>(row: &[T], eps: T) -> (Vec<T>, T) {
    let n = T::of_usize(row.len());
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    (row.iter().map(|&v| (v - mean) * inv_std).collect(), inv_std)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
