//! Dense row-major matrices and the handful of kernels the decoder head needs.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix with an explicit `(rows, cols)` shape.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", &self.data[r * self.cols..(r + 1) * self.cols])?;
        }
        write!(f, "]")
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Argument(format!(
                "matrix data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally long rows. An empty slice yields a `0x0` matrix.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Argument(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(values: Vec<T>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// First element of a `1x1` matrix (or of any matrix, for convenience).
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data viewed with a different shape.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return Err(Error::dim("reshape", self.shape(), (rows, cols)));
        }
        Ok(Self {
            rows,
            cols,
            data: self.data.clone(),
        })
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::dim("add_row", self.shape(), bias.shape()));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (v, &b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *v = *v + b;
            }
        }
        Ok(out)
    }

    /// Standard matrix product `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::dim("matmul", self.shape(), other.shape()));
        }
        Ok(product(self, other))
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::dim("matmul_nt", self.shape(), other.shape()));
        }
        Ok(product(self, &other.transpose()))
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::dim("matmul_tn", self.shape(), other.shape()));
        }
        Ok(product(&self.transpose(), other))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Column sums as a `1 x cols` row.
    pub fn sum_rows(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, &v) in out.data.iter_mut().zip(self.row(r)) {
                *o = *o + v;
            }
        }
        out
    }

    /// Column means as a `1 x cols` row.
    pub fn mean_rows(&self) -> Self {
        let n = T::of_usize(self.rows.max(1));
        self.sum_rows().map(|v| v / n)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Self {
        let mut out = self.clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        out
    }

    /// Scales each row to unit Euclidean norm; rows with norm below `eps`
    /// are returned unchanged.
    pub fn l2_normalize_rows(&self, eps: T) -> Self {
        let mut out = self.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let norm = dot(row, row).sqrt();
            if norm >= eps {
                for v in row.iter_mut() {
                    *v = *v / norm;
                }
            }
        }
        out
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.cols {
            return Err(Error::dim("slice_cols", self.shape(), (start, len)));
        }
        Ok(Self::from_fn(self.rows, len, |r, c| self.get(r, start + c)))
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Argument(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::dim("concat_cols", (rows, 0), bad.shape()));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if let Some(bad) = parts.iter().find(|p| p.cols != cols) {
            return Err(Error::dim("concat_rows", (0, cols), bad.shape()));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

const TILE_R: usize = 8;
const TILE_C: usize = 8;

/// `a · b` with shapes already checked. Every output element is accumulated
/// over the inner index in increasing order, whatever tile it falls in.
fn product<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    let (ad, bd) = (&a.data, &b.data);
    let full_r = m - m % TILE_R;
    let full_c = n - n % TILE_C;
    // Column panels of b: panel[p] holds b[p][j..j + TILE_C].
    let panels: Vec<Vec<[T; TILE_C]>> = (0..full_c)
        .step_by(TILE_C)
        .map(|j| {
            bd.chunks_exact(n.max(1))
                .map(|row| std::array::from_fn(|c| row[j + c]))
                .collect()
        })
        .collect();
    let mut a_pack: Vec<[T; TILE_R]> = vec![[T::zero(); TILE_R]; k];
    for i in (0..full_r).step_by(TILE_R) {
        for (p, slot) in a_pack.iter_mut().enumerate() {
            *slot = std::array::from_fn(|r| ad[(i + r) * k + p]);
        }
        for (jb, panel) in panels.iter().enumerate() {
            let mut acc = [[T::zero(); TILE_C]; TILE_R];
            for (av, bv) in a_pack.iter().zip(panel) {
                for r in 0..TILE_R {
                    for c in 0..TILE_C {
                        acc[r][c] = acc[r][c] + av[r] * bv[c];
                    }
                }
            }
            let j = jb * TILE_C;
            for (r, row) in acc.iter().enumerate() {
                out.data[(i + r) * n + j..(i + r) * n + j + TILE_C].copy_from_slice(row);
            }
        }
        for j in full_c..n {
            for r in 0..TILE_R {
                out.data[(i + r) * n + j] = column_dot(ad, bd, i + r, j, k, n);
            }
        }
    }
    for i in full_r..m {
        for j in 0..n {
            out.data[i * n + j] = column_dot(ad, bd, i, j, k, n);
        }
    }
    out
}

fn column_dot<T: Scalar>(a: &[T], b: &[T], i: usize, j: usize, k: usize, n: usize) -> T {
    let mut acc = T::zero();
    for p in 0..k {
        acc = acc + a[i * k + p] * b[p * n + j];
    }
    acc
}

/// Inner product over the common prefix, accumulated in eight lanes.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            lanes[i] = lanes[i] + x[i] * y[i];
        }
    }
    let tail = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// `ln Σ exp(row)` with max subtraction.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type M = Matrix<f64>;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> M {
        M::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_times_matrix() {
        let m = M::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(M::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn small_product() {
        let a = M::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = M::from_rows(&[[0.0], [1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let got = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut want = 0.0;
                for k in 0..4 {
                    want += a.get(i, k) * b.get(k, j);
                }
                assert!((got.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 3, 5);
        let b = random(&mut rng, 4, 5);
        let c = random(&mut rng, 3, 2);
        let nt = a.matmul_nt(&b).unwrap();
        assert!(nt.max_abs_diff(&a.matmul(&b.transpose()).unwrap()).unwrap() < 1e-14);
        let tn = a.matmul_tn(&c).unwrap();
        assert!(tn.max_abs_diff(&a.transpose().matmul(&c).unwrap()).unwrap() < 1e-14);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = M::zeros(2, 3).matmul(&M::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(err, Error::Dimension { lhs: (2, 3), rhs: (2, 3), .. }));
    }

    #[test]
    fn softmax_examples() {
        let m = M::from_rows(&[
            [0.0, 0.0],
            [1000.0, 1000.0],
            [2.0f64.ln(), 0.0],
        ])
        .unwrap();
        let s = m.softmax_rows();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert_eq!(s.row(1), &[0.5, 0.5]);
        assert!((s.get(2, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get(2, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_examples() {
        let m = M::from_rows(&[[3.0, 4.0], [0.6, 0.8], [0.0, 0.0]]).unwrap();
        let n = m.l2_normalize_rows(1e-12);
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15 && (n.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(n.row(1), m.row(1));
        assert_eq!(n.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn new_checks_length() {
        assert!(M::new(2, 2, vec![1.0; 3]).is_err());
        assert!(M::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, 3, 6);
        let left = a.slice_cols(0, 2).unwrap();
        let right = a.slice_cols(2, 4).unwrap();
        assert_eq!(M::concat_cols(&[&left, &right]).unwrap(), a);
        let top = a.select_rows(&[0]).unwrap();
        let rest = a.select_rows(&[1, 2]).unwrap();
        assert_eq!(M::concat_rows(&[&top, &rest]).unwrap(), a);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = M> {
            proptest::collection::vec(-50.0f64..50.0, rows * cols)
                .prop_map(move |d| M::new(rows, cols, d).unwrap())
        }

        proptest! {
            #[test]
            fn softmax_rows_are_distributions(m in (1usize..6, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c))) {
                let s = m.softmax_rows();
                for r in 0..s.rows() {
                    let total: f64 = s.row(r).iter().sum();
                    prop_assert!((total - 1.0).abs() <= 1e-9);
                    prop_assert!(s.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
                }
            }

            #[test]
            fn softmax_shift_invariant(m in matrix(3, 5), shift in -100.0f64..100.0) {
                let shifted = m.map(|v| v + shift).softmax_rows();
                prop_assert!(shifted.max_abs_diff(&m.softmax_rows()).unwrap() <= 1e-9);
            }

            #[test]
            fn products_match_naive_loops(
                (m, k, n) in (1usize..20, 1usize..12, 1usize..20),
                seed in any::<u64>(),
            ) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let mut draw = |r, c| Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
                let (a, b, bt, at) = (draw(m, k), draw(k, n), draw(n, k), draw(k, m));
                let naive = |x: &Matrix<f64>, y: &Matrix<f64>| {
                    Matrix::from_fn(x.rows(), y.cols(), |i, j| {
                        let mut acc = 0.0;
                        for p in 0..x.cols() {
                            acc += x.get(i, p) * y.get(p, j);
                        }
                        acc
                    })
                };
                prop_assert_eq!(a.matmul(&b).unwrap(), naive(&a, &b));
                prop_assert_eq!(a.matmul_nt(&bt).unwrap(), naive(&a, &bt.transpose()));
                prop_assert_eq!(at.matmul_tn(&b).unwrap(), naive(&at.transpose(), &b));
            }

            #[test]
            fn matmul_associative(a in matrix(3, 4), b in matrix(4, 2), c in matrix(2, 5)) {
                let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
                let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
                let scale = left.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
                prop_assert!(left.max_abs_diff(&right).unwrap() / scale <= 1e-9);
            }

            #[test]
            fn normalized_rows_have_unit_norm(m in matrix(4, 3)) {
                let n = m.l2_normalize_rows(1e-12);
                for r in 0..4 {
                    let norm = dot(m.row(r), m.row(r)).sqrt();
                    if norm >= 1e-12 {
                        prop_assert!((dot(n.row(r), n.row(r)).sqrt() - 1.0).abs() <= 1e-9);
                    }
                }
            }
        }
    }
}
