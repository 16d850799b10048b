//! Dense row-major tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array. Gradient state lives on the [`Tape`](crate::autodiff::Tape),
/// so a `Tensor` is plain data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    /// Leading extent, treating vectors as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Trailing extent.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Row-wise numerically stable softmax on a plain tensor (no tape).
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.all_finite() {
        return Err(Error::NonFinite);
    }
    let c = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Row-wise L2 normalization on a plain tensor (no tape).
pub fn l2_normalize_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.all_finite() {
        return Err(Error::NonFinite);
    }
    let c = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let norm = row.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
        if norm == T::zero() {
            return Err(Error::DegenerateEmbedding);
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// `log Σ exp(row)` with max subtraction. Entries of `-inf` contribute zero.
pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if m == T::neg_infinity() {
        return m;
    }
    let s = row.iter().fold(T::zero(), |s, &v| s + (v - m).exp());
    m + s.ln()
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// `C[m×n] = A[m×k] · B[k×n]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let bp = &b[p * n..(p + 1) * n];
            let rows = c0.iter_mut().zip(c1.iter_mut()).zip(c2.iter_mut().zip(c3.iter_mut()));
            for (((x0, x1), (x2, x3)), &bv) in rows.zip(bp) {
                *x0 += a0 * bv;
                *x1 += a1 * bv;
                *x2 += a2 * bv;
                *x3 += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let bp = &b[p * n..(p + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(bp) {
                *cv += aip * bv;
            }
        }
    }
    c
}

fn transposed<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for (cix, &v) in x[r * cols..(r + 1) * cols].iter().enumerate() {
            t[cix * rows + r] = v;
        }
    }
    t
}

/// `C[m×n] = A[m×k] · B[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    gemm_nn(a, &transposed(b, n, k), m, k, n)
}

/// `C[m×n] = A[k×m]ᵀ · B[k×n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    gemm_nn(&transposed(a, k, m), b, m, k, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let x = Tensor::<f64>::from_rows(&[vec![0.0, 0.0], vec![0.0, 3f64.ln()]]).unwrap();
        let s = softmax_rows(&x).unwrap();
        assert!((s.at(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.at(1, 0) - 0.25).abs() < 1e-12);
        assert!((s.at(1, 1) - 0.75).abs() < 1e-12);

        let wide = Tensor::<f64>::full(&[1, 1000], 3.5);
        let s = softmax_rows(&wide).unwrap();
        assert!(s.data().iter().all(|&p| (p - 1e-3).abs() < 1e-12));
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::<f64>::from_rows(&[vec![0.0, f64::NAN]]).unwrap();
        assert!(matches!(softmax_rows(&x), Err(Error::NonFinite)));
        let x = Tensor::<f64>::from_rows(&[vec![f64::INFINITY, 1.0]]).unwrap();
        assert!(matches!(softmax_rows(&x), Err(Error::NonFinite)));
    }

    #[test]
    fn softmax_works_in_single_precision() {
        let x = Tensor::<f32>::from_rows(&[vec![0.0, 0.0, 0.0, 0.0]]).unwrap();
        let s = softmax_rows(&x).unwrap();
        assert!(s.data().iter().all(|&p| (p - 0.25).abs() < 1e-7));
    }

    #[test]
    fn l2_normalize_examples() {
        let x = Tensor::<f64>::from_rows(&[vec![3.0, 4.0], vec![1.0, 0.0]]).unwrap();
        let n = l2_normalize_rows(&x).unwrap();
        assert!((n.at(0, 0) - 0.6).abs() < 1e-15 && (n.at(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(n.row(1), &[1.0, 0.0]);
        let z = Tensor::<f64>::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(l2_normalize_rows(&z), Err(Error::DegenerateEmbedding)));
    }

    #[test]
    fn shape_invariant_enforced() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_err());
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
    }

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let c = gemm_nn(&a, &b, 2, 3, 4);
        // b transposed: 4x3
        let mut bt = vec![0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                bt[j * 3 + p] = b[p * 4 + j];
            }
        }
        assert_eq!(c, gemm_nt(&a, &bt, 2, 3, 4));
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for p in 0..3 {
                at[p * 2 + i] = a[i * 3 + p];
            }
        }
        assert_eq!(c, gemm_tn(&at, &b, 3, 2, 4));
    }
}
