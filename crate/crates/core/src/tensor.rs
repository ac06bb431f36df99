//! Dense row-major `f64` tensors and the graph-free kernels the autodiff
//! engine records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {expected} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `[rows.len(), width]` matrix. All rows must share one width.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * width);
        for row in rows {
            if row.len() != width {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![width],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), width], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the listed rows of a matrix (or higher-rank tensor, by leading axis).
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.rows();
        let width = if self.shape.is_empty() { 1 } else { self.len() / n.max(1) };
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    what: "row",
                    index: i,
                    limit: n,
                });
            }
            data.extend_from_slice(&self.data[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }

    /// Stacks matrices with the same trailing shape along the leading axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Tensor::new(shape, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Elementwise `f(self, other)`, where `other` may also be a row vector
    /// broadcast over the rows of a matrix (the bias case).
    fn broadcast_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == other.shape {
            return self.zip_with(other, op, f);
        }
        if is_row_broadcast(&self.shape, &other.shape) {
            let c = self.cols();
            let data = self
                .data
                .chunks(c)
                .flat_map(|row| row.iter().zip(&other.data).map(|(&a, &b)| f(a, b)))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        Err(Error::ShapeMismatch {
            op,
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.broadcast_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.broadcast_with(other, "subtract", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "multiply", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    pub fn shift(&self, c: f64) -> Tensor {
        self.map(|v| v + c)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            MatRef::row_major(&self.data, k),
            MatRef::row_major(&other.data, n),
            &mut out.data,
        );
        Ok(out)
    }

    pub fn sum_all(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum())
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 || self.shape[1] == 0 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("{op} expects a non-empty [rows, cols] matrix"),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Sums each row of a matrix: `[B, n] -> [B]`.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (r, _) = self.require_matrix("reduce-sum")?;
        Ok(Tensor {
            shape: vec![r],
            data: self.data.chunks(self.cols()).map(|row| row.iter().sum()).collect(),
        })
    }

    /// Index of the first maximal element of each row.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        self.require_matrix("reduce-max")?;
        Ok(self.data.chunks(self.cols()).map(first_argmax).collect())
    }

    /// Row maxima: `[B, n] -> [B]`.
    pub fn max_rows(&self) -> Result<Tensor> {
        let idx = self.argmax_rows()?;
        let c = self.cols();
        Ok(Tensor {
            shape: vec![idx.len()],
            data: idx.iter().enumerate().map(|(r, &i)| self.data[r * c + i]).collect(),
        })
    }

    /// Numerically stable `log Σ exp` of each row: `[B, n] -> [B]`.
    pub fn logsumexp_rows(&self) -> Result<Tensor> {
        let (r, _) = self.require_matrix("log-sum-exp")?;
        Ok(Tensor {
            shape: vec![r],
            data: self.data.chunks(self.cols()).map(logsumexp).collect(),
        })
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        self.require_matrix("softmax")?;
        let data = self
            .data
            .chunks(self.cols())
            .flat_map(|row| {
                let lse = logsumexp(row);
                row.iter().map(move |&v| (v - lse).exp())
            })
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Picks `k` components from every row: `out[b, j] = self[b, indices[b * k + j]]`.
    pub fn gather(&self, indices: &[usize], k: usize) -> Result<Tensor> {
        let (rows, cols) = self.require_matrix("select-component")?;
        if indices.len() != rows * k {
            return Err(Error::ShapeMismatch {
                op: "select-component",
                lhs: self.shape.clone(),
                rhs: vec![indices.len()],
            });
        }
        let mut data = Vec::with_capacity(rows * k);
        for (pos, &c) in indices.iter().enumerate() {
            if c >= cols {
                return Err(Error::IndexOutOfRange {
                    what: "component",
                    index: c,
                    limit: cols,
                });
            }
            data.push(self.data[(pos / k) * cols + c]);
        }
        Ok(Tensor {
            shape: vec![rows, k],
            data,
        })
    }
}

pub(crate) fn is_row_broadcast(lhs: &[usize], rhs: &[usize]) -> bool {
    lhs.len() == 2 && (rhs == [lhs[1]] || rhs == [1, lhs[1]])
}

pub(crate) fn first_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Strided read-only view used to express transposes without copying.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major `[rows, cols]` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

/// `out += a · b` for an `[m, k]` by `[k, n]` product into row-major `out`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && out.len() >= m * n);
    // SAFETY: the strides describe in-bounds [m, k], [k, n] and [m, n] views of
    // slices whose lengths were checked above; `out` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_is_noop() {
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_matches_naive() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn relu_definition() {
        assert_eq!(Tensor::vector(vec![-1.0, 0.0, 2.0]).relu().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn logsumexp_of_zeros_is_ln2() {
        let t = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!((t.logsumexp_rows().unwrap().item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_survives_large_values() {
        let t = Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let v = t.logsumexp_rows().unwrap().item();
        assert!(v.is_finite() && (v - 1000.0).abs() < 1e-12);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        let err = a.mul(&Tensor::zeros(&[3])).unwrap_err();
        assert!(err.to_string().contains("multiply"), "{err}");
    }

    #[test]
    fn bias_broadcast_add() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::vector(vec![10.0, 20.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn reduce_max_prefers_first_on_ties() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 5.0, 5.0, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(t.argmax_rows().unwrap(), vec![1, 0]);
        assert_eq!(t.max_rows().unwrap().data(), &[5.0, 2.0]);
    }

    #[test]
    fn gather_picks_per_row() {
        let t = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let g = t.gather(&[2, 0, 1, 1], 2).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.data(), &[2.0, 0.0, 4.0, 4.0]);
        assert!(t.gather(&[3, 0], 1).is_err());
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }
}
