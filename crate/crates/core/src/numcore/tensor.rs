use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage precision. Arithmetic always runs in 64-bit; `F32` rounds every
/// stored value to the nearest single-precision number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::invalid(format!(
                "unknown precision `{other}` (expected f32 or f64)"
            ))),
        }
    }
}

/// Dense row-major tensor of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor shape must have positive dimensions, got {shape:?}"
            )));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor shape must have positive dimensions, got {shape:?}"
        );
        let count = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; count],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let count: usize = shape.iter().product();
        let data = (0..count).map(&mut f).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::invalid(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    /// Rows `start..end` of a matrix as a new matrix.
    pub fn rows(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start >= end || end > r {
            return Err(Error::invalid(format!(
                "row range {start}..{end} out of bounds for {r} rows"
            )));
        }
        Self::new(vec![end - start, c], self.data[start * c..end * c].to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Dense matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Square root of the sum of squares, accumulated left to right.
    pub fn frobenius_norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v * v)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    /// Euclidean norm of each row of a matrix.
    pub fn row_norms(&self) -> Result<Vec<f64>> {
        let (r, _) = self.dims2()?;
        Ok((0..r).map(|i| l2(self.row(i))).collect())
    }

    /// Round every value to its nearest `f32` when `precision` is `F32`.
    pub fn with_precision(&self, precision: Precision) -> Self {
        match precision {
            Precision::F64 => self.clone(),
            Precision::F32 => self.map(|v| v as f32 as f64),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub(crate) fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Denominator guard for cosine similarity.
pub const COSINE_GUARD: f64 = 1e-12;

/// Row-wise softmax of `scale * a` with per-row max subtraction.
pub fn softmax_rows(a: &Tensor, scale: f64) -> Result<Tensor> {
    if !(scale > 0.0) {
        return Err(Error::invalid(format!("softmax scale must be positive, got {scale}")));
    }
    let (r, c) = a.dims2()?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = a.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let dst = &mut out[i * c..(i + 1) * c];
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (scale * (v - max)).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    Tensor::new(vec![r, c], out)
}

/// Per-row cosine similarity with guarded denominators. Output has shape `[rows]`.
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("cosine_rows", a.shape(), b.shape()));
    }
    let (r, _) = a.dims2()?;
    let data = (0..r)
        .map(|i| {
            let (x, y) = (a.row(i), b.row(i));
            dot(x, y) / (l2(x).max(COSINE_GUARD) * l2(y).max(COSINE_GUARD))
        })
        .collect();
    Tensor::new(vec![r], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k).map(|p| a.get2(i, p) * b.get2(p, j)).sum()
        })
    }

    #[test]
    fn matmul_identity_and_permutation() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&x).unwrap(), x);
        let p = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&p).unwrap(), p);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::from_fn(&[3, 4], |i| ((i * 7 + 3) % 11) as f64 / 3.0 - 1.7);
        let b = Tensor::from_fn(&[4, 2], |i| ((i * 5 + 1) % 13) as f64 / 4.0 - 1.1);
        let got = a.matmul(&b).unwrap();
        let want = triple_loop(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let a = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let s = softmax_rows(&a, 1.0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = Tensor::from_rows(&[vec![7.5, 7.5]]).unwrap();
        assert_eq!(softmax_rows(&a, 0.3).unwrap().data(), &[0.5, 0.5]);
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let s = softmax_rows(&a, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((s.data()[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((s.data()[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!(softmax_rows(&a, 0.0).is_err());
    }

    #[test]
    fn cosine_cases() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        for v in cosine_rows(&a, &a).unwrap().data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
        for v in cosine_rows(&a, &a.scale(-1.0)).unwrap().data() {
            assert!((v + 1.0).abs() < 1e-15);
        }
        let x = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let y = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(cosine_rows(&x, &y).unwrap().data(), &[0.0]);
        let z = Tensor::zeros(&[1, 2]);
        assert_eq!(cosine_rows(&z, &y).unwrap().data(), &[0.0]);
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(Tensor::zeros(&[3, 3]).frobenius_norm(), 0.0);
        assert_eq!(Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap().frobenius_norm(), 5.0);
        // compensated-sum oracle
        let a = Tensor::from_fn(&[5, 5], |i| ((i * 37 + 11) % 29) as f64 / 7.0 - 2.0);
        let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
        for v in a.data() {
            let y = v * v - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        assert!((a.frobenius_norm() - sum.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn f32_storage_rounds() {
        let a = Tensor::from_rows(&[vec![0.1, 1.0 / 3.0]]).unwrap();
        let b = a.with_precision(Precision::F32);
        assert_eq!(b.data()[0], 0.1_f32 as f64);
        assert_eq!(b.with_precision(Precision::F32), b);
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }
}
