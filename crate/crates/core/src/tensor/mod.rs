//! Dense row-major `f64` tensors and a reverse-mode gradient tape.
//!
//! Only the handful of operations the Cut Transformer needs are provided:
//! matrix products, per-row softmax and layer normalization, ReLU,
//! elementwise addition and multiplication, and column/row slicing and
//! concatenation. Everything is 64-bit so that finite-difference gradient
//! checks stay meaningful.

mod gemm;
mod kernels;
mod tape;

pub(crate) use kernels::softmax_in_place;

pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// A dense real-valued array stored in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} holds {expected} values but {} were given",
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e > 0),
            "extents must be positive"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// Builds an `m×n` matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != n) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().copied())
            .collect();
        Self::new(vec![m, n], data)
    }

    /// Column vector `n×1`.
    pub fn column(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n, 1], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            other => Err(Error::shape(
                op,
                format!("expected a matrix, got {other:?}"),
            )),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, p) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {m}x{k} by {k2}x{p}"),
            ));
        }
        let mut out = vec![0.0; m * p];
        gemm::gemm(
            gemm::View::row_major(&self.data, m, k),
            gemm::View::row_major(&other.data, k, p),
            &mut out,
            false,
        );
        Tensor::new(vec![m, p], out)
    }

    /// `x · w` for a single-column weight, yielding one value per row.
    pub fn project(&self, w: &Tensor) -> Result<Tensor> {
        let (_, d) = self.dims2("project")?;
        if w.shape() != [d, 1] {
            return Err(Error::shape(
                "project",
                format!("weight must be {d}x1, got {:?}", w.shape()),
            ));
        }
        self.matmul(w)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Row-wise softmax of `scale · x`, with max-subtraction per row.
    pub fn row_softmax(&self, scale: f64) -> Result<Tensor> {
        let (_, n) = self.dims2("row_softmax")?;
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            softmax_in_place(row, scale);
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Standardizes every row to zero mean and unit variance, then applies
    /// a per-feature gain and bias.
    pub fn layer_norm_rows(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(layer_norm_forward(self, gain, bias, eps)?.0)
    }

    pub fn concat_per_row(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_per_row", "no parts"))?;
        let (m, _) = first.dims2("concat_per_row")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = p.dims2("concat_per_row")?;
            if pm != m {
                return Err(Error::shape(
                    "concat_per_row",
                    format!("row counts differ: {m} vs {pm}"),
                ));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Tensor::new(vec![m, total], out)
    }

    /// Columns `[start, start + width)`.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_cols")?;
        if width == 0 || start + width > n {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} out of 0..{n}", start + width),
            ));
        }
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + start + width]);
        }
        Tensor::new(vec![m, width], out)
    }

    /// Rows `[start, start + count)`.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_rows")?;
        if count == 0 || start + count > m {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} out of 0..{m}", start + count),
            ));
        }
        Tensor::new(
            vec![count, n],
            self.data[start * n..(start + count) * n].to_vec(),
        )
    }
}

/// Returns `(output, normalized input, inverse std per row)`.
pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (m, d) = x.dims2("layer_norm_rows")?;
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape(
            "layer_norm_rows",
            format!(
                "gain {:?} and bias {:?} must both be [{d}]",
                gain.shape(),
                bias.shape()
            ),
        ));
    }
    let mut xhat = vec![0.0; m * d];
    let mut out = vec![0.0; m * d];
    let mut inv_std = Vec::with_capacity(m);
    for i in 0..m {
        let row = &x.data[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        inv_std.push(r);
        for j in 0..d {
            let z = (row[j] - mean) * r;
            xhat[i * d + j] = z;
            out[i * d + j] = z * gain.data[j] + bias.data[j];
        }
    }
    Ok((
        Tensor::new(vec![m, d], out)?,
        Tensor::new(vec![m, d], xhat)?,
        inv_std,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = (a.rows(), a.cols());
        let p = b.cols();
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                for t in 0..k {
                    out[i * p + j] += a.get(i, t) * b.get(t, j);
                }
            }
        }
        out
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        let a = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(err.to_string().contains("2x3 by 2x3"), "{err}");
        assert!(a.add(&Tensor::zeros(&[3, 2])).is_err());
        assert!(a.slice_cols(2, 2).is_err());
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&x).unwrap(), x);
        let a = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::new(
            vec![3, 4],
            (0..12)
                .map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.37)
                .collect(),
        )
        .unwrap();
        let b = Tensor::new(
            vec![4, 2],
            (0..8).map(|i| ((i * 5 % 9) as f64 - 4.0) * 0.53).collect(),
        )
        .unwrap();
        assert!(close(
            a.matmul(&b).unwrap().data(),
            &naive_matmul(&a, &b),
            1e-12
        ));
    }

    #[test]
    fn softmax_cases() {
        let z = Tensor::zeros(&[2, 4]).row_softmax(3.7).unwrap();
        assert!(z.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let x = Tensor::from_rows(&[[0.0, 3f64.ln()]]).unwrap();
        assert!(close(
            x.row_softmax(1.0).unwrap().data(),
            &[0.25, 0.75],
            1e-12
        ));
        let big = Tensor::from_rows(&[[1000.0, 0.0]])
            .unwrap()
            .row_softmax(1.0)
            .unwrap();
        assert!(big.is_finite());
        assert!((big.data()[0] - 1.0).abs() < 1e-12 && big.data()[1] < 1e-300);
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let c = Tensor::from_rows(&[[5.0, 5.0]]).unwrap();
        let out = c.layer_norm_rows(&ones, &zeros, 1e-5).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-12));

        let r = Tensor::from_rows(&[[1.0, 3.0]]).unwrap();
        let out = r.layer_norm_rows(&ones, &zeros, 0.0).unwrap();
        assert!(close(out.data(), &[-1.0, 1.0], 1e-12));

        let b = Tensor::vector(vec![0.3, -2.0]).unwrap();
        let out = r.layer_norm_rows(&zeros, &b, 1e-5).unwrap();
        assert_eq!(out.data(), &[0.3, -2.0]);
    }

    #[test]
    fn structural_ops() {
        assert_eq!(
            Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap().relu().data(),
            &[0.0, 0.0, 2.0]
        );
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[[5.0, 6.0, 7.0], [8.0, 9.0, 10.0]]).unwrap();
        let c = Tensor::concat_per_row(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(c.row(0), &[1.0, 2.0, 5.0, 6.0, 7.0]);
        assert_eq!(c.row(1), &[3.0, 4.0, 8.0, 9.0, 10.0]);
        assert_eq!(c.transpose().unwrap().transpose().unwrap(), c);
        assert_eq!(c.slice_cols(2, 3).unwrap(), b);
        assert_eq!(c.slice_rows(1, 1).unwrap().data(), c.row(1));
    }
}
