//! Dense row-major `f64` tensors and the plain (tape-free) kernels shared by
//! the autodiff tape and the streaming engine.
//!
//! Both execution paths call the same kernels in the same order, so the
//! streaming/batch equivalence checks compare compositions, not arithmetic.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor { shape: vec![values.len()], data: values }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dim("Tensor::from_rows", "ragged rows"));
        }
        Ok(Tensor { shape: vec![m, n], data: rows.concat() })
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn random_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn random_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { shape: shape.to_vec(), data }
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::dim(op, format!("expected a matrix, got shape {:?}", s))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// In-place `self += other`; shapes must agree in element count.
    pub(crate) fn accumulate(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Self> {
        let (m, n) = self.dims2("add_row")?;
        if row.numel() != n {
            return Err(Error::dim("add_row", format!("row of {} for {} columns", row.numel(), n)));
        }
        let mut data = self.data.clone();
        for i in 0..m {
            for (d, r) in data[i * n..(i + 1) * n].iter_mut().zip(&row.data) {
                *d += r;
            }
        }
        Ok(Tensor { shape: vec![m, n], data })
    }

    /// Multiplies every row of an `m×n` matrix elementwise by a length-`n` vector.
    pub fn mul_row(&self, row: &Tensor) -> Result<Self> {
        let (m, n) = self.dims2("mul_row")?;
        if row.numel() != n {
            return Err(Error::dim("mul_row", format!("row of {} for {} columns", row.numel(), n)));
        }
        let mut data = self.data.clone();
        for i in 0..m {
            for (d, r) in data[i * n..(i + 1) * n].iter_mut().zip(&row.data) {
                *d *= r;
            }
        }
        Ok(Tensor { shape: vec![m, n], data })
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (m, n) = self.dims2("slice_rows")?;
        if start > end || end > m {
            return Err(Error::dim("slice_rows", format!("{start}..{end} of {m} rows")));
        }
        Ok(Tensor { shape: vec![end - start, n], data: self.data[start * n..end * n].to_vec() })
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (m, n) = self.dims2("slice_cols")?;
        if start > end || end > n {
            return Err(Error::dim("slice_cols", format!("{start}..{end} of {n} cols")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&self.data[i * n + start..i * n + end]);
        }
        Ok(Tensor { shape: vec![m, w], data })
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let n = parts.first().map(|t| t.cols()).unwrap_or(0);
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (m, pn) = p.dims2("concat_rows")?;
            if pn != n {
                return Err(Error::dim("concat_rows", format!("{pn} cols vs {n}")));
            }
            rows += m;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape: vec![rows, n], data })
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Self> {
        let m = parts.first().map(|t| t.rows()).unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = p.dims2("concat_cols")?;
            if pm != m {
                return Err(Error::dim("concat_cols", format!("{pm} rows vs {m}")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Ok(Tensor { shape: vec![m, n], data })
    }

    /// Row-wise softmax with optional row-major visibility (`true` = visible).
    ///
    /// Masked entries are exactly zero. The per-row maximum is taken over
    /// visible entries only.
    pub fn softmax_rows(&self, visible: Option<&[bool]>) -> Result<Self> {
        let (m, n) = self.dims2("softmax_rows")?;
        if let Some(v) = visible {
            if v.len() != m * n {
                return Err(Error::dim("softmax_rows", format!("mask of {} for {}x{}", v.len(), m, n)));
            }
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let vis = |j: usize| visible.is_none_or(|v| v[i * n + j]);
            let mut max = f64::NEG_INFINITY;
            let mut any = false;
            for (j, &x) in row.iter().enumerate() {
                if vis(j) {
                    if !x.is_finite() {
                        return Err(Error::NonFinite("softmax_rows"));
                    }
                    any = true;
                    max = max.max(x);
                }
            }
            if !any {
                return Err(Error::DegenerateRow { row: i });
            }
            let o = &mut out[i * n..(i + 1) * n];
            let mut denom = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if vis(j) {
                    let e = (x - max).exp();
                    o[j] = e;
                    denom += e;
                }
            }
            for v in o.iter_mut() {
                *v /= denom;
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    /// Returns the normalized matrix and the per-row inverse standard deviation.
    pub fn layer_norm(&self, eps: f64) -> Result<(Self, Vec<f64>)> {
        let (m, n) = self.dims2("layer_norm")?;
        let mut out = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (x - mean) * r;
            }
            inv_std.push(r);
        }
        Ok((Tensor { shape: vec![m, n], data: out }, inv_std))
    }

    pub fn gelu(&self) -> Self {
        self.map(gelu)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(a.matmul(&Tensor::eye(2)).unwrap(), a);
        assert_eq!(Tensor::eye(2).matmul(&Tensor::eye(2)).unwrap(), Tensor::eye(2));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_uniform_and_masked() {
        let x = Tensor::from_rows(&[&[0.0, 0.0, 0.0]]).unwrap();
        let y = x.softmax_rows(None).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = Tensor::from_rows(&[&[0.7, 0.7]]).unwrap();
        let y = x.softmax_rows(Some(&[true, false])).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let x = Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let y = x.softmax_rows(None).unwrap();
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (j, v) in y.data().iter().enumerate() {
            assert!((v - ((j + 1) as f64).exp() / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let x = Tensor::zeros(&[2, 2]);
        let err = x.softmax_rows(Some(&[true, true, false, false])).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1 }));
    }

    #[test]
    fn concat_and_slice_cols_round_trip() {
        let a = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let l = a.slice_cols(0, 1).unwrap();
        let r = a.slice_cols(1, 3).unwrap();
        assert_eq!(Tensor::concat_cols(&[&l, &r]).unwrap(), a);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(100.0) - 100.0).abs() < 1e-12);
        assert!(softplus(-100.0) > 0.0);
    }
}
