//! Dense row-major `f64` tensors, the handful of kernels the losses need, and
//! the central-difference gradient used to verify every analytic backward pass.
//!
//! Tensors serialize to the `TSR 1` text format:
//!
//! ```text
//! TSR 1
//! <extent_0> <extent_1> ...
//! <values of the first trailing-axis row>
//! ...
//! ```
//!
//! Values are written with Rust's shortest round-trip formatting, so parsing a
//! written tensor reproduces every bit.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e > 0),
            "extents must be positive: {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Extent of the trailing axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub(crate) fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Dimension(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!("shape {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn to_tsr(&self) -> String {
        let mut s = String::from("TSR 1\n");
        let extents: Vec<String> = self.shape.iter().map(usize::to_string).collect();
        s.push_str(&extents.join(" "));
        s.push('\n');
        for row in self.data.chunks(self.cols()) {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    s.push(' ');
                }
                write!(s, "{v:?}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_tsr(text: &str) -> Result<Tensor> {
        let mut lines = text.lines();
        Self::read_tsr(&mut lines)
    }

    /// Reads one TSR block from a line stream, consuming exactly its lines.
    pub(crate) fn read_tsr<'a>(lines: &mut impl Iterator<Item = &'a str>) -> Result<Tensor> {
        let header = lines
            .by_ref()
            .find(|l| !l.trim().is_empty())
            .ok_or_else(|| Error::Parse("missing TSR header".into()))?;
        if header.trim() != "TSR 1" {
            return Err(Error::Parse(format!("bad TSR header {header:?}")));
        }
        let shape = lines
            .next()
            .ok_or_else(|| Error::Parse("missing TSR extents".into()))?
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|e| Error::Parse(format!("extent {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("expected {n} values, got {}", data.len())))?;
            for tok in line.split_whitespace() {
                let v = tok
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("value {tok:?}: {e}")))?;
                data.push(v);
            }
        }
        if data.len() != n {
            return Err(Error::Parse(format!("expected {n} values, got {}", data.len())));
        }
        Tensor::new(shape, data)
    }
}

/// A scalar loss paired with its gradient with respect to the differentiated
/// input. `empty_supervision` marks losses that had nothing to supervise; those
/// carry value 0 and an all-zero gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Tensor,
    pub empty_supervision: bool,
}

impl LossResult {
    pub fn empty(shape: &[usize]) -> Self {
        Self {
            value: 0.0,
            grad: Tensor::zeros(shape),
            empty_supervision: true,
        }
    }
}

/// Matrix product with ascending-index accumulation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, p) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!("matmul {m}x{k} by {k2}x{p}")));
    }
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a.data[i * k + l] * b.data[l * p + j];
            }
            out[i * p + j] = acc;
        }
    }
    Tensor::new(vec![m, p], out)
}

pub fn frobenius_sq_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Softmax over a contiguous slice, max-subtracted.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

/// Softmax along the trailing axis.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let d = out.cols();
    out.data.chunks_mut(d).for_each(softmax_in_place);
    out
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Argument(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = f(&probe);
        probe.data[i] = orig - h;
        let minus = f(&probe);
        probe.data[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("objective not finite near coordinate {i}")));
        }
        grad.data[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `max|a - b| / max(max|a|, max|b|)`; zero when both vanish.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let scale = analytic.max_abs().max(numeric.max_abs());
    if scale == 0.0 {
        return 0.0;
    }
    let diff = analytic
        .data
        .iter()
        .zip(&numeric.data)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn triple_loop(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; b[0].len()]; a.len()];
        for i in 0..a.len() {
            for j in 0..b[0].len() {
                for k in 0..b.len() {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let x = m(&[&[1.0, -2.0], &[0.5, 7.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &x).unwrap(), x);
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let expected = triple_loop(&[vec![1.0, 3.0], vec![2.0, 4.0]], &[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(expected, vec![vec![10.0, 14.0], vec![14.0, 20.0]]);
        let ata = matmul(&a.transpose().unwrap(), &a).unwrap();
        assert_eq!(ata.data(), &[10.0, 14.0, 14.0, 20.0]);
        let z = matmul(&Tensor::zeros(&[3, 2]), &x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn frobenius_examples() {
        let x = m(&[&[1.0, 2.0]]);
        assert_eq!(frobenius_sq_distance(&x, &x).unwrap(), 0.0);
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        assert_eq!(frobenius_sq_distance(&a, &b).unwrap(), 4.0);
        let a = Tensor::new(vec![1], vec![0.0]).unwrap();
        let b = Tensor::new(vec![1], vec![3.0]).unwrap();
        assert_eq!(frobenius_sq_distance(&a, &b).unwrap(), 9.0);
        assert!(frobenius_sq_distance(&a, &x).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        assert!(s.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let s = softmax_rows(&Tensor::new(vec![2], vec![800.0, -800.0]).unwrap());
        assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);
        let s = softmax_rows(&Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (k, v) in s.data().iter().enumerate() {
            assert!((v - ((k + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_difference_examples() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_difference_gradient(|t| t.sum_sq(), &x, 1e-6).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8 && (g.data()[1] - 4.0).abs() < 1e-8);
        let g = finite_difference_gradient(|_| 3.5, &x, 1e-6).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        // log singularity at x0 = 1
        let err = finite_difference_gradient(|t| (t.data()[0] - 1.0).ln(), &x, 1e-6);
        assert!(err.is_err());
        let err = finite_difference_gradient(|_| f64::NAN, &x, 1e-6).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(finite_difference_gradient(|_| 0.0, &x, 0.0).is_err());
    }

    #[test]
    fn tsr_round_trip_is_bit_exact() {
        let t = Tensor::new(vec![2, 3], vec![0.1, -1e-300, 1.0 / 3.0, f64::MAX, 5e-324, -0.0]).unwrap();
        let text = t.to_tsr();
        assert!(text.starts_with("TSR 1\n2 3\n"));
        let back = Tensor::from_tsr(&text).unwrap();
        assert_eq!(t.shape(), back.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn tsr_rejects_malformed() {
        assert!(Tensor::from_tsr("TSR 2\n1\n0\n").is_err());
        assert!(Tensor::from_tsr("TSR 1\n2\n0\n").is_err());
        assert!(Tensor::from_tsr("TSR 1\n1\nx\n").is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }
}
