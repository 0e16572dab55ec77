//! Dense row-major `f64` tensors and the numerically stable primitives the
//! attention and clustering code is built on.
//!
//! Every reduction walks its operands left to right in a fixed order, so
//! results are bit-reproducible across runs and thread counts.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};

/// Dense tensor of rank 1 to 3 stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::Shape {
                shape,
                reason: "rank must be 1, 2 or 3".into(),
            });
        }
        if shape.contains(&0) {
            return Err(Error::Shape {
                shape,
                reason: "extents must be positive".into(),
            });
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape {
                shape,
                reason: format!("data length {} does not match", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Matrix from a list of equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape {
                shape: vec![r, c],
                reason: "ragged rows".into(),
            });
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized tensor");
        Self {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut t = Self::zeros(rows, cols);
        t.data.fill(value);
        t
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    /// Entries drawn i.i.d. from `N(0, std²)`.
    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(rows, cols);
        for v in &mut t.data {
            let z: f64 = StandardNormal.sample(rng);
            *v = std * z;
        }
        t
    }

    /// Entries drawn i.i.d. from `U(-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(rows, cols);
        for v in &mut t.data {
            *v = rng.random_range(-bound..=bound);
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

    /// Number of rows when viewed as a matrix (rank 1 is a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Self::new(self.shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    /// `self + s * other`, elementwise.
    pub fn axpy(&self, s: f64, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "axpy", |a, b| a + s * b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference; `INFINITY` if shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Column-wise sum, shape `1 × cols`.
    pub fn sum_rows(&self) -> Tensor {
        let c = self.cols();
        let mut out = Tensor::zeros(1, c);
        for i in 0..self.rows() {
            for (o, v) in out.data.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    /// Column-wise mean, shape `1 × cols`.
    pub fn mean_rows(&self) -> Tensor {
        self.sum_rows().scale(1.0 / self.rows() as f64)
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let n = self.rows();
        let mut data = Vec::with_capacity(idx.len() * self.cols());
        for &i in idx {
            if i >= n {
                return Err(Error::Index { index: i, len: n });
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(idx.len(), self.cols(), data)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let r = parts.first().map(Tensor::rows).ok_or_else(|| Error::Shape {
            shape: vec![],
            reason: "nothing to concatenate".into(),
        })?;
        if let Some(bad) = parts.iter().find(|p| p.rows() != r) {
            return Err(Error::Dimension {
                op: "concat_cols",
                lhs: parts[0].shape.clone(),
                rhs: bad.shape.clone(),
            });
        }
        let c: usize = parts.iter().map(Tensor::cols).sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Tensor::matrix(r, c, data)
    }
}

fn require_matrix(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::Shape {
            shape: t.shape.clone(),
            reason: format!("{op} expects a matrix"),
        })
    }
}

/// Matrix product `a · b`.
///
/// Each output entry accumulates over the inner index left to right.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix(a, "matmul")?;
    require_matrix(b, "matmul")?;
    let (p, q) = (a.rows(), a.cols());
    let (q2, r) = (b.rows(), b.cols());
    if q != q2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let arow = a.row(i);
        let orow = &mut out[i * r..(i + 1) * r];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * r..(k + 1) * r];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Tensor::matrix(p, r, out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix(a, "matmul_nt")?;
    require_matrix(b, "matmul_nt")?;
    if a.cols() != b.cols() {
        return Err(Error::Dimension {
            op: "matmul_nt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (p, r) = (a.rows(), b.rows());
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let arow = a.row(i);
        for j in 0..r {
            out[i * r + j] = dot(arow, b.row(j));
        }
    }
    Tensor::matrix(p, r, out)
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix(a, "matmul_tn")?;
    require_matrix(b, "matmul_tn")?;
    if a.rows() != b.rows() {
        return Err(Error::Dimension {
            op: "matmul_tn",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (p, r) = (a.cols(), b.cols());
    let mut out = vec![0.0; p * r];
    for k in 0..a.rows() {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &aki) in arow.iter().enumerate() {
            let orow = &mut out[i * r..(i + 1) * r];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Tensor::matrix(p, r, out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Softmax of `scale * row` written into `out`; masked-out entries get
/// weight zero and a fully masked row is all zeros.
pub(crate) fn softmax_into(row: &[f64], scale: f64, mask: Option<&[bool]>, out: &mut [f64]) {
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) {
            max = max.max(scale * v);
        }
    }
    if max == f64::NEG_INFINITY {
        out.fill(0.0);
        return;
    }
    let mut total = 0.0;
    for (j, (o, &v)) in out.iter_mut().zip(row).enumerate() {
        *o = if allowed(j) { (scale * v - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Softmax of `scale * a` along each row, stabilised by max subtraction.
pub fn row_softmax(a: &Tensor, scale: f64) -> Tensor {
    masked_row_softmax(a, scale, None)
}

/// Row softmax restricted to entries where `mask` is true.
pub fn masked_row_softmax(a: &Tensor, scale: f64, mask: Option<&[bool]>) -> Tensor {
    let c = a.cols();
    let mut out = a.clone();
    for i in 0..a.rows() {
        let m = mask.map(|m| &m[i * c..(i + 1) * c]);
        softmax_into(a.row(i), scale, m, out.row_mut(i));
    }
    out
}

/// `(1/α) log Σ_j exp(α a_j)`, evaluated as `max + (1/α) log Σ exp(α (a_j - max))`.
pub fn logsumexp(a: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(param_err("alpha", format!("must be positive, got {alpha}")));
    }
    if a.is_empty() {
        return Err(Error::Shape {
            shape: vec![0],
            reason: "logsumexp of an empty row".into(),
        });
    }
    Ok(logsumexp_unchecked(a, alpha))
}

pub(crate) fn logsumexp_unchecked(a: &[f64], alpha: f64) -> f64 {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = a.iter().map(|&v| (alpha * (v - max)).exp()).sum();
    max + s.ln() / alpha
}

/// Squared Euclidean distances between the rows of `x` (N×d) and `u` (M×d).
pub fn pairwise_sqdist(x: &Tensor, u: &Tensor) -> Result<Tensor> {
    require_matrix(x, "pairwise_sqdist")?;
    require_matrix(u, "pairwise_sqdist")?;
    if x.cols() != u.cols() {
        return Err(Error::Dimension {
            op: "pairwise_sqdist",
            lhs: x.shape.clone(),
            rhs: u.shape.clone(),
        });
    }
    let (n, m) = (x.rows(), u.rows());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = sqdist(x.row(i), u.row(j));
        }
    }
    Tensor::matrix(n, m, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn construction_checks_length_and_rank() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).is_err());
        let t = Tensor::new(vec![2, 3, 4], vec![0.0; 24]).unwrap();
        assert_eq!((t.rows(), t.cols()), (6, 4));
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        let b = m(&[&[0.0], &[1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[2.0], &[4.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(5, 7, 1.0, &mut rng);
        let b = Tensor::randn(7, 3, 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - s).abs() < 1e-12);
            }
        }
        assert!(matmul_nt(&a, &b.transpose()).unwrap().max_abs_diff(&c) < 1e-12);
        assert!(matmul_tn(&a.transpose(), &b).unwrap().max_abs_diff(&c) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(2, 3), &Tensor::zeros(2, 3)).unwrap_err();
        assert_eq!(
            err,
            Error::Dimension {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn softmax_cases() {
        let s = row_softmax(&m(&[&[1.0, 1.0, 1.0, 1.0]]), 1.0);
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = row_softmax(&m(&[&[0.0, 2f64.ln()]]), 1.0);
        assert!((s.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
        let s = row_softmax(&m(&[&[1000.0, 1000.0]]), 1.0);
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_renormalises_over_allowed() {
        let a = m(&[&[1.0, 5.0, 1.0], &[0.0, 0.0, 0.0]]);
        let mask = [true, false, true, false, false, false];
        let s = masked_row_softmax(&a, 1.0, Some(&mask));
        assert_eq!(s.row(0), &[0.5, 0.0, 0.5]);
        assert_eq!(s.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn logsumexp_cases() {
        assert!((logsumexp(&[0.0, 0.0], 1.0).unwrap() - 2f64.ln()).abs() < 1e-15);
        let v = logsumexp(&[1000.0, 1000.0], 1.0).unwrap();
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        // (1/100) ln(1 + e^100) = 1 + ln(1 + e^-100)/100
        let v = logsumexp(&[0.0, 1.0], 100.0).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        assert!(matches!(
            logsumexp(&[1.0], 0.0),
            Err(Error::Parameter { name: "alpha", .. })
        ));
        assert!(logsumexp(&[1.0], -1.0).is_err());
    }

    #[test]
    fn sqdist_cases() {
        let d = pairwise_sqdist(&m(&[&[0.0, 0.0]]), &m(&[&[3.0, 4.0]])).unwrap();
        assert_eq!(d.data(), &[25.0]);
        let x = m(&[&[1.5, -2.0]]);
        assert_eq!(pairwise_sqdist(&x, &x).unwrap().data(), &[0.0]);
        assert!(pairwise_sqdist(&Tensor::zeros(2, 2), &Tensor::zeros(2, 3)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(4, 3, 1.0, &mut rng);
        let u = Tensor::randn(2, 3, 1.0, &mut rng);
        let d = pairwise_sqdist(&x, &u).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += (x.get(i, k) - u.get(j, k)).powi(2);
                }
                assert!((d.get(i, j) - s).abs() < 1e-12);
            }
        }
    }
}
