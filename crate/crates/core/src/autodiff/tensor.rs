//! Dense row-major tensors of rank 0, 1 or 2 and the value kernels shared by
//! the eager and taped backends.

use crate::error::{Error, Result};

/// Dense array of `f64` values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 2 {
            return Err(Error::InvalidArgument(format!(
                "tensors have rank at most 2, got shape {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds an `n x d` matrix from `n` rows of equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::shape("Tensor::from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
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

    /// Number of rows of a matrix; a vector counts as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Number of columns of a matrix or length of a vector.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks(0) panics, and a zero-column matrix has no meaningful rows anyway
        self.data.chunks(self.cols().max(1))
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape("item", &self.shape, &[]))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Stacks the rows of two matrices with equal column counts.
    pub fn vstack(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.cols() != other.cols() {
            return Err(Error::shape("vstack", &self.shape, &other.shape));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Tensor::matrix(self.rows() + other.rows(), self.cols(), data)
    }

    /// Selects rows by index into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), c],
            data,
        }
    }
}

/// How an operand is laid out relative to the output of a binary op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Bcast {
    Same,
    /// Rank-1 operand repeated along the rows of a rank-2 output.
    Row,
    Scalar,
}

impl Bcast {
    #[inline]
    pub(crate) fn index(self, i: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Row => i % cols,
            Bcast::Scalar => 0,
        }
    }
}

pub(crate) fn broadcast(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<usize>, Bcast, Bcast)> {
    if a == b {
        return Ok((a.to_vec(), Bcast::Same, Bcast::Same));
    }
    if b.is_empty() {
        return Ok((a.to_vec(), Bcast::Same, Bcast::Scalar));
    }
    if a.is_empty() {
        return Ok((b.to_vec(), Bcast::Scalar, Bcast::Same));
    }
    if a.len() == 2 && b.len() == 1 && a[1] == b[0] {
        return Ok((a.to_vec(), Bcast::Same, Bcast::Row));
    }
    if a.len() == 1 && b.len() == 2 && b[1] == a[0] {
        return Ok((b.to_vec(), Bcast::Row, Bcast::Same));
    }
    Err(Error::shape(op, a, b))
}

pub(crate) fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (shape, ka, kb) = broadcast(op, &a.shape, &b.shape)?;
    if ka == Bcast::Same && kb == Bcast::Same {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor { shape, data });
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    match (ka, kb) {
        (Bcast::Same, Bcast::Row) => {
            for row in a.data.chunks(b.data.len().max(1)) {
                data.extend(row.iter().zip(&b.data).map(|(&x, &y)| f(x, y)));
            }
        }
        (Bcast::Row, Bcast::Same) => {
            for row in b.data.chunks(a.data.len().max(1)) {
                data.extend(a.data.iter().zip(row).map(|(&x, &y)| f(x, y)));
            }
        }
        _ => {
            let cols = *shape.last().unwrap_or(&1);
            data.extend((0..n).map(|i| f(a.data[ka.index(i, cols)], b.data[kb.index(i, cols)])));
        }
    }
    Ok(Tensor { shape, data })
}

/// `a[m,k] @ b[k,n]`, optionally reading either operand transposed.
pub(crate) fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (ar, ac) = (a.shape[0], a.shape[1]);
    let (br, bc) = (b.shape[0], b.shape[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        // SAFETY: strides describe the row-major buffers of `a` and `b`, whose
        // lengths were validated at construction; `out` holds m*n elements.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub(crate) fn require_matrix(op: &'static str, a: &Tensor) -> Result<(usize, usize)> {
    if a.rank() != 2 {
        return Err(Error::shape(op, &a.shape, &[0, 0]));
    }
    Ok((a.shape[0], a.shape[1]))
}

pub(crate) fn sum_rows(a: &Tensor) -> Result<Tensor> {
    let (n, d) = require_matrix("sum_rows", a)?;
    let data = if d == 0 {
        vec![0.0; n]
    } else {
        a.data.chunks(d).map(|r| r.iter().sum()).collect()
    };
    Ok(Tensor::vector(data))
}

pub(crate) fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, da) = require_matrix("concat_cols", a)?;
    let (nb, db) = require_matrix("concat_cols", b)?;
    if n != nb {
        return Err(Error::shape("concat_cols", &a.shape, &b.shape));
    }
    let mut data = Vec::with_capacity(n * (da + db));
    for i in 0..n {
        data.extend_from_slice(&a.data[i * da..(i + 1) * da]);
        data.extend_from_slice(&b.data[i * db..(i + 1) * db]);
    }
    Tensor::matrix(n, da + db, data)
}

pub(crate) fn slice_cols(a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (n, d) = require_matrix("slice_cols", a)?;
    if start > end || end > d {
        return Err(Error::shape("slice_cols", &a.shape, &[start, end]));
    }
    let w = end - start;
    let mut data = Vec::with_capacity(n * w);
    for i in 0..n {
        data.extend_from_slice(&a.data[i * d + start..i * d + end]);
    }
    Tensor::matrix(n, w, data)
}

pub(crate) fn gather_cols(a: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (n, d) = require_matrix("gather_cols", a)?;
    if let Some(&bad) = idx.iter().find(|&&j| j >= d) {
        return Err(Error::shape("gather_cols", &a.shape, &[bad]));
    }
    let mut data = Vec::with_capacity(n * idx.len());
    for i in 0..n {
        let row = &a.data[i * d..(i + 1) * d];
        data.extend(idx.iter().map(|&j| row[j]));
    }
    Tensor::matrix(n, idx.len(), data)
}

pub(crate) fn select(mask: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::shape("select", &a.shape, &b.shape));
    }
    let (_, km, _) = broadcast("select", &a.shape, &mask.shape)?;
    let cols = a.cols();
    let data = (0..a.len())
        .map(|i| {
            if mask.data[km.index(i, cols)] != 0.0 {
                a.data[i]
            } else {
                b.data[i]
            }
        })
        .collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// `tanh` through a single `exp`, several times cheaper than the libm
/// routine. Near zero an odd Taylor polynomial avoids the cancellation in
/// `1 - e^{-2|x|}`; both branches are accurate to a few ulps.
#[inline]
pub(crate) fn tanh(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 0.0625 {
        let x2 = x * x;
        // x - x^3/3 + 2x^5/15 - 17x^7/315 + 62x^9/2835 - 1382x^11/155925
        return x
            * (1.0
                + x2 * (-1.0 / 3.0
                    + x2 * (2.0 / 15.0
                        + x2 * (-17.0 / 315.0 + x2 * (62.0 / 2835.0 + x2 * (-1382.0 / 155925.0))))));
    }
    if ax > 20.0 {
        return x.signum();
    }
    let e = (-2.0 * ax).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
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
    fn fast_tanh_matches_libm() {
        let mut x = -25.0;
        while x < 25.0 {
            let (fast, exact) = (tanh(x), x.tanh());
            assert!((fast - exact).abs() <= 4.0 * f64::EPSILON * exact.abs().max(f64::MIN_POSITIVE), "{x}");
            x += 0.000_731;
        }
        for x in [0.0, -0.0, 1e-300, 0.0625, -0.0625, 1e-8] {
            assert!((tanh(x) - x.tanh()).abs() <= 4.0 * f64::EPSILON * x.abs(), "{x}");
        }
    }

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn gemm_transposes() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap();
        // a^T @ I = a^T
        let at = gemm(&a, true, &b, false).unwrap();
        assert_eq!(at.shape(), &[3, 2]);
        assert_eq!(at.data(), &[1., 4., 2., 5., 3., 6.]);
        let aat = gemm(&a, false, &a, true).unwrap();
        assert_eq!(aat.data(), &[14., 32., 32., 77.]);
    }

    #[test]
    fn row_broadcast() {
        let a = Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::vector(vec![10., 20.]);
        let c = binary("add", &a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11., 22., 13., 24.]);
        let d = binary("add", &b, &a, |x, y| x + y).unwrap();
        assert_eq!(c, d);
        assert!(binary("add", &a, &Tensor::vector(vec![1., 2., 3.]), |x, y| x + y).is_err());
    }

    #[test]
    fn column_ops() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let s = slice_cols(&a, 1, 3).unwrap();
        assert_eq!(s.data(), &[2., 3., 5., 6.]);
        let g = gather_cols(&a, &[2, 0, 1]).unwrap();
        assert_eq!(g.data(), &[3., 1., 2., 6., 4., 5.]);
        let c = concat_cols(&slice_cols(&a, 0, 1).unwrap(), &s).unwrap();
        assert_eq!(c, a);
        assert_eq!(sum_rows(&a).unwrap().data(), &[6., 15.]);
    }
}
