//! The op set shared by eager evaluation and taped differentiation.
//!
//! Model code is written once against [`Backend`]. Running it on [`Eager`]
//! computes plain values and frees intermediates as they go out of scope;
//! running it on a [`Tape`](super::Tape) records every op for a later
//! backward pass.

use super::params::{ParamId, ParamStore};
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

pub trait Backend {
    type Value: Clone;

    fn constant(&mut self, t: Tensor) -> Self::Value;
    fn param(&mut self, store: &ParamStore, id: ParamId) -> Self::Value;
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn neg(&mut self, a: &Self::Value) -> Self::Value;
    fn scale(&mut self, a: &Self::Value, c: f64) -> Self::Value;
    fn add_scalar(&mut self, a: &Self::Value, c: f64) -> Self::Value;
    /// Sum of all elements, as a scalar.
    fn sum(&mut self, a: &Self::Value) -> Self::Value;
    /// Mean of all elements, as a scalar. Errors on an empty input.
    fn mean(&mut self, a: &Self::Value) -> Result<Self::Value>;
    /// Per-row sums of an `n x d` matrix, giving a length-`n` vector.
    fn sum_rows(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn exp(&mut self, a: &Self::Value) -> Self::Value;
    /// Natural log; errors if any input is non-positive.
    fn log(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn tanh(&mut self, a: &Self::Value) -> Self::Value;
    fn sigmoid(&mut self, a: &Self::Value) -> Self::Value;
    fn leaky_relu(&mut self, a: &Self::Value, slope: f64) -> Self::Value;
    fn square(&mut self, a: &Self::Value) -> Self::Value;
    fn abs(&mut self, a: &Self::Value) -> Self::Value;
    fn clamp(&mut self, a: &Self::Value, lo: f64, hi: f64) -> Self::Value;
    /// Elementwise `mask != 0 ? a : b`; the mask may be row-broadcast.
    fn select(&mut self, mask: &Tensor, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn concat_cols(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn slice_cols(&mut self, a: &Self::Value, start: usize, end: usize) -> Result<Self::Value>;
    /// Output column `j` is input column `idx[j]`.
    fn gather_cols(&mut self, a: &Self::Value, idx: &[usize]) -> Result<Self::Value>;
}

pub(crate) fn check_log_domain(a: &Tensor) -> Result<()> {
    if let Some(bad) = a.data().iter().find(|&&x| !(x > 0.0)) {
        return Err(Error::Domain {
            op: "log",
            detail: format!("non-positive input {bad}"),
        });
    }
    Ok(())
}

pub(crate) fn mean_of(a: &Tensor) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::Domain {
            op: "mean",
            detail: "empty input".into(),
        });
    }
    Ok(a.data().iter().sum::<f64>() / a.len() as f64)
}

/// Backend that evaluates immediately without recording anything.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Backend for Eager {
    type Value = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Tensor {
        store.get(id).clone()
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::binary("add", a, b, |x, y| x + y)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::binary("sub", a, b, |x, y| x - y)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::binary("mul", a, b, |x, y| x * y)
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::gemm(a, false, b, false)
    }

    fn neg(&mut self, a: &Tensor) -> Tensor {
        a.map(|x| -x)
    }

    fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        a.map(|x| x * c)
    }

    fn add_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        a.map(|x| x + c)
    }

    fn sum(&mut self, a: &Tensor) -> Tensor {
        Tensor::scalar(a.data().iter().sum())
    }

    fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        mean_of(a).map(Tensor::scalar)
    }

    fn sum_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        tensor::sum_rows(a)
    }

    fn exp(&mut self, a: &Tensor) -> Tensor {
        a.map(f64::exp)
    }

    fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        check_log_domain(a)?;
        Ok(a.map(f64::ln))
    }

    fn tanh(&mut self, a: &Tensor) -> Tensor {
        a.map(tensor::tanh)
    }

    fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        a.map(tensor::sigmoid)
    }

    fn leaky_relu(&mut self, a: &Tensor, slope: f64) -> Tensor {
        a.map(|x| if x > 0.0 { x } else { slope * x })
    }

    fn square(&mut self, a: &Tensor) -> Tensor {
        a.map(|x| x * x)
    }

    fn abs(&mut self, a: &Tensor) -> Tensor {
        a.map(f64::abs)
    }

    fn clamp(&mut self, a: &Tensor, lo: f64, hi: f64) -> Tensor {
        a.map(|x| x.clamp(lo, hi))
    }

    fn select(&mut self, mask: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::select(mask, a, b)
    }

    fn concat_cols(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::concat_cols(a, b)
    }

    fn slice_cols(&mut self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        tensor::slice_cols(a, start, end)
    }

    fn gather_cols(&mut self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        tensor::gather_cols(a, idx)
    }
}
