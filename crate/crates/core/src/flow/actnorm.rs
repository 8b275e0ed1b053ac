use super::{check_input, InvertibleTransform};
use crate::autodiff::{Backend, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActNormState {
    /// Parameters are placeholders; the inverse is refused.
    Uninitialized,
    /// Identity parameters, no data statistics yet.
    Identity,
    DataInitialized,
}

/// Per-coordinate affine normalization, `x = z * exp(log_scale) + bias`.
#[derive(Clone, Debug)]
pub struct ActNorm {
    dim: usize,
    pub log_scale: ParamId,
    pub bias: ParamId,
    state: ActNormState,
}

impl ActNorm {
    /// Registers an uninitialized layer; call [`initialize`](Self::initialize)
    /// or [`mark_identity`](Self::mark_identity) before inverting.
    pub fn new(params: &mut ParamStore, name: &str, dim: usize) -> Self {
        let log_scale = params.add(format!("{name}.log_scale"), Tensor::zeros(&[dim]));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self {
            dim,
            log_scale,
            bias,
            state: ActNormState::Uninitialized,
        }
    }

    pub fn state(&self) -> ActNormState {
        self.state
    }

    pub fn mark_identity(&mut self) {
        if self.state == ActNormState::Uninitialized {
            self.state = ActNormState::Identity;
        }
    }

    pub(crate) fn mark_data_initialized(&mut self) {
        self.state = ActNormState::DataInitialized;
    }

    /// Sets the parameters from a batch arriving from the data side, so that
    /// the normalizing (inverse) pass maps `batch` to zero mean and unit
    /// variance per coordinate. Frozen afterwards: later calls are no-ops.
    pub fn initialize(&mut self, params: &mut ParamStore, batch: &Tensor) -> Result<()> {
        if self.state == ActNormState::DataInitialized {
            return Ok(());
        }
        let n = check_input(batch, self.dim)?;
        if n == 0 {
            return Err(Error::InvalidArgument("actnorm init needs a non-empty batch".into()));
        }
        let mut mean = vec![0.0; self.dim];
        for row in batch.row_iter() {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; self.dim];
        for row in batch.row_iter() {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let log_scale: Vec<f64> = var
            .iter()
            .map(|v| (v / n as f64).sqrt().max(1e-6).ln())
            .collect();
        params.set(self.log_scale, Tensor::vector(log_scale))?;
        params.set(self.bias, Tensor::vector(mean))?;
        self.state = ActNormState::DataInitialized;
        Ok(())
    }

    fn log_det<B: Backend>(&self, b: &mut B, params: &ParamStore, n: usize, sign: f64) -> Result<B::Value> {
        let ls = b.param(params, self.log_scale);
        let total = b.sum(&ls);
        let total = b.scale(&total, sign);
        let ones = b.constant(Tensor::ones(&[n]));
        b.mul(&ones, &total)
    }
}

impl InvertibleTransform for ActNorm {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward<B: Backend>(
        &self,
        b: &mut B,
        params: &ParamStore,
        z: &B::Value,
    ) -> Result<(B::Value, B::Value)> {
        let n = check_input(b.value(z), self.dim)?;
        let ls = b.param(params, self.log_scale);
        let bias = b.param(params, self.bias);
        let scale = b.exp(&ls);
        let scaled = b.mul(z, &scale)?;
        let x = b.add(&scaled, &bias)?;
        let ld = self.log_det(b, params, n, 1.0)?;
        Ok((x, ld))
    }

    fn inverse<B: Backend>(
        &self,
        b: &mut B,
        params: &ParamStore,
        x: &B::Value,
    ) -> Result<(B::Value, B::Value)> {
        if self.state == ActNormState::Uninitialized {
            return Err(Error::NotInitialized {
                layer: 0,
                kind: "actnorm",
            });
        }
        let n = check_input(b.value(x), self.dim)?;
        let ls = b.param(params, self.log_scale);
        let bias = b.param(params, self.bias);
        let neg = b.neg(&ls);
        let inv_scale = b.exp(&neg);
        let centered = b.sub(x, &bias)?;
        let z = b.mul(&centered, &inv_scale)?;
        let ld = self.log_det(b, params, n, -1.0)?;
        Ok((z, ld))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn inverse_before_init_is_refused() {
        let mut p = ParamStore::new();
        let an = ActNorm::new(&mut p, "an", 3);
        let x = Tensor::zeros(&[2, 3]);
        assert!(matches!(an.inverse_eager(&p, &x), Err(Error::NotInitialized { .. })));
        // the forward pass with placeholder parameters is the identity
        let (y, ld) = an.forward_eager(&p, &x).unwrap();
        assert_eq!(y, x);
        assert_eq!(ld.data(), &[0.0, 0.0]);
    }

    #[test]
    fn data_init_standardizes_first_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = Normal::new(3.0, 2.5).unwrap();
        let data: Vec<f64> = (0..400 * 3).map(|_| normal.sample(&mut rng)).collect();
        let batch = Tensor::matrix(400, 3, data).unwrap();

        let mut p = ParamStore::new();
        let mut an = ActNorm::new(&mut p, "an", 3);
        an.initialize(&mut p, &batch).unwrap();
        let (z, _) = an.inverse_eager(&p, &batch).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = z.row_iter().map(|r| r[c]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }

        // frozen after the first batch
        let before = p.flatten();
        an.initialize(&mut p, &Tensor::zeros(&[5, 3])).unwrap();
        assert_eq!(before, p.flatten());
    }

    #[test]
    fn log_dets_cancel() {
        let mut p = ParamStore::new();
        let mut an = ActNorm::new(&mut p, "an", 2);
        an.mark_identity();
        p.set(an.log_scale, Tensor::vector(vec![0.3, -1.1])).unwrap();
        p.set(an.bias, Tensor::vector(vec![2.0, -0.5])).unwrap();
        let z = Tensor::matrix(2, 2, vec![0.1, 0.2, -3.0, 4.0]).unwrap();
        let (x, f) = an.forward_eager(&p, &z).unwrap();
        let (back, r) = an.inverse_eager(&p, &x).unwrap();
        assert!(back.max_abs_diff(&z).unwrap() < 1e-14);
        for (a, b) in f.data().iter().zip(r.data()) {
            assert!((a + b).abs() < 1e-15);
            assert!((a - (0.3 - 1.1)).abs() < 1e-15);
        }
    }
}
