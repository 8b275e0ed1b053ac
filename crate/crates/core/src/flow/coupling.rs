use rand::Rng;

use super::{check_input, InvertibleTransform};
use crate::autodiff::{Backend, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};

/// Affine coupling: coordinates with mask 1 pass through and condition the
/// scale and shift applied to the coordinates with mask 0,
/// `x = z * exp(s(z_pass)) + t(z_pass)`.
///
/// The raw scale output is squashed to `scale_bound * tanh(.)`, so every
/// emitted log-scale lies in `[-scale_bound, scale_bound]`.
#[derive(Clone, Debug)]
pub struct AffineCoupling {
    mask: Tensor,
    complement: Tensor,
    pub scale_net: Mlp,
    pub translate_net: Mlp,
    scale_bound: f64,
}

impl AffineCoupling {
    /// Both conditioner nets map the masked `d`-vector through `hidden` to a
    /// `d`-vector; their output layers start at zero, so the layer starts as
    /// the identity.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamStore,
        name: &str,
        mask: Vec<f64>,
        hidden: &[usize],
        scale_bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let dim = mask.len();
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::InvalidArgument("coupling mask must be binary".into()));
        }
        if !mask.contains(&1.0) || !mask.contains(&0.0) {
            return Err(Error::InvalidArgument(
                "coupling mask needs at least one pass-through and one transformed coordinate".into(),
            ));
        }
        if !(scale_bound > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "scale_bound must be positive, got {scale_bound}"
            )));
        }
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let scale_net = Mlp::new(params, &format!("{name}.scale"), &widths, Activation::Tanh, true, rng);
        let translate_net =
            Mlp::new(params, &format!("{name}.translate"), &widths, Activation::Tanh, true, rng);
        let complement = Tensor::vector(mask.iter().map(|m| 1.0 - m).collect());
        Ok(Self {
            mask: Tensor::vector(mask),
            complement,
            scale_net,
            translate_net,
            scale_bound,
        })
    }

    pub fn mask(&self) -> &[f64] {
        self.mask.data()
    }

    pub fn scale_bound(&self) -> f64 {
        self.scale_bound
    }

    /// Indices of the coordinates this layer rescales.
    pub fn transformed_coords(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.mask.data()[i] == 0.0).collect()
    }

    /// Log-scale and shift for a batch, both zero on pass-through coordinates.
    pub fn conditioner<B: Backend>(
        &self,
        b: &mut B,
        params: &ParamStore,
        input: &B::Value,
    ) -> Result<(B::Value, B::Value)> {
        let mask = b.constant(self.mask.clone());
        let comp = b.constant(self.complement.clone());
        let passed = b.mul(input, &mask)?;
        let raw = self.scale_net.forward(b, params, &passed)?;
        let squashed = b.tanh(&raw);
        let bounded = b.scale(&squashed, self.scale_bound);
        let log_scale = b.mul(&bounded, &comp)?;
        let shift = self.translate_net.forward(b, params, &passed)?;
        let shift = b.mul(&shift, &comp)?;
        Ok((log_scale, shift))
    }
}

impl InvertibleTransform for AffineCoupling {
    fn dim(&self) -> usize {
        self.mask.len()
    }

    fn forward<B: Backend>(
        &self,
        b: &mut B,
        params: &ParamStore,
        z: &B::Value,
    ) -> Result<(B::Value, B::Value)> {
        check_input(b.value(z), self.dim())?;
        let (s, t) = self.conditioner(b, params, z)?;
        let scale = b.exp(&s);
        let scaled = b.mul(z, &scale)?;
        let x = b.add(&scaled, &t)?;
        let log_det = b.sum_rows(&s)?;
        Ok((x, log_det))
    }

    fn inverse<B: Backend>(
        &self,
        b: &mut B,
        params: &ParamStore,
        x: &B::Value,
    ) -> Result<(B::Value, B::Value)> {
        check_input(b.value(x), self.dim())?;
        // pass-through coordinates of x equal those of z, so the conditioner
        // sees the same input as in the forward pass
        let (s, t) = self.conditioner(b, params, x)?;
        let neg = b.neg(&s);
        let inv_scale = b.exp(&neg);
        let shifted = b.sub(x, &t)?;
        let z = b.mul(&shifted, &inv_scale)?;
        let log_det = b.sum_rows(&neg)?;
        Ok((z, log_det))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_initialized_coupling_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamStore::new();
        let c = AffineCoupling::new(&mut p, "c", vec![1., 0., 1., 0.], &[8, 8], 2.0, &mut rng).unwrap();
        let z = Tensor::matrix(2, 4, vec![0.5, -1., 2., 3., 0., 0.1, -0.2, 7.]).unwrap();
        let (x, ld) = c.forward_eager(&p, &z).unwrap();
        assert_eq!(x, z);
        assert_eq!(ld.data(), &[0.0, 0.0]);
    }

    #[test]
    fn constant_log_scale_gives_known_log_det() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamStore::new();
        let c = AffineCoupling::new(&mut p, "c", vec![1., 1., 0., 0.], &[4], 2.0, &mut rng).unwrap();
        // with a zero output weight, the head bias alone sets the raw scale
        let raw = (2f64.ln() / 2.0).atanh();
        p.set(c.scale_net.output_layer().bias, Tensor::vector(vec![raw; 4])).unwrap();
        let z = Tensor::matrix(1, 4, vec![0.3, -0.7, 1.0, -2.0]).unwrap();
        let (x, ld) = c.forward_eager(&p, &z).unwrap();
        assert!((ld.data()[0] - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((ld.data()[0] - 1.38629).abs() < 1e-5);
        assert!((x.data()[2] - 2.0).abs() < 1e-12);
        assert!((x.data()[3] + 4.0).abs() < 1e-12);
        assert_eq!(&x.data()[..2], &[0.3, -0.7]);
    }

    #[test]
    fn emitted_log_scales_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamStore::new();
        let c = AffineCoupling::new(&mut p, "c", vec![1., 0., 0.], &[16], 0.5, &mut rng).unwrap();
        p.perturb(&mut rng, 5.0);
        let z = Tensor::matrix(2, 3, vec![10., -3., 4., -20., 0.5, 9.]).unwrap();
        let (s, _) = c.conditioner(&mut crate::autodiff::Eager, &p, &z).unwrap();
        assert!(s.data().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn rejects_degenerate_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ParamStore::new();
        assert!(AffineCoupling::new(&mut p, "c", vec![1., 1.], &[4], 2.0, &mut rng).is_err());
        assert!(AffineCoupling::new(&mut p, "c", vec![0., 0.], &[4], 2.0, &mut rng).is_err());
        assert!(AffineCoupling::new(&mut p, "c", vec![0.5, 0.], &[4], 2.0, &mut rng).is_err());
    }
}
