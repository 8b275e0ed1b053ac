//! Two flows decoding one shared latent space into domains A and B.
//!
//! `flow_a` maps latent `z` to domain A and `flow_b` maps the same `z` to
//! domain B. Cross-domain translation inverts one flow and applies the other,
//! so `A -> B -> A` is the identity up to floating-point round-off for every
//! parameter setting.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eager, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::flow::{build::build_flow_with_prefix, build_flow_into};
use crate::flow::{ArchSpec, FlowSequence, InvertibleTransform, Layer, Shuffle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

/// Which layers the two flows have in common.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingSpec {
    #[default]
    None,
    /// Both flows use the very same layers and parameters.
    Full,
    /// The first `k` layers on the latent side are shared.
    Prefix(usize),
}

/// Zero-mean, unit-variance Gaussian over the latent space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IsotropicGaussian {
    pub dim: usize,
}

impl IsotropicGaussian {
    /// Per-row log-density of an `[n, dim]` batch.
    pub fn log_density<B: Backend>(&self, b: &mut B, z: &B::Value) -> Result<B::Value> {
        let sq = b.square(z);
        let ss = b.sum_rows(&sq)?;
        let half = b.scale(&ss, -0.5);
        Ok(b.add_scalar(&half, -0.5 * self.dim as f64 * (2.0 * PI).ln()))
    }

    pub fn sample(&self, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Tensor::matrix(n, self.dim, data).expect("consistent shape")
    }

    /// Differential entropy, `d/2 * (1 + ln 2 pi)`.
    pub fn entropy(&self) -> f64 {
        0.5 * self.dim as f64 * (1.0 + (2.0 * PI).ln())
    }
}

/// One row of a latent interpolation.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationStep {
    pub phi: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AlignFlowModel {
    pub arch: ArchSpec,
    pub sharing: SharingSpec,
    pub seed: u64,
    pub params: ParamStore,
    pub flow_a: FlowSequence,
    pub flow_b: FlowSequence,
    pub prior: IsotropicGaussian,
}

impl AlignFlowModel {
    /// Builds both flows from one seed. Fresh flows are the identity map.
    pub fn new(arch: &ArchSpec, sharing: SharingSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let total = arch.num_layers();
        let shared = match sharing {
            SharingSpec::None => 0,
            SharingSpec::Full => total,
            SharingSpec::Prefix(k) if k <= total => k,
            SharingSpec::Prefix(k) => {
                return Err(Error::config(
                    "sharing.prefix",
                    format!("flows have {total} layers, cannot share {k}"),
                ))
            }
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let flow_a = build_flow_into(&mut params, arch, "a", &mut rng)?;

        let flow_b = build_flow_with_prefix(&mut params, arch, "b", &flow_a.layers()[..shared], &mut rng)?;

        Ok(Self {
            arch: arch.clone(),
            sharing,
            seed,
            params,
            flow_a,
            flow_b,
            prior: IsotropicGaussian { dim: arch.dim },
        })
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    pub fn shared_layers(&self) -> usize {
        match self.sharing {
            SharingSpec::None => 0,
            SharingSpec::Full => self.flow_a.len(),
            SharingSpec::Prefix(k) => k,
        }
    }

    pub fn flow(&self, domain: Domain) -> &FlowSequence {
        match domain {
            Domain::A => &self.flow_a,
            Domain::B => &self.flow_b,
        }
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// `G_{Z -> domain}` with its per-row log-det.
    pub fn decode<B: Backend>(&self, b: &mut B, z: &B::Value, domain: Domain) -> Result<(B::Value, B::Value)> {
        self.flow(domain).forward(b, &self.params, z)
    }

    /// `G_{domain -> Z}` with its per-row log-det.
    pub fn encode<B: Backend>(&self, b: &mut B, x: &B::Value, domain: Domain) -> Result<(B::Value, B::Value)> {
        self.flow(domain).inverse(b, &self.params, x)
    }

    /// Maps a batch from `from` into the other domain through the latent space.
    pub fn translate<B: Backend>(&self, b: &mut B, x: &B::Value, from: Domain) -> Result<B::Value> {
        let (z, _) = self.encode(b, x, from)?;
        Ok(self.decode(b, &z, from.other())?.0)
    }

    pub fn translate_a_to_b(&self, a: &Tensor) -> Result<Tensor> {
        self.check_batch(a)?;
        self.translate(&mut Eager, a, Domain::A)
    }

    pub fn translate_b_to_a(&self, b: &Tensor) -> Result<Tensor> {
        self.check_batch(b)?;
        self.translate(&mut Eager, b, Domain::B)
    }

    /// Per-row `log p(x)` under the model of `domain`.
    pub fn log_prob_with<B: Backend>(&self, b: &mut B, x: &B::Value, domain: Domain) -> Result<B::Value> {
        let (z, log_det) = self.encode(b, x, domain)?;
        let lp = self.prior.log_density(b, &z)?;
        b.add(&lp, &log_det)
    }

    pub fn log_prob(&self, x: &Tensor, domain: Domain) -> Result<Vec<f64>> {
        self.check_batch(x)?;
        Ok(self.log_prob_with(&mut Eager, x, domain)?.into_data())
    }

    /// Draws `z` from the prior and decodes it into both domains.
    pub fn sample_paired(&self, n: usize, seed: u64) -> Result<(Tensor, Tensor)> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        let z = self.prior.sample(n, seed);
        let (a, _) = self.decode(&mut Eager, &z, Domain::A)?;
        let (b, _) = self.decode(&mut Eager, &z, Domain::B)?;
        Ok((a, b))
    }

    /// Samples one domain only.
    pub fn sample(&self, n: usize, seed: u64, domain: Domain) -> Result<Tensor> {
        let z = self.prior.sample(n, seed);
        Ok(self.decode(&mut Eager, &z, domain)?.0)
    }

    /// Polar interpolation over `phi` in `[0, pi/2]`; see [`interpolate_range`](Self::interpolate_range).
    pub fn interpolate(&self, a1: &[f64], a2: &[f64], steps: usize) -> Result<Vec<InterpolationStep>> {
        self.interpolate_range(a1, a2, steps, 0.0, FRAC_PI_2)
    }

    /// Encodes `a1` and `a2`, and for `steps` evenly spaced angles between
    /// `phi_start` and `phi_end` (both included) decodes
    /// `z = z1 * sin(phi) + z2 * cos(phi)` into both domains.
    pub fn interpolate_range(
        &self,
        a1: &[f64],
        a2: &[f64],
        steps: usize,
        phi_start: f64,
        phi_end: f64,
    ) -> Result<Vec<InterpolationStep>> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "interpolation needs at least 2 steps, got {steps}"
            )));
        }
        let ends = Tensor::from_rows(&[a1, a2])?;
        self.check_batch(&ends)?;
        let (z, _) = self.encode(&mut Eager, &ends, Domain::A)?;
        let (z1, z2) = (z.row(0), z.row(1));
        let d = self.dim();
        let mut phis = Vec::with_capacity(steps);
        let mut zs = Vec::with_capacity(steps * d);
        for k in 0..steps {
            let phi = phi_start + (phi_end - phi_start) * k as f64 / (steps - 1) as f64;
            let (s, c) = phi.sin_cos();
            zs.extend(z1.iter().zip(z2).map(|(p, q)| p * s + q * c));
            phis.push(phi);
        }
        let zt = Tensor::matrix(steps, d, zs)?;
        let (a, _) = self.decode(&mut Eager, &zt, Domain::A)?;
        let (b, _) = self.decode(&mut Eager, &zt, Domain::B)?;
        Ok(phis
            .into_iter()
            .enumerate()
            .map(|(k, phi)| InterpolationStep {
                phi,
                a: a.row(k).to_vec(),
                b: b.row(k).to_vec(),
            })
            .collect())
    }

    /// Mean absolute error of `a -> b -> a` over all coordinates of the batch.
    pub fn cycle_loss(&self, batch_a: &Tensor) -> Result<f64> {
        self.cycle(batch_a, Domain::A)
    }

    /// Mean absolute error of `b -> a -> b`.
    pub fn cycle_loss_reverse(&self, batch_b: &Tensor) -> Result<f64> {
        self.cycle(batch_b, Domain::B)
    }

    fn cycle(&self, x: &Tensor, from: Domain) -> Result<f64> {
        self.check_batch(x)?;
        if x.rows() == 0 {
            return Err(Error::InvalidArgument("cycle loss of an empty batch".into()));
        }
        let there = self.translate(&mut Eager, x, from)?;
        let back = self.translate(&mut Eager, &there, from.other())?;
        let total: f64 = x.data().iter().zip(back.data()).map(|(p, q)| (p - q).abs()).sum();
        Ok(total / x.len() as f64)
    }

    /// Glow-style data-dependent ActNorm initialization from one batch per domain.
    pub fn data_init(&mut self, batch_a: &Tensor, batch_b: &Tensor) -> Result<()> {
        self.flow_a.data_init(&mut self.params, batch_a, 0)?;
        let shared = self.shared_layers();
        self.flow_b.data_init(&mut self.params, batch_b, shared)?;
        for i in 0..shared {
            self.flow_b.layers_mut()[i] = self.flow_a.layers()[i].clone();
        }
        Ok(())
    }

    pub fn is_data_initialized(&self) -> bool {
        self.flow_a.is_data_initialized() && self.flow_b.is_data_initialized()
    }

    pub(crate) fn mark_data_initialized(&mut self) {
        self.flow_a.mark_data_initialized();
        self.flow_b.mark_data_initialized();
    }

    /// Copy whose A-decoder first permutes the latent coordinates,
    /// `G'_{Z -> A} = G_{Z -> A} . S`. The B-decoder is untouched.
    pub fn with_latent_permutation(&self, perm: &[usize]) -> Result<Self> {
        let shuffle = Shuffle::new(perm.to_vec())?;
        if shuffle.perm().len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: perm.len(),
            });
        }
        let mut out = self.clone();
        out.flow_a = self.flow_a.prepend(Layer::Shuffle(shuffle))?;
        // params are cloned into a new store; layer handles remain valid
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(dim: usize) -> ArchSpec {
        ArchSpec::new(dim, 2, 8)
    }

    #[test]
    fn standard_normal_at_origin() {
        let m = AlignFlowModel::new(&arch(2), SharingSpec::None, 0).unwrap();
        let lp = m.log_prob(&Tensor::zeros(&[1, 2]), Domain::A).unwrap();
        assert!((lp[0] + (2.0 * PI).ln()).abs() < 1e-14);
        assert!((lp[0] + 1.83788).abs() < 1e-5);
    }

    #[test]
    fn full_sharing_translates_to_self() {
        let mut m = AlignFlowModel::new(&arch(3), SharingSpec::Full, 4).unwrap();
        m.params.perturb(&mut ChaCha8Rng::seed_from_u64(1), 0.3);
        let a = Tensor::matrix(2, 3, vec![0.1, 0.5, -1.0, 2.0, -0.3, 0.0]).unwrap();
        let b = m.translate_a_to_b(&a).unwrap();
        assert!(b.max_abs_diff(&a).unwrap() < 1e-12);
        let (sa, sb) = m.sample_paired(5, 2).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn prefix_sharing_reuses_parameters() {
        let spec = arch(2);
        let none = AlignFlowModel::new(&spec, SharingSpec::None, 1).unwrap();
        let part = AlignFlowModel::new(&spec, SharingSpec::Prefix(3), 1).unwrap();
        let full = AlignFlowModel::new(&spec, SharingSpec::Full, 1).unwrap();
        assert!(part.params.len() < none.params.len());
        assert!(full.params.len() < part.params.len());
        assert!(AlignFlowModel::new(&spec, SharingSpec::Prefix(99), 1).is_err());
    }

    #[test]
    fn fresh_model_translation_is_identity() {
        let m = AlignFlowModel::new(&arch(4), SharingSpec::None, 8).unwrap();
        let a = Tensor::matrix(1, 4, vec![1.0, -2.0, 0.25, 3.0]).unwrap();
        assert_eq!(m.translate_a_to_b(&a).unwrap(), a);
        assert_eq!(m.translate_b_to_a(&a).unwrap(), a);
        let (sa, sb) = m.sample_paired(4, 3).unwrap();
        let z = m.prior.sample(4, 3);
        assert_eq!(sa, z);
        assert_eq!(sb, z);
        assert_eq!(m.cycle_loss(&a).unwrap(), 0.0);
    }

    #[test]
    fn dimension_and_count_errors() {
        let m = AlignFlowModel::new(&arch(2), SharingSpec::None, 0).unwrap();
        let wrong = Tensor::zeros(&[1, 3]);
        assert!(matches!(m.translate_a_to_b(&wrong), Err(Error::Dimension { .. })));
        assert!(matches!(m.log_prob(&wrong, Domain::B), Err(Error::Dimension { .. })));
        assert!(m.sample_paired(0, 0).is_err());
        assert!(m.interpolate(&[0.0, 0.0], &[1.0, 1.0], 1).is_err());
        assert!(m.cycle_loss(&Tensor::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn interpolation_endpoints() {
        let mut m = AlignFlowModel::new(&arch(2), SharingSpec::None, 5).unwrap();
        m.params.perturb(&mut ChaCha8Rng::seed_from_u64(9), 0.2);
        let (a1, a2) = ([0.3, -0.4], [-1.0, 0.8]);
        let steps = m.interpolate(&a1, &a2, 5).unwrap();
        assert_eq!(steps.len(), 5);
        assert_eq!(steps[0].phi, 0.0);
        assert_eq!(steps[4].phi, FRAC_PI_2);
        for (got, want) in steps[0].a.iter().zip(&a2) {
            assert!((got - want).abs() < 1e-9);
        }
        for (got, want) in steps[4].a.iter().zip(&a1) {
            assert!((got - want).abs() < 1e-9);
        }
        let b1 = m.translate_a_to_b(&Tensor::from_rows(&[a1]).unwrap()).unwrap();
        for (got, want) in steps[4].b.iter().zip(b1.data()) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn latent_permutation_keeps_likelihood() {
        let mut m = AlignFlowModel::new(&arch(2), SharingSpec::None, 6).unwrap();
        m.params.perturb(&mut ChaCha8Rng::seed_from_u64(2), 0.3);
        let p = m.with_latent_permutation(&[1, 0]).unwrap();
        let x = Tensor::matrix(3, 2, vec![0.2, 1.0, -0.7, 0.4, 2.0, -1.5]).unwrap();
        for dom in [Domain::A, Domain::B] {
            let l0 = m.log_prob(&x, dom).unwrap();
            let l1 = p.log_prob(&x, dom).unwrap();
            for (u, v) in l0.iter().zip(&l1) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        assert!(m.with_latent_permutation(&[0, 0]).is_err());
        assert!(m.with_latent_permutation(&[0, 1, 2]).is_err());
    }
}
