use rand::seq::SliceRandom;
use rand::Rng;

use super::{check_input, InvertibleTransform};
use crate::autodiff::{Backend, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Fixed coordinate permutation: output column `j` is input column `perm[j]`.
/// Volume preserving, so its log-det is exactly zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shuffle {
    perm: Vec<usize>,
    inverse_perm: Vec<usize>,
}

impl Shuffle {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut inverse_perm = vec![usize::MAX; perm.len()];
        for (j, &src) in perm.iter().enumerate() {
            if src >= perm.len() || inverse_perm[src] != usize::MAX {
                return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation")));
            }
            inverse_perm[src] = j;
        }
        Ok(Self { perm, inverse_perm })
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(rng);
        Self::new(perm).expect("shuffled range is a permutation")
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inverse_perm(&self) -> &[usize] {
        &self.inverse_perm
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(j, &p)| j == p)
    }
}

impl InvertibleTransform for Shuffle {
    fn dim(&self) -> usize {
        self.perm.len()
    }

    fn forward<B: Backend>(
        &self,
        b: &mut B,
        _params: &ParamStore,
        z: &B::Value,
    ) -> Result<(B::Value, B::Value)> {
        let n = check_input(b.value(z), self.dim())?;
        let x = b.gather_cols(z, &self.perm)?;
        Ok((x, b.constant(Tensor::zeros(&[n]))))
    }

    fn inverse<B: Backend>(
        &self,
        b: &mut B,
        _params: &ParamStore,
        x: &B::Value,
    ) -> Result<(B::Value, B::Value)> {
        let n = check_input(b.value(x), self.dim())?;
        let z = b.gather_cols(x, &self.inverse_perm)?;
        Ok((z, b.constant(Tensor::zeros(&[n]))))
    }
}
