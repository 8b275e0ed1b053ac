//! Invertible layers with tractable log-determinants and their composition.
//!
//! Every transform maps a batch `[n, d]` in the latent-to-data direction with
//! [`InvertibleTransform::forward`] and back with
//! [`InvertibleTransform::inverse`]. Both return the transformed batch and a
//! length-`n` vector of per-row `log |det J|` of the map that was applied, so
//! `inverse` reports the negation of the matching `forward` value.

mod actnorm;
pub(crate) mod build;
mod coupling;
mod shuffle;

pub use actnorm::{ActNorm, ActNormState};
pub use build::{build_flow, build_flow_into, ArchSpec};
pub use coupling::AffineCoupling;
pub use shuffle::Shuffle;

use crate::autodiff::{Backend, Eager, ParamStore, Tensor};
use crate::error::{Error, Result};

pub trait InvertibleTransform {
    /// Coordinate dimension the transform acts on.
    fn dim(&self) -> usize;

    fn forward<B: Backend>(
        &self,
        b: &mut B,
        params: &ParamStore,
        z: &B::Value,
    ) -> Result<(B::Value, B::Value)>;

    fn inverse<B: Backend>(
        &self,
        b: &mut B,
        params: &ParamStore,
        x: &B::Value,
    ) -> Result<(B::Value, B::Value)>;

    fn forward_eager(&self, params: &ParamStore, z: &Tensor) -> Result<(Tensor, Tensor)> {
        self.forward(&mut Eager, params, z)
    }

    fn inverse_eager(&self, params: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.inverse(&mut Eager, params, x)
    }
}

pub(crate) fn check_input(t: &Tensor, dim: usize) -> Result<usize> {
    if t.rank() != 2 {
        return Err(Error::shape("flow input", t.shape(), &[0, dim]));
    }
    if t.cols() != dim {
        return Err(Error::Dimension {
            expected: dim,
            got: t.cols(),
        });
    }
    Ok(t.rows())
}

/// One layer of a [`FlowSequence`].
#[derive(Clone, Debug)]
pub enum Layer {
    ActNorm(ActNorm),
    Coupling(AffineCoupling),
    Shuffle(Shuffle),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::ActNorm(_) => "actnorm",
            Layer::Coupling(_) => "coupling",
            Layer::Shuffle(_) => "shuffle",
        }
    }
}

impl InvertibleTransform for Layer {
    fn dim(&self) -> usize {
        match self {
            Layer::ActNorm(l) => l.dim(),
            Layer::Coupling(l) => l.dim(),
            Layer::Shuffle(l) => l.dim(),
        }
    }

    fn forward<B: Backend>(
        &self,
        b: &mut B,
        params: &ParamStore,
        z: &B::Value,
    ) -> Result<(B::Value, B::Value)> {
        match self {
            Layer::ActNorm(l) => l.forward(b, params, z),
            Layer::Coupling(l) => l.forward(b, params, z),
            Layer::Shuffle(l) => l.forward(b, params, z),
        }
    }

    fn inverse<B: Backend>(
        &self,
        b: &mut B,
        params: &ParamStore,
        x: &B::Value,
    ) -> Result<(B::Value, B::Value)> {
        match self {
            Layer::ActNorm(l) => l.inverse(b, params, x),
            Layer::Coupling(l) => l.inverse(b, params, x),
            Layer::Shuffle(l) => l.inverse(b, params, x),
        }
    }
}

/// Ordered composition of invertible layers.
#[derive(Clone, Debug)]
pub struct FlowSequence {
    dim: usize,
    layers: Vec<Layer>,
}

impl FlowSequence {
    pub fn new(dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if let Some(l) = layers.iter().find(|l| l.dim() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                got: l.dim(),
            });
        }
        Ok(Self { dim, layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Returns a copy with `layer` applied before every existing layer.
    pub fn prepend(&self, layer: Layer) -> Result<Self> {
        let mut layers = Vec::with_capacity(self.layers.len() + 1);
        layers.push(layer);
        layers.extend(self.layers.iter().cloned());
        Self::new(self.dim, layers)
    }

    /// Data-dependent ActNorm initialization.
    ///
    /// Walks from the data side towards the latent side, pushing `data`
    /// through each layer's inverse. Every ActNorm at index `>= skip_below`
    /// that has not seen data yet is initialized from the activations reaching
    /// it, so that its inverse output is standardized per coordinate.
    pub fn data_init(&mut self, params: &mut ParamStore, data: &Tensor, skip_below: usize) -> Result<()> {
        check_input(data, self.dim)?;
        let mut h = data.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            if let Layer::ActNorm(an) = layer {
                if i >= skip_below && an.state() != ActNormState::DataInitialized {
                    an.initialize(params, &h)?;
                }
            }
            h = layer.inverse_eager(params, &h).map_err(|e| annotate(e, i))?.0;
        }
        Ok(())
    }

    /// Marks ActNorm layers whose parameters already carry data statistics.
    pub fn mark_data_initialized(&mut self) {
        for layer in &mut self.layers {
            if let Layer::ActNorm(an) = layer {
                an.mark_data_initialized();
            }
        }
    }

    pub fn is_data_initialized(&self) -> bool {
        self.layers.iter().all(|l| match l {
            Layer::ActNorm(an) => an.state() == ActNormState::DataInitialized,
            _ => true,
        })
    }
}

fn annotate(e: Error, layer: usize) -> Error {
    match e {
        Error::NotInitialized { kind, .. } => Error::NotInitialized { layer, kind },
        other => other,
    }
}

impl InvertibleTransform for FlowSequence {
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
        let mut h = z.clone();
        let mut log_det = b.constant(Tensor::zeros(&[n]));
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, ld) = layer.forward(b, params, &h).map_err(|e| annotate(e, i))?;
            log_det = b.add(&log_det, &ld)?;
            h = next;
        }
        Ok((h, log_det))
    }

    fn inverse<B: Backend>(
        &self,
        b: &mut B,
        params: &ParamStore,
        x: &B::Value,
    ) -> Result<(B::Value, B::Value)> {
        let n = check_input(b.value(x), self.dim)?;
        let mut h = x.clone();
        let mut log_det = b.constant(Tensor::zeros(&[n]));
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (next, ld) = layer.inverse(b, params, &h).map_err(|e| annotate(e, i))?;
            log_det = b.add(&log_det, &ld)?;
            h = next;
        }
        Ok((h, log_det))
    }
}
