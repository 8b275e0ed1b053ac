use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ActNorm, AffineCoupling, FlowSequence, InvertibleTransform, Layer, Shuffle};
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

/// Architecture of one flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSpec {
    pub dim: usize,
    /// Number of coupling layers.
    pub depth: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub scale_bound: f64,
    pub actnorm: bool,
    pub shuffle: bool,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            dim: 2,
            depth: 6,
            hidden_width: 64,
            hidden_layers: 2,
            scale_bound: 2.0,
            actnorm: true,
            shuffle: true,
        }
    }
}

impl ArchSpec {
    pub fn new(dim: usize, depth: usize, hidden_width: usize) -> Self {
        Self {
            dim,
            depth,
            hidden_width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::config("arch.dim", "coupling layers need dim >= 2"));
        }
        if self.depth == 0 {
            return Err(Error::config("arch.depth", "must be at least 1"));
        }
        if self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(Error::config("arch.hidden_width", "conditioner nets need a hidden layer"));
        }
        if !(self.scale_bound > 0.0 && self.scale_bound.is_finite()) {
            return Err(Error::config("arch.scale_bound", "must be positive and finite"));
        }
        Ok(())
    }

    /// `(step, slot)` of every layer in latent-to-data order; see
    /// [`build_flow_into`].
    pub(crate) fn layer_plan(&self) -> Vec<(usize, usize)> {
        let mut plan = Vec::new();
        for step in 0..self.depth {
            plan.push((step, 0));
            if self.shuffle {
                plan.push((step, 1));
            }
            if self.actnorm {
                plan.push((step, 2));
            }
        }
        plan
    }

    pub fn num_layers(&self) -> usize {
        self.depth * (1 + usize::from(self.shuffle) + usize::from(self.actnorm))
    }

    /// Mask of coupling `step`: even steps pass even coordinates, odd steps
    /// pass odd coordinates.
    pub fn mask(&self, step: usize) -> Vec<f64> {
        (0..self.dim)
            .map(|j| if (j + step) % 2 == 0 { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Builds a flow into an existing store. Each step, in latent-to-data order,
/// is `coupling -> shuffle -> actnorm`, so along the data-to-latent path every
/// coupling is preceded by activation normalization. Coupling heads are zero,
/// ActNorms start at identity and the last shuffle undoes the earlier ones, so
/// a fresh flow is exactly the identity.
pub fn build_flow_into<R: Rng + ?Sized>(
    params: &mut ParamStore,
    spec: &ArchSpec,
    name: &str,
    rng: &mut R,
) -> Result<FlowSequence> {
    build_flow_with_prefix(params, spec, name, &[], rng)
}

/// Like [`build_flow_into`], but reuses `prefix` as the first layers of the
/// plan, parameters included.
///
/// Coupling masks alternate by step parity, measured in latent coordinates:
/// when the shuffles so far would make a coupling transform exactly the
/// coordinates its predecessor transformed, its mask is flipped. In two
/// dimensions this keeps the couplings strictly alternating whatever the
/// random shuffles are.
pub(crate) fn build_flow_with_prefix<R: Rng + ?Sized>(
    params: &mut ParamStore,
    spec: &ArchSpec,
    name: &str,
    prefix: &[Layer],
    rng: &mut R,
) -> Result<FlowSequence> {
    spec.validate()?;
    let hidden = vec![spec.hidden_width; spec.hidden_layers];
    // label[j] = latent coordinate held by column j before the next layer
    let mut label: Vec<usize> = (0..spec.dim).collect();
    let mut previous: Option<Vec<usize>> = None;
    let transformed = |mask: &[f64], label: &[usize]| {
        let mut set: Vec<usize> = (0..mask.len()).filter(|&j| mask[j] == 0.0).map(|j| label[j]).collect();
        set.sort_unstable();
        set
    };

    let mut layers = Vec::with_capacity(spec.num_layers());
    for (i, (step, slot)) in spec.layer_plan().into_iter().enumerate() {
        let layer = if let Some(shared) = prefix.get(i) {
            shared.clone()
        } else if slot == 0 {
            let mut mask = spec.mask(step);
            if previous.as_deref() == Some(transformed(&mask, &label).as_slice()) {
                mask = spec.mask(step + 1);
            }
            Layer::Coupling(AffineCoupling::new(
                params,
                &format!("{name}.{step}.coupling"),
                mask,
                &hidden,
                spec.scale_bound,
                rng,
            )?)
        } else {
            build_step_layer(params, spec, name, step, slot, rng)
        };
        match &layer {
            Layer::Coupling(c) => previous = Some(transformed(c.mask(), &label)),
            Layer::Shuffle(s) => label = s.perm().iter().map(|&p| label[p]).collect(),
            Layer::ActNorm(_) => {}
        }
        layers.push(layer);
    }
    let mut flow = FlowSequence::new(spec.dim, layers)?;
    close_permutation(&mut flow)?;
    Ok(flow)
}

/// Replaces the last shuffle with the inverse of the composition of all
/// earlier shuffles, so the shuffles of the flow multiply to the identity.
pub(crate) fn close_permutation(flow: &mut FlowSequence) -> Result<()> {
    let dim = flow.dim();
    let Some(last) = flow.layers().iter().rposition(|l| matches!(l, Layer::Shuffle(_))) else {
        return Ok(());
    };
    // composed[j] = source column of output column j after the shuffles so far
    let mut composed: Vec<usize> = (0..dim).collect();
    for layer in &flow.layers()[..last] {
        if let Layer::Shuffle(s) = layer {
            composed = s.perm().iter().map(|&p| composed[p]).collect();
        }
    }
    let mut closing = vec![0; dim];
    for (j, &src) in composed.iter().enumerate() {
        closing[src] = j;
    }
    flow.layers_mut()[last] = Layer::Shuffle(Shuffle::new(closing)?);
    Ok(())
}

/// Builds the shuffle (`slot` 1) or ActNorm (`slot` 2) of step `step`.
fn build_step_layer<R: Rng + ?Sized>(
    params: &mut ParamStore,
    spec: &ArchSpec,
    name: &str,
    step: usize,
    slot: usize,
    rng: &mut R,
) -> Layer {
    if slot == 1 {
        Layer::Shuffle(Shuffle::random(spec.dim, rng))
    } else {
        let mut an = ActNorm::new(params, &format!("{name}.{step}.actnorm"), spec.dim);
        an.mark_identity();
        Layer::ActNorm(an)
    }
}

/// Builds a standalone flow with its own parameter store.
pub fn build_flow(spec: &ArchSpec, seed: u64) -> Result<(ParamStore, FlowSequence)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let flow = build_flow_into(&mut params, spec, "flow", &mut rng)?;
    Ok((params, flow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::flow::InvertibleTransform;

    #[test]
    fn fresh_flow_is_identity() {
        let (p, flow) = build_flow(&ArchSpec::new(2, 6, 16), 3).unwrap();
        let z = Tensor::matrix(3, 2, vec![0.1, -2.0, 3.5, 0.0, -1.25, 8.0]).unwrap();
        let (x, ld) = flow.forward_eager(&p, &z).unwrap();
        assert_eq!(x, z);
        assert!(ld.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equal_seeds_give_equal_parameters() {
        let spec = ArchSpec::new(4, 3, 8);
        let (mut p1, f1) = build_flow(&spec, 9).unwrap();
        let (mut p2, f2) = build_flow(&spec, 9).unwrap();
        assert_eq!(p1.flatten(), p2.flatten());
        for (a, b) in f1.layers().iter().zip(f2.layers()) {
            if let (Layer::Shuffle(x), Layer::Shuffle(y)) = (a, b) {
                assert_eq!(x, y);
            }
        }
        p1.perturb(&mut ChaCha8Rng::seed_from_u64(1), 0.1);
        p2.perturb(&mut ChaCha8Rng::seed_from_u64(1), 0.1);
        assert_eq!(p1.flatten(), p2.flatten());
    }

    #[test]
    fn every_coordinate_is_transformed_somewhere() {
        let spec = ArchSpec::new(16, 8, 8);
        let (_, flow) = build_flow(&spec, 5).unwrap();
        // label[j] = latent coordinate currently stored in column j
        let mut label: Vec<usize> = (0..16).collect();
        let mut covered = vec![false; 16];
        for layer in flow.layers() {
            match layer {
                Layer::Coupling(c) => {
                    for j in c.transformed_coords() {
                        covered[label[j]] = true;
                    }
                }
                Layer::Shuffle(s) => label = s.perm().iter().map(|&p| label[p]).collect(),
                Layer::ActNorm(_) => {}
            }
        }
        assert!(covered.iter().all(|&c| c), "{covered:?}");
        assert_eq!(label, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn planar_couplings_alternate_despite_shuffles() {
        for seed in 0..20 {
            let (_, flow) = build_flow(&ArchSpec::new(2, 6, 4), seed).unwrap();
            let mut label = vec![0, 1];
            let mut hits = Vec::new();
            for layer in flow.layers() {
                match layer {
                    Layer::Coupling(c) => hits.push(label[c.transformed_coords()[0]]),
                    Layer::Shuffle(s) => label = s.perm().iter().map(|&p| label[p]).collect(),
                    Layer::ActNorm(_) => {}
                }
            }
            assert!(hits.windows(2).all(|w| w[0] != w[1]), "seed {seed}: {hits:?}");
        }
    }

    #[test]
    fn rejects_one_dimensional_flows() {
        assert!(matches!(
            build_flow(&ArchSpec::new(1, 2, 4), 0),
            Err(Error::Config { .. })
        ));
    }
}
