//! Binary checkpoints holding a model and, optionally, its two critics.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes   "AFLOWCK1"
//! version   u32
//! meta_len  u64       byte length of the JSON metadata that follows
//! meta      UTF-8 JSON (CheckpointMeta)
//! count     u64       number of parameters that follow
//! params    count x f64
//! ```
//!
//! Parameters are stored in construction order: every model parameter, then
//! critic A, then critic B. Layer structure (masks, shuffle permutations) is
//! not stored; it is rebuilt deterministically from the architecture and the
//! seed recorded in the metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::ArchSpec;
use crate::model::{AlignFlowModel, SharingSpec};
use crate::objective::{CriticSpec, Critics, HybridObjectiveConfig};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"AFLOWCK1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub arch: ArchSpec,
    pub sharing: SharingSpec,
    pub objective: HybridObjectiveConfig,
    pub train: TrainConfig,
    /// Present when the checkpoint carries critic parameters.
    pub critic: Option<CriticSpec>,
    /// Number of completed training epochs.
    pub epoch: usize,
    /// Seed the model and critics were constructed from.
    pub seed: u64,
    pub data_initialized: bool,
    pub model_params: usize,
    pub critic_params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<f64>,
}

impl Checkpoint {
    /// Snapshots a model and optional critics. Models built with
    /// [`AlignFlowModel::with_latent_permutation`] cannot be rebuilt from
    /// their seed and are refused.
    pub fn capture(
        model: &AlignFlowModel,
        critics: Option<(&Critics, &CriticSpec)>,
        objective: &HybridObjectiveConfig,
        train: &TrainConfig,
        epoch: usize,
    ) -> Result<Self> {
        let layers = model.arch.num_layers();
        if model.flow_a.len() != layers || model.flow_b.len() != layers {
            return Err(Error::Unsupported(
                "checkpointing a model whose layers differ from its architecture".into(),
            ));
        }
        let mut params = model.params.flatten();
        let model_params = params.len();
        let mut critic_params = 0;
        if let Some((c, _)) = critics {
            if c.a.dim() != model.dim() {
                return Err(Error::Dimension {
                    expected: model.dim(),
                    got: c.a.dim(),
                });
            }
            params.extend(c.a.params.flatten());
            params.extend(c.b.params.flatten());
            critic_params = params.len() - model_params;
        }
        Ok(Self {
            meta: CheckpointMeta {
                arch: model.arch.clone(),
                sharing: model.sharing,
                objective: objective.clone(),
                train: train.clone(),
                critic: critics.map(|(_, spec)| spec.clone()),
                epoch,
                seed: model.seed,
                data_initialized: model.is_data_initialized(),
                model_params,
                critic_params,
            },
            params,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(28 + meta.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.len_prefix()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let count = r.len_prefix()?;
        if count != meta.model_params + meta.critic_params {
            return Err(Error::Format(format!(
                "header declares {} parameters, metadata {} + {}",
                count, meta.model_params, meta.critic_params
            )));
        }
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Format("parameter count overflows".into()))?)?;
        let params = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the model and overwrites its parameters.
    pub fn model(&self) -> Result<AlignFlowModel> {
        let mut model = AlignFlowModel::new(&self.meta.arch, self.meta.sharing, self.meta.seed)?;
        if model.params.scalar_count() != self.meta.model_params {
            return Err(Error::Format(format!(
                "architecture has {} parameters, checkpoint {}",
                model.params.scalar_count(),
                self.meta.model_params
            )));
        }
        model.params.load_flat(&self.params[..self.meta.model_params])?;
        if self.meta.data_initialized {
            model.mark_data_initialized();
        }
        Ok(model)
    }

    /// Rebuilds the critics, if the checkpoint has them.
    pub fn critics(&self) -> Result<Option<Critics>> {
        let Some(spec) = &self.meta.critic else {
            return Ok(None);
        };
        let mut critics = Critics::new(self.meta.arch.dim, spec, self.meta.seed)?;
        let na = critics.a.params.scalar_count();
        let nb = critics.b.params.scalar_count();
        if na + nb != self.meta.critic_params {
            return Err(Error::Format(format!(
                "critic spec has {} parameters, checkpoint {}",
                na + nb,
                self.meta.critic_params
            )));
        }
        let rest = &self.params[self.meta.model_params..];
        critics.a.params.load_flat(&rest[..na])?;
        critics.b.params.load_flat(&rest[na..])?;
        Ok(Some(critics))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn len_prefix(&mut self) -> Result<usize> {
        let n = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(n).map_err(|_| Error::Format("length does not fit in memory".into()))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Tensor;
    use crate::model::Domain;

    fn trained_like(sharing: SharingSpec) -> (AlignFlowModel, Critics, CriticSpec) {
        let arch = ArchSpec::new(3, 2, 8);
        let mut m = AlignFlowModel::new(&arch, sharing, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin() * 2.0 + 1.0).collect()).unwrap();
        m.data_init(&batch, &batch.map(|v| v * 0.5)).unwrap();
        m.params.perturb(&mut rng, 0.2);
        let spec = CriticSpec {
            hidden_width: 6,
            hidden_layers: 2,
            ..CriticSpec::default()
        };
        let mut c = Critics::new(3, &spec, 11).unwrap();
        c.a.params.perturb(&mut rng, 0.1);
        c.b.params.perturb(&mut rng, 0.1);
        (m, c, spec)
    }

    fn probe() -> Tensor {
        Tensor::matrix(5, 3, (0..15).map(|i| (i as f64 * 1.3).cos() * 1.5).collect()).unwrap()
    }

    #[test]
    fn byte_round_trip_and_exact_log_prob() {
        for sharing in [SharingSpec::None, SharingSpec::Prefix(2), SharingSpec::Full] {
            let (m, c, spec) = trained_like(sharing);
            let ck = Checkpoint::capture(&m, Some((&c, &spec)), &Default::default(), &Default::default(), 7).unwrap();
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);

            let m2 = back.model().unwrap();
            assert!(m2.is_data_initialized());
            for d in [Domain::A, Domain::B] {
                assert_eq!(m.log_prob(&probe(), d).unwrap(), m2.log_prob(&probe(), d).unwrap());
            }
            let c2 = back.critics().unwrap().unwrap();
            assert_eq!(c2.a.predict(&probe()).unwrap(), c.a.predict(&probe()).unwrap());
            assert_eq!(c2.b.predict(&probe()).unwrap(), c.b.predict(&probe()).unwrap());

            let again = Checkpoint::capture(&m2, Some((&c2, &spec)), &Default::default(), &Default::default(), 7).unwrap();
            assert_eq!(again.to_bytes(), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let (m, _, _) = trained_like(SharingSpec::None);
        let ck = Checkpoint::capture(&m, None, &Default::default(), &Default::default(), 0).unwrap();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], b"AFLOWCK1");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&bytes[20..20 + meta_len]).unwrap();
        for key in ["arch", "sharing", "objective", "train", "epoch", "seed"] {
            assert!(meta.get(key).is_some(), "{key}");
        }
        let count = u64::from_le_bytes(bytes[20 + meta_len..28 + meta_len].try_into().unwrap()) as usize;
        assert_eq!(count, m.params.scalar_count());
        assert_eq!(bytes.len(), 28 + meta_len + 8 * count);
        assert!(Checkpoint::from_bytes(&bytes).unwrap().critics().unwrap().is_none());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (m, _, _) = trained_like(SharingSpec::None);
        let bytes = Checkpoint::capture(&m, None, &Default::default(), &Default::default(), 0)
            .unwrap()
            .to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }

    #[test]
    fn permuted_models_are_refused() {
        let (m, _, _) = trained_like(SharingSpec::None);
        let p = m.with_latent_permutation(&[2, 0, 1]).unwrap();
        let err = Checkpoint::capture(&p, None, &Default::default(), &Default::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }
}
