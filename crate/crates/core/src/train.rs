//! Alternating critic / generator optimization of the hybrid objective.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_gradients, Adam, AdamConfig, Backend, Eager, GradMap, Tape, Tensor};
use crate::error::{Error, Result};
use crate::eval::translation_mse;
use crate::model::{AlignFlowModel, Domain};
use crate::objective::{
    alignflow_objective, gan_loss, generator_loss, Critic, Critics, HybridObjectiveConfig, ObjectiveBreakdown,
};
use crate::synthetic::{UnpairedData, ValidationPairs};

/// Learning-rate schedule over epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    /// Constant until the given epoch, then linear decay towards zero at the
    /// end of training.
    LinearAfter(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: LrDecay,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound for generator updates that include a
    /// likelihood term.
    pub clip_norm: f64,
    pub seed: u64,
    pub critic_steps_per_gen_step: usize,
    /// Initialize ActNorm layers from data before the first update.
    pub data_init: bool,
    /// Rows per domain used for data initialization and epoch metrics.
    pub metrics_rows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            learning_rate: 2e-4,
            lr_decay: LrDecay::LinearAfter(100),
            beta1: 0.5,
            beta2: 0.999,
            weight_decay: 0.0,
            clip_norm: 10.0,
            seed: 0,
            critic_steps_per_gen_step: 1,
            data_init: true,
            metrics_rows: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive and finite"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("train.clip_norm", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.metrics_rows == 0 {
            return Err(Error::config("train.metrics_rows", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1", "Adam betas must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        Ok(())
    }

    /// Learning rate used throughout `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            LrDecay::LinearAfter(start) if epoch >= start && self.epochs > start => {
                let span = (self.epochs - start) as f64;
                self.learning_rate * (1.0 - (epoch - start) as f64 / span)
            }
            _ => self.learning_rate,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// One row of the metrics stream. Terms are evaluated on the first
/// `metrics_rows` training points of each domain after the epoch's updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub gan_a: f64,
    pub gan_b: f64,
    pub nll_a: f64,
    pub nll_b: f64,
    /// The objective under the run's configuration.
    pub total: f64,
    pub val_mse_ab: Option<f64>,
    pub val_mse_ba: Option<f64>,
}

/// Receiver of per-epoch metrics.
pub trait MetricsSink {
    fn record(&mut self, metrics: &EpochMetrics) -> Result<()>;
}

impl MetricsSink for Vec<EpochMetrics> {
    fn record(&mut self, metrics: &EpochMetrics) -> Result<()> {
        self.push(metrics.clone());
        Ok(())
    }
}

/// Discards every row.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &EpochMetrics) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub generator_steps: u64,
    pub critic_steps: u64,
    pub last: Option<EpochMetrics>,
}

fn check_data(model: &AlignFlowModel, critics: &Critics, data: &UnpairedData) -> Result<()> {
    for (x, name) in [(&data.a, "a"), (&data.b, "b")] {
        if x.rank() != 2 || x.rows() == 0 {
            return Err(Error::InvalidArgument(format!("training set {name} must be a non-empty matrix")));
        }
        if x.cols() != model.dim() {
            return Err(Error::Dimension {
                expected: model.dim(),
                got: x.cols(),
            });
        }
    }
    for c in [&critics.a, &critics.b] {
        if c.dim() != model.dim() {
            return Err(Error::Dimension {
                expected: model.dim(),
                got: c.dim(),
            });
        }
    }
    Ok(())
}

fn check_terms(b: &ObjectiveBreakdown, epoch: usize) -> Result<()> {
    let terms = [
        ("gan_a", b.gan_a),
        ("gan_b", b.gan_b),
        ("nll_a", b.nll_a),
        ("nll_b", b.nll_b),
        ("total", Some(b.total)),
    ];
    for (term, v) in terms {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: term.into(),
                    epoch,
                });
            }
        }
    }
    Ok(())
}

fn check_grads(g: &GradMap, term: &str, epoch: usize) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            term: term.into(),
            epoch,
        })
    }
}

/// One ascent step of a critic on its GAN value, with fakes held fixed.
fn critic_step(critic: &mut Critic, opt: &mut Adam, real: &Tensor, fake: &Tensor, epoch: usize) -> Result<f64> {
    let mut t = Tape::new();
    let (r, f) = (t.constant(real.clone()), t.constant(fake.clone()));
    let value = gan_loss(&mut t, critic, &r, &f)?;
    let v = t.value(&value).data()[0];
    if !v.is_finite() {
        let term = match critic.domain {
            Domain::A => "gan_a",
            Domain::B => "gan_b",
        };
        return Err(Error::NonFinite { term: term.into(), epoch });
    }
    let loss = t.neg(&value);
    let grads = t.backward(loss)?.for_store(&critic.params);
    check_grads(&grads, "critic gradient", epoch)?;
    opt.step(&mut critic.params, &grads)?;
    Ok(v)
}

/// The first `n` rows, or all rows if there are fewer.
fn head(x: &Tensor, n: usize) -> Tensor {
    let idx: Vec<usize> = (0..n.min(x.rows())).collect();
    x.select_rows(&idx)
}

/// Every term of the objective on the metric subsets, whether or not it is
/// part of the optimized objective, plus the configured total.
pub fn epoch_metrics(
    model: &AlignFlowModel,
    critics: &Critics,
    a: &Tensor,
    b: &Tensor,
    obj: &HybridObjectiveConfig,
    validation: Option<&ValidationPairs>,
    epoch: usize,
) -> Result<EpochMetrics> {
    let everything = HybridObjectiveConfig {
        lambda_a: 1.0,
        lambda_b: 1.0,
        mle_only: false,
        gan_a: true,
        gan_b: true,
        non_saturating: false,
    };
    let all = alignflow_objective(&mut Eager, model, critics, a, b, &everything)?.breakdown(&Eager, &everything);
    // same term order as the objective itself, so the total matches it exactly
    let configured = ObjectiveBreakdown {
        total: f64::NAN,
        gan_a: all.gan_a.filter(|_| obj.uses_gan_a()),
        gan_b: all.gan_b.filter(|_| obj.uses_gan_b()),
        nll_a: all.nll_a.filter(|_| obj.lambda_a > 0.0),
        nll_b: all.nll_b.filter(|_| obj.lambda_b > 0.0),
        lambda_a: obj.lambda_a,
        lambda_b: obj.lambda_b,
    };
    let (val_mse_ab, val_mse_ba) = match validation {
        Some(v) => {
            let (ab, ba) = translation_mse(model, &v.0)?;
            (Some(ab), Some(ba))
        }
        None => (None, None),
    };
    Ok(EpochMetrics {
        epoch,
        gan_a: all.gan_a.unwrap_or(f64::NAN),
        gan_b: all.gan_b.unwrap_or(f64::NAN),
        nll_a: all.nll_a.unwrap_or(f64::NAN),
        nll_b: all.nll_b.unwrap_or(f64::NAN),
        total: configured.recombine(),
        val_mse_ab,
        val_mse_ba,
    })
}

/// Trains `model` and `critics` in place.
///
/// Each minibatch runs `critic_steps_per_gen_step` ascent steps of both
/// critics on the GAN terms, then one descent step of the flows on the
/// objective. Only unpaired data enters the updates; the optional validation
/// pairs are used for reporting alone. Runs are deterministic for a fixed
/// seed.
pub fn train(
    model: &mut AlignFlowModel,
    critics: &mut Critics,
    data: &UnpairedData,
    validation: Option<&ValidationPairs>,
    cfg: &TrainConfig,
    obj: &HybridObjectiveConfig,
    sink: &mut dyn MetricsSink,
) -> Result<TrainSummary> {
    cfg.validate()?;
    obj.validate()?;
    check_data(model, critics, data)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (na, nb) = (data.a.rows(), data.b.rows());
    let mut perm_a: Vec<usize> = (0..na).collect();
    let mut perm_b: Vec<usize> = (0..nb).collect();

    if cfg.data_init && !model.is_data_initialized() {
        perm_a.shuffle(&mut rng);
        perm_b.shuffle(&mut rng);
        let init_a = data.a.select_rows(&perm_a[..cfg.metrics_rows.min(na)]);
        let init_b = data.b.select_rows(&perm_b[..cfg.metrics_rows.min(nb)]);
        model.data_init(&init_a, &init_b)?;
    }

    let mut gen_opt = Adam::new(&model.params, cfg.adam());
    let mut opt_a = Adam::new(&critics.a.params, cfg.adam());
    let mut opt_b = Adam::new(&critics.b.params, cfg.adam());
    let metric_a = head(&data.a, cfg.metrics_rows);
    let metric_b = head(&data.b, cfg.metrics_rows);

    let bs = cfg.batch_size.min(na.max(nb));
    let batches = na.max(nb).div_ceil(bs);
    let mut summary = TrainSummary {
        epochs: 0,
        generator_steps: 0,
        critic_steps: 0,
        last: None,
    };

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        for opt in [&mut gen_opt, &mut opt_a, &mut opt_b] {
            opt.set_learning_rate(lr);
        }
        perm_a.shuffle(&mut rng);
        perm_b.shuffle(&mut rng);

        for k in 0..batches {
            let ia: Vec<usize> = (0..bs).map(|j| perm_a[(k * bs + j) % na]).collect();
            let ib: Vec<usize> = (0..bs).map(|j| perm_b[(k * bs + j) % nb]).collect();
            let (batch_a, batch_b) = (data.a.select_rows(&ia), data.b.select_rows(&ib));

            if obj.uses_gan() {
                for _ in 0..cfg.critic_steps_per_gen_step {
                    if obj.uses_gan_a() {
                        let fake_a = model.translate_b_to_a(&batch_b)?;
                        critic_step(&mut critics.a, &mut opt_a, &batch_a, &fake_a, epoch)?;
                    }
                    if obj.uses_gan_b() {
                        let fake_b = model.translate_a_to_b(&batch_a)?;
                        critic_step(&mut critics.b, &mut opt_b, &batch_b, &fake_b, epoch)?;
                    }
                    summary.critic_steps += 1;
                }
            }

            let mut t = Tape::new();
            let (va, vb) = (t.constant(batch_a), t.constant(batch_b));
            let terms = generator_loss(&mut t, model, critics, &va, &vb, obj)?;
            check_terms(&terms.breakdown(&t, obj), epoch)?;
            let mut grads = t.backward(terms.total)?.for_store(&model.params);
            check_grads(&grads, "generator gradient", epoch)?;
            if obj.uses_mle() {
                grads = clip_gradients(&grads, cfg.clip_norm)?;
            }
            gen_opt.step(&mut model.params, &grads)?;
            summary.generator_steps += 1;
        }

        let m = epoch_metrics(model, critics, &metric_a, &metric_b, obj, validation, epoch)?;
        for (term, v) in [("nll_a", m.nll_a), ("nll_b", m.nll_b), ("total", m.total)] {
            if !v.is_finite() {
                return Err(Error::NonFinite { term: term.into(), epoch });
            }
        }
        sink.record(&m)?;
        summary.epochs = epoch + 1;
        summary.last = Some(m);
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::ArchSpec;
    use crate::model::SharingSpec;
    use crate::objective::CriticSpec;
    use crate::synthetic::DomainPairSpec;

    fn small() -> (AlignFlowModel, Critics, UnpairedData) {
        let model = AlignFlowModel::new(&ArchSpec::new(2, 2, 8), SharingSpec::None, 1).unwrap();
        let critics = Critics::new(
            2,
            &CriticSpec {
                hidden_width: 8,
                hidden_layers: 1,
                leaky_slope: 0.2,
            },
            2,
        )
        .unwrap();
        let spec = DomainPairSpec {
            n_train: 40,
            ..DomainPairSpec::default()
        };
        (model, critics, spec.generate().unwrap().train)
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn linear_decay_schedule() {
        let c = TrainConfig {
            epochs: 200,
            ..TrainConfig::default()
        };
        assert_eq!(c.learning_rate_at(0), 2e-4);
        assert_eq!(c.learning_rate_at(99), 2e-4);
        assert_eq!(c.learning_rate_at(100), 2e-4);
        assert!((c.learning_rate_at(150) - 1e-4).abs() < 1e-18);
        assert!(c.learning_rate_at(199) > 0.0);
        let flat = TrainConfig {
            lr_decay: LrDecay::Constant,
            ..c
        };
        assert_eq!(flat.learning_rate_at(199), 2e-4);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            clip_norm: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fixed_seed_gives_identical_parameters() {
        let run = || {
            let (mut m, mut c, data) = small();
            let mut sink = Vec::new();
            train(&mut m, &mut c, &data, None, &cfg(3), &HybridObjectiveConfig::hybrid(0.1), &mut sink).unwrap();
            (m.params.flatten(), c.a.params.flatten(), c.b.params.flatten(), sink)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mle_only_leaves_critics_alone() {
        let (mut m, mut c, data) = small();
        let before = (c.a.params.flatten(), c.b.params.flatten());
        let s = train(&mut m, &mut c, &data, None, &cfg(2), &HybridObjectiveConfig::mle_only(), &mut NullSink).unwrap();
        assert_eq!(s.critic_steps, 0);
        assert_eq!(before, (c.a.params.flatten(), c.b.params.flatten()));
        assert!(s.generator_steps > 0);
    }

    #[test]
    fn metric_total_matches_objective() {
        let (mut m, c, data) = small();
        m.params.perturb(&mut ChaCha8Rng::seed_from_u64(3), 0.1);
        for obj in [
            HybridObjectiveConfig::default(),
            HybridObjectiveConfig::adversarial_only(),
            HybridObjectiveConfig::mle_only(),
        ] {
            let row = epoch_metrics(&m, &c, &data.a, &data.b, &obj, None, 0).unwrap();
            let direct = alignflow_objective(&mut Eager, &m, &c, &data.a, &data.b, &obj).unwrap();
            assert_eq!(row.total, direct.breakdown(&Eager, &obj).total);
        }
    }

    #[test]
    fn metrics_stream_has_one_row_per_epoch() {
        let (mut m, mut c, data) = small();
        let val = DomainPairSpec {
            n_val: 10,
            ..DomainPairSpec::default()
        }
        .generate()
        .unwrap()
        .val;
        let mut sink = Vec::new();
        train(&mut m, &mut c, &data, Some(&val), &cfg(3), &HybridObjectiveConfig::default(), &mut sink).unwrap();
        assert_eq!(sink.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(sink.iter().all(|r| r.val_mse_ab.is_some() && r.total.is_finite()));
    }

    #[test]
    fn nan_data_aborts_with_term_and_epoch() {
        let (mut m, mut c, mut data) = small();
        data.a.data_mut()[3] = f64::NAN;
        let c2 = TrainConfig {
            data_init: false,
            ..cfg(1)
        };
        let err = train(&mut m, &mut c, &data, None, &c2, &HybridObjectiveConfig::mle_only(), &mut NullSink)
            .unwrap_err();
        match err {
            Error::NonFinite { term, epoch } => {
                assert_eq!(term, "nll_a");
                assert_eq!(epoch, 0);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let (mut m, mut c, _) = small();
        let data = UnpairedData {
            a: Tensor::zeros(&[4, 3]),
            b: Tensor::zeros(&[4, 3]),
        };
        assert!(train(&mut m, &mut c, &data, None, &cfg(1), &HybridObjectiveConfig::default(), &mut NullSink).is_err());
    }
}
