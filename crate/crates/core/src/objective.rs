//! Adversarial and likelihood losses, critics, and closed-form critic oracles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eager, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{AlignFlowModel, Domain};
use crate::nn::{Activation, Mlp};

/// Critic outputs are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticSpec {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub leaky_slope: f64,
}

impl Default for CriticSpec {
    fn default() -> Self {
        Self {
            hidden_width: 64,
            hidden_layers: 3,
            leaky_slope: 0.2,
        }
    }
}

impl CriticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(Error::config("critic.hidden_width", "critic needs a hidden layer"));
        }
        Ok(())
    }
}

/// Binary classifier `C(x) = sigmoid(mlp(x))` telling real samples of one
/// domain from translated ones.
#[derive(Clone, Debug)]
pub struct Critic {
    pub domain: Domain,
    pub params: ParamStore,
    pub net: Mlp,
}

impl Critic {
    pub fn new(dim: usize, domain: Domain, spec: &CriticSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut widths = vec![dim];
        widths.extend(std::iter::repeat(spec.hidden_width).take(spec.hidden_layers));
        widths.push(1);
        let net = Mlp::new(
            &mut params,
            &format!("critic_{domain}"),
            &widths,
            Activation::LeakyRelu(spec.leaky_slope),
            false,
            &mut rng,
        );
        Ok(Self { domain, params, net })
    }

    pub fn dim(&self) -> usize {
        self.net.layers.first().map_or(0, |l| self.params.get(l.weight).rows())
    }

    /// Pre-sigmoid scores, shape `[n, 1]`.
    pub fn logits<B: Backend>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        self.net.forward(b, &self.params, x)
    }

    /// Probabilities in `(0, 1)`, shape `[n, 1]`.
    pub fn prob<B: Backend>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        let l = self.logits(b, x)?;
        Ok(b.sigmoid(&l))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.prob(&mut Eager, x)?.into_data())
    }
}

/// The pair of critics, `C_A` and `C_B`.
#[derive(Clone, Debug)]
pub struct Critics {
    pub a: Critic,
    pub b: Critic,
}

impl Critics {
    pub fn new(dim: usize, spec: &CriticSpec, seed: u64) -> Result<Self> {
        Ok(Self {
            a: Critic::new(dim, Domain::A, spec, seed.wrapping_add(1))?,
            b: Critic::new(dim, Domain::B, spec, seed.wrapping_add(2))?,
        })
    }

    pub fn get(&self, domain: Domain) -> &Critic {
        match domain {
            Domain::A => &self.a,
            Domain::B => &self.b,
        }
    }
}

fn check_batch<B: Backend>(b: &B, x: &B::Value, dim: usize, what: &str) -> Result<()> {
    let t = b.value(x);
    if t.rank() != 2 || t.rows() == 0 {
        return Err(Error::InvalidArgument(format!("{what} batch must be a non-empty matrix")));
    }
    if t.cols() != dim {
        return Err(Error::Dimension {
            expected: dim,
            got: t.cols(),
        });
    }
    Ok(())
}

/// Mean of `log C(x)`, or of `log(1 - C(x))` when `fake` is set. The latter
/// is evaluated as `log sigmoid(-logit)`: forming `1 - sigmoid(logit)` first
/// cancels catastrophically once the critic is confident.
fn mean_log_prob<B: Backend>(b: &mut B, critic: &Critic, x: &B::Value, fake: bool) -> Result<B::Value> {
    let logits = critic.logits(b, x)?;
    let logits = if fake { b.neg(&logits) } else { logits };
    let p = b.sigmoid(&logits);
    let p = b.clamp(&p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let l = b.log(&p)?;
    b.mean(&l)
}

/// Cross-entropy GAN value `E[log C(real)] + E[log(1 - C(fake))]`.
/// The critic maximizes it; the generator minimizes it through `fake`.
pub fn gan_loss<B: Backend>(b: &mut B, critic: &Critic, real: &B::Value, fake: &B::Value) -> Result<B::Value> {
    let dim = critic.dim();
    check_batch(b, real, dim, "real")?;
    check_batch(b, fake, dim, "fake")?;
    let r = mean_log_prob(b, critic, real, false)?;
    let f = mean_log_prob(b, critic, fake, true)?;
    b.add(&r, &f)
}

/// Non-saturating generator loss `-E[log C(fake)]`.
pub fn non_saturating_generator_loss<B: Backend>(b: &mut B, critic: &Critic, fake: &B::Value) -> Result<B::Value> {
    check_batch(b, fake, critic.dim(), "fake")?;
    let l = mean_log_prob(b, critic, fake, false)?;
    Ok(b.neg(&l))
}

/// `(L_GAN(C_A, G_{B->A}), L_GAN(C_B, G_{A->B}))`, with fakes obtained by
/// translating the opposite domain's batch.
pub fn cross_domain_gan_losses<B: Backend>(
    b: &mut B,
    model: &AlignFlowModel,
    critics: &Critics,
    batch_a: &B::Value,
    batch_b: &B::Value,
) -> Result<(B::Value, B::Value)> {
    let fake_a = model.translate(b, batch_b, Domain::B)?;
    let fake_b = model.translate(b, batch_a, Domain::A)?;
    let gan_a = gan_loss(b, &critics.a, batch_a, &fake_a)?;
    let gan_b = gan_loss(b, &critics.b, batch_b, &fake_b)?;
    Ok((gan_a, gan_b))
}

/// Mean negative log-likelihood of `batch` under the model of `domain`.
pub fn mle_loss<B: Backend>(b: &mut B, model: &AlignFlowModel, batch: &B::Value, domain: Domain) -> Result<B::Value> {
    check_batch(b, batch, model.dim(), "mle")?;
    let lp = model.log_prob_with(b, batch, domain)?;
    let m = b.mean(&lp)?;
    Ok(b.neg(&m))
}

/// Weights and switches of the hybrid objective
/// `L_GAN(C_A, G_{B->A}) + L_GAN(C_B, G_{A->B}) + lambda_a * NLL_A + lambda_b * NLL_B`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridObjectiveConfig {
    pub lambda_a: f64,
    pub lambda_b: f64,
    /// Drops both GAN terms (the `lambda -> infinity` limit). The lambdas are
    /// then relative weights of the two likelihood terms.
    pub mle_only: bool,
    pub gan_a: bool,
    pub gan_b: bool,
    /// Generator minimizes `-E[log C(fake)]` instead of `E[log(1 - C(fake))]`.
    pub non_saturating: bool,
}

impl Default for HybridObjectiveConfig {
    fn default() -> Self {
        Self::hybrid(1e-5)
    }
}

impl HybridObjectiveConfig {
    pub fn hybrid(lambda: f64) -> Self {
        Self {
            lambda_a: lambda,
            lambda_b: lambda,
            mle_only: false,
            gan_a: true,
            gan_b: true,
            non_saturating: false,
        }
    }

    pub fn adversarial_only() -> Self {
        Self::hybrid(0.0)
    }

    pub fn mle_only() -> Self {
        Self {
            mle_only: true,
            ..Self::hybrid(1.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("objective.lambda_a", self.lambda_a), ("objective.lambda_b", self.lambda_b)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(field, format!("must be a finite value >= 0, got {v}")));
            }
        }
        if self.mle_only && self.lambda_a == 0.0 && self.lambda_b == 0.0 {
            return Err(Error::config("objective.mle_only", "needs a positive lambda_a or lambda_b"));
        }
        Ok(())
    }

    pub fn is_adversarial_only(&self) -> bool {
        !self.mle_only && self.lambda_a == 0.0 && self.lambda_b == 0.0
    }

    pub fn uses_gan_a(&self) -> bool {
        !self.mle_only && self.gan_a
    }

    pub fn uses_gan_b(&self) -> bool {
        !self.mle_only && self.gan_b
    }

    pub fn uses_gan(&self) -> bool {
        self.uses_gan_a() || self.uses_gan_b()
    }

    /// Whether any likelihood term enters the objective.
    pub fn uses_mle(&self) -> bool {
        self.lambda_a > 0.0 || self.lambda_b > 0.0
    }
}

/// Graph values of the objective and of each term that entered it.
#[derive(Clone, Debug)]
pub struct ObjectiveTerms<V> {
    pub total: V,
    pub gan_a: Option<V>,
    pub gan_b: Option<V>,
    pub nll_a: Option<V>,
    pub nll_b: Option<V>,
}

/// Scalar values of [`ObjectiveTerms`]; absent terms are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveBreakdown {
    pub total: f64,
    pub gan_a: Option<f64>,
    pub gan_b: Option<f64>,
    pub nll_a: Option<f64>,
    pub nll_b: Option<f64>,
    pub lambda_a: f64,
    pub lambda_b: f64,
}

impl ObjectiveBreakdown {
    /// Recombines the terms in the same order as the objective itself.
    pub fn recombine(&self) -> f64 {
        let mut t = match (self.gan_a, self.gan_b) {
            (Some(a), Some(b)) => a + b,
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => 0.0,
        };
        if let Some(n) = self.nll_a {
            t += n * self.lambda_a;
        }
        if let Some(n) = self.nll_b {
            t += n * self.lambda_b;
        }
        t
    }
}

impl<V> ObjectiveTerms<V> {
    pub fn breakdown<B: Backend<Value = V>>(&self, b: &B, cfg: &HybridObjectiveConfig) -> ObjectiveBreakdown {
        let item = |v: &V| b.value(v).data()[0];
        ObjectiveBreakdown {
            total: item(&self.total),
            gan_a: self.gan_a.as_ref().map(item),
            gan_b: self.gan_b.as_ref().map(item),
            nll_a: self.nll_a.as_ref().map(item),
            nll_b: self.nll_b.as_ref().map(item),
            lambda_a: cfg.lambda_a,
            lambda_b: cfg.lambda_b,
        }
    }
}

/// The hybrid objective as seen by the critics and, with the GAN terms
/// evaluated on translated batches, by the generator. Terms with zero weight
/// or switched off are not evaluated at all, so with both lambdas at zero the
/// prior never enters the graph.
pub fn alignflow_objective<B: Backend>(
    b: &mut B,
    model: &AlignFlowModel,
    critics: &Critics,
    batch_a: &B::Value,
    batch_b: &B::Value,
    cfg: &HybridObjectiveConfig,
) -> Result<ObjectiveTerms<B::Value>> {
    cfg.validate()?;
    let gan_a = if cfg.uses_gan_a() {
        let fake_a = model.translate(b, batch_b, Domain::B)?;
        Some(gan_loss(b, &critics.a, batch_a, &fake_a)?)
    } else {
        None
    };
    let gan_b = if cfg.uses_gan_b() {
        let fake_b = model.translate(b, batch_a, Domain::A)?;
        Some(gan_loss(b, &critics.b, batch_b, &fake_b)?)
    } else {
        None
    };
    let nll_a = if cfg.lambda_a > 0.0 {
        Some(mle_loss(b, model, batch_a, Domain::A)?)
    } else {
        None
    };
    let nll_b = if cfg.lambda_b > 0.0 {
        Some(mle_loss(b, model, batch_b, Domain::B)?)
    } else {
        None
    };

    let mut total = match (&gan_a, &gan_b) {
        (Some(x), Some(y)) => b.add(x, y)?,
        (Some(x), None) => x.clone(),
        (None, Some(y)) => y.clone(),
        (None, None) => b.constant(Tensor::scalar(0.0)),
    };
    if let Some(n) = &nll_a {
        let w = b.scale(n, cfg.lambda_a);
        total = b.add(&total, &w)?;
    }
    if let Some(n) = &nll_b {
        let w = b.scale(n, cfg.lambda_b);
        total = b.add(&total, &w)?;
    }
    Ok(ObjectiveTerms {
        total,
        gan_a,
        gan_b,
        nll_a,
        nll_b,
    })
}

/// Loss the generator minimizes. Equal to the objective unless the
/// non-saturating option replaces each GAN term by `-E[log C(fake)]`.
pub fn generator_loss<B: Backend>(
    b: &mut B,
    model: &AlignFlowModel,
    critics: &Critics,
    batch_a: &B::Value,
    batch_b: &B::Value,
    cfg: &HybridObjectiveConfig,
) -> Result<ObjectiveTerms<B::Value>> {
    if !cfg.non_saturating || !cfg.uses_gan() {
        return alignflow_objective(b, model, critics, batch_a, batch_b, cfg);
    }
    let reported = alignflow_objective(b, model, critics, batch_a, batch_b, cfg)?;
    let mut total = b.constant(Tensor::scalar(0.0));
    if cfg.uses_gan_a() {
        let fake_a = model.translate(b, batch_b, Domain::B)?;
        let l = non_saturating_generator_loss(b, &critics.a, &fake_a)?;
        total = b.add(&total, &l)?;
    }
    if cfg.uses_gan_b() {
        let fake_b = model.translate(b, batch_a, Domain::A)?;
        let l = non_saturating_generator_loss(b, &critics.b, &fake_b)?;
        total = b.add(&total, &l)?;
    }
    if let Some(n) = &reported.nll_a {
        let w = b.scale(n, cfg.lambda_a);
        total = b.add(&total, &w)?;
    }
    if let Some(n) = &reported.nll_b {
        let w = b.scale(n, cfg.lambda_b);
        total = b.add(&total, &w)?;
    }
    Ok(ObjectiveTerms { total, ..reported })
}

/// Bayes-optimal critic `p_real / (p_real + p_model)`.
pub fn bayes_critic(p_real: f64, p_model: f64) -> Result<f64> {
    if !(p_real >= 0.0 && p_model >= 0.0) || !p_real.is_finite() || !p_model.is_finite() {
        return Err(Error::Domain {
            op: "bayes_critic",
            detail: format!("densities must be finite and non-negative, got {p_real}, {p_model}"),
        });
    }
    if p_real + p_model == 0.0 {
        return Err(Error::Domain {
            op: "bayes_critic",
            detail: "both densities are zero".into(),
        });
    }
    Ok(p_real / (p_real + p_model))
}

fn check_transfer_inputs(c_b: f64, p_a: f64, p_b: f64, log_jacobian: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&c_b) || !(p_a >= 0.0) || !(p_b >= 0.0) || !log_jacobian.is_finite() {
        return Err(Error::Domain {
            op: "optimal_critic_transfer",
            detail: format!(
                "need c_b in [0, 1], densities >= 0, finite log-Jacobian; got {c_b}, {p_a}, {p_b}, {log_jacobian}"
            ),
        });
    }
    Ok(())
}

/// Optimal critic of domain A from the optimal critic of domain B.
///
/// For `b = G_{A->B}(a)`, with both model marginals induced by the shared
/// latent (so `p_A(a) = p_B(b) |det dG_{A->B}/da|`) and
/// `C*_B(b) = p*_B(b) / (p*_B(b) + p_B(b))`, eliminating `p_B(b)` from
/// `C*_A(a) = p*_A(a) / (p*_A(a) + p_A(a))` gives
///
/// ```text
/// C*_A(a) = C*_B(b) p*_A(a) / (C*_B(b) p*_A(a) + p*_B(b) (1 - C*_B(b)) J)
/// ```
///
/// where `J = exp(log_jacobian) = |det dG_{A->B}/da|`.
pub fn optimal_critic_transfer(c_b: f64, p_a_star: f64, p_b_star: f64, log_jacobian: f64) -> Result<f64> {
    check_transfer_inputs(c_b, p_a_star, p_b_star, log_jacobian)?;
    let num = c_b * p_a_star;
    let den = num + p_b_star * (1.0 - c_b) * log_jacobian.exp();
    if den == 0.0 {
        return Err(Error::Domain {
            op: "optimal_critic_transfer",
            detail: "zero denominator".into(),
        });
    }
    Ok(num / den)
}

/// The same relation with `p*_A(a)` alone in the denominator,
/// `C*_B(b) p*_A(a) / (p*_A(a) + p*_B(b) (1 - C*_B(b)) J)`.
///
/// This form drops a factor `C*_B(b)` from the first denominator term and only
/// agrees with [`optimal_critic_transfer`] when `C*_B(b) = 1`. It is kept so
/// verification reports can show the residual of both forms.
pub fn optimal_critic_transfer_uncorrected(
    c_b: f64,
    p_a_star: f64,
    p_b_star: f64,
    log_jacobian: f64,
) -> Result<f64> {
    check_transfer_inputs(c_b, p_a_star, p_b_star, log_jacobian)?;
    let den = p_a_star + p_b_star * (1.0 - c_b) * log_jacobian.exp();
    if den == 0.0 {
        return Err(Error::Domain {
            op: "optimal_critic_transfer",
            detail: "zero denominator".into(),
        });
    }
    Ok(c_b * p_a_star / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::flow::ArchSpec;
    use crate::model::SharingSpec;

    fn half_critic(dim: usize) -> Critic {
        let mut c = Critic::new(dim, Domain::A, &CriticSpec::default(), 0).unwrap();
        let head = c.net.output_layer().clone();
        let w = c.params.get(head.weight).shape().to_vec();
        c.params.set(head.weight, Tensor::zeros(&w)).unwrap();
        c
    }

    fn batch(rows: usize, dim: usize, offset: f64) -> Tensor {
        Tensor::matrix(rows, dim, (0..rows * dim).map(|i| (i as f64 * 0.37).sin() + offset).collect()).unwrap()
    }

    #[test]
    fn constant_half_critic() {
        let c = half_critic(2);
        let v = gan_loss(&mut Eager, &c, &batch(5, 2, 0.0), &batch(3, 2, 1.0)).unwrap();
        assert!((v.item().unwrap() - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((v.item().unwrap() + 1.38629).abs() < 1e-5);
    }

    #[test]
    fn perfect_critic_hits_clamp_bound() {
        let mut c = half_critic(1);
        // logit = 1000 * leaky^3(x): real rows positive, fake rows far negative
        let first = c.net.layers[0].clone();
        let mut w = Tensor::zeros(c.params.get(first.weight).shape());
        w.data_mut()[0] = 1.0;
        c.params.set(first.weight, w).unwrap();
        let head = c.net.output_layer().clone();
        let mut hw = Tensor::zeros(c.params.get(head.weight).shape());
        hw.data_mut()[0] = 1000.0;
        c.params.set(head.weight, hw).unwrap();
        // middle layers must pass the signal; give them identity on unit 0
        for layer in &c.net.layers[1..c.net.layers.len() - 1] {
            let mut m = Tensor::zeros(c.params.get(layer.weight).shape());
            m.data_mut()[0] = 1.0;
            c.params.set(layer.weight, m).unwrap();
        }
        let real = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        let fake = Tensor::matrix(2, 1, vec![-100.0, -300.0]).unwrap();
        let v = gan_loss(&mut Eager, &c, &real, &fake).unwrap().item().unwrap();
        let bound = 2.0 * (1.0 - PROB_CLAMP).ln();
        assert!((v - bound).abs() < 1e-12, "{v}");
        assert!(v.abs() < 1e-6);
    }

    #[test]
    fn gan_loss_rejects_empty_batches() {
        let c = half_critic(2);
        let empty = Tensor::zeros(&[0, 2]);
        assert!(gan_loss(&mut Eager, &c, &empty, &batch(2, 2, 0.0)).is_err());
        assert!(gan_loss(&mut Eager, &c, &batch(2, 2, 0.0), &empty).is_err());
        assert!(gan_loss(&mut Eager, &c, &batch(1, 2, 0.0), &batch(1, 2, 0.0))
            .unwrap()
            .is_finite());
    }

    #[test]
    fn critic_output_stays_in_unit_interval() {
        let c = Critic::new(3, Domain::B, &CriticSpec::default(), 3).unwrap();
        let x = batch(50, 3, 0.0).map(|v| v * 100.0);
        for p in c.predict(&x).unwrap() {
            assert!(p > 0.0 && p < 1.0 || p == 1.0 || p == 0.0);
            assert!(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP) > 0.0);
        }
    }

    #[test]
    fn identity_flow_nll_at_origin() {
        let m = AlignFlowModel::new(&ArchSpec::new(2, 2, 4), SharingSpec::None, 0).unwrap();
        let v = mle_loss(&mut Eager, &m, &Tensor::zeros(&[1, 2]), Domain::A).unwrap();
        assert!((v.item().unwrap() - 1.83788).abs() < 1e-5);
        let x = batch(7, 2, 0.3);
        let once = mle_loss(&mut Eager, &m, &x, Domain::B).unwrap().item().unwrap();
        let twice = mle_loss(&mut Eager, &m, &x.vstack(&x).unwrap(), Domain::B).unwrap().item().unwrap();
        assert!((once - twice).abs() < 1e-14);
        assert!(mle_loss(&mut Eager, &m, &Tensor::zeros(&[0, 2]), Domain::A).is_err());
    }

    #[test]
    fn objective_limits_and_linearity() {
        let mut m = AlignFlowModel::new(&ArchSpec::new(2, 2, 8), SharingSpec::None, 1).unwrap();
        m.params.perturb(&mut ChaCha8Rng::seed_from_u64(4), 0.2);
        let critics = Critics::new(2, &CriticSpec::default(), 9).unwrap();
        let (a, b) = (batch(6, 2, 0.0), batch(5, 2, 0.5));

        let eval = |cfg: &HybridObjectiveConfig| {
            let t = alignflow_objective(&mut Eager, &m, &critics, &a, &b, cfg).unwrap();
            t.breakdown(&Eager, cfg)
        };

        let adv = eval(&HybridObjectiveConfig::adversarial_only());
        assert_eq!(adv.total, adv.gan_a.unwrap() + adv.gan_b.unwrap());
        assert!(adv.nll_a.is_none() && adv.nll_b.is_none());

        let (ga, gb) = cross_domain_gan_losses(&mut Eager, &m, &critics, &a, &b).unwrap();
        assert_eq!(adv.gan_a.unwrap(), ga.item().unwrap());
        assert_eq!(adv.gan_b.unwrap(), gb.item().unwrap());

        let mle = eval(&HybridObjectiveConfig::mle_only());
        assert!(mle.gan_a.is_none() && mle.gan_b.is_none());
        assert_eq!(mle.total, mle.nll_a.unwrap() + mle.nll_b.unwrap());

        let lam = 1e-5;
        let hyb = eval(&HybridObjectiveConfig::hybrid(lam));
        assert_eq!(hyb.total, hyb.recombine());
        let expected = lam * (hyb.nll_a.unwrap() + hyb.nll_b.unwrap());
        assert!((hyb.total - adv.total - expected).abs() < 1e-15);
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let cfg = HybridObjectiveConfig {
            lambda_a: -1.0,
            ..HybridObjectiveConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("objective.lambda_a"), "{err}");
    }

    #[test]
    fn adversarial_objective_gradient_ignores_likelihood_path() {
        let mut m = AlignFlowModel::new(&ArchSpec::new(2, 2, 8), SharingSpec::None, 2).unwrap();
        m.params.perturb(&mut ChaCha8Rng::seed_from_u64(5), 0.2);
        let critics = Critics::new(2, &CriticSpec::default(), 3).unwrap();
        let (a, b) = (batch(4, 2, 0.1), batch(4, 2, -0.2));
        let cfg = HybridObjectiveConfig::adversarial_only();

        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let terms = alignflow_objective(&mut t, &m, &critics, &va, &vb, &cfg).unwrap();
        let g_obj = t.backward(terms.total).unwrap().for_store(&m.params);

        let mut t2 = Tape::new();
        let (va, vb) = (t2.constant(a), t2.constant(b));
        let (ga, gb) = cross_domain_gan_losses(&mut t2, &m, &critics, &va, &vb).unwrap();
        let sum = t2.add(&ga, &gb).unwrap();
        let g_gan = t2.backward(sum).unwrap().for_store(&m.params);
        assert_eq!(g_obj, g_gan);
    }

    #[test]
    fn bayes_critic_examples() {
        assert_eq!(bayes_critic(0.2, 0.2).unwrap(), 0.5);
        assert!((bayes_critic(0.3, 0.1).unwrap() - 0.75).abs() < 1e-15);
        let phi = |x: f64, mu: f64| (-(x - mu).powi(2) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((bayes_critic(phi(0.5, 0.0), phi(0.5, 1.0)).unwrap() - 0.5).abs() < 1e-15);
        assert!(bayes_critic(0.0, 0.0).is_err());
        assert!(bayes_critic(-1.0, 0.5).is_err());
    }

    #[test]
    fn critic_transfer_closed_forms() {
        let p = 0.37;
        // uncorrected form with equal densities and unit Jacobian: 0.5p / (p + 0.5p) = 1/3
        let lit = optimal_critic_transfer_uncorrected(0.5, p, p, 0.0).unwrap();
        assert!((lit - 1.0 / 3.0).abs() < 1e-15);
        // corrected form: 0.5p / (0.5p + 0.5p) = 1/2
        assert!((optimal_critic_transfer(0.5, p, p, 0.0).unwrap() - 0.5).abs() < 1e-15);
        // C*_B -> 1 forces C*_A -> 1 in both forms
        assert_eq!(optimal_critic_transfer(1.0, p, 0.2, 0.3).unwrap(), 1.0);
        assert_eq!(optimal_critic_transfer_uncorrected(1.0, p, 0.2, 0.3).unwrap(), 1.0);
        assert!(optimal_critic_transfer(0.0, 0.0, 0.0, 0.0).is_err());
        assert!(optimal_critic_transfer(1.5, p, p, 0.0).is_err());
    }
}
