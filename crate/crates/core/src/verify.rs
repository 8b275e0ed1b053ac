//! Numeric invariant checks run by `alignflow verify`.
//!
//! Each suite returns a list of [`Check`]s with the measured value next to
//! its bound, so a report shows how much room every property has rather than
//! only whether it held.

use std::f64::consts::PI;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::autodiff::{Eager, Tensor};
use crate::error::{Error, Result};
use crate::eval::{marginal_consistency_check, permutation_nonidentifiability_demo, HistogramSpec};
use crate::flow::{FlowSequence, InvertibleTransform};
use crate::model::{AlignFlowModel, Domain};
use crate::objective::{bayes_critic, optimal_critic_transfer, optimal_critic_transfer_uncorrected};
use crate::synthetic::{DomainPairSpec, PairedSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Roundtrip,
    Logdet,
    Critic,
    Perm,
    Marginal,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Roundtrip, Suite::Logdet, Suite::Critic, Suite::Perm, Suite::Marginal];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Roundtrip => "roundtrip",
            Suite::Logdet => "logdet",
            Suite::Critic => "critic",
            Suite::Perm => "perm",
            Suite::Marginal => "marginal",
        }
    }

    /// Parses a suite selector; `all` expands to every suite.
    pub fn parse_selection(s: &str) -> Result<Vec<Suite>> {
        if s == "all" {
            Ok(Self::ALL.to_vec())
        } else {
            Ok(vec![s.parse()?])
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown suite `{s}`, expected all|roundtrip|logdet|critic|perm|marginal"
            ))
        })
    }
}

/// One measured property. `bound` is `None` for values that are reported
/// without a pass criterion.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub value: f64,
    pub bound: Option<f64>,
}

impl Check {
    fn below(suite: Suite, name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            value,
            bound: Some(bound),
        }
    }

    fn info(suite: Suite, name: impl Into<String>, value: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            value,
            bound: None,
        }
    }

    /// Holds when the value is strictly below its bound. NaN never passes.
    pub fn passed(&self) -> bool {
        self.bound.is_none_or(|b| self.value < b)
    }

    /// `PASS`, `FAIL` or `INFO` followed by suite, name and numbers.
    pub fn report_line(&self) -> String {
        match self.bound {
            Some(b) => format!(
                "{} {}/{} value={:.3e} bound={:e}",
                if self.passed() { "PASS" } else { "FAIL" },
                self.suite.name(),
                self.name,
                self.value,
                b
            ),
            None => format!("INFO {}/{} value={:.6e}", self.suite.name(), self.name, self.value),
        }
    }
}

/// Settings shared by the suites.
#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Batch size of the round-trip checks.
    pub roundtrip_points: usize,
    /// Points at which log-determinants are compared with numeric Jacobians.
    pub logdet_points: usize,
    pub critic_grid: usize,
    /// Paired points of the permutation comparison.
    pub perm_points: usize,
    /// True data distribution for the marginal suite.
    pub data: DomainPairSpec,
    pub marginal_samples: usize,
    pub marginal_kl_bound: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            roundtrip_points: 1000,
            logdet_points: 50,
            critic_grid: 20,
            perm_points: 1000,
            data: DomainPairSpec::default(),
            marginal_samples: 100_000,
            marginal_kl_bound: 0.15,
        }
    }
}

pub const ROUNDTRIP_BOUND: f64 = 1e-9;
pub const LOGDET_BOUND: f64 = 1e-4;
pub const CRITIC_BOUND: f64 = 1e-6;
pub const PERM_NLL_BOUND: f64 = 1e-9;

pub fn run_suite(model: &AlignFlowModel, suite: Suite, opts: &VerifyOptions) -> Result<Vec<Check>> {
    match suite {
        Suite::Roundtrip => roundtrip_suite(model, opts),
        Suite::Logdet => logdet_suite(model, opts),
        Suite::Critic => critic_fixture(opts.critic_grid),
        Suite::Perm => perm_suite(model, opts),
        Suite::Marginal => marginal_suite(model, opts),
    }
}

fn gaussian_batch(n: usize, dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::matrix(n, dim, (0..n * dim).map(|_| normal.sample(rng)).collect())
}

fn max_abs(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.max_abs_diff(b)
}

/// Cycle losses in both directions on model samples and on a wide Gaussian
/// batch, plus per-flow `decode(encode(x)) = x`.
pub fn roundtrip_suite(model: &AlignFlowModel, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let s = Suite::Roundtrip;
    let n = opts.roundtrip_points;
    let (a, b) = model.sample_paired(n, opts.seed)?;
    let wide = gaussian_batch(n, model.dim(), 2.0, &mut ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed))?;
    let mut out = vec![
        Check::below(s, "cycle_a_model_samples", model.cycle_loss(&a)?, ROUNDTRIP_BOUND),
        Check::below(s, "cycle_b_model_samples", model.cycle_loss_reverse(&b)?, ROUNDTRIP_BOUND),
        Check::below(s, "cycle_a_wide_gaussian", model.cycle_loss(&wide)?, ROUNDTRIP_BOUND),
        Check::below(s, "cycle_b_wide_gaussian", model.cycle_loss_reverse(&wide)?, ROUNDTRIP_BOUND),
    ];
    for d in [Domain::A, Domain::B] {
        let (z, _) = model.encode(&mut Eager, &wide, d)?;
        let (back, _) = model.decode(&mut Eager, &z, d)?;
        out.push(Check::below(
            s,
            format!("flow_{}_inverse_max_abs", d.to_string().to_lowercase()),
            max_abs(&back, &wide)?,
            ROUNDTRIP_BOUND,
        ));
    }
    Ok(out)
}

/// `log |det J|` of `x -> flow.forward(x)` from the fourth-order five-point
/// stencil with `h = 1e-5`. Randomly perturbed flows can be sharply curved;
/// plain central differences then carry an `O(h^2)` error that is visible
/// next to a `1e-4` tolerance, while this stencil's `O(h^4)` error is not.
pub fn numeric_log_abs_det(flow: &FlowSequence, params: &crate::autodiff::ParamStore, z: &[f64]) -> Result<f64> {
    const H: f64 = 1e-5;
    const OFFSETS: [f64; 4] = [2.0, 1.0, -1.0, -2.0];
    let d = z.len();
    // rows 4j..4j+4 hold z + 2h e_j, z + h e_j, z - h e_j, z - 2h e_j
    let mut probe = Vec::with_capacity(4 * d * d);
    for j in 0..d {
        for k in OFFSETS {
            let mut p = z.to_vec();
            p[j] += k * H;
            probe.extend(p);
        }
    }
    let (x, _) = flow.forward_eager(params, &Tensor::matrix(4 * d, d, probe)?)?;
    let jac = DMatrix::from_fn(d, d, |i, j| {
        let f = |k: usize| x.row(4 * j + k)[i];
        (-f(0) + 8.0 * f(1) - 8.0 * f(2) + f(3)) / (12.0 * H)
    });
    Ok(jac.lu().determinant().abs().ln())
}

/// Analytic decode log-determinants of both flows against numeric Jacobians
/// at Gaussian latent points. The error is `|analytic - numeric|` divided by
/// `max(1, |numeric|)`, so log-dets near zero are held to an absolute bound.
pub fn logdet_suite(model: &AlignFlowModel, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(17));
    let z = gaussian_batch(opts.logdet_points, model.dim(), 1.0, &mut rng)?;
    let mut out = Vec::new();
    for d in [Domain::A, Domain::B] {
        let flow = model.flow(d);
        let (_, ld) = flow.forward_eager(&model.params, &z)?;
        let mut worst: f64 = 0.0;
        for (i, &analytic) in ld.data().iter().enumerate() {
            let numeric = numeric_log_abs_det(flow, &model.params, z.row(i))?;
            let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
        }
        out.push(Check::below(
            Suite::Logdet,
            format!("flow_{}_max_rel_err", d.to_string().to_lowercase()),
            worst,
            LOGDET_BOUND,
        ));
    }
    Ok(out)
}

/// One-dimensional setting in which every optimal critic has a closed form.
///
/// True marginals are `A* ~ N(0, 1)` and `B* ~ N(0, 2^2)`. The model decodes a
/// standard normal latent by fixed scalings, `a = 1.3 z` and `b = 1.5 z`, so
/// its marginals are `N(0, 1.3^2)` and `N(0, 1.5^2)` and
/// `G_{A->B}(a) = (1.5 / 1.3) a`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticFixture {
    pub std_true_a: f64,
    pub std_true_b: f64,
    pub scale_a: f64,
    pub scale_b: f64,
}

impl Default for CriticFixture {
    fn default() -> Self {
        Self {
            std_true_a: 1.0,
            std_true_b: 2.0,
            scale_a: 1.3,
            scale_b: 1.5,
        }
    }
}

/// Values of both sides of the critic transfer identity at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticFixturePoint {
    pub a: f64,
    pub b: f64,
    /// Bayes critic of A evaluated directly.
    pub direct: f64,
    /// Obtained from the Bayes critic of B.
    pub transferred: f64,
    /// The variant without `C*_B` in the first denominator term.
    pub transferred_uncorrected: f64,
}

fn normal_pdf(x: f64, std: f64) -> f64 {
    (-0.5 * (x / std).powi(2)).exp() / (std * (2.0 * PI).sqrt())
}

impl CriticFixture {
    /// Evaluates the identity at `points` evenly spaced `a` in `[-3, 3]`.
    pub fn evaluate(&self, points: usize) -> Result<Vec<CriticFixturePoint>> {
        if points < 2 {
            return Err(Error::InvalidArgument("critic fixture needs at least 2 points".into()));
        }
        let ratio = self.scale_b / self.scale_a;
        let log_jacobian = ratio.abs().ln();
        (0..points)
            .map(|k| {
                let a = -3.0 + 6.0 * k as f64 / (points - 1) as f64;
                let b = ratio * a;
                let (pa_star, pb_star) = (normal_pdf(a, self.std_true_a), normal_pdf(b, self.std_true_b));
                let direct = bayes_critic(pa_star, normal_pdf(a, self.scale_a))?;
                let c_b = bayes_critic(pb_star, normal_pdf(b, self.scale_b))?;
                Ok(CriticFixturePoint {
                    a,
                    b,
                    direct,
                    transferred: optimal_critic_transfer(c_b, pa_star, pb_star, log_jacobian)?,
                    transferred_uncorrected: optimal_critic_transfer_uncorrected(c_b, pa_star, pb_star, log_jacobian)?,
                })
            })
            .collect()
    }
}

/// Largest residual of the critic transfer identity on the analytic fixture,
/// for the corrected form (checked) and the uncorrected form (reported).
pub fn critic_fixture(points: usize) -> Result<Vec<Check>> {
    let pts = CriticFixture::default().evaluate(points)?;
    let worst = |f: fn(&CriticFixturePoint) -> f64| pts.iter().map(|p| (f(p) - p.direct).abs()).fold(0.0, f64::max);
    Ok(vec![
        Check::below(Suite::Critic, "transfer_max_residual", worst(|p| p.transferred), CRITIC_BOUND),
        Check::info(
            Suite::Critic,
            "uncorrected_transfer_max_residual",
            worst(|p| p.transferred_uncorrected),
        ),
        Check::info(Suite::Critic, "grid_points", pts.len() as f64),
    ])
}

/// Reversing the latent coordinates of the A-decoder leaves both
/// likelihoods unchanged and moves the translation.
pub fn perm_suite(model: &AlignFlowModel, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let s = Suite::Perm;
    let perm: Vec<usize> = (0..model.dim()).rev().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(29));
    let z = Tensor::matrix(
        opts.perm_points,
        model.dim(),
        (0..opts.perm_points * model.dim()).map(|_| StandardNormal.sample(&mut rng)).collect(),
    )?;
    let (a, _) = model.decode(&mut Eager, &z, Domain::A)?;
    let (b, _) = model.decode(&mut Eager, &z, Domain::B)?;
    let r = permutation_nonidentifiability_demo(model, &perm, PairedSet::new(a, b)?)?;
    Ok(vec![
        Check::below(s, "nll_a_gap", (r.nll_a - r.nll_a_permuted).abs(), PERM_NLL_BOUND),
        Check::below(s, "nll_b_gap", (r.nll_b - r.nll_b_permuted).abs(), PERM_NLL_BOUND),
        Check::info(s, "mse_a_to_b", r.mse_a_to_b),
        Check::info(s, "mse_a_to_b_permuted", r.mse_a_to_b_permuted),
    ])
}

/// Histogram KL between the model marginals and the configured true data.
pub fn marginal_suite(model: &AlignFlowModel, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let r = marginal_consistency_check(
        model,
        &opts.data,
        &HistogramSpec::default(),
        opts.marginal_samples,
        opts.seed,
    )?;
    Ok(vec![
        Check::below(Suite::Marginal, "kl_a", r.kl_a, opts.marginal_kl_bound),
        Check::below(Suite::Marginal, "kl_b", r.kl_b, opts.marginal_kl_bound),
    ])
}

/// Central-difference gradient of `f` with respect to every scalar in
/// `store`, in [`ParamStore::flatten`] order.
///
/// [`ParamStore::flatten`]: crate::autodiff::ParamStore::flatten
pub fn central_difference<F>(store: &crate::autodiff::ParamStore, h: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&crate::autodiff::ParamStore) -> Result<f64>,
{
    let base = store.flatten();
    let mut probe = store.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut x = base.clone();
    for i in 0..base.len() {
        x[i] = base[i] + h;
        probe.load_flat(&x)?;
        let up = f(&probe)?;
        x[i] = base[i] - h;
        probe.load_flat(&x)?;
        let down = f(&probe)?;
        x[i] = base[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Largest elementwise relative difference `|a - n| / max(|a|, |n|, floor)`.
/// The floor keeps entries that are zero up to round-off from dominating.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            if err.is_nan() {
                f64::INFINITY
            } else {
                err
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::ArchSpec;
    use crate::model::SharingSpec;

    fn perturbed(dim: usize, seed: u64) -> AlignFlowModel {
        let mut m = AlignFlowModel::new(&ArchSpec::new(dim, 3, 8), SharingSpec::None, seed).unwrap();
        m.params.perturb(&mut ChaCha8Rng::seed_from_u64(seed), 0.3);
        m
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!(Suite::parse_selection("all").unwrap().len(), 5);
        assert_eq!(Suite::parse_selection("perm").unwrap(), vec![Suite::Perm]);
        assert!(Suite::parse_selection("everything").is_err());
    }

    #[test]
    fn critic_fixture_closed_forms() {
        let pts = CriticFixture::default().evaluate(20).unwrap();
        assert_eq!(pts.len(), 20);
        for p in &pts {
            assert!((p.transferred - p.direct).abs() < 1e-12, "{p:?}");
        }
        // the uncorrected form is visibly off wherever C*_B is not 1
        assert!(pts.iter().any(|p| (p.transferred_uncorrected - p.direct).abs() > 1e-2));
        // at a = 0 both true and model densities are plain normal peaks
        let mid = CriticFixture::default().evaluate(3).unwrap()[1];
        let expected = (1.0 / 1.0) / (1.0 / 1.0 + 1.0 / 1.3);
        assert!((mid.direct - expected).abs() < 1e-14);
        let checks = critic_fixture(20).unwrap();
        assert!(checks.iter().all(Check::passed));
    }

    #[test]
    fn numeric_log_det_of_a_linear_flow() {
        // a fresh flow is the identity, so log|det| is exactly zero
        let m = AlignFlowModel::new(&ArchSpec::new(3, 2, 4), SharingSpec::None, 0).unwrap();
        let ld = numeric_log_abs_det(&m.flow_a, &m.params, &[0.3, -1.0, 2.0]).unwrap();
        assert!(ld.abs() < 1e-10, "{ld}");
    }

    #[test]
    fn suites_pass_on_random_flows() {
        let m = perturbed(4, 3);
        let opts = VerifyOptions {
            roundtrip_points: 200,
            logdet_points: 10,
            perm_points: 200,
            ..Default::default()
        };
        for suite in [Suite::Roundtrip, Suite::Logdet, Suite::Critic, Suite::Perm] {
            let checks = run_suite(&m, suite, &opts).unwrap();
            assert!(!checks.is_empty());
            for c in &checks {
                assert!(c.passed(), "{}", c.report_line());
            }
        }
        let perm = run_suite(&m, Suite::Perm, &opts).unwrap();
        let mse = perm.iter().find(|c| c.name == "mse_a_to_b").unwrap().value;
        let mse_p = perm.iter().find(|c| c.name == "mse_a_to_b_permuted").unwrap().value;
        assert!((mse - mse_p).abs() > 1e-3, "{mse} {mse_p}");
    }

    #[test]
    fn marginal_suite_flags_an_untrained_model() {
        let m = AlignFlowModel::new(&ArchSpec::new(2, 2, 4), SharingSpec::None, 0).unwrap();
        let opts = VerifyOptions {
            marginal_samples: 5000,
            ..Default::default()
        };
        let checks = run_suite(&m, Suite::Marginal, &opts).unwrap();
        assert!(checks.iter().all(|c| !c.passed()));
        assert!(matches!(run_suite(&perturbed(3, 0), Suite::Marginal, &opts), Err(Error::Unsupported(_))));
    }

    #[test]
    fn nan_never_passes() {
        assert!(!Check::below(Suite::Logdet, "x", f64::NAN, 1.0).passed());
        assert!(Check::info(Suite::Perm, "x", f64::NAN).passed());
    }
}
