//! Two-dimensional domain pairs related by a known invertible map.
//!
//! Domain A draws from a base distribution; domain B is the image of
//! independent base draws under the true map. Training sets are unpaired. The
//! validation and test sets hold aligned `(a, map(a))` pairs and live in their
//! own types, so they cannot be handed to the trainer by mistake.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Splits `name(arg, arg, ...)` into the name and its top-level arguments.
fn split_call(s: &str) -> Result<(&str, Vec<&str>)> {
    let s = s.trim();
    let Some(open) = s.find('(') else {
        return Ok((s, Vec::new()));
    };
    if !s.ends_with(')') {
        return Err(Error::Format(format!("unbalanced parentheses in `{s}`")));
    }
    let name = s[..open].trim();
    let inner = &s[open + 1..s.len() - 1];
    let mut args = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, ch) in inner.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                args.push(inner[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
        if depth < 0 {
            return Err(Error::Format(format!("unbalanced parentheses in `{s}`")));
        }
    }
    if depth != 0 {
        return Err(Error::Format(format!("unbalanced parentheses in `{s}`")));
    }
    if !inner.trim().is_empty() {
        args.push(inner[start..].trim());
    }
    Ok((name, args))
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::Format(format!("{what}: `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::Format(format!("{what}: `{s}` is not finite")));
    }
    Ok(v)
}

/// Base distribution of domain A. Written as `two_moons`,
/// `gaussian_mixture(k)` or `checkerboard` in configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BaseDistribution {
    /// Two interleaved half circles, centred at the origin.
    TwoMoons,
    /// `k` Gaussian components with unequal weights and widths on a circle
    /// of radius 2, so no non-trivial rotation maps the mixture onto itself.
    GaussianMixture(usize),
    /// Uniform over the dark squares of a 4x4 board on `[-2, 2]^2`.
    Checkerboard,
}

impl FromStr for BaseDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = split_call(s)?;
        match (name, args.as_slice()) {
            ("two_moons", []) => Ok(Self::TwoMoons),
            ("checkerboard", []) => Ok(Self::Checkerboard),
            ("gaussian_mixture", [k]) => {
                let k: usize = k
                    .parse()
                    .map_err(|_| Error::Format(format!("gaussian_mixture: bad component count `{k}`")))?;
                if k == 0 {
                    return Err(Error::Format("gaussian_mixture needs at least one component".into()));
                }
                Ok(Self::GaussianMixture(k))
            }
            _ => Err(Error::Format(format!("unknown base distribution `{s}`"))),
        }
    }
}

impl TryFrom<String> for BaseDistribution {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BaseDistribution> for String {
    fn from(b: BaseDistribution) -> String {
        b.to_string()
    }
}

impl fmt::Display for BaseDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TwoMoons => f.write_str("two_moons"),
            Self::GaussianMixture(k) => write!(f, "gaussian_mixture({k})"),
            Self::Checkerboard => f.write_str("checkerboard"),
        }
    }
}

impl BaseDistribution {
    pub fn dim(&self) -> usize {
        2
    }

    /// Mixture components as `(weight, mean, std)`.
    pub fn mixture_components(k: usize) -> Vec<(f64, [f64; 2], f64)> {
        let total: f64 = (1..=k).map(|j| j as f64).sum();
        (0..k)
            .map(|j| {
                let angle = 2.0 * PI * j as f64 / k as f64 + 0.3;
                let weight = (j + 1) as f64 / total;
                let std = 0.15 + 0.25 * j as f64 / k as f64;
                (weight, [2.0 * angle.cos(), 2.0 * angle.sin()], std)
            })
            .collect()
    }

    /// Draws `n` points, each perturbed by isotropic Gaussian noise of
    /// standard deviation `noise`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, noise: f64, rng: &mut R) -> Tensor {
        let mut data = Vec::with_capacity(2 * n);
        match self {
            Self::TwoMoons => {
                for _ in 0..n {
                    let t = rng.random::<f64>() * PI;
                    let (x, y) = if rng.random::<bool>() {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    data.extend([x - 0.5, y - 0.25]);
                }
            }
            Self::GaussianMixture(k) => {
                let comps = Self::mixture_components(*k);
                for _ in 0..n {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = comps.len() - 1;
                    for (j, c) in comps.iter().enumerate() {
                        acc += c.0;
                        if u < acc {
                            pick = j;
                            break;
                        }
                    }
                    let (_, mean, std) = comps[pick];
                    let e0: f64 = StandardNormal.sample(rng);
                    let e1: f64 = StandardNormal.sample(rng);
                    data.extend([mean[0] + std * e0, mean[1] + std * e1]);
                }
            }
            Self::Checkerboard => {
                for _ in 0..n {
                    let col = rng.random_range(0..4usize);
                    let row = 2 * rng.random_range(0..2usize) + (col % 2);
                    let x = -2.0 + col as f64 + rng.random::<f64>();
                    let y = -2.0 + row as f64 + rng.random::<f64>();
                    data.extend([x, y]);
                }
            }
        }
        if noise > 0.0 {
            let normal = Normal::new(0.0, noise).expect("positive noise");
            for v in &mut data {
                *v += normal.sample(rng);
            }
        }
        Tensor::matrix(n, 2, data).expect("two columns")
    }
}

/// Known invertible map from domain A to domain B. Written as
/// `rotation(theta)`, `diag_scale(s)` or `diag_scale(s1, s2)`, `shear(m)` and
/// `composed(map, map, ...)` (applied left to right).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TrueMap {
    Rotation(f64),
    DiagScale(f64, f64),
    /// `(x, y) -> (x + m y, y)`.
    Shear(f64),
    Composed(Vec<TrueMap>),
}

impl FromStr for TrueMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = split_call(s)?;
        match (name, args.as_slice()) {
            ("rotation", [t]) => Ok(Self::Rotation(parse_f64(t, "rotation")?)),
            ("diag_scale", [v]) => {
                let v = parse_f64(v, "diag_scale")?;
                Self::diag(v, v)
            }
            ("diag_scale", [x, y]) => Self::diag(parse_f64(x, "diag_scale")?, parse_f64(y, "diag_scale")?),
            ("shear", [m]) => Ok(Self::Shear(parse_f64(m, "shear")?)),
            ("composed", parts) if !parts.is_empty() => {
                Ok(Self::Composed(parts.iter().map(|p| p.parse()).collect::<Result<_>>()?))
            }
            _ => Err(Error::Format(format!("unknown map `{s}`"))),
        }
    }
}

impl TryFrom<String> for TrueMap {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TrueMap> for String {
    fn from(m: TrueMap) -> String {
        m.to_string()
    }
}

impl fmt::Display for TrueMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Rotation(t) => write!(f, "rotation({t:?})"),
            Self::DiagScale(x, y) if x == y => write!(f, "diag_scale({x:?})"),
            Self::DiagScale(x, y) => write!(f, "diag_scale({x:?}, {y:?})"),
            Self::Shear(m) => write!(f, "shear({m:?})"),
            Self::Composed(parts) => {
                f.write_str("composed(")?;
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{p}")?;
                }
                f.write_str(")")
            }
        }
    }
}

impl TrueMap {
    fn diag(x: f64, y: f64) -> Result<Self> {
        if x == 0.0 || y == 0.0 {
            return Err(Error::Format("diag_scale factors must be non-zero".into()));
        }
        Ok(Self::DiagScale(x, y))
    }

    /// The 2x2 matrix `M` with `b = M a`, row-major.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        match self {
            Self::Rotation(t) => [[t.cos(), -t.sin()], [t.sin(), t.cos()]],
            Self::DiagScale(x, y) => [[*x, 0.0], [0.0, *y]],
            Self::Shear(m) => [[1.0, *m], [0.0, 1.0]],
            Self::Composed(parts) => parts.iter().fold([[1.0, 0.0], [0.0, 1.0]], |acc, p| {
                let m = p.matrix();
                [
                    [
                        m[0][0] * acc[0][0] + m[0][1] * acc[1][0],
                        m[0][0] * acc[0][1] + m[0][1] * acc[1][1],
                    ],
                    [
                        m[1][0] * acc[0][0] + m[1][1] * acc[1][0],
                        m[1][0] * acc[0][1] + m[1][1] * acc[1][1],
                    ],
                ]
            }),
        }
    }

    /// `log |det dB/dA|`, constant for these linear maps.
    pub fn log_abs_det(&self) -> f64 {
        let m = self.matrix();
        (m[0][0] * m[1][1] - m[0][1] * m[1][0]).abs().ln()
    }

    pub fn apply(&self, a: &Tensor) -> Result<Tensor> {
        Self::apply_matrix(&self.matrix(), a)
    }

    pub fn apply_inverse(&self, b: &Tensor) -> Result<Tensor> {
        let m = self.matrix();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        Self::apply_matrix(&inv, b)
    }

    fn apply_matrix(m: &[[f64; 2]; 2], x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.cols() != 2 {
            return Err(Error::Dimension {
                expected: 2,
                got: if x.rank() == 2 { x.cols() } else { x.len() },
            });
        }
        let data = x
            .row_iter()
            .flat_map(|r| [m[0][0] * r[0] + m[0][1] * r[1], m[1][0] * r[0] + m[1][1] * r[1]])
            .collect();
        Tensor::matrix(x.rows(), 2, data)
    }
}

/// Recipe for a synthetic domain pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainPairSpec {
    pub base_distribution: BaseDistribution,
    pub true_map: TrueMap,
    pub noise_scale: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DomainPairSpec {
    fn default() -> Self {
        Self {
            base_distribution: BaseDistribution::TwoMoons,
            true_map: TrueMap::Rotation(PI / 4.0),
            noise_scale: 0.05,
            n_train: 500,
            n_val: 200,
            n_test: 500,
            seed: 0,
        }
    }
}

/// Unpaired training samples of the two domains.
#[derive(Clone, Debug, PartialEq)]
pub struct UnpairedData {
    pub a: Tensor,
    pub b: Tensor,
}

/// Row-aligned pairs `(a_i, b_i)` with `b_i = map(a_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSet {
    pub a: Tensor,
    pub b: Tensor,
}

impl PairedSet {
    pub fn new(a: Tensor, b: Tensor) -> Result<Self> {
        if a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows() {
            return Err(Error::shape("paired set", a.shape(), b.shape()));
        }
        Ok(Self { a, b })
    }

    pub fn len(&self) -> usize {
        self.a.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pairs used for model selection during training.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationPairs(pub PairedSet);

/// Held-out pairs used only for the final evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TestPairs(pub PairedSet);

impl AsRef<PairedSet> for ValidationPairs {
    fn as_ref(&self) -> &PairedSet {
        &self.0
    }
}

impl AsRef<PairedSet> for TestPairs {
    fn as_ref(&self) -> &PairedSet {
        &self.0
    }
}

impl AsRef<PairedSet> for PairedSet {
    fn as_ref(&self) -> &PairedSet {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub train: UnpairedData,
    pub val: ValidationPairs,
    pub test: TestPairs,
}

impl DomainPairSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::config("data.n_train", "train, val and test counts must be at least 1"));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::config("data.noise_scale", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.base_distribution.dim()
    }

    fn stream(&self, k: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k);
        rng
    }

    fn paired(&self, n: usize, stream: u64) -> Result<PairedSet> {
        let a = self.base_distribution.sample(n, self.noise_scale, &mut self.stream(stream));
        let b = self.true_map.apply(&a)?;
        PairedSet::new(a, b)
    }

    /// Draws every split from its own random stream. The two training sets
    /// come from independent draws, so they carry no pairing.
    pub fn generate(&self) -> Result<SyntheticDataset> {
        self.validate()?;
        let a = self.base_distribution.sample(self.n_train, self.noise_scale, &mut self.stream(1));
        let b_src = self.base_distribution.sample(self.n_train, self.noise_scale, &mut self.stream(2));
        let b = self.true_map.apply(&b_src)?;
        Ok(SyntheticDataset {
            train: UnpairedData { a, b },
            val: ValidationPairs(self.paired(self.n_val, 3)?),
            test: TestPairs(self.paired(self.n_test, 4)?),
        })
    }

    /// Fresh draws from the true marginals of both domains.
    pub fn sample_marginals(&self, n: usize, stream: u64) -> Result<(Tensor, Tensor)> {
        let mut rng = self.stream(16 + 2 * stream);
        let a = self.base_distribution.sample(n, self.noise_scale, &mut rng);
        let mut rng = self.stream(17 + 2 * stream);
        let b_src = self.base_distribution.sample(n, self.noise_scale, &mut rng);
        Ok((a, self.true_map.apply(&b_src)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(map: &str) -> DomainPairSpec {
        DomainPairSpec {
            true_map: map.parse().unwrap(),
            noise_scale: 0.0,
            n_train: 50,
            n_val: 20,
            n_test: 30,
            ..DomainPairSpec::default()
        }
    }

    #[test]
    fn zero_rotation_is_identity() {
        let d = spec("rotation(0)").generate().unwrap();
        assert_eq!(d.test.0.a, d.test.0.b);
    }

    #[test]
    fn diag_scale_doubles() {
        let d = spec("diag_scale(2)").generate().unwrap();
        for (a, b) in d.test.0.a.data().iter().zip(d.test.0.b.data()) {
            assert_eq!(*b, 2.0 * a);
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let s = DomainPairSpec {
            base_distribution: BaseDistribution::GaussianMixture(4),
            ..spec("composed(rotation(0.3), shear(0.5))")
        };
        assert_eq!(s.generate().unwrap(), s.generate().unwrap());
    }

    #[test]
    fn splits_use_distinct_streams() {
        let d = spec("rotation(0)").generate().unwrap();
        assert_ne!(d.train.a.row(0), d.train.b.row(0));
        assert_ne!(d.train.a.row(0), d.test.0.a.row(0));
        assert_ne!(d.val.0.a.row(0), d.test.0.a.row(0));
    }

    #[test]
    fn unknown_names_are_rejected() {
        assert!("spiral(1)".parse::<TrueMap>().is_err());
        assert!("rotation".parse::<TrueMap>().is_err());
        assert!("rotation(x)".parse::<TrueMap>().is_err());
        assert!("swiss_roll".parse::<BaseDistribution>().is_err());
        let json = r#"{"true_map": "spiral(1)"}"#;
        assert!(serde_json::from_str::<DomainPairSpec>(json).is_err());
    }

    #[test]
    fn maps_round_trip_through_text_and_inverse() {
        let m: TrueMap = "composed(rotation(0.7853981633974483), diag_scale(2, 0.5), shear(-1.5))"
            .parse()
            .unwrap();
        assert_eq!(m.to_string().parse::<TrueMap>().unwrap(), m);
        let a = BaseDistribution::Checkerboard.sample(10, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
        let back = m.apply_inverse(&m.apply(&a).unwrap()).unwrap();
        assert!(back.max_abs_diff(&a).unwrap() < 1e-12);
        assert!(m.log_abs_det().abs() < 1e-12);
        assert!((TrueMap::DiagScale(2.0, 3.0).log_abs_det() - 6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn mixture_weights_sum_to_one() {
        let c = BaseDistribution::mixture_components(5);
        assert!((c.iter().map(|x| x.0).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkerboard_stays_on_dark_squares() {
        let x = BaseDistribution::Checkerboard.sample(500, 0.0, &mut ChaCha8Rng::seed_from_u64(2));
        for r in x.row_iter() {
            let (c, w) = ((r[0] + 2.0).floor() as i64, (r[1] + 2.0).floor() as i64);
            assert_eq!((c + w) % 2, 0, "{r:?}");
        }
    }

    #[test]
    fn empty_counts_are_rejected() {
        let s = DomainPairSpec {
            n_test: 0,
            ..DomainPairSpec::default()
        };
        assert!(s.generate().is_err());
    }
}
