//! Translation error on aligned pairs, latent-permutation comparison and
//! histogram estimates of marginal mismatch.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{AlignFlowModel, Domain};
use crate::synthetic::{DomainPairSpec, PairedSet};

/// Per-dimension affine map of a reference set's range onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeNormalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl RangeNormalizer {
    pub fn fit(reference: &Tensor) -> Result<Self> {
        if reference.rank() != 2 || reference.rows() == 0 {
            return Err(Error::InvalidArgument("normalizer needs a non-empty matrix".into()));
        }
        let d = reference.cols();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for r in reference.row_iter() {
            for j in 0..d {
                min[j] = min[j].min(r[j]);
                max[j] = max[j].max(r[j]);
            }
        }
        Ok(Self { min, max })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.min.len();
        if x.rank() != 2 || x.cols() != d {
            return Err(Error::Dimension {
                expected: d,
                got: x.cols(),
            });
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            for j in 0..d {
                let width = self.max[j] - self.min[j];
                // a constant coordinate has no range to normalize; centre it only
                let scale = if width > 0.0 { 2.0 / width } else { 1.0 };
                row[j] = (row[j] - self.min[j]) * scale - 1.0;
            }
        }
        Ok(out)
    }
}

/// Mean squared error over all coordinates after normalizing both arguments
/// with `norm`.
pub fn normalized_mse(pred: &Tensor, truth: &Tensor, norm: &RangeNormalizer) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("normalized_mse", pred.shape(), truth.shape()));
    }
    let (p, t) = (norm.apply(pred)?, norm.apply(truth)?);
    let sum: f64 = p.data().iter().zip(t.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / p.len() as f64)
}

/// `(mse_a_to_b, mse_b_to_a)` on aligned pairs, normalized with the pairs'
/// own per-dimension ranges.
pub fn translation_mse(model: &AlignFlowModel, pairs: &PairedSet) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one pair".into()));
    }
    let norm_a = RangeNormalizer::fit(&pairs.a)?;
    let norm_b = RangeNormalizer::fit(&pairs.b)?;
    let ab = normalized_mse(&model.translate_a_to_b(&pairs.a)?, &pairs.b, &norm_b)?;
    let ba = normalized_mse(&model.translate_b_to_a(&pairs.b)?, &pairs.a, &norm_a)?;
    Ok((ab, ba))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse_a_to_b: f64,
    pub mse_b_to_a: f64,
    pub nll_a: f64,
    pub nll_b: f64,
    /// Larger of the forward and reverse mean absolute cycle errors.
    pub cycle_error: f64,
}

fn mean_nll(model: &AlignFlowModel, x: &Tensor, domain: Domain) -> Result<f64> {
    let lp = model.log_prob(x, domain)?;
    Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
}

pub fn evaluate(model: &AlignFlowModel, pairs: impl AsRef<PairedSet>) -> Result<EvalReport> {
    let pairs = pairs.as_ref();
    let (mse_a_to_b, mse_b_to_a) = translation_mse(model, pairs)?;
    let report = EvalReport {
        mse_a_to_b,
        mse_b_to_a,
        nll_a: mean_nll(model, &pairs.a, Domain::A)?,
        nll_b: mean_nll(model, &pairs.b, Domain::B)?,
        cycle_error: model.cycle_loss(&pairs.a)?.max(model.cycle_loss_reverse(&pairs.b)?),
    };
    for (term, v) in [
        ("mse_a_to_b", report.mse_a_to_b),
        ("mse_b_to_a", report.mse_b_to_a),
        ("nll_a", report.nll_a),
        ("nll_b", report.nll_b),
        ("cycle_error", report.cycle_error),
    ] {
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!("evaluation produced a non-finite {term}")));
        }
    }
    Ok(report)
}

/// Comparison of a model with its latent-permuted twin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationReport {
    pub perm: Vec<usize>,
    pub nll_a: f64,
    pub nll_b: f64,
    pub nll_a_permuted: f64,
    pub nll_b_permuted: f64,
    pub mse_a_to_b: f64,
    pub mse_a_to_b_permuted: f64,
}

impl PermutationReport {
    /// Largest absolute per-domain NLL difference.
    pub fn nll_gap(&self) -> f64 {
        (self.nll_a - self.nll_a_permuted)
            .abs()
            .max((self.nll_b - self.nll_b_permuted).abs())
    }

    pub fn mse_gap(&self) -> f64 {
        (self.mse_a_to_b - self.mse_a_to_b_permuted).abs()
    }
}

/// Composes `perm` into the A-decoder's latent input and compares the two
/// solutions. With a symmetric prior the per-domain likelihoods coincide while
/// the cross-domain map changes.
pub fn permutation_nonidentifiability_demo(
    model: &AlignFlowModel,
    perm: &[usize],
    pairs: impl AsRef<PairedSet>,
) -> Result<PermutationReport> {
    let pairs = pairs.as_ref();
    let permuted = model.with_latent_permutation(perm)?;
    let (mse, _) = translation_mse(model, pairs)?;
    let (mse_p, _) = translation_mse(&permuted, pairs)?;
    Ok(PermutationReport {
        perm: perm.to_vec(),
        nll_a: mean_nll(model, &pairs.a, Domain::A)?,
        nll_b: mean_nll(model, &pairs.b, Domain::B)?,
        nll_a_permuted: mean_nll(&permuted, &pairs.a, Domain::A)?,
        nll_b_permuted: mean_nll(&permuted, &pairs.b, Domain::B)?,
        mse_a_to_b: mse,
        mse_a_to_b_permuted: mse_p,
    })
}

/// Histogram settings for [`histogram_kl`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramSpec {
    pub bins: usize,
    /// Added to every bin probability before renormalizing.
    pub smoothing: f64,
    /// Tail fraction per side excluded when choosing the bin range.
    pub tail: f64,
    /// Largest tolerated fraction of either sample set outside the bins.
    pub max_out_of_range: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            bins: 64,
            smoothing: 1e-6,
            tail: 1e-4,
            max_out_of_range: 1e-3,
        }
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Plug-in estimate of `KL(p || q)` from two 2-D sample sets on a shared
/// `bins x bins` grid.
///
/// The grid spans both sets after trimming a `tail` fraction per side and
/// dimension, widened by 1%. Points outside the grid are counted; more than
/// `max_out_of_range` of either set is an error rather than a silently
/// truncated estimate.
pub fn histogram_kl(p: &Tensor, q: &Tensor, spec: &HistogramSpec) -> Result<f64> {
    for t in [p, q] {
        if t.rank() != 2 || t.cols() != 2 {
            return Err(Error::Unsupported(format!(
                "histogram divergence needs 2-D samples, got {:?}",
                t.shape()
            )));
        }
        if t.rows() == 0 {
            return Err(Error::InvalidArgument("histogram of an empty sample set".into()));
        }
        if !t.is_finite() {
            return Err(Error::InvalidArgument("histogram samples must be finite".into()));
        }
    }
    if spec.bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }

    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for t in [p, q] {
        for j in 0..2 {
            let mut col: Vec<f64> = t.row_iter().map(|r| r[j]).collect();
            col.sort_by(f64::total_cmp);
            lo[j] = lo[j].min(quantile(&col, spec.tail));
            hi[j] = hi[j].max(quantile(&col, 1.0 - spec.tail));
        }
    }
    for j in 0..2 {
        let pad = 0.01 * (hi[j] - lo[j]).max(1e-12);
        lo[j] -= pad;
        hi[j] += pad;
    }

    let k = spec.bins;
    let hist = |t: &Tensor| -> Result<Vec<f64>> {
        let mut counts = vec![0.0; k * k];
        let mut outside = 0usize;
        for r in t.row_iter() {
            let mut cell = [0usize; 2];
            let mut inside = true;
            for j in 0..2 {
                let u = (r[j] - lo[j]) / (hi[j] - lo[j]);
                if !(0.0..=1.0).contains(&u) {
                    inside = false;
                    break;
                }
                cell[j] = ((u * k as f64) as usize).min(k - 1);
            }
            if inside {
                counts[cell[0] * k + cell[1]] += 1.0;
            } else {
                outside += 1;
            }
        }
        let frac = outside as f64 / t.rows() as f64;
        if frac > spec.max_out_of_range {
            return Err(Error::InvalidArgument(format!(
                "{:.3}% of samples fall outside the histogram range",
                100.0 * frac
            )));
        }
        let n = t.rows() as f64;
        let mut probs: Vec<f64> = counts.iter().map(|c| c / n + spec.smoothing).collect();
        let z: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|v| *v /= z);
        Ok(probs)
    };
    let (hp, hq) = (hist(p)?, hist(q)?);
    Ok(hp.iter().zip(&hq).map(|(a, b)| a * (a / b).ln()).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalReport {
    /// `KL(true A || model A)`.
    pub kl_a: f64,
    /// `KL(true B || model B)`.
    pub kl_b: f64,
    pub samples: usize,
    pub bins: usize,
}

/// Compares the model's marginals with fresh draws of the true marginals.
pub fn marginal_consistency_check(
    model: &AlignFlowModel,
    spec: &DomainPairSpec,
    hist: &HistogramSpec,
    samples: usize,
    seed: u64,
) -> Result<MarginalReport> {
    if model.dim() > 2 {
        return Err(Error::Unsupported(format!(
            "marginal histograms need dim <= 2, model has dim {}",
            model.dim()
        )));
    }
    if model.dim() != spec.dim() {
        return Err(Error::Dimension {
            expected: spec.dim(),
            got: model.dim(),
        });
    }
    let (true_a, true_b) = spec.sample_marginals(samples, seed)?;
    let (model_a, model_b) = model.sample_paired(samples, seed)?;
    Ok(MarginalReport {
        kl_a: histogram_kl(&true_a, &model_a, hist)?,
        kl_b: histogram_kl(&true_b, &model_b, hist)?,
        samples,
        bins: hist.bins,
    })
}

/// Max-normalized model density of `domain` on a `grid x grid` raster of
/// `[-extent, extent]^2`, as 8-bit grey levels. Pixel centres sit at
/// `-extent + (i + 0.5) * 2 extent / grid`; the first row is the top
/// (largest second coordinate), so the image is displayed upright.
pub fn density_heatmap(model: &AlignFlowModel, domain: Domain, grid: usize, extent: f64) -> Result<Vec<u8>> {
    if model.dim() != 2 {
        return Err(Error::Unsupported(format!(
            "heatmaps need a 2-dimensional model, this one has {}",
            model.dim()
        )));
    }
    if grid == 0 {
        return Err(Error::InvalidArgument("heatmap grid must be at least 1".into()));
    }
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(Error::InvalidArgument("heatmap extent must be positive".into()));
    }
    let step = 2.0 * extent / grid as f64;
    let centre = |i: usize| -extent + (i as f64 + 0.5) * step;
    let mut points = Vec::with_capacity(2 * grid * grid);
    for r in 0..grid {
        for c in 0..grid {
            points.push(centre(c));
            points.push(centre(grid - 1 - r));
        }
    }
    let lp = model.log_prob(&Tensor::matrix(grid * grid, 2, points)?, domain)?;
    let max = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Domain {
            op: "density_heatmap",
            detail: "density is not finite on the grid".into(),
        });
    }
    Ok(lp
        .iter()
        .map(|&l| (255.0 * (l - max).exp()).round().clamp(0.0, 255.0) as u8)
        .collect())
}
