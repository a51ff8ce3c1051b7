//! Monte-Carlo moments under Gaussian inputs.
//!
//! The default scheme is stratified: sample `i` of `N` is
//! `Φ⁻¹((i + uᵢ)/N)` with `uᵢ ~ U(0,1)`, which removes most of the sampling
//! noise of a plain i.i.d. average. The standard error comes from differences
//! of adjacent strata, `V̂ = N⁻² Σⱼ (f₂ⱼ − f₂ⱼ₊₁)²`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::targets::ActivationTarget;
use crate::error::{Error, Result};
use crate::rational::{safe_pade_horner, RationalCoeffs};

/// Samples per parallel chunk; each chunk owns a seeded stream.
const CHUNK: usize = 1 << 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    #[default]
    Stratified,
    Iid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainOptions {
    pub nsamples: usize,
    pub seed: u64,
    pub sampling: Sampling,
}

impl Default for GainOptions {
    fn default() -> Self {
        GainOptions {
            nsamples: 4_000_000,
            seed: 0,
            sampling: Sampling::Stratified,
        }
    }
}

pub const MIN_GAIN_SAMPLES: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// `E[f(σz)]` for `z ~ N(0,1)`.
pub fn normal_expectation(
    f: impl Fn(f64) -> f64 + Sync,
    sigma: f64,
    opts: &GainOptions,
) -> Result<MeanEstimate> {
    if opts.nsamples < 2 {
        return Err(Error::Usage("need at least two samples".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Usage(format!("sigma must be positive, got {sigma}")));
    }
    let n = opts.nsamples;
    let chunks = n.div_ceil(CHUNK);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    // (Σf, Σf², Σ pair differences², pair count) per chunk, reduced in order.
    let partials: Vec<(f64, f64, f64, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(c as u64);
            let (start, end) = (c * CHUNK, ((c + 1) * CHUNK).min(n));
            let (mut sum, mut sum_sq, mut pair_sq, mut pairs) = (0.0, 0.0, 0.0, 0);
            let mut prev = None;
            for i in start..end {
                let z = match opts.sampling {
                    Sampling::Stratified => {
                        let u: f64 = rng.sample(Open01);
                        std_normal.inverse_cdf((i as f64 + u) / n as f64)
                    }
                    Sampling::Iid => rng.sample(StandardNormal),
                };
                let v = f(sigma * z);
                sum += v;
                sum_sq += v * v;
                if (i - start) % 2 == 1 {
                    let d: f64 = v - prev.take().expect("even index precedes odd");
                    pair_sq += d * d;
                    pairs += 1;
                } else {
                    prev = Some(v);
                }
            }
            (sum, sum_sq, pair_sq, pairs)
        })
        .collect();
    let (mut sum, mut sum_sq, mut pair_sq, mut pairs) = (0.0, 0.0, 0.0, 0);
    for (a, b, c, d) in partials {
        sum += a;
        sum_sq += b;
        pair_sq += c;
        pairs += d;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let stderr = match opts.sampling {
        // Each pair difference estimates twice the within-pair variance;
        // rescale to the full sample size when the count is odd.
        Sampling::Stratified => (pair_sq / (nf * nf) * nf / (2 * pairs) as f64).sqrt(),
        Sampling::Iid => ((sum_sq / nf - mean * mean).max(0.0) / (nf - 1.0)).sqrt(),
    };
    if !mean.is_finite() {
        return Err(Error::Domain("Monte-Carlo average is not finite".into()));
    }
    Ok(MeanEstimate { mean, stderr })
}

pub enum GainSource<'a> {
    Target(ActivationTarget),
    Rational(&'a RationalCoeffs<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainEstimate {
    /// `1 / E[F(x)²]`, `x ~ N(0,1)`.
    pub alpha: f64,
    pub stderr: f64,
    pub mean_sq: f64,
    pub mean_sq_stderr: f64,
}

pub fn estimate_gain(source: GainSource<'_>, opts: &GainOptions) -> Result<GainEstimate> {
    if opts.nsamples < MIN_GAIN_SAMPLES {
        return Err(Error::Usage(format!(
            "gain estimation needs at least {MIN_GAIN_SAMPLES} samples, got {}",
            opts.nsamples
        )));
    }
    let est = match source {
        GainSource::Target(t) => normal_expectation(|x| t.eval(x).powi(2), 1.0, opts)?,
        GainSource::Rational(c) => {
            let (a, b) = (c.numerator(), c.denominator());
            normal_expectation(|x| safe_pade_horner(a, b, x).powi(2), 1.0, opts)?
        }
    };
    if est.mean < 1e-12 {
        return Err(Error::DegenerateActivation { mean_sq: est.mean });
    }
    Ok(GainEstimate {
        alpha: 1.0 / est.mean,
        stderr: est.stderr / (est.mean * est.mean),
        mean_sq: est.mean,
        mean_sq_stderr: est.stderr,
    })
}

/// Spline-coefficient standard deviation assumed by the vanilla KAN init.
pub const KAN_SPLINE_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KanVariance {
    pub sigma_x: f64,
    /// `E[silu²(x)]`, `x ~ N(0, σ_x²)`.
    pub e_silu2: f64,
    pub e_silu2_stderr: f64,
    /// `σ² = 0.01`, the zero-order spline contribution.
    pub spline_term: f64,
    /// `σ² + 3·E[silu²(x)]`.
    pub var_phi: f64,
}

/// Predicted `Var[φ(x)]` of a default-initialized KAN edge
/// `φ(x) = w_b·silu(x) + w_s·Σ cᵢBᵢ(x)`.
pub fn kan_default_variance(sigma_x: f64, opts: &GainOptions) -> Result<KanVariance> {
    let silu = crate::tensor::ops::Activation::Silu;
    let est = normal_expectation(|x| silu.eval(x).powi(2), sigma_x, opts)?;
    let spline_term = KAN_SPLINE_STD * KAN_SPLINE_STD;
    Ok(KanVariance {
        sigma_x,
        e_silu2: est.mean,
        e_silu2_stderr: est.stderr,
        spline_term,
        var_phi: spline_term + 3.0 * est.mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(sampling: Sampling) -> GainOptions {
        GainOptions {
            nsamples: 200_001,
            seed: 3,
            sampling,
        }
    }

    #[test]
    fn second_moment_of_normal() {
        for s in [Sampling::Stratified, Sampling::Iid] {
            let est = normal_expectation(|x| x * x, 2.0, &quick(s)).unwrap();
            assert!(
                (est.mean - 4.0).abs() < 4.0 * est.stderr.max(1e-9),
                "{s:?}: {est:?}"
            );
        }
    }

    #[test]
    fn stratified_beats_iid() {
        let a = normal_expectation(|x| x * x, 1.0, &quick(Sampling::Stratified)).unwrap();
        let b = normal_expectation(|x| x * x, 1.0, &quick(Sampling::Iid)).unwrap();
        assert!(a.stderr < b.stderr / 10.0, "{a:?} vs {b:?}");
    }

    #[test]
    fn deterministic_given_seed() {
        let a = normal_expectation(|x| x.abs(), 1.0, &quick(Sampling::Iid)).unwrap();
        let b = normal_expectation(|x| x.abs(), 1.0, &quick(Sampling::Iid)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_samples_rejected() {
        let opts = GainOptions {
            nsamples: 1000,
            ..Default::default()
        };
        assert!(matches!(
            estimate_gain(GainSource::Target(ActivationTarget::Relu), &opts),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn zero_function_is_degenerate() {
        let zero = RationalCoeffs::new(vec![0.0, 0.0], vec![0.0]).unwrap();
        let opts = GainOptions {
            nsamples: MIN_GAIN_SAMPLES,
            ..Default::default()
        };
        assert!(matches!(
            estimate_gain(GainSource::Rational(&zero), &opts),
            Err(Error::DegenerateActivation { .. })
        ));
    }
}
