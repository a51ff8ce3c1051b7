//! Initialization: rational fits to reference activations, gain estimation,
//! variance-preserving weights and MLP-to-GR-KAN transfer.

mod fit;
mod gain;
mod targets;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use fit::{fit_function, fit_rational, FitOptions, FitResult};
pub use gain::{
    estimate_gain, kan_default_variance, normal_expectation, GainEstimate, GainOptions, GainSource,
    KanVariance, MeanEstimate, Sampling, KAN_SPLINE_STD, MIN_GAIN_SAMPLES,
};
pub use targets::ActivationTarget;

use crate::error::{Error, Result};
use crate::grkan::{DenominatorLayout, GrKanLayer, GroupRationalParams};
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};

type FitKey = (ActivationTarget, usize, usize);

/// Default-option fit of `target`, computed once per process.
pub fn cached_fit(target: ActivationTarget, m: usize, n: usize) -> Result<Arc<FitResult>> {
    static CACHE: OnceLock<Mutex<HashMap<FitKey, Arc<FitResult>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(hit) = cache
        .lock()
        .expect("fit cache poisoned")
        .get(&(target, m, n))
    {
        return Ok(hit.clone());
    }
    let fit = Arc::new(fit_rational(
        target,
        &FitOptions {
            m,
            n,
            ..Default::default()
        },
    )?);
    cache
        .lock()
        .expect("fit cache poisoned")
        .insert((target, m, n), fit.clone());
    Ok(fit)
}

/// `W ~ N(0, α/d_in)`, bias zero.
pub fn init_variance_preserving<T: Scalar>(
    layer: &mut GrKanLayer<T>,
    alpha: f64,
    seed: u64,
) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Usage(format!("gain must be positive, got {alpha}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = (alpha / layer.d_in() as f64).sqrt();
    layer.set_weight(Tensor::randn([layer.d_out(), layer.d_in()], std, &mut rng)?)?;
    layer.set_bias(Tensor::zeros([layer.d_out()])?)
}

/// A dense layer `y = x·Wᵀ + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::shape(format!(
                "linear weight {:?} and bias {:?} disagree",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Linear { weight, bias })
    }

    /// Uniform `±1/√d_in` weights and bias.
    pub fn random(d_in: usize, d_out: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d_in as f64).sqrt();
        Self::new(
            Tensor::uniform([d_out, d_in], bound, &mut rng)?,
            Tensor::uniform([d_out], bound, &mut rng)?,
        )
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::linear(x, &self.weight, Some(&self.bias))
    }
}

/// `linear2(act(linear1(x)))`
pub fn mlp_forward<T: Scalar>(
    linear1: &Linear<T>,
    act: ActivationTarget,
    linear2: &Linear<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let h = linear1.forward(x)?;
    let h = h.map(|v| T::lit(act.eval(v.to_f64_lossless())));
    linear2.forward(&h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferOptions {
    pub groups: usize,
    pub layout: DenominatorLayout,
    pub fit: FitOptions,
}

impl Default for TransferOptions {
    fn default() -> Self {
        TransferOptions {
            groups: 8,
            layout: DenominatorLayout::Shared,
            fit: FitOptions::default(),
        }
    }
}

/// Loads an MLP's linear weights into two GR-KAN layers. The first rational
/// is fitted to the identity, the second to `act`; the block
/// `W₂·F₂(W₁·F₁(x) + b₁) + b₂` then tracks `linear2(act(linear1(x)))`.
pub fn transfer_from_mlp<T: Scalar>(
    linear1: &Linear<T>,
    act: ActivationTarget,
    linear2: &Linear<T>,
    opts: &TransferOptions,
) -> Result<(GrKanLayer<T>, GrKanLayer<T>)> {
    if linear1.d_out() != linear2.d_in() {
        return Err(Error::shape(format!(
            "MLP hidden widths disagree: {} vs {}",
            linear1.d_out(),
            linear2.d_in()
        )));
    }
    let ident = fit_rational(ActivationTarget::Identity, &opts.fit)?;
    let inner = fit_rational(act, &opts.fit)?;
    let layer = |lin: &Linear<T>, fit: &FitResult| -> Result<GrKanLayer<T>> {
        let params =
            GroupRationalParams::uniform(lin.d_in(), opts.groups, &fit.coeffs.cast(), opts.layout)?;
        GrKanLayer::new(params, lin.weight.clone(), lin.bias.clone())
    };
    Ok((layer(linear1, &ident)?, layer(linear2, &inner)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthProbe {
    pub alpha: f64,
    /// Output variance after each layer.
    pub variances: Vec<f64>,
}

/// Pushes `x ~ N(0,1)` through `depth` square GR-KAN layers that all use
/// `coeffs` and variance-preserving weights with gain `alpha`.
pub fn depth_variance_probe(
    coeffs: &crate::rational::RationalCoeffs<f64>,
    alpha: f64,
    depth: usize,
    width: usize,
    batch: usize,
    groups: usize,
    seed: u64,
) -> Result<DepthProbe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::<f64>::randn([batch, width], 1.0, &mut rng)?;
    let mut variances = Vec::with_capacity(depth);
    for _ in 0..depth {
        let mut layer =
            GrKanLayer::zeroed(width, width, groups, coeffs, DenominatorLayout::Shared)?;
        init_variance_preserving(&mut layer, alpha, rng.gen())?;
        x = layer.forward(&x)?;
        variances.push(x.variance());
    }
    Ok(DepthProbe { alpha, variances })
}
