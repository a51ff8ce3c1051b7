//! The Group-Rational KAN layer.
//!
//! Input channels are split into `g` contiguous groups of width
//! `d_g = d_in / g`; channel `i` is transformed by its group's rational
//! function `F_{⌊i/d_g⌋}`, then a dense map mixes channels:
//!
//! ```text
//! y_j = Σ_i W[j,i] · F_{⌊i/d_g⌋}(x_i) + bias_j
//! ```
//!
//! Each group owns its numerator; by default one denominator vector is shared
//! by every group ([`DenominatorLayout::Shared`]).

pub mod kernels;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{self, LayerAudit, LayerVariant};
use crate::rational::RationalCoeffs;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorLayout {
    #[default]
    Shared,
    PerGroup,
}

/// Which forward implementation to run. All produce the same values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelVariant {
    Fused,
    Vectorized,
    Looped,
}

impl KernelVariant {
    pub const ALL: [KernelVariant; 3] = [
        KernelVariant::Looped,
        KernelVariant::Vectorized,
        KernelVariant::Fused,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelVariant::Fused => "fused",
            KernelVariant::Vectorized => "vectorized",
            KernelVariant::Looped => "looped",
        }
    }

    /// Applies the group-rational stage with this variant.
    pub fn apply<T: Scalar>(
        self,
        x: &Tensor<T>,
        act: &GroupRationalParams<T>,
    ) -> Result<Tensor<T>> {
        act.check_input(x)?;
        match self {
            KernelVariant::Fused => kernels::group_rational(x, &act.numerators, &act.denominators),
            KernelVariant::Vectorized => {
                kernels::group_rational_vectorized(x, &act.numerators, &act.denominators)
            }
            KernelVariant::Looped => {
                kernels::group_rational_looped(x, &act.numerators, &act.denominators)
            }
        }
    }
}

/// `g` numerators (`[g, m+1]`) plus one shared (`[1, n]`) or per-group
/// (`[g, n]`) denominator table, acting on `d_in` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRationalParams<T> {
    d_in: usize,
    numerators: Tensor<T>,
    denominators: Tensor<T>,
}

impl<T: Scalar> GroupRationalParams<T> {
    /// Every group starts from the same `coeffs`.
    pub fn uniform(
        d_in: usize,
        groups: usize,
        coeffs: &RationalCoeffs<T>,
        layout: DenominatorLayout,
    ) -> Result<Self> {
        if groups == 0 || !d_in.is_multiple_of(groups) {
            return Err(Error::config(format!(
                "d_in = {d_in} is not divisible into {groups} groups"
            )));
        }
        if coeffs.n() == 0 {
            return Err(Error::config(
                "group rational layers need denominator degree n ≥ 1",
            ));
        }
        let den_rows = match layout {
            DenominatorLayout::Shared => 1,
            DenominatorLayout::PerGroup => groups,
        };
        let numerators = Tensor::new(
            [groups, coeffs.m() + 1],
            (0..groups)
                .flat_map(|_| coeffs.numerator().iter().copied())
                .collect(),
        )?;
        let denominators = Tensor::new(
            [den_rows, coeffs.n()],
            (0..den_rows)
                .flat_map(|_| coeffs.denominator().iter().copied())
                .collect(),
        )?;
        Ok(GroupRationalParams {
            d_in,
            numerators,
            denominators,
        })
    }

    pub fn from_tensors(
        d_in: usize,
        numerators: Tensor<T>,
        denominators: Tensor<T>,
    ) -> Result<Self> {
        let probe = Tensor::from_parts(vec![d_in], vec![T::zero(); d_in]);
        kernels::GroupShape::of(&probe, &numerators, &denominators)?;
        if !numerators.all_finite() || !denominators.all_finite() {
            return Err(Error::Domain("rational coefficients must be finite".into()));
        }
        Ok(GroupRationalParams {
            d_in,
            numerators,
            denominators,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn groups(&self) -> usize {
        self.numerators.shape()[0]
    }

    pub fn group_width(&self) -> usize {
        self.d_in / self.groups()
    }

    pub fn m(&self) -> usize {
        self.numerators.shape()[1] - 1
    }

    pub fn n(&self) -> usize {
        self.denominators.shape()[1]
    }

    pub fn layout(&self) -> DenominatorLayout {
        if self.denominators.shape()[0] == 1 {
            DenominatorLayout::Shared
        } else {
            DenominatorLayout::PerGroup
        }
    }

    /// Group index `⌊i / d_g⌋` of input channel `i`.
    pub fn group_of(&self, channel: usize) -> usize {
        channel / self.group_width()
    }

    pub fn numerators(&self) -> &Tensor<T> {
        &self.numerators
    }

    pub fn denominators(&self) -> &Tensor<T> {
        &self.denominators
    }

    pub fn numerators_mut(&mut self) -> &mut Tensor<T> {
        &mut self.numerators
    }

    pub fn denominators_mut(&mut self) -> &mut Tensor<T> {
        &mut self.denominators
    }

    /// The rational function group `k` applies.
    pub fn coeffs(&self, group: usize) -> RationalCoeffs<T> {
        let (m, n) = (self.m(), self.n());
        let dr = match self.layout() {
            DenominatorLayout::Shared => 0,
            DenominatorLayout::PerGroup => group,
        };
        RationalCoeffs::new(
            self.numerators.data()[group * (m + 1)..(group + 1) * (m + 1)].to_vec(),
            self.denominators.data()[dr * n..(dr + 1) * n].to_vec(),
        )
        .expect("stored coefficients are finite")
    }

    pub fn param_count(&self) -> usize {
        self.numerators.numel() + self.denominators.numel()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() == 0 || x.last_dim() != self.d_in {
            return Err(Error::shape(format!(
                "input {:?} does not end in d_in = {}",
                x.shape(),
                self.d_in
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        KernelVariant::Fused.apply(x, self)
    }
}

/// Group-rational stage followed by `W · F(x) + bias`, `W` stored `[d_out, d_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrKanLayer<T> {
    act: GroupRationalParams<T>,
    weight: Tensor<T>,
    bias: Tensor<T>,
}

impl<T: Scalar> GrKanLayer<T> {
    pub fn new(act: GroupRationalParams<T>, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || weight.shape()[1] != act.d_in() {
            return Err(Error::shape(format!(
                "weight {:?} does not match d_in = {}",
                weight.shape(),
                act.d_in()
            )));
        }
        if bias.shape() != [weight.shape()[0]] {
            return Err(Error::shape(format!(
                "bias {:?} does not match d_out = {}",
                bias.shape(),
                weight.shape()[0]
            )));
        }
        Ok(GrKanLayer { act, weight, bias })
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> GrKanLayer<U> {
        GrKanLayer {
            act: GroupRationalParams {
                d_in: self.act.d_in,
                numerators: self.act.numerators.cast(),
                denominators: self.act.denominators.cast(),
            },
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    /// Zero weights and bias; every group starts from `coeffs`.
    pub fn zeroed(
        d_in: usize,
        d_out: usize,
        groups: usize,
        coeffs: &RationalCoeffs<T>,
        layout: DenominatorLayout,
    ) -> Result<Self> {
        let act = GroupRationalParams::uniform(d_in, groups, coeffs, layout)?;
        Self::new(act, Tensor::zeros([d_out, d_in])?, Tensor::zeros([d_out])?)
    }

    pub fn d_in(&self) -> usize {
        self.act.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn act(&self) -> &GroupRationalParams<T> {
        &self.act
    }

    pub fn act_mut(&mut self) -> &mut GroupRationalParams<T> {
        &mut self.act
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn set_weight(&mut self, weight: Tensor<T>) -> Result<()> {
        if weight.shape() != self.weight.shape() {
            return Err(Error::shape(format!(
                "replacement weight {:?} differs from {:?}",
                weight.shape(),
                self.weight.shape()
            )));
        }
        self.weight = weight;
        Ok(())
    }

    pub fn set_bias(&mut self, bias: Tensor<T>) -> Result<()> {
        if bias.shape() != self.bias.shape() {
            return Err(Error::shape(format!(
                "replacement bias {:?} differs from {:?}",
                bias.shape(),
                self.bias.shape()
            )));
        }
        self.bias = bias;
        Ok(())
    }

    /// `d_in·d_out + d_out` linear parameters plus the rational coefficients.
    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel() + self.act.param_count()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(x, KernelVariant::Fused)
    }

    pub fn forward_fused(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(x, KernelVariant::Fused)
    }

    pub fn forward_vectorized(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(x, KernelVariant::Vectorized)
    }

    pub fn forward_looped(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(x, KernelVariant::Looped)
    }

    pub fn forward_with(&self, x: &Tensor<T>, variant: KernelVariant) -> Result<Tensor<T>> {
        let h = variant.apply(x, &self.act)?;
        Ok(linear_stage(&h, &self.weight, &self.bias))
    }

    /// Records the layer on `graph` with every parameter as a differentiable
    /// leaf. Returns the output and the parameter handles
    /// `[numerators, denominators, weight, bias]`.
    pub fn forward_graph<G: Graph<T>>(
        &self,
        graph: &mut G,
        x: &G::Var,
    ) -> Result<(G::Var, [G::Var; 4])> {
        let num = graph.param(&self.act.numerators);
        let den = graph.param(&self.act.denominators);
        let w = graph.param(&self.weight);
        let b = graph.param(&self.bias);
        let h = graph.group_rational(x, &num, &den)?;
        let y = graph.linear(&h, &w, Some(&b))?;
        Ok((y, [num, den, w, b]))
    }
}

/// `h · Wᵀ + bias` with each output accumulated in `f64`.
pub fn linear_stage<T: Scalar>(h: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    use rayon::prelude::*;
    let (d_in, d_out) = (weight.shape()[1], weight.shape()[0]);
    let rows = h.rows();
    let w64: Vec<f64> = weight.data().iter().map(|v| v.to_f64_lossless()).collect();
    let mut out = vec![T::zero(); rows * d_out];
    out.par_chunks_mut(d_out)
        .zip(h.data().par_chunks(d_in))
        .for_each(|(orow, hrow)| {
            let h64: Vec<f64> = hrow.iter().map(|v| v.to_f64_lossless()).collect();
            for (j, o) in orow.iter_mut().enumerate() {
                let wrow = &w64[j * d_in..(j + 1) * d_in];
                let mut acc = bias.data()[j].to_f64_lossless();
                for (w, x) in wrow.iter().zip(&h64) {
                    acc += w * x;
                }
                *o = T::lit(acc);
            }
        });
    let mut shape = h.shape().to_vec();
    *shape.last_mut().expect("rank ≥ 1") = d_out;
    Tensor::from_parts(shape, out)
}

/// Parameter and FLOPs accounting for one layer of the given family.
pub fn count_params_flops(d_in: usize, d_out: usize, variant: LayerVariant) -> Result<LayerAudit> {
    flops::audit_layer(d_in, d_out, variant)
}
