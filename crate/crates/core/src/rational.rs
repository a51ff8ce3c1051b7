//! Safe Padé rational functions
//!
//! ```text
//!          a₀ + a₁x + … + a_m xᵐ          P(x)
//! F(x) = ─────────────────────────  =  ────────────
//!         1 + |b₁x + … + b_n xⁿ|        1 + |A(x)|
//! ```
//!
//! The denominator is at least one for every real `x`, so `F` has no poles.
//! Evaluation comes in two orders: [`RationalCoeffs::eval_naive`] forms each
//! power of `x` independently, [`RationalCoeffs::eval_horner`] nests both
//! polynomials. Both are generic over [`PolyScalar`] so the FLOPs auditor can
//! run them on an op-counting scalar.

use std::ops::{Add, Div, Mul};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The arithmetic a rational evaluation needs.
pub trait PolyScalar: Copy + Add<Output = Self> + Mul<Output = Self> + Div<Output = Self> {
    fn zero() -> Self;
    fn one() -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
}

impl<T: Scalar> PolyScalar for T {
    #[inline]
    fn zero() -> Self {
        T::zero()
    }
    #[inline]
    fn one() -> Self {
        T::one()
    }
    #[inline]
    fn abs(self) -> Self {
        num_traits::Float::abs(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        num_traits::Float::is_finite(self)
    }
}

/// Nested evaluation of `P(x)` and `A(x)`.
///
/// `A` is evaluated as a degree-`n` polynomial whose constant term is zero,
/// `((b_n x + b_{n-1}) x + … + b₁) x + 0`, which costs `n` multiplications and
/// `n` additions.
#[inline(always)]
pub fn horner_parts<S: PolyScalar>(a: &[S], b: &[S], x: S) -> (S, S) {
    let m = a.len() - 1;
    let mut p = a[m];
    for k in (0..m).rev() {
        p = p * x + a[k];
    }
    let mut q = S::zero();
    if let Some((&last, rest)) = b.split_last() {
        q = last;
        for &bk in rest.iter().rev() {
            q = q * x + bk;
        }
        q = q * x + S::zero();
    }
    (p, q)
}

/// `P(x) / (1 + |A(x)|)` in nested form.
#[inline(always)]
pub fn safe_pade_horner<S: PolyScalar>(a: &[S], b: &[S], x: S) -> S {
    let (p, q) = horner_parts(a, b, x);
    p / (S::one() + q.abs())
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Accumulates `upstream · ∂F/∂a` into `da` and `upstream · ∂F/∂b` into `db`,
/// returning `(F(x), upstream · ∂F/∂x)`.
///
/// This is the only gradient routine in the crate: [`RationalCoeffs::grad`]
/// and the tape adjoint of the group-rational op both call it.
#[inline]
pub fn accumulate_grad<T: Scalar>(
    a: &[T],
    b: &[T],
    x: T,
    upstream: T,
    da: &mut [T],
    db: &mut [T],
) -> (T, T) {
    let m = a.len() - 1;
    let n = b.len();

    // P and P' together.
    let mut p = a[m];
    let mut dp = T::zero();
    for k in (0..m).rev() {
        dp = dp * x + p;
        p = p * x + a[k];
    }
    // A(x) = x·B(x) with B(x) = b₁ + b₂x + … ; A' = B + x·B'.
    let (mut bsum, mut dbsum) = (T::zero(), T::zero());
    if n > 0 {
        bsum = b[n - 1];
        for k in (0..n - 1).rev() {
            dbsum = dbsum * x + bsum;
            bsum = bsum * x + b[k];
        }
    }
    let av = bsum * x;
    let dav = bsum + dbsum * x;
    let s = sign(av);
    let q = T::one() + av.abs();
    let inv_q = T::one() / q;
    let f = p * inv_q;

    let mut xp = upstream * inv_q;
    for d in da.iter_mut() {
        *d += xp;
        xp *= x;
    }
    // ∂F/∂b_k = -x^k · sign(A) · P / Q²
    let coef = -upstream * s * f * inv_q;
    let mut xp = coef * x;
    for d in db.iter_mut() {
        *d += xp;
        xp *= x;
    }
    let dfdx = dp * inv_q - s * dav * f * inv_q;
    (f, upstream * dfdx)
}

/// Gradients of `F` at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct RationalGrad<T> {
    pub dx: T,
    pub da: Vec<T>,
    pub db: Vec<T>,
}

/// Coefficients of one safe Padé function: numerator `a₀..a_m`, denominator
/// `b₁..b_n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RationalCoeffs<T> {
    numerator: Vec<T>,
    denominator: Vec<T>,
}

impl<T: Scalar> RationalCoeffs<T> {
    pub fn new(numerator: Vec<T>, denominator: Vec<T>) -> Result<Self> {
        if numerator.is_empty() {
            return Err(Error::config("rational numerator needs at least a₀"));
        }
        if !numerator.iter().chain(&denominator).all(|c| c.is_finite()) {
            return Err(Error::Domain("rational coefficients must be finite".into()));
        }
        Ok(RationalCoeffs {
            numerator,
            denominator,
        })
    }

    /// `F(x) = x` exactly: `a = [0, 1, 0, …]`, `b = 0`. Needs `m ≥ 1`.
    pub fn identity(m: usize, n: usize) -> Result<Self> {
        if m < 1 {
            return Err(Error::config("identity needs numerator degree ≥ 1"));
        }
        let mut a = vec![T::zero(); m + 1];
        a[1] = T::one();
        Ok(RationalCoeffs {
            numerator: a,
            denominator: vec![T::zero(); n],
        })
    }

    pub fn m(&self) -> usize {
        self.numerator.len() - 1
    }

    pub fn n(&self) -> usize {
        self.denominator.len()
    }

    pub fn numerator(&self) -> &[T] {
        &self.numerator
    }

    pub fn denominator(&self) -> &[T] {
        &self.denominator
    }

    /// `[a₀..a_m, b₁..b_n]`
    pub fn to_flat(&self) -> Vec<T> {
        self.numerator
            .iter()
            .chain(&self.denominator)
            .copied()
            .collect()
    }

    pub fn from_flat(flat: &[T], m: usize, n: usize) -> Result<Self> {
        if flat.len() != m + 1 + n {
            return Err(Error::shape(format!(
                "expected {} coefficients for degree {m}/{n}, got {}",
                m + 1 + n,
                flat.len()
            )));
        }
        Self::new(flat[..=m].to_vec(), flat[m + 1..].to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> RationalCoeffs<U> {
        let conv = |v: &[T]| v.iter().map(|c| U::lit(c.to_f64_lossless())).collect();
        RationalCoeffs {
            numerator: conv(&self.numerator),
            denominator: conv(&self.denominator),
        }
    }

    /// `Q(x) = 1 + |A(x)|`
    pub fn q(&self, x: T) -> T {
        T::one() + horner_parts(&self.numerator, &self.denominator, x).1.abs()
    }

    pub fn eval_naive(&self, x: T) -> Result<T> {
        eval_naive_with(&self.numerator, &self.denominator, x)
    }

    pub fn eval_horner(&self, x: T) -> Result<T> {
        eval_horner_with(&self.numerator, &self.denominator, x)
    }

    /// Analytic `(∂F/∂x, ∂F/∂a, ∂F/∂b)`. `sign(A(x))` is taken as 0 where
    /// `A(x) = 0`.
    pub fn grad(&self, x: T) -> RationalGrad<T> {
        let mut da = vec![T::zero(); self.numerator.len()];
        let mut db = vec![T::zero(); self.denominator.len()];
        let (_, dx) = accumulate_grad(
            &self.numerator,
            &self.denominator,
            x,
            T::one(),
            &mut da,
            &mut db,
        );
        RationalGrad { dx, da, db }
    }

    /// Elementwise [`eval_horner`](Self::eval_horner); shape preserved.
    pub fn eval_batch(&self, xs: &Tensor<T>) -> Tensor<T> {
        xs.map(|x| safe_pade_horner(&self.numerator, &self.denominator, x))
    }
}

fn check_domain<S: PolyScalar>(a: &[S], x: S) -> Result<()> {
    if a.is_empty() {
        return Err(Error::config("rational numerator needs at least a₀"));
    }
    if !x.is_finite() {
        return Err(Error::Domain(
            "rational function evaluated at a non-finite input".into(),
        ));
    }
    Ok(())
}

/// Power-sum evaluation: `x^k` is built from `k` fresh multiplications for
/// every term, then scaled by its coefficient and summed.
pub fn eval_naive_with<S: PolyScalar>(a: &[S], b: &[S], x: S) -> Result<S> {
    check_domain(a, x)?;
    let power = |k: usize| {
        let mut acc = S::one();
        for _ in 0..k {
            acc = acc * x;
        }
        acc
    };
    let mut p = a[0];
    for (k, &ak) in a.iter().enumerate().skip(1) {
        p = p + ak * power(k);
    }
    let mut q = S::zero();
    for (k, &bk) in b.iter().enumerate() {
        q = q + bk * power(k + 1);
    }
    Ok(p / (S::one() + q.abs()))
}

pub fn eval_horner_with<S: PolyScalar>(a: &[S], b: &[S], x: S) -> Result<S> {
    check_domain(a, x)?;
    Ok(safe_pade_horner(a, b, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn power_sum_oracle(a: &[f64], b: &[f64], x: f64) -> f64 {
        let p: f64 = a
            .iter()
            .enumerate()
            .map(|(i, c)| c * x.powi(i as i32))
            .sum();
        let q: f64 = b
            .iter()
            .enumerate()
            .map(|(j, c)| c * x.powi(j as i32 + 1))
            .sum();
        p / (1.0 + q.abs())
    }

    /// Magnitude the rounding error of either evaluation order scales with:
    /// `(Σ|aᵢ||x|ⁱ + |F|·Σ|bⱼ||x|ʲ) / Q(x)`.
    fn evaluation_scale(c: &RationalCoeffs<f64>, x: f64) -> f64 {
        let pa: f64 = c
            .numerator()
            .iter()
            .enumerate()
            .map(|(i, a)| a.abs() * x.abs().powi(i as i32))
            .sum();
        let qa: f64 = c
            .denominator()
            .iter()
            .enumerate()
            .map(|(j, b)| b.abs() * x.abs().powi(j as i32 + 1))
            .sum();
        let q = c.q(x);
        (pa + c.eval_naive(x).unwrap().abs() * qa) / q
    }

    fn random_coeffs(rng: &mut impl Rng, m: usize, n: usize, scale: f64) -> RationalCoeffs<f64> {
        let a = (0..=m).map(|_| rng.gen_range(-scale..scale)).collect();
        let b = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        RationalCoeffs::new(a, b).unwrap()
    }

    #[test]
    fn constant_and_identity_numerators() {
        let c = RationalCoeffs::new(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0], vec![0.0; 4]).unwrap();
        for x in [-7.0, 0.0, 3.3] {
            assert_eq!(c.eval_naive(x).unwrap(), 1.0);
        }
        let id = RationalCoeffs::<f64>::identity(5, 4).unwrap();
        assert_eq!(id.eval_naive(2.0).unwrap(), 2.0);
        assert_eq!(id.eval_horner(-3.0).unwrap(), -3.0);
    }

    #[test]
    fn naive_matches_power_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let c = random_coeffs(&mut rng, 5, 4, 5.0);
            for x in [-2.0, 0.3, 5.0] {
                let want = power_sum_oracle(c.numerator(), c.denominator(), x);
                let got = c.eval_naive(x).unwrap();
                assert!(
                    (got - want).abs() <= 1e-12 * want.abs().max(1.0),
                    "{got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn horner_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut worst = 0.0f64;
        for _ in 0..10_000 {
            let c = random_coeffs(&mut rng, 5, 4, 5.0);
            let x = rng.gen_range(-10.0..10.0);
            let d = (c.eval_horner(x).unwrap() - c.eval_naive(x).unwrap()).abs();
            worst = worst.max(d / evaluation_scale(&c, x).max(1.0));
        }
        assert!(worst < 1e-12, "max deviation {worst:e}");
    }

    #[test]
    fn non_finite_input_is_domain_error() {
        let c = RationalCoeffs::<f64>::identity(5, 4).unwrap();
        assert!(matches!(c.eval_naive(f64::NAN), Err(Error::Domain(_))));
        assert!(matches!(
            c.eval_horner(f64::INFINITY),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn rejects_non_finite_coefficients() {
        assert!(RationalCoeffs::new(vec![f64::NAN], vec![]).is_err());
    }

    #[test]
    fn identity_and_constant_gradients() {
        let id = RationalCoeffs::<f64>::identity(5, 4).unwrap();
        for x in [-3.0, -0.1, 0.0, 2.5] {
            let g = id.grad(x);
            assert_eq!(g.dx, 1.0);
            assert_eq!(g.da[0], 1.0);
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-6;
        let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1.0);
        for _ in 0..200 {
            let c = random_coeffs(&mut rng, 5, 4, 1.0);
            let x = rng.gen_range(-2.0..2.0);
            // Keep central differences away from the |A| kink.
            if horner_parts(c.numerator(), c.denominator(), x).1.abs() < 1e-3 {
                continue;
            }
            let g = c.grad(x);
            let f = |c: &RationalCoeffs<f64>, x: f64| c.eval_naive(x).unwrap();
            let fd_x = (f(&c, x + h) - f(&c, x - h)) / (2.0 * h);
            assert!(rel(g.dx, fd_x) < 1e-6);
            let mut flat = c.to_flat();
            for i in 0..flat.len() {
                let orig = flat[i];
                flat[i] = orig + h;
                let up = f(&RationalCoeffs::from_flat(&flat, 5, 4).unwrap(), x);
                flat[i] = orig - h;
                let down = f(&RationalCoeffs::from_flat(&flat, 5, 4).unwrap(), x);
                flat[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = if i <= 5 { g.da[i] } else { g.db[i - 6] };
                assert!(rel(an, fd) < 1e-6, "coeff {i}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn eval_batch_is_bitwise_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let c = random_coeffs(&mut rng, 5, 4, 2.0);
        let xs = Tensor::<f64>::randn([3, 7], 2.0, &mut rng).unwrap();
        let ys = c.eval_batch(&xs);
        assert_eq!(ys.shape(), xs.shape());
        for (&x, &y) in xs.data().iter().zip(ys.data()) {
            assert_eq!(y.to_bits(), c.eval_horner(x).unwrap().to_bits());
        }
    }

    proptest! {
        #[test]
        fn denominator_never_below_one(
            b in proptest::collection::vec(-50.0f64..50.0, 0..7),
            x in -100.0f64..100.0,
        ) {
            let c = RationalCoeffs::new(vec![1.0], b).unwrap();
            prop_assert!(c.q(x) >= 1.0);
        }

        #[test]
        fn bounded_by_numerator(
            a in proptest::collection::vec(-5.0f64..5.0, 6),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            x in -10.0f64..10.0,
        ) {
            let c = RationalCoeffs::new(a.clone(), b).unwrap();
            let p = power_sum_oracle(&a, &[], x);
            prop_assert!(c.eval_horner(x).unwrap().abs() <= p.abs() * (1.0 + 1e-12) + 1e-300);
        }

        #[test]
        fn odd_numerator_even_denominator_is_odd(
            odd in proptest::collection::vec(-3.0f64..3.0, 3),
            even in proptest::collection::vec(-3.0f64..3.0, 2),
            x in -4.0f64..4.0,
        ) {
            // a has only odd-index terms; b only even-index terms (b₂, b₄), so A is even.
            let a = vec![0.0, odd[0], 0.0, odd[1], 0.0, odd[2]];
            let b = vec![0.0, even[0], 0.0, even[1]];
            let c = RationalCoeffs::new(a, b).unwrap();
            let (fp, fm) = (c.eval_horner(x).unwrap(), c.eval_horner(-x).unwrap());
            prop_assert!((fp + fm).abs() <= 1e-12 * fp.abs().max(1.0));
        }
    }
}
