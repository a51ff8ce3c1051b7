//! Least-squares fitting of safe Padé coefficients to a reference curve.
//!
//! The fit runs in the normalized variable `t = x / s`, `s = max(|lo|, |hi|)`,
//! so every power of `t` stays in `[-1, 1]`; coefficients are mapped back with
//! `a_k = ã_k / s^k`, `b_k = b̃_k / s^k`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::targets::ActivationTarget;
use crate::error::{Error, Result};
use crate::rational::{accumulate_grad, safe_pade_horner, RationalCoeffs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub m: usize,
    pub n: usize,
    pub lo: f64,
    pub hi: f64,
    pub npoints: usize,
    pub restarts: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// A best fit worse than this is reported as a fit error.
    pub max_abs_err_limit: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            m: 5,
            n: 4,
            lo: -4.0,
            hi: 4.0,
            npoints: 4096,
            restarts: 16,
            seed: 0,
            max_iters: 200,
            max_abs_err_limit: 0.1,
        }
    }
}

impl FitOptions {
    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.lo = lo;
        self.hi = hi;
        self
    }

    pub fn grid(&self) -> Vec<f64> {
        let step = (self.hi - self.lo) / (self.npoints - 1) as f64;
        (0..self.npoints)
            .map(|i| self.lo + step * i as f64)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(Error::Usage(format!(
                "fit range [{}, {}] must satisfy lo < hi",
                self.lo, self.hi
            )));
        }
        if self.npoints < 10 * (self.m + self.n) || self.npoints < 2 {
            return Err(Error::Usage(format!(
                "fit needs at least 10·(m+n) = {} grid points, got {}",
                10 * (self.m + self.n),
                self.npoints
            )));
        }
        if self.restarts == 0 {
            return Err(Error::Usage("fit needs at least one restart".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub target: String,
    pub coeffs: RationalCoeffs<f64>,
    pub max_abs_err: f64,
    pub rss: f64,
    /// Index of the restart that won.
    pub restart: usize,
    /// Sum of squared residuals after each accepted LM iteration of the
    /// winning restart (normalized variable), starting with the initial guess.
    pub trace: Vec<f64>,
}

pub fn fit_rational(target: ActivationTarget, opts: &FitOptions) -> Result<FitResult> {
    fit_function(target.name(), |x| target.eval(x), opts)
}

/// Fits any scalar function on the configured grid.
pub fn fit_function(name: &str, f: impl Fn(f64) -> f64, opts: &FitOptions) -> Result<FitResult> {
    opts.validate()?;
    let xs = opts.grid();
    let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    if !ys.iter().all(|y| y.is_finite()) {
        return Err(Error::Domain(format!(
            "target '{name}' is not finite on the fit grid"
        )));
    }
    let s = opts.lo.abs().max(opts.hi.abs());
    let ts: Vec<f64> = xs.iter().map(|&x| x / s).collect();
    let (m, n) = (opts.m, opts.n);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(f64, Vec<f64>, usize, Vec<f64>)> = None;
    for restart in 0..opts.restarts {
        let b0: Vec<f64> = if restart == 0 {
            vec![0.0; n]
        } else {
            (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
        };
        let Some(a0) = numerator_least_squares(&ts, &ys, m, &b0) else {
            continue;
        };
        let p0: Vec<f64> = a0.into_iter().chain(b0).collect();
        let (p, trace) = levenberg_marquardt(&ts, &ys, m, p0, opts.max_iters);
        let cost = *trace.last().expect("trace starts with the initial cost");
        if cost.is_finite() && best.as_ref().is_none_or(|b| cost < b.0) {
            best = Some((cost, p, restart, trace));
        }
    }

    let fail = |rss: f64, err: f64| Error::Fit {
        target: name.to_string(),
        best_rss: rss,
        best_max_abs_err: err,
    };
    let (_, p, restart, trace) = best.ok_or_else(|| fail(f64::INFINITY, f64::INFINITY))?;
    let mut scale = 1.0;
    let mut a = Vec::with_capacity(m + 1);
    for &c in &p[..=m] {
        a.push(c / scale);
        scale *= s;
    }
    let mut b = Vec::with_capacity(n);
    let mut scale = s;
    for &c in &p[m + 1..] {
        b.push(c / scale);
        scale *= s;
    }
    let (mut rss, mut max_abs_err) = (0.0, 0.0f64);
    for (&x, &y) in xs.iter().zip(&ys) {
        let r = safe_pade_horner(&a, &b, x) - y;
        rss += r * r;
        max_abs_err = max_abs_err.max(r.abs());
    }
    if !(max_abs_err <= opts.max_abs_err_limit) {
        return Err(fail(rss, max_abs_err));
    }
    Ok(FitResult {
        target: name.to_string(),
        coeffs: RationalCoeffs::new(a, b)?,
        max_abs_err,
        rss,
        restart,
        trace,
    })
}

/// With the denominator fixed, `F` is linear in `a`: solve
/// `min Σ (Σ_k a_k t_i^k / Q(t_i) − y_i)²`.
fn numerator_least_squares(ts: &[f64], ys: &[f64], m: usize, b: &[f64]) -> Option<Vec<f64>> {
    let zero_a = vec![0.0; m + 1];
    let design = DMatrix::from_fn(ts.len(), m + 1, |i, k| {
        let t = ts[i];
        let q = 1.0 + crate::rational::horner_parts(&zero_a, b, t).1.abs();
        t.powi(k as i32) / q
    });
    let rhs = DVector::from_column_slice(ys);
    let sol = design.svd(true, true).solve(&rhs, 1e-14).ok()?;
    let a: Vec<f64> = sol.iter().copied().collect();
    a.iter().all(|v| v.is_finite()).then_some(a)
}

fn cost(ts: &[f64], ys: &[f64], m: usize, p: &[f64]) -> f64 {
    let (a, b) = p.split_at(m + 1);
    ts.iter()
        .zip(ys)
        .map(|(&t, &y)| {
            let r = safe_pade_horner(a, b, t) - y;
            r * r
        })
        .sum()
}

/// `(JᵀJ, Jᵀr, rᵀr)` with the Jacobian taken from the shared rational gradient.
fn normal_equations(
    ts: &[f64],
    ys: &[f64],
    m: usize,
    p: &[f64],
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let k = p.len();
    let (a, b) = p.split_at(m + 1);
    let mut jtj = DMatrix::zeros(k, k);
    let mut jtr = DVector::zeros(k);
    let mut rss = 0.0;
    let mut g = vec![0.0; k];
    for (&t, &y) in ts.iter().zip(ys) {
        g.iter_mut().for_each(|v| *v = 0.0);
        let (da, db) = g.split_at_mut(m + 1);
        let (f, _) = accumulate_grad(a, b, t, 1.0, da, db);
        let r = f - y;
        rss += r * r;
        for i in 0..k {
            jtr[i] += g[i] * r;
            for j in 0..=i {
                jtj[(i, j)] += g[i] * g[j];
            }
        }
    }
    for i in 0..k {
        for j in 0..i {
            jtj[(j, i)] = jtj[(i, j)];
        }
    }
    (jtj, jtr, rss)
}

/// Damped Gauss-Newton. Only steps that lower the residual are taken, so the
/// returned trace is non-increasing.
fn levenberg_marquardt(
    ts: &[f64],
    ys: &[f64],
    m: usize,
    mut p: Vec<f64>,
    max_iters: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut lambda = 1e-3;
    let mut current = cost(ts, ys, m, &p);
    let mut trace = vec![current];
    if !current.is_finite() {
        return (p, trace);
    }
    let mut stalls = 0;
    for _ in 0..max_iters {
        if current <= 1e-28 {
            break;
        }
        let (jtj, jtr, _) = normal_equations(ts, ys, m, &p);
        let mut accepted = None;
        while lambda < 1e16 {
            let mut lhs = jtj.clone();
            for i in 0..p.len() {
                lhs[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            if let Some(chol) = lhs.cholesky() {
                let step = chol.solve(&(-&jtr));
                let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(v, d)| v + d).collect();
                let c = cost(ts, ys, m, &trial);
                if c.is_finite() && c < current {
                    accepted = Some((trial, c));
                    lambda = (lambda / 3.0).max(1e-15);
                    break;
                }
            }
            lambda *= 4.0;
        }
        let Some((trial, c)) = accepted else {
            break;
        };
        let gain = (current - c) / current;
        p = trial;
        current = c;
        trace.push(current);
        stalls = if gain < 1e-10 { stalls + 1 } else { 0 };
        if stalls >= 3 {
            break;
        }
    }
    (p, trace)
}
