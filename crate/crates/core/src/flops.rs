//! FLOPs and parameter accounting for MLP, B-spline KAN and GR-KAN layers.
//!
//! Conventions: one multiplication, addition, absolute value or division is
//! one FLOP. Fixed nonlinearities (the MLP's activation, KAN's SiLU branch)
//! are charged at a caller-supplied per-call cost.

use std::cell::Cell;
use std::ops::{Add, Div, Mul};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rational::{self, PolyScalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpCount {
    pub mults: u64,
    pub adds: u64,
    pub abs_ops: u64,
    pub divs: u64,
    pub nonlinear_calls: u64,
}

impl OpCount {
    pub fn total(&self) -> u64 {
        self.mults + self.adds + self.abs_ops + self.divs + self.nonlinear_calls
    }

    /// Total with each nonlinear call charged `per_call` FLOPs.
    pub fn cost(&self, per_call: u64) -> u64 {
        self.mults + self.adds + self.abs_ops + self.divs + self.nonlinear_calls * per_call
    }
}

impl Add for OpCount {
    type Output = OpCount;
    fn add(self, o: OpCount) -> OpCount {
        OpCount {
            mults: self.mults + o.mults,
            adds: self.adds + o.adds,
            abs_ops: self.abs_ops + o.abs_ops,
            divs: self.divs + o.divs,
            nonlinear_calls: self.nonlinear_calls + o.nonlinear_calls,
        }
    }
}

/// Each power `x^k` formed separately: `m(m+1)/2 + m` multiplications for
/// the numerator, `n(n+1)/2 + n` for the denominator; `m` additions for the
/// numerator, `n + 1` for the denominator; one absolute value, one division.
pub fn rational_flops_plain(m: u64, n: u64) -> OpCount {
    OpCount {
        mults: m * (m + 1) / 2 + m + n * (n + 1) / 2 + n,
        adds: m + n + 1,
        abs_ops: 1,
        divs: 1,
        nonlinear_calls: 0,
    }
}

/// Nested evaluation: `m + n` multiplications, `m + n + 1` additions.
pub fn rational_flops_horner(m: u64, n: u64) -> OpCount {
    OpCount {
        mults: m + n,
        adds: m + n + 1,
        abs_ops: 1,
        divs: 1,
        nonlinear_calls: 0,
    }
}

/// Per-edge cost of a De Boor-Cox B-spline of order `K` on `G` intervals:
/// `9K(G + 1.5K) + 2G − 2.5K + 3`.
pub fn kan_edge_flops(grid: u64, order: u64) -> u64 {
    // Doubled to stay in integers; the bracket is always an integer.
    let (g, k) = (grid as i128, order as i128);
    let twice = 18 * k * g + 27 * k * k + 4 * g - 5 * k + 6;
    debug_assert!(twice >= 0 && twice % 2 == 0);
    (twice / 2) as u64
}

pub fn kan_layer_flops(d_in: u64, d_out: u64, grid: u64, order: u64, nonlinear_flops: u64) -> u64 {
    nonlinear_flops * d_in + d_in * d_out * kan_edge_flops(grid, order)
}

pub fn mlp_layer_flops(d_in: u64, d_out: u64, nonlinear_flops: u64) -> u64 {
    nonlinear_flops * d_out + 2 * d_in * d_out
}

/// `(2m + 2n + 3)·d_in + 2·d_in·d_out`: one Horner rational per input
/// channel, then the dense map.
pub fn grkan_layer_flops(d_in: u64, d_out: u64, m: u64, n: u64) -> u64 {
    rational_flops_horner(m, n).total() * d_in + 2 * d_in * d_out
}

pub fn mlp_params(d_in: u64, d_out: u64) -> u64 {
    d_in * d_out + d_out
}

pub fn kan_params(d_in: u64, d_out: u64, grid: u64, order: u64) -> u64 {
    d_in * d_out * (grid + order + 3) + d_out
}

/// Shared-denominator layout: `g` numerators of `m+1` coefficients and one
/// denominator of `n`.
pub fn grkan_params(d_in: u64, d_out: u64, m: u64, n: u64, groups: u64) -> u64 {
    mlp_params(d_in, d_out) + groups * (m + 1) + n
}

/// The `d_in·d_out + d_out + (m + n·g)` expression from the comparison table,
/// kept for reference next to [`grkan_params`].
pub fn grkan_params_table_formula(d_in: u64, d_out: u64, m: u64, n: u64, groups: u64) -> u64 {
    mlp_params(d_in, d_out) + m + n * groups
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerVariant {
    Mlp {
        func_flops: u64,
    },
    Kan {
        grid: u64,
        order: u64,
        func_flops: u64,
    },
    GrKan {
        m: u64,
        n: u64,
        groups: u64,
    },
}

impl LayerVariant {
    pub fn name(&self) -> &'static str {
        match self {
            LayerVariant::Mlp { .. } => "mlp",
            LayerVariant::Kan { .. } => "kan",
            LayerVariant::GrKan { .. } => "gr-kan",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Dims {
    pub d_in: u64,
    pub d_out: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerAudit {
    pub variant: String,
    pub dims: Dims,
    pub params: u64,
    pub flops: u64,
    pub breakdown: serde_json::Value,
}

pub fn audit_layer(d_in: usize, d_out: usize, variant: LayerVariant) -> Result<LayerAudit> {
    if d_in == 0 || d_out == 0 {
        return Err(Error::config("layer dimensions must be positive"));
    }
    let (di, dout) = (d_in as u64, d_out as u64);
    let (params, flops, breakdown) = match variant {
        LayerVariant::Mlp { func_flops } => (
            mlp_params(di, dout),
            mlp_layer_flops(di, dout, func_flops),
            serde_json::json!({
                "activation_flops": func_flops * dout,
                "linear_flops": 2 * di * dout,
            }),
        ),
        LayerVariant::Kan {
            grid,
            order,
            func_flops,
        } => {
            if grid == 0 || order == 0 {
                return Err(Error::config("B-spline grid and order must be positive"));
            }
            (
                kan_params(di, dout, grid, order),
                kan_layer_flops(di, dout, grid, order, func_flops),
                serde_json::json!({
                    "edge_flops": kan_edge_flops(grid, order),
                    "activation_flops": func_flops * di,
                    "spline_flops": di * dout * kan_edge_flops(grid, order),
                }),
            )
        }
        LayerVariant::GrKan { m, n, groups } => {
            if groups == 0 || di % groups != 0 {
                return Err(Error::config(format!(
                    "d_in = {di} is not divisible into {groups} groups"
                )));
            }
            let horner = rational_flops_horner(m, n);
            (
                grkan_params(di, dout, m, n, groups),
                grkan_layer_flops(di, dout, m, n),
                serde_json::json!({
                    "rational_per_channel": horner,
                    "rational_per_channel_flops": horner.total(),
                    "rational_plain_per_channel": rational_flops_plain(m, n),
                    "activation_flops": horner.total() * di,
                    "linear_flops": 2 * di * dout,
                    "rational_params": groups * (m + 1) + n,
                    "params_table_formula": grkan_params_table_formula(di, dout, m, n, groups),
                }),
            )
        }
    };
    Ok(LayerAudit {
        variant: variant.name().to_string(),
        dims: Dims {
            d_in: di,
            d_out: dout,
        },
        params,
        flops,
        breakdown,
    })
}

thread_local! {
    static COUNTER: Cell<OpCount> = Cell::new(OpCount::default());
}

fn bump(f: impl FnOnce(&mut OpCount)) {
    COUNTER.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

/// Scalar that tallies every arithmetic operation performed on it.
///
/// Run a generic evaluation under [`count_ops`] to read the tally.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Counted(pub f64);

impl Add for Counted {
    type Output = Counted;
    fn add(self, o: Counted) -> Counted {
        bump(|c| c.adds += 1);
        Counted(self.0 + o.0)
    }
}

impl Mul for Counted {
    type Output = Counted;
    fn mul(self, o: Counted) -> Counted {
        bump(|c| c.mults += 1);
        Counted(self.0 * o.0)
    }
}

impl Div for Counted {
    type Output = Counted;
    fn div(self, o: Counted) -> Counted {
        bump(|c| c.divs += 1);
        Counted(self.0 / o.0)
    }
}

impl PolyScalar for Counted {
    fn zero() -> Self {
        Counted(0.0)
    }
    fn one() -> Self {
        Counted(1.0)
    }
    fn abs(self) -> Self {
        bump(|c| c.abs_ops += 1);
        Counted(self.0.abs())
    }
    fn is_finite(self) -> bool {
        self.0.is_finite()
    }
}

/// Runs `f` with a fresh tally and returns its result with the ops counted.
pub fn count_ops<R>(f: impl FnOnce() -> R) -> (R, OpCount) {
    COUNTER.with(|c| c.set(OpCount::default()));
    let r = f();
    (r, COUNTER.with(|c| c.get()))
}

/// Counts the operations of one nested rational evaluation of degree `m/n`.
pub fn instrumented_horner(m: usize, n: usize) -> OpCount {
    let a: Vec<Counted> = (0..=m).map(|k| Counted(0.5 + k as f64)).collect();
    let b: Vec<Counted> = (0..n).map(|k| Counted(-0.25 * (k + 1) as f64)).collect();
    count_ops(|| rational::eval_horner_with(&a, &b, Counted(0.7))).1
}

/// Counts the operations of one power-sum rational evaluation of degree `m/n`.
pub fn instrumented_plain(m: usize, n: usize) -> OpCount {
    let a: Vec<Counted> = (0..=m).map(|k| Counted(0.5 + k as f64)).collect();
    let b: Vec<Counted> = (0..n).map(|k| Counted(-0.25 * (k + 1) as f64)).collect();
    count_ops(|| rational::eval_naive_with(&a, &b, Counted(0.7))).1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_five_four_breakdown() {
        let c = rational_flops_plain(5, 4);
        assert_eq!((c.mults, c.adds, c.abs_ops, c.divs), (34, 10, 1, 1));
        assert_eq!(c.total(), 46);
    }

    #[test]
    fn plain_degenerate_degrees() {
        let c = rational_flops_plain(0, 0);
        assert_eq!((c.mults, c.adds, c.abs_ops, c.divs), (0, 1, 1, 1));
        let c = rational_flops_plain(1, 0);
        assert_eq!((c.mults, c.adds), (2, 2));
    }

    #[test]
    fn horner_five_four_breakdown() {
        let c = rational_flops_horner(5, 4);
        assert_eq!((c.mults, c.adds, c.abs_ops, c.divs), (9, 10, 1, 1));
        assert_eq!(c.total(), 21);
        assert_eq!(rational_flops_horner(1, 0).total(), 5);
    }

    #[test]
    fn horner_never_exceeds_plain() {
        for m in 0..20 {
            for n in 0..20 {
                assert!(rational_flops_horner(m, n).total() <= rational_flops_plain(m, n).total());
            }
        }
    }

    #[test]
    fn spline_bracket() {
        assert_eq!(kan_edge_flops(3, 3), 204);
    }

    #[test]
    fn layer_formulas() {
        assert_eq!(grkan_layer_flops(1, 0, 5, 4), 21);
        assert_eq!(mlp_layer_flops(1, 1, 0), 2);
        assert_eq!(mlp_params(4, 4), 20);
        assert_eq!(mlp_layer_flops(4, 4, 1), 36);
    }

    #[test]
    fn counters_are_monotone() {
        for v in 1..12u64 {
            assert!(rational_flops_plain(v + 1, 4).total() > rational_flops_plain(v, 4).total());
            assert!(rational_flops_plain(5, v + 1).total() > rational_flops_plain(5, v).total());
            assert!(rational_flops_horner(v + 1, 4).total() > rational_flops_horner(v, 4).total());
            assert!(rational_flops_horner(5, v + 1).total() > rational_flops_horner(5, v).total());
            assert!(kan_edge_flops(v + 1, 3) > kan_edge_flops(v, 3));
            assert!(kan_edge_flops(3, v + 1) > kan_edge_flops(3, v));
            assert!(kan_layer_flops(v + 1, 4, 3, 3, 1) > kan_layer_flops(v, 4, 3, 3, 1));
            assert!(kan_layer_flops(4, v + 1, 3, 3, 1) > kan_layer_flops(4, v, 3, 3, 1));
            assert!(grkan_layer_flops(v + 1, 4, 5, 4) > grkan_layer_flops(v, 4, 5, 4));
            assert!(grkan_layer_flops(4, v + 1, 5, 4) > grkan_layer_flops(4, v, 5, 4));
            assert!(mlp_layer_flops(v + 1, 4, 1) > mlp_layer_flops(v, 4, 1));
            assert!(mlp_layer_flops(4, v + 1, 1) > mlp_layer_flops(4, v, 1));
        }
    }

    #[test]
    fn instrumented_evaluation_matches_formulas() {
        for m in 0..=8 {
            for n in 0..=8 {
                assert_eq!(
                    instrumented_horner(m, n),
                    rational_flops_horner(m as u64, n as u64),
                    "horner {m}/{n}"
                );
                assert_eq!(
                    instrumented_plain(m, n),
                    rational_flops_plain(m as u64, n as u64),
                    "plain {m}/{n}"
                );
            }
        }
    }

    #[test]
    fn audit_reports_both_grkan_counts() {
        let a = audit_layer(
            64,
            64,
            LayerVariant::GrKan {
                m: 5,
                n: 4,
                groups: 8,
            },
        )
        .unwrap();
        assert_eq!(a.params, 64 * 64 + 64 + 8 * 6 + 4);
        assert_eq!(
            a.breakdown["params_table_formula"],
            64 * 64 + 64 + 5 + 4 * 8
        );
        assert!(audit_layer(
            10,
            4,
            LayerVariant::GrKan {
                m: 5,
                n: 4,
                groups: 4
            }
        )
        .is_err());
        assert!(audit_layer(0, 4, LayerVariant::Mlp { func_flops: 1 }).is_err());
    }
}
