//! Group-rational activation kernels.
//!
//! Three forward variants compute bit-identical results with different
//! memory behaviour:
//!
//! * [`group_rational`] (fused): one row-parallel pass, coefficients looked
//!   up per group, each element evaluated in registers.
//! * [`group_rational_vectorized`]: the input is viewed as `[N, g, d_g]` and
//!   every Horner step is a separate full-tensor pass with the group's
//!   coefficient broadcast, the way a tensor library would express it.
//! * [`group_rational_looped`]: for each group, gather its channels into a
//!   contiguous buffer, run the vectorized pipeline with scalar
//!   coefficients, then scatter the result back (concatenation).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rational::{accumulate_grad, safe_pade_horner};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rows per work item. Fixed so partial sums reduce in the same order on any
/// thread count.
const ROW_CHUNK: usize = 64;

/// Elements per work item for the full-tensor passes.
const ELEM_CHUNK: usize = 1 << 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupShape {
    pub d_in: usize,
    pub groups: usize,
    pub group_width: usize,
    pub m: usize,
    pub n: usize,
    pub shared_denominator: bool,
}

impl GroupShape {
    pub fn of<T: Scalar>(x: &Tensor<T>, num: &Tensor<T>, den: &Tensor<T>) -> Result<Self> {
        if num.rank() != 2 || den.rank() != 2 {
            return Err(Error::shape(format!(
                "group rational: numerators {:?} and denominators {:?} must be matrices",
                num.shape(),
                den.shape()
            )));
        }
        let groups = num.shape()[0];
        let dg = den.shape()[0];
        if dg != 1 && dg != groups {
            return Err(Error::shape(format!(
                "group rational: {dg} denominator rows for {groups} groups (expected 1 or {groups})"
            )));
        }
        let d_in = x.last_dim();
        if x.rank() == 0 || !d_in.is_multiple_of(groups) {
            return Err(Error::config(format!(
                "group rational: width {d_in} is not divisible into {groups} groups"
            )));
        }
        Ok(GroupShape {
            d_in,
            groups,
            group_width: d_in / groups,
            m: num.shape()[1] - 1,
            n: den.shape()[1],
            shared_denominator: dg == 1,
        })
    }

    #[inline]
    fn den_row(&self, group: usize) -> usize {
        if self.shared_denominator {
            0
        } else {
            group
        }
    }
}

/// Fused forward pass.
pub fn group_rational<T: Scalar>(
    x: &Tensor<T>,
    num: &Tensor<T>,
    den: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = GroupShape::of(x, num, den)?;
    let (a_all, b_all) = (num.data(), den.data());
    let mut out = vec![T::zero(); x.numel()];
    let width = s.d_in;
    out.par_chunks_mut(width * ROW_CHUNK)
        .zip(x.data().par_chunks(width * ROW_CHUNK))
        .for_each(|(oc, xc)| {
            for (orow, xrow) in oc.chunks_mut(width).zip(xc.chunks(width)) {
                for grp in 0..s.groups {
                    let a = &a_all[grp * (s.m + 1)..(grp + 1) * (s.m + 1)];
                    let dr = s.den_row(grp);
                    let b = &b_all[dr * s.n..(dr + 1) * s.n];
                    let span = grp * s.group_width..(grp + 1) * s.group_width;
                    for (o, &v) in orow[span.clone()].iter_mut().zip(&xrow[span]) {
                        *o = safe_pade_horner(a, b, v);
                    }
                }
            }
        });
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Adjoints of [`group_rational`].
#[derive(Clone, Debug)]
pub struct GroupGrads<T> {
    pub input: Vec<T>,
    /// `[g, m+1]`, row-major.
    pub numerators: Vec<T>,
    /// `[1 | g, n]`; with a shared denominator this is the sum of every
    /// group's contribution.
    pub denominators: Vec<T>,
}

pub fn group_rational_backward<T: Scalar>(
    x: &Tensor<T>,
    num: &Tensor<T>,
    den: &Tensor<T>,
    g: &[T],
) -> GroupGrads<T> {
    let s = GroupShape::of(x, num, den).expect("shape validated in forward");
    let (a_all, b_all) = (num.data(), den.data());
    let width = s.d_in;
    let mut input = vec![T::zero(); x.numel()];
    let partials: Vec<(Vec<T>, Vec<T>)> = input
        .par_chunks_mut(width * ROW_CHUNK)
        .zip(x.data().par_chunks(width * ROW_CHUNK))
        .zip(g.par_chunks(width * ROW_CHUNK))
        .map(|((gxc, xc), gc)| {
            let mut ga = vec![T::zero(); num.numel()];
            let mut gb = vec![T::zero(); den.numel()];
            for ((gxrow, xrow), grow) in gxc
                .chunks_mut(width)
                .zip(xc.chunks(width))
                .zip(gc.chunks(width))
            {
                for grp in 0..s.groups {
                    let arange = grp * (s.m + 1)..(grp + 1) * (s.m + 1);
                    let dr = s.den_row(grp);
                    let brange = dr * s.n..(dr + 1) * s.n;
                    let a = &a_all[arange.clone()];
                    let b = &b_all[brange.clone()];
                    for i in grp * s.group_width..(grp + 1) * s.group_width {
                        let (_, dx) = accumulate_grad(
                            a,
                            b,
                            xrow[i],
                            grow[i],
                            &mut ga[arange.clone()],
                            &mut gb[brange.clone()],
                        );
                        gxrow[i] = dx;
                    }
                }
            }
            (ga, gb)
        })
        .collect();
    let mut numerators = vec![T::zero(); num.numel()];
    let mut denominators = vec![T::zero(); den.numel()];
    for (ga, gb) in partials {
        numerators.iter_mut().zip(ga).for_each(|(a, b)| *a += b);
        denominators.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
    }
    GroupGrads {
        input,
        numerators,
        denominators,
    }
}

/// In-place elementwise pass, like a tensor library's `op_` methods.
fn pass<T: Scalar>(buf: &mut [T], f: impl Fn(T) -> T + Sync) {
    buf.par_chunks_mut(ELEM_CHUNK)
        .for_each(|o| o.iter_mut().for_each(|v| *v = f(*v)));
}

/// In-place `buf = f(buf, c)` with the row `c` broadcast over the leading axes.
fn pass_bcast<T: Scalar>(buf: &mut [T], row: &[T], f: impl Fn(T, T) -> T + Sync) {
    let w = row.len();
    let chunk = (ELEM_CHUNK / w).max(1) * w;
    buf.par_chunks_mut(chunk).for_each(|o| {
        for orow in o.chunks_mut(w) {
            for (oi, &ci) in orow.iter_mut().zip(row) {
                *oi = f(*oi, ci);
            }
        }
    });
}

/// In-place `buf = f(buf, other)`.
fn pass2<T: Scalar>(buf: &mut [T], other: &[T], f: impl Fn(T, T) -> T + Sync) {
    buf.par_chunks_mut(ELEM_CHUNK)
        .zip(other.par_chunks(ELEM_CHUNK))
        .for_each(|(o, b)| o.iter_mut().zip(b).for_each(|(oi, &bi)| *oi = f(*oi, bi)));
}

/// Multi-pass Horner over rows of width `w`. `num[k]` and `den[k]` hold the
/// degree-`k` coefficient of every channel in a row, i.e. the `[g, 1]`
/// coefficient broadcast to `[g, d_g]`. Each step is its own full pass.
fn multipass<T: Scalar>(x: &[T], num: &[Vec<T>], den: &[Vec<T>]) -> Vec<T> {
    let m = num.len() - 1;
    let n = den.len();
    let mut p = vec![T::zero(); x.len()];
    pass_bcast(&mut p, &num[m], |_, c| c);
    for k in (0..m).rev() {
        pass2(&mut p, x, |pv, xv| pv * xv);
        pass_bcast(&mut p, &num[k], |pv, c| pv + c);
    }
    let mut q = vec![T::zero(); x.len()];
    if n > 0 {
        pass_bcast(&mut q, &den[n - 1], |_, c| c);
        for k in (0..n - 1).rev() {
            pass2(&mut q, x, |qv, xv| qv * xv);
            pass_bcast(&mut q, &den[k], |qv, c| qv + c);
        }
        pass2(&mut q, x, |qv, xv| qv * xv);
        pass(&mut q, |qv| qv + T::zero());
    }
    pass(&mut q, |qv| T::one() + qv.abs());
    pass2(&mut p, &q, |pv, qv| pv / qv);
    p
}

/// Per-degree coefficient rows for the channels `channels`.
fn coefficient_rows<T: Scalar>(
    s: &GroupShape,
    a: &[T],
    b: &[T],
    channels: std::ops::Range<usize>,
) -> (Vec<Vec<T>>, Vec<Vec<T>>) {
    let grp = |c: usize| c / s.group_width;
    let num = (0..=s.m)
        .map(|k| {
            channels
                .clone()
                .map(|c| a[grp(c) * (s.m + 1) + k])
                .collect()
        })
        .collect();
    let den = (0..s.n)
        .map(|k| {
            channels
                .clone()
                .map(|c| b[s.den_row(grp(c)) * s.n + k])
                .collect()
        })
        .collect();
    (num, den)
}

pub fn group_rational_vectorized<T: Scalar>(
    x: &Tensor<T>,
    num: &Tensor<T>,
    den: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = GroupShape::of(x, num, den)?;
    let (nr, dr) = coefficient_rows(&s, num.data(), den.data(), 0..s.d_in);
    let out = multipass(x.data(), &nr, &dr);
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn group_rational_looped<T: Scalar>(
    x: &Tensor<T>,
    num: &Tensor<T>,
    den: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = GroupShape::of(x, num, den)?;
    let rows = x.rows();
    let dgw = s.group_width;
    let mut pieces = Vec::with_capacity(s.groups);
    for grp in 0..s.groups {
        let mut gathered = vec![T::zero(); rows * dgw];
        gathered
            .par_chunks_mut(dgw)
            .zip(x.data().par_chunks(s.d_in))
            .for_each(|(dst, src)| dst.copy_from_slice(&src[grp * dgw..(grp + 1) * dgw]));
        let span = grp * dgw..(grp + 1) * dgw;
        let (nr, dr) = coefficient_rows(&s, num.data(), den.data(), span);
        pieces.push(multipass(&gathered, &nr, &dr));
    }
    let mut out = vec![T::zero(); x.numel()];
    out.par_chunks_mut(s.d_in).enumerate().for_each(|(r, row)| {
        for (grp, piece) in pieces.iter().enumerate() {
            row[grp * dgw..(grp + 1) * dgw].copy_from_slice(&piece[r * dgw..(r + 1) * dgw]);
        }
    });
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}
