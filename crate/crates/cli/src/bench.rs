//! Throughput of the three group-rational kernel variants.
//!
//! Only the activation stage is timed: the linear map after it is the same
//! matrix product for every variant. Inputs are `f32`.

use std::time::Instant;

use grkan::initfit::{cached_fit, ActivationTarget};
use grkan::{GroupRationalParams, KernelVariant, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::rss::RssSampler;

pub const VARIANTS: [KernelVariant; 3] = [
    KernelVariant::Looped,
    KernelVariant::Vectorized,
    KernelVariant::Fused,
];

#[derive(Clone, Debug)]
pub struct BenchPlan {
    pub groups: Vec<usize>,
    pub dims: Vec<usize>,
    pub batch: usize,
    pub tokens: usize,
    pub repeats: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub variant: String,
    pub g: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub batch: usize,
    pub tokens: usize,
    /// Forward passes over the whole `[batch, tokens, D]` input per second.
    pub throughput: f64,
    pub peak_rss_bytes: u64,
    pub checksum: String,
}

/// FNV-1a over the output's bit patterns.
pub fn checksum(t: &Tensor<f32>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in t.data() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// A GELU fit per group, each perturbed so the groups differ.
fn activation(d: usize, g: usize, rng: &mut ChaCha8Rng) -> Result<GroupRationalParams<f32>> {
    let fit = cached_fit(ActivationTarget::Gelu, 5, 4)?;
    let base = fit.coeffs.cast::<f32>();
    let (m, n) = (base.m(), base.n());
    let jitter = Tensor::<f32>::randn([g, m + 1 + n], 0.01, rng)?;
    let mut num = Vec::with_capacity(g * (m + 1));
    let mut den = Vec::with_capacity(g * n);
    for j in jitter.data().chunks(m + 1 + n) {
        num.extend(base.numerator().iter().zip(&j[..=m]).map(|(a, e)| a + e));
        den.extend(
            base.denominator()
                .iter()
                .zip(&j[m + 1..])
                .map(|(b, e)| b + e),
        );
    }
    Ok(GroupRationalParams::from_tensors(
        d,
        Tensor::new([g, m + 1], num)?,
        Tensor::new([g, n], den)?,
    )?)
}

/// Runs the plan on the current rayon pool. Errors with a check failure if
/// the variants disagree on any configuration's output.
pub fn run(
    plan: &BenchPlan,
    mut on_row: impl FnMut(&BenchRow) -> Result<()>,
) -> Result<Vec<BenchRow>> {
    if plan.repeats == 0 || plan.batch == 0 || plan.tokens == 0 {
        return Err(CliError::Usage(
            "batch, tokens and repeats must be positive".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut mismatches = Vec::new();
    for &d in &plan.dims {
        for &g in &plan.groups {
            if g == 0 || d % g != 0 {
                return Err(CliError::Usage(format!(
                    "D = {d} is not divisible into {g} groups"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ ((d as u64) << 8) ^ g as u64);
            let act = activation(d, g, &mut rng)?;
            let x = Tensor::<f32>::randn([plan.batch, plan.tokens, d], 1.0, &mut rng)?;
            let mut sums = Vec::new();
            for v in VARIANTS {
                // Warm-up pass; its output provides the checksum.
                let y = v.apply(&x, &act)?;
                let sum = checksum(&y);
                drop(y);
                let sampler = RssSampler::start();
                let t0 = Instant::now();
                for _ in 0..plan.repeats {
                    std::hint::black_box(v.apply(&x, &act)?);
                }
                let secs = t0.elapsed().as_secs_f64();
                let row = BenchRow {
                    variant: v.name().to_string(),
                    g,
                    d,
                    batch: plan.batch,
                    tokens: plan.tokens,
                    throughput: plan.repeats as f64 / secs,
                    peak_rss_bytes: sampler.finish(),
                    checksum: sum.clone(),
                };
                on_row(&row)?;
                rows.push(row);
                sums.push(sum);
            }
            if sums.iter().any(|s| *s != sums[0]) {
                mismatches.push(format!("g={g} D={d}: {sums:?}"));
            }
        }
    }
    if !mismatches.is_empty() {
        return Err(CliError::Check(format!(
            "kernel outputs differ: {}",
            mismatches.join("; ")
        )));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_plan_checksums_agree() {
        let plan = BenchPlan {
            groups: vec![1, 4],
            dims: vec![16],
            batch: 2,
            tokens: 3,
            repeats: 2,
            seed: 0,
        };
        let rows = run(&plan, |_| Ok(())).unwrap();
        assert_eq!(rows.len(), 6);
        for chunk in rows.chunks(3) {
            assert!(chunk
                .iter()
                .all(|r| r.checksum == chunk[0].checksum && r.throughput > 0.0));
        }
    }

    #[test]
    fn checksum_sees_single_bit() {
        let a = Tensor::new([2], vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::new([2], vec![1.0f32, f32::from_bits(2.0f32.to_bits() + 1)]).unwrap();
        assert_ne!(checksum(&a), checksum(&b));
    }
}
