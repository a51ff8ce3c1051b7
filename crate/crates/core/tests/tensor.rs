use grkan::gradcheck::{self, GradcheckPlan};
use grkan::tensor::ops;
use grkan::tensor::{Graph, Tape};
use grkan::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Attention written out head by head with explicit loops.
fn attention_oracle(q: &[f64], k: &[f64], v: &[f64], t: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; t * d];
    for h in 0..heads {
        let col = |row: usize, j: usize| row * d + h * dh + j;
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|r| {
                    (0..dh).map(|j| q[col(i, j)] * k[col(r, j)]).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..dh {
                out[col(i, j)] = (0..t).map(|r| e[r] / z * v[col(r, j)]).sum();
            }
        }
    }
    out
}

#[test]
fn attention_matches_explicit_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for heads in [1, 2, 4] {
        let shape = [3, 4];
        let q = Tensor::<f64>::randn(shape, 1.0, &mut rng).unwrap();
        let k = Tensor::<f64>::randn(shape, 1.0, &mut rng).unwrap();
        let v = Tensor::<f64>::randn(shape, 1.0, &mut rng).unwrap();
        let (got, _) = ops::attention(&q, &k, &v, heads).unwrap();
        let want = attention_oracle(q.data(), k.data(), v.data(), 3, 4, heads);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "heads {heads}: {a} vs {b}");
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let shape = [2, 7, 8];
    let q = Tensor::<f64>::randn(shape, 3.0, &mut rng).unwrap();
    let k = Tensor::<f64>::randn(shape, 3.0, &mut rng).unwrap();
    let v = Tensor::<f64>::randn(shape, 1.0, &mut rng).unwrap();
    let (_, saved) = ops::attention(&q, &k, &v, 2).unwrap();
    assert_eq!(saved.probs.len(), 2 * 2 * 7 * 7);
    for row in saved.probs.chunks(7) {
        assert!(row.iter().all(|p| *p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn layer_norm_agrees_with_two_pass_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = Tensor::<f64>::randn([5, 16], 4.0, &mut rng).unwrap();
    let gamma = Tensor::<f64>::randn([16], 1.0, &mut rng).unwrap();
    let beta = Tensor::<f64>::randn([16], 1.0, &mut rng).unwrap();
    let eps = 1e-6;
    let (y, _) = ops::layer_norm(&x, &gamma, &beta, eps).unwrap();
    for (xr, yr) in x.data().chunks(16).zip(y.data().chunks(16)) {
        let mu = xr.iter().sum::<f64>() / 16.0;
        let var = xr.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 16.0;
        for j in 0..16 {
            let want = (xr[j] - mu) / (var + eps).sqrt() * gamma.data()[j] + beta.data()[j];
            assert!((yr[j] - want).abs() < 1e-12);
        }
    }
}

/// Runs a small forward/backward pass; returns every output bit pattern.
fn training_step_bits(seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f64>::randn([64, 8, 64], 1.0, &mut rng).unwrap();
    let w = Tensor::<f64>::randn([64, 64], 0.1, &mut rng).unwrap();
    let b = Tensor::<f64>::randn([64], 0.1, &mut rng).unwrap();
    let num = Tensor::<f64>::randn([8, 6], 0.5, &mut rng).unwrap();
    let den = Tensor::<f64>::randn([1, 4], 0.5, &mut rng).unwrap();
    let mut tape = Tape::new();
    let (xv, wv, bv, nv, dv) = (
        tape.param(&x),
        tape.param(&w),
        tape.param(&b),
        tape.param(&num),
        tape.param(&den),
    );
    let h = tape.group_rational(&xv, &nv, &dv).unwrap();
    let y = tape.linear(&h, &wv, Some(&bv)).unwrap();
    let y = tape.attention(&y, &y, &y, 4).unwrap();
    let loss = tape.mean(&y).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut bits: Vec<u64> = tape.value(&y).data().iter().map(|v| v.to_bits()).collect();
    for v in [xv, wv, bv, nv, dv] {
        bits.extend(grads.get(v).unwrap().data().iter().map(|g| g.to_bits()));
    }
    bits
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| training_step_bits(9))
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, training_step_bits(9));
}

#[test]
fn every_primitive_adjoint_matches_finite_differences() {
    let plan = GradcheckPlan {
        rational: 0,
        per_primitive: 10,
        layer: 0,
        model: 0,
    };
    let report = gradcheck::run(3, &plan).unwrap();
    let names: Vec<&str> = report
        .outcomes
        .iter()
        .filter(|o| o.cases > 0)
        .map(|o| o.name.as_str())
        .collect();
    for op in [
        "linear",
        "matmul",
        "transpose",
        "reshape",
        "add",
        "mul",
        "layer_norm",
        "attention",
        "mean",
        "mse",
        "cross_entropy",
    ] {
        assert!(names.contains(&op), "{op} not covered");
    }
    for o in &report.outcomes {
        assert!(o.passed(), "{o:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn five_point_stencil_is_exact_on_quartics(c in proptest::collection::vec(-3.0f64..3.0, 5), x in -2.0f64..2.0) {
        let f = |v: f64| c[0] + v * (c[1] + v * (c[2] + v * (c[3] + v * c[4])));
        let exact = c[1] + x * (2.0 * c[2] + x * (3.0 * c[3] + x * 4.0 * c[4]));
        prop_assert!(gradcheck::rel_err(exact, gradcheck::central_difference(f, x)) < 1e-8);
    }

    #[test]
    fn softmax_rows_sum_to_one(t in 1usize..6, seed in 0u64..1000, scale in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::<f64>::randn([t, 4], scale, &mut rng).unwrap();
        let (_, saved) = ops::attention(&q, &q, &q, 2).unwrap();
        for row in saved.probs.chunks(t) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
