use grkan::gradcheck::{self, GradcheckPlan};
use grkan::tensor::{Graph, Tape};
use grkan::{
    DenominatorLayout, GrKanLayer, GroupRationalParams, KernelVariant, RationalCoeffs, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GROUPS: [usize; 5] = [1, 2, 4, 8, 16];
const WIDTHS: [usize; 5] = [128, 256, 512, 1024, 2048];

fn random_layer(
    d_in: usize,
    d_out: usize,
    groups: usize,
    layout: DenominatorLayout,
    seed: u64,
) -> GrKanLayer<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = if layout == DenominatorLayout::Shared {
        1
    } else {
        groups
    };
    let act = GroupRationalParams::from_tensors(
        d_in,
        Tensor::randn([groups, 6], 0.5, &mut rng).unwrap(),
        Tensor::randn([rows, 4], 0.5, &mut rng).unwrap(),
    )
    .unwrap();
    let w = Tensor::randn([d_out, d_in], 1.0 / (d_in as f64).sqrt(), &mut rng).unwrap();
    let b = Tensor::randn([d_out], 0.1, &mut rng).unwrap();
    GrKanLayer::new(act, w, b).unwrap()
}

/// Magnitude the rounding error of either evaluation order scales with.
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
    (pa + c.eval_naive(x).unwrap().abs() * qa) / c.q(x)
}

#[test]
fn kernel_variants_and_naive_agree_on_sweep_grid() {
    let (mut worst, mut worst_naive) = (0.0f64, 0.0f64);
    for &g in &GROUPS {
        for &d in &WIDTHS {
            let layer = random_layer(d, 1, g, DenominatorLayout::Shared, (g * d) as u64);
            let act = layer.act();
            let mut rng = ChaCha8Rng::seed_from_u64(d as u64 + g as u64);
            let x = Tensor::<f64>::randn([8, d], 1.5, &mut rng).unwrap();
            let fused = KernelVariant::Fused.apply(&x, act).unwrap();
            for v in [KernelVariant::Vectorized, KernelVariant::Looped] {
                worst = worst.max(fused.max_abs_diff(&v.apply(&x, act).unwrap()).unwrap());
            }
            for (i, (&xi, &yi)) in x.data().iter().zip(fused.data()).enumerate() {
                let c = act.coeffs(act.group_of(i % d));
                let naive = c.eval_naive(xi).unwrap();
                worst_naive =
                    worst_naive.max((yi - naive).abs() / evaluation_scale(&c, xi).max(1.0));
            }
        }
    }
    assert!(worst < 1e-12, "variant deviation {worst:e}");
    assert!(worst_naive < 1e-12, "horner vs naive {worst_naive:e}");
}

#[test]
fn single_precision_variants_agree() {
    for &g in &[1, 8] {
        let layer = random_layer(512, 64, g, DenominatorLayout::Shared, 4).cast::<f32>();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::randn([16, 512], 1.0, &mut rng).unwrap();
        let fused = layer.forward_fused(&x).unwrap();
        for y in [
            layer.forward_vectorized(&x).unwrap(),
            layer.forward_looped(&x).unwrap(),
        ] {
            assert!(fused.max_abs_diff(&y).unwrap() < 1e-6);
        }
    }
}

#[test]
fn matrix_form_equals_edge_sum() {
    for layout in [DenominatorLayout::Shared, DenominatorLayout::PerGroup] {
        let (d_in, d_out, g) = (12, 5, 4);
        let layer = random_layer(d_in, d_out, g, layout, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn([3, d_in], 1.0, &mut rng).unwrap();
        let y = layer.forward(&x).unwrap();
        let dg = d_in / g;
        for b in 0..3 {
            for j in 0..d_out {
                let mut s = layer.bias().data()[j];
                for i in 0..d_in {
                    let f = layer
                        .act()
                        .coeffs(i / dg)
                        .eval_naive(x.at(&[b, i]))
                        .unwrap();
                    s += layer.weight().at(&[j, i]) * f;
                }
                assert!((y.at(&[b, j]) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_group_is_plain_rational_then_linear() {
    let layer = random_layer(32, 3, 1, DenominatorLayout::Shared, 8);
    let c = layer.act().coeffs(0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::<f64>::randn([4, 32], 1.0, &mut rng).unwrap();
    let h = c.eval_batch(&x);
    let want = grkan::tensor::ops::linear(&h, layer.weight(), Some(layer.bias())).unwrap();
    for v in [
        KernelVariant::Fused,
        KernelVariant::Vectorized,
        KernelVariant::Looped,
    ] {
        assert!(
            layer
                .forward_with(&x, v)
                .unwrap()
                .max_abs_diff(&want)
                .unwrap()
                < 1e-12
        );
    }
}

/// Gradients of `mean(layer(x) ⊙ r)` for every leaf.
fn layer_grads(layer: &GrKanLayer<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let mut tape = Tape::new();
    let xv = tape.param(x);
    let (y, p) = layer.forward_graph(&mut tape, &xv).unwrap();
    let rv = tape.constant(r.clone());
    let prod = tape.mul(&y, &rv).unwrap();
    let loss = tape.mean(&prod).unwrap();
    let grads = tape.backward(loss).unwrap();
    [xv, p[0], p[1], p[2], p[3]]
        .iter()
        .map(|v| grads.get(*v).unwrap().clone())
        .collect()
}

#[test]
fn shared_denominator_gradient_sums_group_contributions() {
    let shared = random_layer(16, 4, 4, DenominatorLayout::Shared, 10);
    let den = shared.act().denominators().data().to_vec();
    let copies = Tensor::new([4, 4], den.repeat(4)).unwrap();
    let act =
        GroupRationalParams::from_tensors(16, shared.act().numerators().clone(), copies).unwrap();
    let split = GrKanLayer::new(act, shared.weight().clone(), shared.bias().clone()).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::<f64>::randn([6, 16], 1.0, &mut rng).unwrap();
    let r = Tensor::<f64>::randn([6, 4], 1.0, &mut rng).unwrap();
    let gs = layer_grads(&shared, &x, &r);
    let gp = layer_grads(&split, &x, &r);
    assert_eq!(gs[1].data(), gp[1].data());
    for k in 0..4 {
        let summed: f64 = (0..4).map(|grp| gp[2].at(&[grp, k])).sum();
        assert!((gs[2].data()[k] - summed).abs() < 1e-14);
    }
}

#[test]
fn single_group_adjoint_is_the_analytic_gradient() {
    let layer = random_layer(5, 5, 1, DenominatorLayout::Shared, 12);
    let c = layer.act().coeffs(0);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::<f64>::randn([1, 5], 1.0, &mut rng).unwrap();

    let mut tape = Tape::new();
    let (xv, nv, dv) = (
        tape.param(&x),
        tape.param(layer.act().numerators()),
        tape.param(layer.act().denominators()),
    );
    let h = tape.group_rational(&xv, &nv, &dv).unwrap();
    for i in 0..5 {
        // Selects one element: the loss is h[i].
        let mut onehot = vec![0.0; 5];
        onehot[i] = 5.0;
        let sel = tape.constant(Tensor::new([1, 5], onehot).unwrap());
        let p = tape.mul(&h, &sel).unwrap();
        let loss = tape.mean(&p).unwrap();
        let grads = tape.backward(loss).unwrap();
        let want = c.grad(x.data()[i]);
        assert_eq!(grads.get(xv).unwrap().data()[i], want.dx);
        assert_eq!(grads.get(nv).unwrap().data(), &want.da[..]);
        assert_eq!(grads.get(dv).unwrap().data(), &want.db[..]);
    }
}

#[test]
fn full_gradient_sweep_passes() {
    let report = gradcheck::run(0, &GradcheckPlan::default()).unwrap();
    assert!(report.cases() >= 1000, "{} cases", report.cases());
    assert!(
        report.passed(),
        "{:#?}",
        report
            .outcomes
            .iter()
            .filter(|o| !o.passed())
            .collect::<Vec<_>>()
    );
    assert!(report.max_rel_err() < gradcheck::TOLERANCE);
}

#[test]
fn sweep_is_seed_deterministic() {
    let plan = GradcheckPlan {
        rational: 20,
        per_primitive: 2,
        layer: 4,
        model: 2,
    };
    assert_eq!(
        gradcheck::run(5, &plan).unwrap(),
        gradcheck::run(5, &plan).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn variants_agree_for_any_grouping(gpow in 0u32..5, width in 1usize..9, rows in 1usize..5, seed in 0u64..10_000) {
        let g = 1usize << gpow;
        let d = g * width;
        let layer = random_layer(d, 3, g, DenominatorLayout::PerGroup, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let x = Tensor::<f64>::randn([rows, d], 2.0, &mut rng).unwrap();
        let fused = layer.forward_fused(&x).unwrap();
        prop_assert_eq!(&fused, &layer.forward_looped(&x).unwrap());
        prop_assert_eq!(&fused, &layer.forward_vectorized(&x).unwrap());
    }

    #[test]
    fn identity_coefficients_give_identity_activation(x in proptest::collection::vec(-50.0f64..50.0, 8)) {
        let id = RationalCoeffs::<f64>::identity(5, 4).unwrap();
        let act = GroupRationalParams::uniform(8, 4, &id, DenominatorLayout::Shared).unwrap();
        let t = Tensor::new([1, 8], x.clone()).unwrap();
        prop_assert_eq!(act.apply(&t).unwrap(), t);
    }
}
