use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tdsa_core::autodiff::Tape;
use tdsa_core::loss::{self, LossConfig, MaskSet, StageSpec};
use tdsa_core::oracle::{self, fd_gradient, max_rel_err, rel_err, FdConfig};
use tdsa_core::resample::UpsampleMethod;
use tdsa_core::selftest::{self, Input, GRADIENT_FLOOR, GRADIENT_TOL, VALUE_FLOOR};
use tdsa_core::{Shape, Tensor4};

fn tensor(shape: Shape) -> impl Strategy<Value = Tensor4<f64>> {
    prop::collection::vec(-3.0f64..3.0, shape.numel()).prop_map(move |d| Tensor4::from_vec(shape, d).unwrap())
}

fn method() -> impl Strategy<Value = UpsampleMethod> {
    prop::sample::select(UpsampleMethod::ALL.to_vec())
}

/// `(S, ξ, n, h, w)` and a matching feature tensor.
fn grouped() -> impl Strategy<Value = (StageSpec, Tensor4<f64>)> {
    (1usize..4, 1usize..5, 1usize..3, 1usize..5, 1usize..5).prop_flat_map(|(s, xi, n, h, w)| {
        let spec = StageSpec::new(s + 1, xi).unwrap();
        (Just(spec), tensor(Shape::new(n, (s + 1) * xi, h, w)))
    })
}

fn diversity(f: &Tensor4<f64>, spec: StageSpec) -> f64 {
    let mut t = Tape::new();
    let v = t.leaf(f.clone(), false).unwrap();
    let d = loss::diversity_loss(&mut t, v, spec).unwrap();
    t.value(d).item()
}

fn discriminality(f: &Tensor4<f64>, labels: &[usize], spec: StageSpec, masks: &MaskSet) -> f64 {
    let mut t = Tape::new();
    let v = t.leaf(f.clone(), false).unwrap();
    let d = loss::discriminality_loss(&mut t, v, labels, spec, masks).unwrap();
    t.value(d).item()
}

fn gated(f_l: &Tensor4<f64>, f_h: &Tensor4<f64>, repeat: usize, m: UpsampleMethod) -> Tensor4<f64> {
    let mut t = Tape::new();
    let l = t.leaf(f_l.clone(), false).unwrap();
    let h = t.leaf(f_h.clone(), false).unwrap();
    let g = loss::tdsa_attention(&mut t, l, h, repeat, m, false).unwrap();
    t.value(g).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masks_zero_exactly_floor_half(xi in 1usize..=8, s in 2usize..6, seed in any::<u64>()) {
        let spec = StageSpec::new(s, xi).unwrap();
        let set = MaskSet::sample(spec, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(set.masks().len(), s);
        for m in set.masks() {
            prop_assert_eq!(m.len(), xi);
            prop_assert_eq!(m.iter().filter(|&&b| b == 0).count(), xi / 2);
            prop_assert!(m.iter().all(|&b| b <= 1));
        }
    }

    #[test]
    fn group_diversity_is_bounded((spec, f) in grouped()) {
        let s = f.shape();
        let xi = spec.channels_per_class();
        for n in 0..s.n {
            for i in 0..spec.num_classes() {
                let h = oracle::reference_group_diversity(&f, n, i, xi);
                prop_assert!(h >= 1.0 - 1e-12 && h <= (xi.min(s.h * s.w)) as f64 + 1e-12, "h = {}", h);
            }
        }
        let d = diversity(&f, spec);
        prop_assert!(d >= 1.0 - 1e-12 && d <= (xi.min(s.h * s.w)) as f64 + 1e-12);
    }

    #[test]
    fn equal_channels_up_to_a_constant_give_unit_diversity(
        (spec, f) in grouped(),
        shifts in prop::collection::vec(-5.0f64..5.0, 16),
    ) {
        let s = f.shape();
        let xi = spec.channels_per_class();
        let same = Tensor4::from_fn(s, |n, c, y, x| f.at(n, c - c % xi, y, x) + shifts[c % 16]);
        prop_assert!((diversity(&same, spec) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn diversity_ignores_per_channel_shifts((spec, f) in grouped(), c in 0usize..64, k in -20.0f64..20.0) {
        let s = f.shape();
        let c = c % s.c;
        let shifted = Tensor4::from_fn(s, |n, ch, y, x| f.at(n, ch, y, x) + if ch == c { k } else { 0.0 });
        prop_assert!((diversity(&shifted, spec) - diversity(&f, spec)).abs() < 1e-9);
    }

    #[test]
    fn spatial_softmax_normalizes_and_ignores_shifts(f in tensor(Shape::new(2, 3, 3, 4)), k in -30.0f64..30.0) {
        let mut t = Tape::new();
        let a = t.leaf(f.clone(), false).unwrap();
        let p = t.spatial_softmax(a).unwrap();
        let b = t.leaf(f.map(|v| v + k), false).unwrap();
        let q = t.spatial_softmax(b).unwrap();
        let (p, q) = (t.value(p), t.value(q));
        for n in 0..2 {
            for c in 0..3 {
                let plane = p.plane(n, c);
                prop_assert!(plane.iter().all(|&v| v > 0.0));
                prop_assert!((plane.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        prop_assert!(p.max_abs_diff(q) < 1e-9);
    }

    #[test]
    fn permuting_channels_within_a_group_changes_nothing((spec, f) in grouped(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = f.shape();
        let xi = spec.channels_per_class();
        let labels: Vec<usize> = (0..s.n).map(|n| n % spec.num_classes()).collect();
        let masks = MaskSet::sample(spec, &mut rng);
        // Rotate every group by one channel and the masks with it.
        let perm = |c: usize| c - c % xi + (c % xi + 1) % xi;
        let permuted = Tensor4::from_fn(s, |n, c, y, x| f.at(n, perm(c), y, x));
        let rotated: Vec<Vec<u8>> = masks
            .masks()
            .iter()
            .map(|m| (0..xi).map(|j| m[(j + 1) % xi]).collect())
            .collect();
        let pmasks = MaskSet::from_masks(spec, rotated).unwrap();
        let d0 = discriminality(&f, &labels, spec, &masks);
        let d1 = discriminality(&permuted, &labels, spec, &pmasks);
        prop_assert!(rel_err(d0, d1, VALUE_FLOOR) < 1e-12);
        prop_assert!(rel_err(diversity(&f, spec), diversity(&permuted, spec), VALUE_FLOOR) < 1e-12);
    }

    #[test]
    fn gate_keeps_sign_and_shrinks_magnitude(
        f_l in tensor(Shape::new(2, 4, 4, 4)),
        f_h in tensor(Shape::new(2, 2, 2, 2)),
        m in method(),
    ) {
        let g = gated(&f_l, &f_h, 2, m);
        for (out, inp) in g.data().iter().zip(f_l.data()) {
            prop_assert!(out.abs() < inp.abs() || *inp == 0.0);
            prop_assert!(out.signum() == inp.signum() || *inp == 0.0);
        }
    }

    #[test]
    fn gate_channels_follow_their_class_group(
        f_l in tensor(Shape::new(1, 6, 4, 4)),
        group in 0usize..3,
        m in method(),
    ) {
        // S = 3, ξ_h = 1, repeat 2: high channel i gates middle channels 2i, 2i+1.
        let f_h = Tensor4::from_fn(Shape::new(1, 3, 2, 2), |_, c, _, _| if c == group { -60.0 } else { 0.0 });
        let g = gated(&f_l, &f_h, 2, m);
        for c in 0..6 {
            for (out, inp) in g.plane(0, c).iter().zip(f_l.plane(0, c)) {
                if c / 2 == group {
                    prop_assert!(out.abs() <= 1e-20 * inp.abs().max(1.0));
                } else {
                    prop_assert!((out - 0.5 * inp).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn sigmoid_is_odd_around_one_half(f in tensor(Shape::new(1, 2, 3, 3))) {
        let mut t = Tape::new();
        let a = t.leaf(f.clone(), false).unwrap();
        let b = t.leaf(f.map(|v| -v), false).unwrap();
        let (sa, sb) = (t.sigmoid(a).unwrap(), t.sigmoid(b).unwrap());
        for (x, y) in t.value(sa).data().iter().zip(t.value(sb).data()) {
            prop_assert!(*x > 0.0 && *x < 1.0);
            prop_assert!((x + y - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn breakdowns_satisfy_identities_and_match_the_oracle(seed in any::<u64>()) {
        let case = selftest::random_case(&mut ChaCha8Rng::seed_from_u64(seed));
        let (b, _) = selftest::kernel_loss(&case, &case.cfg, None).unwrap();
        prop_assert!(b.identity_residual(case.cfg.mu, case.cfg.lambda) < 1e-12);
        let o = selftest::oracle_loss(&case);
        for (k, r) in b.components().iter().zip(o.components()) {
            prop_assert!(rel_err(*k, r, VALUE_FLOOR) < 1e-9, "{} vs {} in {}", k, r, case.describe());
        }
    }
}

#[test]
fn mask_positions_are_zeroed_half_the_time() {
    let spec = StageSpec::new(2, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let trials = 10_000;
    let mut zeros = [0usize; 2];
    for _ in 0..trials {
        let set = MaskSet::sample(spec, &mut rng);
        for (z, &b) in zeros.iter_mut().zip(&set.masks()[0]) {
            *z += usize::from(b == 0);
        }
    }
    for z in zeros {
        let f = z as f64 / trials as f64;
        assert!((f - 0.5).abs() < 0.02, "frequency {f}");
    }
}

#[test]
fn paper_configuration_shapes() {
    let cfg = LossConfig::default();
    assert_eq!((cfg.mu, cfg.lambda), (1.5, 10.0));
    let high = StageSpec::new(8, 3).unwrap();
    let mid = StageSpec::new(8, 3 * 2).unwrap();
    assert_eq!(loss::repeat_factor(high, mid).unwrap(), 2);
    assert!(loss::repeat_factor(high, StageSpec::new(7, 6).unwrap()).is_err());
    assert!(loss::repeat_factor(StageSpec::new(8, 2).unwrap(), StageSpec::new(8, 3).unwrap()).is_err());
}

#[test]
fn two_stage_instance_matches_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut case = selftest::random_case(&mut rng);
    case.spec_h = StageSpec::new(2, 2).unwrap();
    case.spec_l = StageSpec::new(2, 4).unwrap();
    case.masks_h = MaskSet::sample(case.spec_h, &mut rng);
    case.masks_l = MaskSet::sample(case.spec_l, &mut rng);
    case.labels = vec![0, 1];
    case.logits = Tensor4::from_fn(Shape::new(2, 2, 1, 1), |n, c, _, _| (n + 2 * c) as f64 * 0.3 - 0.4);
    case.f_h = Tensor4::from_fn(Shape::new(2, 4, 2, 2), |n, c, y, x| ((n * 7 + c * 5 + y * 3 + x) % 11) as f64 * 0.2 - 1.0);
    case.f_l = Tensor4::from_fn(Shape::new(2, 8, 4, 4), |n, c, y, x| ((n * 13 + c * 7 + y * 5 + x * 3) % 17) as f64 * 0.15 - 1.2);
    let (k, _) = selftest::kernel_loss(&case, &case.cfg, None).unwrap();
    let o = selftest::oracle_loss(&case);
    for (a, b) in k.components().iter().zip(o.components()) {
        assert!(rel_err(*a, b, VALUE_FLOOR) < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn total_loss_gradients_reach_the_high_tap_through_both_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let case = selftest::random_case(&mut rng);
    let attached = LossConfig {
        detach_attention: false,
        ..case.cfg
    };
    let detached = LossConfig {
        detach_attention: true,
        ..case.cfg
    };
    let (_, g_att) = selftest::kernel_loss(&case, &attached, Some(Input::High)).unwrap();
    let (_, g_det) = selftest::kernel_loss(&case, &detached, Some(Input::High)).unwrap();
    let (g_att, g_det) = (g_att.unwrap(), g_det.unwrap());

    let fd = fd_gradient(
        |f_h| {
            let mut c = case.clone();
            c.f_h = f_h.clone();
            Ok(selftest::kernel_loss(&c, &attached, None)?.0.total)
        },
        &case.f_h,
        FdConfig::default(),
    )
    .unwrap();
    assert!(max_rel_err(&g_att, &fd, GRADIENT_FLOOR) < GRADIENT_TOL);
    assert!(g_att.max_abs_diff(&g_det) > 1e-6, "gating path contributes no gradient");

    for which in [Input::Logits, Input::Mid] {
        let (_, g) = selftest::kernel_loss(&case, &attached, Some(which)).unwrap();
        let fd = fd_gradient(
            |x| {
                let mut c = case.clone();
                *c.input_mut(which) = x.clone();
                Ok(selftest::kernel_loss(&c, &attached, None)?.0.total)
            },
            case.input(which),
            FdConfig::default(),
        )
        .unwrap();
        assert!(max_rel_err(&g.unwrap(), &fd, GRADIENT_FLOOR) < GRADIENT_TOL, "{which:?}");
    }
}

#[test]
fn zero_lambda_total_is_ce_plus_mu_times_discriminality() {
    let mut case = selftest::random_case(&mut ChaCha8Rng::seed_from_u64(14));
    case.cfg.lambda = 0.0;
    let (b, _) = selftest::kernel_loss(&case, &case.cfg, None).unwrap();
    let expect = b.ce + case.cfg.mu * (b.dis_high + b.dis_mid);
    assert!(rel_err(b.total, expect, VALUE_FLOOR) < 1e-12);
    assert_eq!(b.mc_high, b.dis_high);
}
