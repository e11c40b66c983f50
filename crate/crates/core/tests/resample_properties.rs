use proptest::prelude::*;
use tdsa_core::oracle::reference_upsample;
use tdsa_core::resample::{channel_repeat, upsample, UpsampleMethod};
use tdsa_core::{Shape, Tensor4};

fn method() -> impl Strategy<Value = UpsampleMethod> {
    prop::sample::select(UpsampleMethod::ALL.to_vec())
}

/// Source tensor plus an output size no smaller than it.
fn source() -> impl Strategy<Value = (Tensor4<f64>, usize, usize)> {
    (1usize..3, 1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(n, c, h, w)| {
        let shape = Shape::new(n, c, h, w);
        (
            prop::collection::vec(-2.0f64..2.0, shape.numel()).prop_map(move |d| Tensor4::from_vec(shape, d).unwrap()),
            h..h * 4 + 1,
            w..w * 4 + 1,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn constants_are_reproduced_exactly(h in 1usize..6, w in 1usize..6, oh in 0usize..12, ow in 0usize..12, v in -5.0f64..5.0, m in method()) {
        let t = Tensor4::full(Shape::new(1, 2, h, w), v);
        let up = upsample(&t, m, h + oh, w + ow).unwrap();
        prop_assert!(up.data().iter().all(|x| (x - v).abs() < 1e-6));
    }

    #[test]
    fn kernel_agrees_with_per_pixel_reference((t, oh, ow) in source(), m in method()) {
        let fast = upsample(&t, m, oh, ow).unwrap();
        let slow = reference_upsample(&t, m, oh, ow);
        prop_assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn nearest_is_undone_by_subsampling((t, _, _) in source(), k in 1usize..5) {
        let s = t.shape();
        let up = upsample(&t, UpsampleMethod::Nearest, s.h * k, s.w * k).unwrap();
        let back = Tensor4::from_fn(s, |n, c, y, x| up.at(n, c, y * k, x * k));
        prop_assert_eq!(back, t);
    }

    #[test]
    fn bicubic_overshoot_on_ramps_is_bounded(
        steps in prop::collection::vec(0.0f64..3.0, 2..7),
        start in -3.0f64..3.0,
        ow in 0usize..20,
    ) {
        let mut row = vec![start];
        for s in &steps {
            row.push(row[row.len() - 1] + s);
        }
        let w = row.len();
        let t = Tensor4::from_vec(Shape::new(1, 1, 1, w), row.clone()).unwrap();
        let up = upsample(&t, UpsampleMethod::Bicubic, 1, w + ow).unwrap();
        let (lo, hi) = (row[0], row[w - 1]);
        let slack = 0.25 * (hi - lo);
        prop_assert!(up.data().iter().all(|&v| v >= lo - slack - 1e-12 && v <= hi + slack + 1e-12));
    }

    #[test]
    fn repeat_copies_channel_floor_j_over_k((t, _, _) in source(), k in 1usize..4) {
        let r = channel_repeat(&t, k).unwrap();
        let s = t.shape();
        prop_assert_eq!(r.shape(), Shape::new(s.n, s.c * k, s.h, s.w));
        for n in 0..s.n {
            for j in 0..s.c * k {
                prop_assert_eq!(r.plane(n, j), t.plane(n, j / k));
            }
        }
    }
}

#[test]
fn repeat_rejects_zero_and_keeps_identity() {
    let t = Tensor4::from_fn(Shape::new(1, 2, 2, 2), |_, c, y, x| (c * 4 + y * 2 + x) as f64);
    assert!(channel_repeat(&t, 0).is_err());
    assert_eq!(channel_repeat(&t, 1).unwrap(), t);
}

#[test]
fn bilinear_row_matches_the_reference_formula() {
    let t = Tensor4::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 3.0]).unwrap();
    let up = upsample(&t, UpsampleMethod::Bilinear, 1, 4).unwrap();
    let expect = reference_upsample(&t, UpsampleMethod::Bilinear, 1, 4);
    assert!(up.max_abs_diff(&expect) < 1e-15);
    assert!(up.max_abs_diff(&Tensor4::from_vec(Shape::new(1, 1, 1, 4), vec![1.0, 1.5, 2.5, 3.0]).unwrap()) < 1e-15);
}
