//! Independent references for the loss kernels.
//!
//! Nothing here calls the tape or the resampling kernels: the reference
//! losses are straight loops over raw `f64` values, with interpolation taps
//! recomputed per output pixel. [`fd_gradient`] gives central finite
//! differences of any scalar function.

// Index loops mirror the summation indices of the formulas.
#![allow(clippy::needless_range_loop)]

use crate::error::{Error, Result};
use crate::loss::{LossBreakdown, LossConfig, MaskSet, StageSpec};
use crate::resample::{UpsampleMethod, BICUBIC_A};
use crate::tensor::{Shape, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdConfig {
    pub step: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { step: 1e-6 }
    }
}

/// Central differences `(f(x + εe) − f(x − εe)) / 2ε` for every coordinate.
pub fn fd_gradient<F>(mut f: F, x: &Tensor4<f64>, cfg: FdConfig) -> Result<Tensor4<f64>>
where
    F: FnMut(&Tensor4<f64>) -> Result<f64>,
{
    if cfg.step.is_nan() || cfg.step <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {}", cfg.step)));
    }
    let mut probe = x.clone();
    let mut grad = Tensor4::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + cfg.step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - cfg.step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                op: "fd_gradient",
                index: i,
            });
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * cfg.step);
    }
    Ok(grad)
}

/// Relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest [`rel_err`] over two equally shaped tensors.
pub fn max_rel_err(a: &Tensor4<f64>, b: &Tensor4<f64>, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y, floor))
        .fold(0.0, f64::max)
}

fn at(t: &Tensor4<f64>, n: usize, c: usize, h: usize, w: usize) -> f64 {
    t.data()[t.shape().index(n, c, h, w)]
}

fn cross_entropy_row(scores: &[f64], label: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &s in scores {
        if s > m {
            m = s;
        }
    }
    let mut z = 0.0;
    for &s in scores {
        z += (s - m).exp();
    }
    m + z.ln() - scores[label]
}

/// `L_dis` by explicit loops: mask, channel max, spatial mean, cross entropy.
pub fn reference_discriminality(f: &Tensor4<f64>, labels: &[usize], spec: StageSpec, masks: &MaskSet) -> f64 {
    let s = f.shape();
    let classes = spec.num_classes();
    let xi = spec.channels_per_class();
    let mut total = 0.0;
    for n in 0..s.n {
        let mut scores = vec![0.0; classes];
        for (i, score) in scores.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..s.h {
                for k in 0..s.w {
                    let mut best = f64::NEG_INFINITY;
                    for m in 0..xi {
                        let v = f64::from(masks.masks()[i][m]) * at(f, n, i * xi + m, j, k);
                        if v > best {
                            best = v;
                        }
                    }
                    acc += best;
                }
            }
            *score = acc / (s.h * s.w) as f64;
        }
        total += cross_entropy_row(&scores, labels[n]);
    }
    total / s.n as f64
}

/// `h(F^i)` for batch item `n`, group `i`.
pub fn reference_group_diversity(f: &Tensor4<f64>, n: usize, i: usize, xi: usize) -> f64 {
    let s = f.shape();
    let mut soft = vec![vec![0.0; s.h * s.w]; xi];
    for (m, plane) in soft.iter_mut().enumerate() {
        let c = i * xi + m;
        let mut mx = f64::NEG_INFINITY;
        for j in 0..s.h {
            for k in 0..s.w {
                mx = mx.max(at(f, n, c, j, k));
            }
        }
        let mut z = 0.0;
        for j in 0..s.h {
            for k in 0..s.w {
                let e = (at(f, n, c, j, k) - mx).exp();
                plane[j * s.w + k] = e;
                z += e;
            }
        }
        for v in plane.iter_mut() {
            *v /= z;
        }
    }
    let mut h = 0.0;
    for pos in 0..s.h * s.w {
        let mut best = f64::NEG_INFINITY;
        for plane in &soft {
            if plane[pos] > best {
                best = plane[pos];
            }
        }
        h += best;
    }
    h
}

/// `L_div` by explicit loops.
pub fn reference_diversity(f: &Tensor4<f64>, spec: StageSpec) -> f64 {
    let s = f.shape();
    let mut total = 0.0;
    for n in 0..s.n {
        let mut per_item = 0.0;
        for i in 0..spec.num_classes() {
            per_item += reference_group_diversity(f, n, i, spec.channels_per_class());
        }
        total += per_item / spec.num_classes() as f64;
    }
    total / s.n as f64
}

fn keys_cubic(t: f64) -> f64 {
    let a = BICUBIC_A;
    let t = t.abs();
    let (t2, t3) = (t * t, t * t * t);
    if t <= 1.0 {
        (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    } else if t < 2.0 {
        a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// One upsampled value of plane (n, c) at output pixel (y, x).
#[allow(clippy::too_many_arguments)]
pub fn reference_upsample_pixel(
    src: &Tensor4<f64>,
    n: usize,
    c: usize,
    method: UpsampleMethod,
    out_h: usize,
    out_w: usize,
    y: usize,
    x: usize,
) -> f64 {
    let s = src.shape();
    let sy = s.h as f64 / out_h as f64;
    let sx = s.w as f64 / out_w as f64;
    let clamp_y = |i: i64| i.clamp(0, s.h as i64 - 1) as usize;
    let clamp_x = |i: i64| i.clamp(0, s.w as i64 - 1) as usize;
    match method {
        UpsampleMethod::Nearest => {
            let iy = ((y as f64 + 0.5) * sy).floor() as i64;
            let ix = ((x as f64 + 0.5) * sx).floor() as i64;
            at(src, n, c, clamp_y(iy), clamp_x(ix))
        }
        UpsampleMethod::Bilinear => {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            let fx = (x as f64 + 0.5) * sx - 0.5;
            let (y0, x0) = (fy.floor(), fx.floor());
            let (ty, tx) = (fy - y0, fx - x0);
            let (y0, x0) = (y0 as i64, x0 as i64);
            let v00 = at(src, n, c, clamp_y(y0), clamp_x(x0));
            let v01 = at(src, n, c, clamp_y(y0), clamp_x(x0 + 1));
            let v10 = at(src, n, c, clamp_y(y0 + 1), clamp_x(x0));
            let v11 = at(src, n, c, clamp_y(y0 + 1), clamp_x(x0 + 1));
            (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01) + ty * ((1.0 - tx) * v10 + tx * v11)
        }
        UpsampleMethod::Bicubic => {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            let fx = (x as f64 + 0.5) * sx - 0.5;
            let (y0, x0) = (fy.floor() as i64, fx.floor() as i64);
            let mut acc = 0.0;
            for dy in -1..=2i64 {
                let wy = keys_cubic(fy - (y0 + dy) as f64);
                for dx in -1..=2i64 {
                    let wx = keys_cubic(fx - (x0 + dx) as f64);
                    acc += wy * wx * at(src, n, c, clamp_y(y0 + dy), clamp_x(x0 + dx));
                }
            }
            acc
        }
    }
}

/// Whole-tensor upsample built from [`reference_upsample_pixel`].
pub fn reference_upsample(src: &Tensor4<f64>, method: UpsampleMethod, out_h: usize, out_w: usize) -> Tensor4<f64> {
    let s = src.shape();
    Tensor4::from_fn(Shape::new(s.n, s.c, out_h, out_w), |n, c, y, x| {
        reference_upsample_pixel(src, n, c, method, out_h, out_w, y, x)
    })
}

/// Gated middle-level features `F^l · sigmoid(up(F^h)[c / repeat])`.
pub fn reference_gate(f_l: &Tensor4<f64>, f_h: &Tensor4<f64>, repeat: usize, method: UpsampleMethod) -> Tensor4<f64> {
    let sl = f_l.shape();
    Tensor4::from_fn(sl, |n, c, y, x| {
        let hv = reference_upsample_pixel(f_h, n, c / repeat, method, sl.h, sl.w, y, x);
        at(f_l, n, c, y, x) * (1.0 / (1.0 + (-hv).exp()))
    })
}

/// Every loss component by explicit loops, with fixed masks.
#[allow(clippy::too_many_arguments)]
pub fn reference_losses(
    logits: &Tensor4<f64>,
    f_h: &Tensor4<f64>,
    f_l: &Tensor4<f64>,
    labels: &[usize],
    spec_h: StageSpec,
    spec_l: StageSpec,
    cfg: &LossConfig,
    masks_h: &MaskSet,
    masks_l: &MaskSet,
) -> LossBreakdown {
    let ls = logits.shape();
    let mut ce = 0.0;
    for n in 0..ls.n {
        let row: Vec<f64> = (0..ls.item()).map(|i| logits.data()[n * ls.item() + i]).collect();
        ce += cross_entropy_row(&row, labels[n]);
    }
    ce /= ls.n as f64;
    if cfg.mu == 0.0 {
        return LossBreakdown {
            ce,
            total: ce,
            ..LossBreakdown::default()
        };
    }
    let repeat = spec_l.channels_per_class() / spec_h.channels_per_class();
    let gated = reference_gate(f_l, f_h, repeat, cfg.upsample);

    let dis_high = reference_discriminality(f_h, labels, spec_h, masks_h);
    let div_high = reference_diversity(f_h, spec_h);
    let mc_high = dis_high - cfg.lambda * div_high;
    let dis_mid = reference_discriminality(&gated, labels, spec_l, masks_l);
    let div_mid = reference_diversity(&gated, spec_l);
    let mc_mid = dis_mid - cfg.lambda * div_mid;
    let tdsa = mc_high + mc_mid;
    LossBreakdown {
        ce,
        dis_high,
        div_high,
        mc_high,
        dis_mid,
        div_mid,
        mc_mid,
        tdsa,
        total: ce + cfg.mu * tdsa,
    }
}
