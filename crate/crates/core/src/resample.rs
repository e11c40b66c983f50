//! Spatial upsampling and channel repetition kernels.
//!
//! Coordinates use half-pixel centers: output index `d` samples source
//! coordinate `(d + 0.5) · in / out − 0.5`, and taps that fall outside the
//! source are clamped to the nearest edge pixel. Every method is separable,
//! so a 2-D resample is a horizontal pass followed by a vertical pass with
//! the same 1-D tap tables. The backward pass scatters through the same
//! tables in reverse order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor4};

/// Catmull-Rom cubic convolution parameter.
pub const BICUBIC_A: f64 = -0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMethod {
    Nearest,
    #[default]
    Bilinear,
    Bicubic,
}

impl UpsampleMethod {
    pub const ALL: [UpsampleMethod; 3] = [
        UpsampleMethod::Nearest,
        UpsampleMethod::Bilinear,
        UpsampleMethod::Bicubic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UpsampleMethod::Nearest => "nearest",
            UpsampleMethod::Bilinear => "bilinear",
            UpsampleMethod::Bicubic => "bicubic",
        }
    }
}

impl fmt::Display for UpsampleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UpsampleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nearest" => Ok(UpsampleMethod::Nearest),
            "bilinear" => Ok(UpsampleMethod::Bilinear),
            "bicubic" => Ok(UpsampleMethod::Bicubic),
            other => Err(Error::Config(format!(
                "unknown upsample method {other:?} (expected nearest|bilinear|bicubic)"
            ))),
        }
    }
}

/// Interpolation taps for one output coordinate.
pub type Taps = Vec<(usize, f64)>;

fn cubic_weight(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((x - 5.0) * x + 8.0) * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// 1-D tap table mapping `input` samples onto `output` samples.
pub fn taps_1d(method: UpsampleMethod, input: usize, output: usize) -> Vec<Taps> {
    let scale = input as f64 / output as f64;
    let last = input as isize - 1;
    let clamp = |i: isize| i.clamp(0, last) as usize;
    (0..output)
        .map(|d| {
            let src = (d as f64 + 0.5) * scale - 0.5;
            match method {
                UpsampleMethod::Nearest => {
                    let i = ((d as f64 + 0.5) * scale).floor() as isize;
                    vec![(clamp(i), 1.0)]
                }
                UpsampleMethod::Bilinear => {
                    let base = src.floor();
                    let frac = src - base;
                    let i = base as isize;
                    vec![(clamp(i), 1.0 - frac), (clamp(i + 1), frac)]
                }
                UpsampleMethod::Bicubic => {
                    let base = src.floor();
                    let frac = src - base;
                    let i = base as isize;
                    (-1..=2)
                        .map(|k| (clamp(i + k), cubic_weight(frac - k as f64)))
                        .collect()
                }
            }
        })
        .collect()
}

/// Precomputed horizontal and vertical tap tables for one resample.
#[derive(Clone, Debug)]
pub struct ResamplePlan {
    pub method: UpsampleMethod,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    rows: Vec<Taps>,
    cols: Vec<Taps>,
}

impl ResamplePlan {
    pub fn new(method: UpsampleMethod, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if in_h == 0 || in_w == 0 {
            return Err(Error::contract("upsample", "empty input plane"));
        }
        if out_h < in_h || out_w < in_w {
            return Err(Error::contract(
                "upsample",
                format!("downscale {in_h}×{in_w} → {out_h}×{out_w} is not supported"),
            ));
        }
        Ok(ResamplePlan {
            method,
            in_h,
            in_w,
            out_h,
            out_w,
            rows: taps_1d(method, in_h, out_h),
            cols: taps_1d(method, in_w, out_w),
        })
    }

    pub fn out_shape(&self, s: Shape) -> Shape {
        Shape::new(s.n, s.c, self.out_h, self.out_w)
    }

    /// Resamples one `in_h × in_w` plane into `out`.
    fn forward_plane<T: Real>(&self, src: &[T], tmp: &mut [T], out: &mut [T]) {
        // horizontal: in_h × out_w
        for r in 0..self.in_h {
            let row = &src[r * self.in_w..(r + 1) * self.in_w];
            for (x, taps) in self.cols.iter().enumerate() {
                tmp[r * self.out_w + x] = taps
                    .iter()
                    .map(|&(i, wt)| row[i] * T::from_f(wt))
                    .sum();
            }
        }
        // vertical: out_h × out_w
        for (y, taps) in self.rows.iter().enumerate() {
            let dst = &mut out[y * self.out_w..(y + 1) * self.out_w];
            dst.iter_mut().for_each(|v| *v = T::zero());
            for &(i, wt) in taps {
                let wt = T::from_f(wt);
                let srow = &tmp[i * self.out_w..(i + 1) * self.out_w];
                for (d, &s) in dst.iter_mut().zip(srow) {
                    *d = *d + wt * s;
                }
            }
        }
    }

    /// Adjoint of [`forward_plane`]: scatters `grad_out` into `grad_in`.
    fn backward_plane<T: Real>(&self, grad_out: &[T], tmp: &mut [T], grad_in: &mut [T]) {
        tmp.iter_mut().for_each(|v| *v = T::zero());
        for (y, taps) in self.rows.iter().enumerate() {
            let g = &grad_out[y * self.out_w..(y + 1) * self.out_w];
            for &(i, wt) in taps {
                let wt = T::from_f(wt);
                let trow = &mut tmp[i * self.out_w..(i + 1) * self.out_w];
                for (t, &gv) in trow.iter_mut().zip(g) {
                    *t = *t + wt * gv;
                }
            }
        }
        grad_in.iter_mut().for_each(|v| *v = T::zero());
        for r in 0..self.in_h {
            let trow = &tmp[r * self.out_w..(r + 1) * self.out_w];
            let grow = &mut grad_in[r * self.in_w..(r + 1) * self.in_w];
            for (x, taps) in self.cols.iter().enumerate() {
                for &(i, wt) in taps {
                    grow[i] = grow[i] + T::from_f(wt) * trow[x];
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, t: &Tensor4<T>) -> Result<Tensor4<T>> {
        let s = t.shape();
        if s.h != self.in_h || s.w != self.in_w {
            return Err(Error::dim("upsample", format!("plan expects {}×{}, got {s}", self.in_h, self.in_w)));
        }
        let os = self.out_shape(s);
        let mut out = Tensor4::zeros(os);
        let src = t.data();
        let (ip, op) = (s.plane(), os.plane());
        crate::par::for_each_chunk_mut(out.data_mut(), op, |plane, dst| {
            let mut tmp = vec![T::zero(); self.in_h * self.out_w];
            self.forward_plane(&src[plane * ip..(plane + 1) * ip], &mut tmp, dst);
        });
        Ok(out)
    }

    pub fn backward<T: Real>(&self, grad_out: &Tensor4<T>) -> Tensor4<T> {
        let os = grad_out.shape();
        let s = Shape::new(os.n, os.c, self.in_h, self.in_w);
        let mut grad_in = Tensor4::zeros(s);
        let g = grad_out.data();
        let (ip, op) = (s.plane(), os.plane());
        crate::par::for_each_chunk_mut(grad_in.data_mut(), ip, |plane, dst| {
            let mut tmp = vec![T::zero(); self.in_h * self.out_w];
            self.backward_plane(&g[plane * op..(plane + 1) * op], &mut tmp, dst);
        });
        grad_in
    }
}

/// Upsamples every channel plane of `t` to `out_h × out_w`.
pub fn upsample<T: Real>(t: &Tensor4<T>, method: UpsampleMethod, out_h: usize, out_w: usize) -> Result<Tensor4<T>> {
    let s = t.shape();
    ResamplePlan::new(method, s.h, s.w, out_h, out_w)?.forward(t)
}

/// Output channel `j` is input channel `j / k`.
pub fn channel_repeat<T: Real>(t: &Tensor4<T>, k: usize) -> Result<Tensor4<T>> {
    if k < 1 {
        return Err(Error::contract("channel_repeat", "repeat factor must be at least 1"));
    }
    let s = t.shape();
    let p = s.plane();
    let mut data = Vec::with_capacity(s.numel() * k);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = t.plane(n, c);
            for _ in 0..k {
                data.extend_from_slice(plane);
            }
        }
    }
    debug_assert_eq!(data.len(), s.n * s.c * k * p);
    Tensor4::from_vec(Shape::new(s.n, s.c * k, s.h, s.w), data)
}

/// Sums the `k` copies of each input channel.
pub fn channel_repeat_backward<T: Real>(grad_out: &Tensor4<T>, k: usize) -> Tensor4<T> {
    let os = grad_out.shape();
    let s = Shape::new(os.n, os.c / k, os.h, os.w);
    let mut g = Tensor4::zeros(s);
    let p = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = s.index(n, c, 0, 0);
            for r in 0..k {
                let src = grad_out.plane(n, c * k + r);
                for (d, &v) in g.data_mut()[base..base + p].iter_mut().zip(src) {
                    *d = *d + v;
                }
            }
        }
    }
    g
}
