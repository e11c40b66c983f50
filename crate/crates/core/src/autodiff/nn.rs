//! Convolution, batch normalization, pooling and linear layers.
//!
//! Convolutions run per batch item (im2col + GEMM) and the per-item weight
//! gradients are summed in item order, so results do not depend on how many
//! workers the `par` helpers use.

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Real, Shape, Tensor4};

pub(crate) struct ConvSaved {
    pub x: Var,
    pub w: Var,
    pub b: Option<Var>,
    pub pad: usize,
}

pub(crate) struct BatchNormSaved<T> {
    pub x: Var,
    pub gamma: Var,
    pub beta: Var,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub training: bool,
}

/// Per-channel batch statistics observed by a training-mode batch norm.
/// `var` is the unbiased estimate, as used for running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.cols();
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        dst[oy * g.ow + ox] = if iy >= 0 && iy < g.h as isize && ix >= 0 && ix < g.w as isize {
                            x[(ci * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ncols = g.cols();
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let d = (ci * g.h + iy as usize) * g.w + ix as usize;
                            dx[d] = dx[d] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn geometry(x: Shape, w: Shape, pad: usize) -> Result<ConvGeom> {
    if w.c != x.c || w.h != w.w {
        return Err(Error::dim("conv2d", format!("input {x} incompatible with kernel {w}")));
    }
    let k = w.h;
    if x.h + 2 * pad < k || x.w + 2 * pad < k {
        return Err(Error::dim("conv2d", format!("kernel {k} larger than padded input {x}")));
    }
    Ok(ConvGeom {
        cin: x.c,
        h: x.h,
        w: x.w,
        k,
        pad,
        oh: x.h + 2 * pad - k + 1,
        ow: x.w + 2 * pad - k + 1,
    })
}

impl<T: Real> Tape<T> {
    /// Stride-1 2-D convolution. `w` is cout×cin×k×k, `b` is 1×cout×1×1.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let g = geometry(xs, ws, pad)?;
        if let Some(b) = b {
            if self.shape(b) != Shape::new(1, ws.n, 1, 1) {
                return Err(Error::dim("conv2d", format!("bias {} for {} filters", self.shape(b), ws.n)));
            }
        }
        let cout = ws.n;
        let os = Shape::new(xs.n, cout, g.oh, g.ow);
        let mut out = Tensor4::zeros(os);
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = b.map(|b| self.value(b).data());
            let item = xs.item();
            par::for_each_chunk_mut(out.data_mut(), os.item(), |n, dst| {
                let src = &xd[n * item..(n + 1) * item];
                let ncols = g.cols();
                if g.is_pointwise() {
                    T::gemm(cout, g.rows(), ncols, T::one(), wd, false, src, false, T::zero(), dst);
                } else {
                    let mut cols = vec![T::zero(); g.rows() * ncols];
                    im2col(src, &g, &mut cols);
                    T::gemm(cout, g.rows(), ncols, T::one(), wd, false, &cols, false, T::zero(), dst);
                }
                if let Some(bd) = bd {
                    for (co, plane) in dst.chunks_mut(ncols).enumerate() {
                        plane.iter_mut().for_each(|v| *v = *v + bd[co]);
                    }
                }
            });
        }
        self.push("conv2d", out, Op::Conv(ConvSaved { x, w, b, pad }))
    }

    /// Batch normalization over (n, h, w) per channel. In training mode the
    /// batch statistics are used and returned; otherwise `running` is used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(x);
        let c = xs.c;
        for v in [gamma, beta] {
            if self.shape(v) != Shape::new(1, c, 1, 1) {
                return Err(Error::dim("batch_norm", format!("affine param {} for {c} channels", self.shape(v))));
            }
        }
        let count = xs.n * xs.plane();
        let p = xs.plane();
        let xd = self.value(x).data();
        let (mean, var, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::dim("batch_norm", "running statistics length"));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                if count < 2 {
                    return Err(Error::contract("batch_norm", "training mode needs at least two values per channel"));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for n in 0..xs.n {
                        s = s + self.value(x).plane(n, ch).iter().copied().sum::<T>();
                    }
                    let m = s / T::from_f(count as f64);
                    let mut sq = T::zero();
                    for n in 0..xs.n {
                        for &v in &xd[xs.index(n, ch, 0, 0)..xs.index(n, ch, 0, 0) + p] {
                            sq = sq + (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq / T::from_f(count as f64);
                }
                let unbiased = var
                    .iter()
                    .map(|&v| v * T::from_f(count as f64 / (count - 1) as f64))
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let eps = T::from_f(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.numel()];
        let mut out = Tensor4::zeros(xs);
        for n in 0..xs.n {
            for ch in 0..c {
                let base = xs.index(n, ch, 0, 0);
                for i in base..base + p {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out.data_mut()[i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let saved = BatchNormSaved {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training: running.is_none(),
        };
        let v = self.push("batch_norm", out, Op::BatchNorm(saved))?;
        Ok((v, stats))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.h < 2 || xs.w < 2 {
            return Err(Error::dim("max_pool2", format!("input {xs} too small")));
        }
        let os = Shape::new(xs.n, xs.c, xs.h / 2, xs.w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(os.numel());
        let mut argmax = Vec::with_capacity(os.numel());
        for n in 0..xs.n {
            for c in 0..xs.c {
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let mut best_i = xs.index(n, c, 2 * oy, 2 * ox);
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = xs.index(n, c, 2 * oy + dy, 2 * ox + dx);
                            if xd[i] > xd[best_i] {
                                best_i = i;
                            }
                        }
                        out.push(xd[best_i]);
                        argmax.push(best_i as u32);
                    }
                }
            }
        }
        let out = Tensor4::from_vec(os, out)?;
        self.push("max_pool2", out, Op::MaxPool { x, argmax })
    }

    /// Fully connected layer on flattened batch items: `w` is out×in×1×1,
    /// `b` is 1×out×1×1, output is n×out×1×1.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let fan_in = xs.item();
        if ws.item() != fan_in || self.shape(b) != Shape::new(1, ws.n, 1, 1) {
            return Err(Error::dim(
                "linear",
                format!("input {xs}, weight {ws}, bias {}", self.shape(b)),
            ));
        }
        let os = Shape::new(xs.n, ws.n, 1, 1);
        let mut out = vec![T::zero(); os.numel()];
        T::gemm(
            xs.n,
            fan_in,
            ws.n,
            T::one(),
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::zero(),
            &mut out,
        );
        let bd = self.value(b).data();
        for row in out.chunks_mut(ws.n) {
            for (o, &bv) in row.iter_mut().zip(bd) {
                *o = *o + bv;
            }
        }
        let out = Tensor4::from_vec(os, out)?;
        self.push("linear", out, Op::Linear { x, w, b })
    }
}

pub(crate) fn conv_backward<T: Real>(
    tape: &Tape<T>,
    s: &ConvSaved,
    g: &Tensor4<T>,
    grads: &mut [Option<Tensor4<T>>],
) {
    let xs = tape.shape(s.x);
    let ws = tape.shape(s.w);
    let geo = geometry(xs, ws, s.pad).expect("geometry validated in forward");
    let cout = ws.n;
    let os = g.shape();
    let (ncols, rows) = (geo.cols(), geo.rows());
    let xd = tape.value(s.x).data();
    let wd = tape.value(s.w).data();
    let gd = g.data();

    if let Some(b) = s.b {
        if tape.requires_grad(b) {
            let mut db = vec![T::zero(); cout];
            for n in 0..os.n {
                for (co, acc) in db.iter_mut().enumerate() {
                    *acc = *acc + g.plane(n, co).iter().copied().sum::<T>();
                }
            }
            tape.accumulate(grads, b, Tensor4::from_vec(Shape::new(1, cout, 1, 1), db).expect("bias grad"));
        }
    }

    if tape.requires_grad(s.w) {
        let per_item: Vec<Vec<T>> = par::map_range(xs.n, |n| {
            let src = &xd[n * xs.item()..(n + 1) * xs.item()];
            let dy = &gd[n * os.item()..(n + 1) * os.item()];
            let mut dw = vec![T::zero(); ws.numel()];
            if geo.is_pointwise() {
                T::gemm(cout, ncols, rows, T::one(), dy, false, src, true, T::zero(), &mut dw);
            } else {
                let mut cols = vec![T::zero(); rows * ncols];
                im2col(src, &geo, &mut cols);
                T::gemm(cout, ncols, rows, T::one(), dy, false, &cols, true, T::zero(), &mut dw);
            }
            dw
        });
        let mut dw = vec![T::zero(); ws.numel()];
        for item in per_item {
            for (a, b) in dw.iter_mut().zip(item) {
                *a = *a + b;
            }
        }
        tape.accumulate(grads, s.w, Tensor4::from_vec(ws, dw).expect("weight grad"));
    }

    if tape.requires_grad(s.x) {
        let mut dx = Tensor4::zeros(xs);
        par::for_each_chunk_mut(dx.data_mut(), xs.item(), |n, dst| {
            let dy = &gd[n * os.item()..(n + 1) * os.item()];
            if geo.is_pointwise() {
                T::gemm(rows, cout, ncols, T::one(), wd, true, dy, false, T::zero(), dst);
            } else {
                let mut cols = vec![T::zero(); rows * ncols];
                T::gemm(rows, cout, ncols, T::one(), wd, true, dy, false, T::zero(), &mut cols);
                col2im(&cols, &geo, dst);
            }
        });
        tape.accumulate(grads, s.x, dx);
    }
}

pub(crate) fn batch_norm_backward<T: Real>(
    tape: &Tape<T>,
    s: &BatchNormSaved<T>,
    g: &Tensor4<T>,
    grads: &mut [Option<Tensor4<T>>],
) {
    let xs = tape.shape(s.x);
    let c = xs.c;
    let p = xs.plane();
    let count = T::from_f((xs.n * p) as f64);
    let gd = g.data();
    let gamma = tape.value(s.gamma).data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for n in 0..xs.n {
        for ch in 0..c {
            let base = xs.index(n, ch, 0, 0);
            for (&g, &xh) in gd[base..base + p].iter().zip(&s.xhat[base..base + p]) {
                dgamma[ch] = dgamma[ch] + g * xh;
                dbeta[ch] = dbeta[ch] + g;
            }
        }
    }
    if tape.requires_grad(s.x) {
        let mut dx = Tensor4::zeros(xs);
        for n in 0..xs.n {
            for ch in 0..c {
                let base = xs.index(n, ch, 0, 0);
                let k = gamma[ch] * s.inv_std[ch];
                let out = &mut dx.data_mut()[base..base + p];
                for ((o, &g), &xh) in out.iter_mut().zip(&gd[base..base + p]).zip(&s.xhat[base..base + p]) {
                    *o = if s.training {
                        k * (g - dbeta[ch] / count - xh * dgamma[ch] / count)
                    } else {
                        k * g
                    };
                }
            }
        }
        tape.accumulate(grads, s.x, dx);
    }
    let cs = Shape::new(1, c, 1, 1);
    tape.accumulate(grads, s.gamma, Tensor4::from_vec(cs, dgamma).expect("gamma grad"));
    tape.accumulate(grads, s.beta, Tensor4::from_vec(cs, dbeta).expect("beta grad"));
}

pub(crate) fn linear_backward<T: Real>(
    tape: &Tape<T>,
    x: Var,
    w: Var,
    b: Var,
    g: &Tensor4<T>,
    grads: &mut [Option<Tensor4<T>>],
) {
    let xs = tape.shape(x);
    let ws = tape.shape(w);
    let (n, fan_in, out) = (xs.n, xs.item(), ws.n);
    let gd = g.data();
    if tape.requires_grad(x) {
        let mut dx = vec![T::zero(); xs.numel()];
        T::gemm(n, out, fan_in, T::one(), gd, false, tape.value(w).data(), false, T::zero(), &mut dx);
        tape.accumulate(grads, x, Tensor4::from_vec(xs, dx).expect("linear dx"));
    }
    if tape.requires_grad(w) {
        let mut dw = vec![T::zero(); ws.numel()];
        T::gemm(out, n, fan_in, T::one(), gd, true, tape.value(x).data(), false, T::zero(), &mut dw);
        tape.accumulate(grads, w, Tensor4::from_vec(ws, dw).expect("linear dw"));
    }
    if tape.requires_grad(b) {
        let mut db = vec![T::zero(); out];
        for row in gd.chunks(out) {
            for (a, &v) in db.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
        tape.accumulate(grads, b, Tensor4::from_vec(Shape::new(1, out, 1, 1), db).expect("linear db"));
    }
}
