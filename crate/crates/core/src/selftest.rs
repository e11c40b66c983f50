//! Verification suites shared by the `selftest` and `gradcheck` commands and
//! the test harnesses.
//!
//! Each suite draws its random cases from a seed and reports the worst
//! violation it saw, so a failing line can be reproduced from its output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tape;
use crate::backbone::{self, BackboneConfig};
use crate::datagen::sample_seed;
use crate::error::Result;
use crate::loss::{self, LossBreakdown, LossConfig, MaskSet, StageSpec};
use crate::oracle::{self, FdConfig};
use crate::resample::{self, UpsampleMethod};
use crate::tensor::{Shape, Tensor4};

/// Relative tolerance of the kernel/oracle comparison.
pub const EQUIVALENCE_TOL: f64 = 1e-9;
/// Relative tolerance of tape gradients against finite differences.
pub const GRADIENT_TOL: f64 = 1e-4;
/// Denominator floor of [`oracle::rel_err`] in gradient comparisons; keeps
/// entries that are zero up to finite-difference noise from dominating.
pub const GRADIENT_FLOOR: f64 = 1e-3;
/// Denominator floor of loss-value comparisons.
pub const VALUE_FLOOR: f64 = 1e-6;

/// Outcome of one suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    /// Worst observed violation in the suite's own unit.
    pub worst: f64,
    pub passed: bool,
    pub detail: String,
}

impl SuiteReport {
    fn new(name: &'static str, cases: usize, worst: f64, tol: f64, detail: String) -> Self {
        SuiteReport {
            name,
            cases,
            worst,
            passed: worst <= tol,
            detail,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SelftestOptions {
    pub seed: u64,
    /// Negative control: flip the sign of the diversity term in the kernel
    /// breakdowns while the checks expect `mc = dis − λ·div`.
    pub corrupt_lambda_sign: bool,
}

/// A random loss instance: logits, taps, labels, stage specs and masks.
#[derive(Clone, Debug)]
pub struct LossCase {
    pub logits: Tensor4<f64>,
    pub f_h: Tensor4<f64>,
    pub f_l: Tensor4<f64>,
    pub labels: Vec<usize>,
    pub spec_h: StageSpec,
    pub spec_l: StageSpec,
    pub cfg: LossConfig,
    pub masks_h: MaskSet,
    pub masks_l: MaskSet,
}

impl LossCase {
    pub fn input(&self, which: Input) -> &Tensor4<f64> {
        match which {
            Input::Logits => &self.logits,
            Input::High => &self.f_h,
            Input::Mid => &self.f_l,
        }
    }

    pub fn input_mut(&mut self, which: Input) -> &mut Tensor4<f64> {
        match which {
            Input::Logits => &mut self.logits,
            Input::High => &mut self.f_h,
            Input::Mid => &mut self.f_l,
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "S={} ξ_h={} repeat={} F_h={} F_l={} {} μ={:.3} λ={:.3}",
            self.spec_h.num_classes(),
            self.spec_h.channels_per_class(),
            self.spec_l.channels_per_class() / self.spec_h.channels_per_class(),
            self.f_h.shape(),
            self.f_l.shape(),
            self.cfg.upsample,
            self.cfg.mu,
            self.cfg.lambda
        )
    }
}

fn normal_tensor<R: Rng>(shape: Shape, std: f64, rng: &mut R) -> Tensor4<f64> {
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor4::from_vec(shape, (0..shape.numel()).map(|_| d.sample(rng)).collect()).expect("shape")
}

/// Draws a case with S ∈ {2,3,5}, ξ_h ∈ {1,2,3}, repeat ∈ {1,2} and tap
/// sizes between 2×2 and 6×6 (the middle tap never smaller than the high).
pub fn random_case<R: Rng>(rng: &mut R) -> LossCase {
    let s = [2, 3, 5][rng.gen_range(0..3)];
    let xi = rng.gen_range(1..=3);
    let repeat = rng.gen_range(1..=2);
    let n = rng.gen_range(1..=3);
    let (hh, hw) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
    let (lh, lw) = (rng.gen_range(hh..=6), rng.gen_range(hw..=6));
    let spec_h = StageSpec::new(s, xi).expect("positive");
    let spec_l = StageSpec::new(s, xi * repeat).expect("positive");
    let cfg = LossConfig {
        mu: rng.gen_range(0.1..3.0),
        lambda: rng.gen_range(0.0..20.0),
        upsample: UpsampleMethod::ALL[rng.gen_range(0..3)],
        ..LossConfig::default()
    };
    LossCase {
        logits: normal_tensor(Shape::new(n, s, 1, 1), 2.0, rng),
        f_h: normal_tensor(Shape::new(n, s * xi, hh, hw), 1.5, rng),
        f_l: normal_tensor(Shape::new(n, s * xi * repeat, lh, lw), 1.5, rng),
        labels: (0..n).map(|_| rng.gen_range(0..s)).collect(),
        masks_h: MaskSet::sample(spec_h, rng),
        masks_l: MaskSet::sample(spec_l, rng),
        spec_h,
        spec_l,
        cfg,
    }
}

/// Which inputs of a [`LossCase`] are tape parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Input {
    Logits,
    High,
    Mid,
}

/// Kernel loss of a case; returns the breakdown and the gradient of the
/// total with respect to `wrt`.
pub fn kernel_loss(case: &LossCase, cfg: &LossConfig, wrt: Option<Input>) -> Result<(LossBreakdown, Option<Tensor4<f64>>)> {
    let mut tape = Tape::<f64>::new();
    let leaf = |tape: &mut Tape<f64>, t: &Tensor4<f64>, which: Input| tape.leaf(t.clone(), wrt == Some(which));
    let logits = leaf(&mut tape, &case.logits, Input::Logits)?;
    let f_h = leaf(&mut tape, &case.f_h, Input::High)?;
    let f_l = leaf(&mut tape, &case.f_l, Input::Mid)?;
    let out = loss::total_loss_with_masks(
        &mut tape,
        logits,
        f_h,
        f_l,
        &case.labels,
        case.spec_h,
        case.spec_l,
        cfg,
        &case.masks_h,
        &case.masks_l,
    )?;
    let grad = match wrt {
        None => None,
        Some(which) => {
            let var = match which {
                Input::Logits => logits,
                Input::High => f_h,
                Input::Mid => f_l,
            };
            let mut g = tape.backward(out.total)?;
            Some(g.take(var).unwrap_or_else(|| Tensor4::zeros(tape.shape(var))))
        }
    };
    Ok((out.breakdown, grad))
}

pub fn oracle_loss(case: &LossCase) -> LossBreakdown {
    oracle::reference_losses(
        &case.logits,
        &case.f_h,
        &case.f_l,
        &case.labels,
        case.spec_h,
        case.spec_l,
        &case.cfg,
        &case.masks_h,
        &case.masks_l,
    )
}

/// Kernel breakdown, rebuilt with `mc = dis + λ·div` under the negative
/// control.
fn kernel_breakdown(case: &LossCase, opts: &SelftestOptions) -> Result<LossBreakdown> {
    let (mut b, _) = kernel_loss(case, &case.cfg, None)?;
    if opts.corrupt_lambda_sign && !case.cfg.is_baseline() {
        let l = case.cfg.lambda;
        b.mc_high = b.dis_high + l * b.div_high;
        b.mc_mid = b.dis_mid + l * b.div_mid;
        b.tdsa = b.mc_high + b.mc_mid;
        b.total = b.ce + case.cfg.mu * b.tdsa;
    }
    Ok(b)
}

fn worst_component(a: &LossBreakdown, b: &LossBreakdown) -> f64 {
    a.components()
        .iter()
        .zip(b.components())
        .map(|(&x, y)| oracle::rel_err(x, y, VALUE_FLOOR))
        .fold(0.0, f64::max)
}

/// Kernel versus oracle on every loss component over `cases` random cases.
/// Every tenth case uses `μ = 0`.
pub fn oracle_equivalence(opts: &SelftestOptions, cases: usize) -> Result<SuiteReport> {
    let mut worst = 0.0;
    let mut detail = String::from("all components agree");
    for i in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(opts.seed, 100, i as u64));
        let mut case = random_case(&mut rng);
        if i % 10 == 9 {
            case.cfg.mu = 0.0;
        }
        let kernel = kernel_breakdown(&case, opts)?;
        let err = worst_component(&kernel, &oracle_loss(&case));
        if err > worst {
            worst = err;
            detail = format!("worst case #{i} (seed {}): {}", opts.seed, case.describe());
        }
    }
    Ok(SuiteReport::new("oracle-equivalence", cases, worst, EQUIVALENCE_TOL, detail))
}

/// Breakdown identities on random cases.
pub fn identities(opts: &SelftestOptions, cases: usize) -> Result<SuiteReport> {
    let mut worst: f64 = 0.0;
    let mut detail = String::from("mc = dis − λ·div, tdsa = mc_high + mc_mid, total = ce + μ·tdsa");
    for i in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(opts.seed, 101, i as u64));
        let case = random_case(&mut rng);
        let b = kernel_breakdown(&case, opts)?;
        let r = b.identity_residual(case.cfg.mu, case.cfg.lambda);
        if r > worst {
            worst = r;
            detail = format!("residual {r:.3e} at case #{i} (seed {}): {}", opts.seed, case.describe());
        }
    }
    Ok(SuiteReport::new("identities", cases, worst, 1e-9, detail))
}

/// Tape gradients of the total loss against central differences of the
/// kernel and, independently, of the oracle.
pub fn loss_gradcheck(opts: &SelftestOptions, cases: usize) -> Result<SuiteReport> {
    let fd = FdConfig::default();
    let mut worst: f64 = 0.0;
    let mut detail = String::from("logits, F_h and F_l gradients agree");
    for i in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(opts.seed, 102, i as u64));
        let case = random_case(&mut rng);
        let cfg = case.cfg;
        for which in [Input::Logits, Input::High, Input::Mid] {
            let (_, grad) = kernel_loss(&case, &cfg, Some(which))?;
            let grad = grad.expect("gradient requested");
            let x = case.input(which).clone();
            let mut probe = case.clone();
            let via_kernel = oracle::fd_gradient(
                |t| {
                    *probe.input_mut(which) = t.clone();
                    Ok(kernel_loss(&probe, &cfg, None)?.0.total)
                },
                &x,
                fd,
            )?;
            let mut probe = case.clone();
            let via_oracle = oracle::fd_gradient(
                |t| {
                    *probe.input_mut(which) = t.clone();
                    Ok(oracle_loss(&probe).total)
                },
                &x,
                fd,
            )?;
            let err = oracle::max_rel_err(&grad, &via_kernel, GRADIENT_FLOOR)
                .max(oracle::max_rel_err(&grad, &via_oracle, GRADIENT_FLOOR));
            if err > worst {
                worst = err;
                detail = format!("{which:?} gradient, case #{i} (seed {}): {}", opts.seed, case.describe());
            }
        }
    }
    Ok(SuiteReport::new("gradcheck", cases, worst, GRADIENT_TOL, detail))
}

/// A configuration small enough for coordinate-wise finite differences of
/// every parameter.
pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        input_h: 8,
        input_w: 8,
        in_channels: 3,
        widths: vec![3, 3, 3],
        num_classes: 2,
        xi_high: 2,
        xi_mult: 2,
        ratio: 2,
        tap_norm: true,
    }
}

/// Gradient of the full training objective with respect to every
/// trainable backbone parameter, in double precision on a two-sample batch.
pub fn backbone_gradcheck(seed: u64, cfg: &BackboneConfig, loss_cfg: &LossConfig) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, 103, 0));
    let params = backbone::init_params(cfg, &mut rng)?.cast::<f64>();
    let x = normal_tensor(cfg.input_shape(2), 1.0, &mut rng);
    let labels: Vec<usize> = (0..2).map(|i| i % cfg.num_classes).collect();
    let (spec_h, spec_l) = (cfg.spec_high(), cfg.spec_mid());
    let masks_h = MaskSet::sample(spec_h, &mut rng);
    let masks_l = MaskSet::sample(spec_l, &mut rng);
    let objective = |p: &backbone::ModelParams<f64>, want_grads: bool| -> Result<(f64, Vec<Option<Tensor4<f64>>>)> {
        let mut pass = backbone::forward(&x, p, cfg, true)?;
        let out = loss::total_loss_with_masks(
            &mut pass.tape,
            pass.logits,
            pass.f_h,
            pass.f_l,
            &labels,
            spec_h,
            spec_l,
            loss_cfg,
            &masks_h,
            &masks_l,
        )?;
        let value = out.breakdown.total;
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let mut g = pass.tape.backward(out.total)?;
        let grads = pass.param_vars.iter().map(|v| v.and_then(|v| g.take(v))).collect();
        Ok((value, grads))
    };
    let (_, grads) = objective(&params, true)?;
    let mut worst: f64 = 0.0;
    let mut detail = String::from("all trainable parameters agree");
    let mut checked = 0;
    for (i, entry) in params.entries.iter().enumerate() {
        if !entry.kind.trainable() {
            continue;
        }
        let tape_grad = grads[i].clone().unwrap_or_else(|| Tensor4::zeros(entry.value.shape()));
        let mut probe = params.clone();
        let fd = oracle::fd_gradient(
            |t| {
                probe.entries[i].value = t.clone();
                Ok(objective(&probe, false)?.0)
            },
            &entry.value,
            FdConfig::default(),
        )?;
        checked += entry.value.len();
        let err = oracle::max_rel_err(&tape_grad, &fd, GRADIENT_FLOOR);
        if err > worst {
            worst = err;
            detail = format!("worst parameter {} (seed {seed})", entry.name);
        }
    }
    Ok(SuiteReport::new("backbone-gradcheck", checked, worst, GRADIENT_TOL, detail))
}

/// Masks zero exactly `⌊ξ/2⌋` channels per group for ξ = 1..8.
pub fn mask_counts(opts: &SelftestOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(opts.seed, 104, 0));
    let mut bad = 0usize;
    let mut cases = 0;
    let mut detail = String::from("⌊ξ/2⌋ zeros per group for ξ = 1..8");
    for xi in 1..=8 {
        for s in [1, 2, 5] {
            let spec = StageSpec::new(s, xi).expect("positive");
            for _ in 0..10 {
                let m = MaskSet::sample(spec, &mut rng);
                cases += 1;
                for g in m.masks() {
                    let zeros = g.iter().filter(|&&b| b == 0).count();
                    if zeros != xi / 2 || g.len() != xi {
                        bad += 1;
                        detail = format!("ξ={xi}: {zeros} zeros (seed {})", opts.seed);
                    }
                }
            }
        }
    }
    SuiteReport::new("masks", cases, bad as f64, 0.0, detail)
}

/// `1 ≤ h ≤ min(ξ, H·W)` on random maps and `h = 1` on identical channels.
pub fn diversity_bounds(opts: &SelftestOptions, cases: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(opts.seed, 105, 0));
    let mut worst: f64 = 0.0;
    let mut detail = String::from("1 ≤ h ≤ min(ξ, HW); identical channels give 1");
    for i in 0..cases {
        let xi = rng.gen_range(1..=6);
        let (h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let spec = StageSpec::new(1, xi).expect("positive");
        let mut f = normal_tensor(Shape::new(1, xi, h, w), 3.0, &mut rng);
        if i % 2 == 1 {
            let first = f.plane(0, 0).to_vec();
            f = Tensor4::from_fn(f.shape(), |_, _, y, x| first[y * w + x]);
        }
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(f)?;
        let d = loss::diversity_loss(&mut tape, v, spec)?;
        let hv = tape.value(d).item();
        let upper = xi.min(h * w) as f64;
        let viol = if i % 2 == 1 {
            (hv - 1.0).abs()
        } else {
            (1.0 - hv).max(hv - upper).max(0.0)
        };
        if viol > worst {
            worst = viol;
            detail = format!("h = {hv} for ξ={xi} {h}×{w} (case #{i}, seed {})", opts.seed);
        }
    }
    Ok(SuiteReport::new("diversity-bounds", cases, worst, 1e-12, detail))
}

/// Spatial softmax sums to one and ignores per-channel constant shifts.
pub fn softmax(opts: &SelftestOptions, cases: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(opts.seed, 106, 0));
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let shape = Shape::new(rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=6));
        let x = normal_tensor(shape, 5.0, &mut rng);
        let shift: f64 = rng.gen_range(-50.0..50.0);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(x.clone())?;
        let b = tape.constant(x.map(|v| v + shift))?;
        let pa = tape.spatial_softmax(a)?;
        let pb = tape.spatial_softmax(b)?;
        let (pa, pb) = (tape.value(pa), tape.value(pb));
        for n in 0..shape.n {
            for c in 0..shape.c {
                let s: f64 = pa.plane(n, c).iter().sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst = worst.max(pa.max_abs_diff(pb));
    }
    Ok(SuiteReport::new(
        "softmax",
        cases,
        worst,
        1e-12,
        format!("normalization and shift invariance (seed {})", opts.seed),
    ))
}

/// Gate lies strictly inside (0, 1) and `F_h = 0` halves `F_l`.
pub fn gate(opts: &SelftestOptions, cases: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(opts.seed, 107, 0));
    let mut worst: f64 = 0.0;
    for i in 0..cases {
        let mut case = random_case(&mut rng);
        let repeat = case.spec_l.channels_per_class() / case.spec_h.channels_per_class();
        let zero_high = i % 2 == 1;
        if zero_high {
            case.f_h = Tensor4::zeros(case.f_h.shape());
        }
        let ones = Tensor4::full(case.f_l.shape(), 1.0);
        let mut tape = Tape::<f64>::new();
        let fl = tape.constant(if zero_high { case.f_l.clone() } else { ones })?;
        let fh = tape.constant(case.f_h.clone())?;
        let g = loss::tdsa_attention(&mut tape, fl, fh, repeat, case.cfg.upsample, false)?;
        let g = tape.value(g);
        if zero_high {
            worst = worst.max(g.max_abs_diff(&case.f_l.map(|v| 0.5 * v)));
        } else {
            for &v in g.data() {
                if !(v > 0.0 && v < 1.0) {
                    worst = worst.max(1.0);
                }
            }
        }
    }
    Ok(SuiteReport::new(
        "attention-gate",
        cases,
        worst,
        1e-15,
        format!("gate in (0,1); F_h = 0 gives 0.5·F_l (seed {})", opts.seed),
    ))
}

/// Separable kernels against the per-pixel oracle, plus exactness on
/// constant inputs.
pub fn resample_suite(opts: &SelftestOptions, cases: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(opts.seed, 108, 0));
    let mut worst: f64 = 0.0;
    let mut detail = String::from("kernel = per-pixel oracle; constants preserved");
    for i in 0..cases {
        let method = UpsampleMethod::ALL[i % 3];
        let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let (oh, ow) = (rng.gen_range(h..=14), rng.gen_range(w..=14));
        let x = normal_tensor(Shape::new(1, 2, h, w), 1.0, &mut rng);
        let a = resample::upsample(&x, method, oh, ow)?;
        let b = oracle::reference_upsample(&x, method, oh, ow);
        let c = resample::upsample(&Tensor4::full(x.shape(), 0.75), method, oh, ow)?;
        let err = a.max_abs_diff(&b).max(c.data().iter().map(|v: &f64| (v - 0.75).abs()).fold(0.0, f64::max));
        if err > worst {
            worst = err;
            detail = format!("{method} {h}×{w} → {oh}×{ow} (case #{i}, seed {})", opts.seed);
        }
    }
    Ok(SuiteReport::new("resample", cases, worst, 1e-12, detail))
}

/// Every suite of the `selftest` command.
pub fn run_all(opts: &SelftestOptions) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        mask_counts(opts),
        diversity_bounds(opts, 200)?,
        softmax(opts, 100)?,
        gate(opts, 40)?,
        identities(opts, 50)?,
        resample_suite(opts, 60)?,
        oracle_equivalence(opts, 50)?,
        loss_gradcheck(opts, 6)?,
    ])
}

/// Fixed-width pass/fail table.
pub fn render_table(reports: &[SuiteReport]) -> String {
    let mut out = format!("{:<20} {:>6} {:>11}  {:<4}  {}\n", "suite", "cases", "worst", "ok", "detail");
    for r in reports {
        out.push_str(&format!(
            "{:<20} {:>6} {:>11.3e}  {:<4}  {}\n",
            r.name,
            r.cases,
            r.worst,
            if r.passed { "PASS" } else { "FAIL" },
            r.detail
        ));
    }
    out
}
