//! Mutual-channel and top-down spatial attention losses.
//!
//! Feature maps are split into `S` contiguous groups of `ξ` channels, one
//! group per class. Two components act on each stage:
//!
//! * discriminality: mask-gated channel max per group, spatially averaged,
//!   then softmax cross entropy over the `S` group scores;
//! * diversity: spatial softmax per channel, channel max per group, summed
//!   over positions; averaged over groups and batch.
//!
//! The mutual-channel loss of a stage is `dis − λ·div`. The two-stage loss
//! gates middle-level features with the sigmoid of upsampled, channel-repeated
//! high-level features and adds the mutual-channel losses of both stages.
//! All batch reductions are means.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::resample::UpsampleMethod;
use crate::tensor::Real;

/// Channel grouping of one feature stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageSpec {
    num_classes: usize,
    channels_per_class: usize,
}

impl StageSpec {
    pub fn new(num_classes: usize, channels_per_class: usize) -> Result<Self> {
        if num_classes == 0 || channels_per_class == 0 {
            return Err(Error::contract(
                "StageSpec::new",
                format!("need S ≥ 1 and ξ ≥ 1, got S={num_classes} ξ={channels_per_class}"),
            ));
        }
        Ok(StageSpec {
            num_classes,
            channels_per_class,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels_per_class(&self) -> usize {
        self.channels_per_class
    }

    pub fn total_channels(&self) -> usize {
        self.num_classes * self.channels_per_class
    }

    /// Channel range owned by class `i`.
    pub fn group(&self, i: usize) -> std::ops::Range<usize> {
        i * self.channels_per_class..(i + 1) * self.channels_per_class
    }

    fn check_channels(&self, op: &'static str, channels: usize) -> Result<()> {
        if channels != self.total_channels() {
            return Err(Error::dim(
                op,
                format!(
                    "{channels} channels, expected S·ξ = {}·{} = {}",
                    self.num_classes,
                    self.channels_per_class,
                    self.total_channels()
                ),
            ));
        }
        Ok(())
    }
}

/// One 0-1 channel mask per class group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    channels_per_class: usize,
    masks: Vec<Vec<u8>>,
}

impl MaskSet {
    pub fn all_ones(spec: StageSpec) -> Self {
        MaskSet {
            channels_per_class: spec.channels_per_class,
            masks: vec![vec![1; spec.channels_per_class]; spec.num_classes],
        }
    }

    /// Zeroes `⌊ξ/2⌋` uniformly chosen positions in every group.
    pub fn sample<R: Rng + ?Sized>(spec: StageSpec, rng: &mut R) -> Self {
        let xi = spec.channels_per_class;
        let masks = (0..spec.num_classes)
            .map(|_| {
                let mut m = vec![1u8; xi];
                for i in index::sample(rng, xi, xi / 2) {
                    m[i] = 0;
                }
                m
            })
            .collect();
        MaskSet {
            channels_per_class: xi,
            masks,
        }
    }

    pub fn from_masks(spec: StageSpec, masks: Vec<Vec<u8>>) -> Result<Self> {
        if masks.len() != spec.num_classes
            || masks
                .iter()
                .any(|m| m.len() != spec.channels_per_class || m.iter().any(|&b| b > 1))
        {
            return Err(Error::contract("MaskSet::from_masks", "masks must be S vectors of ξ zeros/ones"));
        }
        Ok(MaskSet {
            channels_per_class: spec.channels_per_class,
            masks,
        })
    }

    pub fn masks(&self) -> &[Vec<u8>] {
        &self.masks
    }

    pub fn channels_per_class(&self) -> usize {
        self.channels_per_class
    }

    /// Flattened per-channel multipliers, length `S·ξ`.
    pub fn channel_scale<T: Real>(&self) -> Vec<T> {
        self.masks
            .iter()
            .flatten()
            .map(|&b| if b == 1 { T::one() } else { T::zero() })
            .collect()
    }

    fn check(&self, spec: StageSpec) -> Result<()> {
        if self.masks.len() != spec.num_classes || self.channels_per_class != spec.channels_per_class {
            return Err(Error::contract(
                "discriminality_loss",
                format!(
                    "mask set for {}×{} does not match stage {}×{}",
                    self.masks.len(),
                    self.channels_per_class,
                    spec.num_classes,
                    spec.channels_per_class
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Fresh random masks every step.
    #[default]
    TrainRandom,
    /// No channel dropping; used for evaluation and reporting.
    AllOnes,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mu: f64,
    pub lambda: f64,
    pub upsample: UpsampleMethod,
    pub detach_attention: bool,
    pub mask_mode: MaskMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mu: 1.5,
            lambda: 10.0,
            upsample: UpsampleMethod::Bilinear,
            detach_attention: false,
            mask_mode: MaskMode::TrainRandom,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) || !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "mu and lambda must be finite and non-negative (mu={}, lambda={})",
                self.mu, self.lambda
            )));
        }
        Ok(())
    }

    /// Cross-entropy-only baseline.
    pub fn is_baseline(&self) -> bool {
        self.mu == 0.0
    }

    pub fn sample_masks<R: Rng + ?Sized>(&self, spec: StageSpec, rng: &mut R) -> MaskSet {
        match self.mask_mode {
            MaskMode::TrainRandom => MaskSet::sample(spec, rng),
            MaskMode::AllOnes => MaskSet::all_ones(spec),
        }
    }
}

/// Scalar value of every loss component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub dis_high: f64,
    pub div_high: f64,
    pub mc_high: f64,
    pub dis_mid: f64,
    pub div_mid: f64,
    pub mc_mid: f64,
    pub tdsa: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,ce,dis_high,div_high,mc_high,dis_mid,div_mid,mc_mid,tdsa,total";

    pub fn components(&self) -> [f64; 9] {
        [
            self.ce,
            self.dis_high,
            self.div_high,
            self.mc_high,
            self.dis_mid,
            self.div_mid,
            self.mc_mid,
            self.tdsa,
            self.total,
        ]
    }

    pub fn csv_row(&self, step: usize) -> String {
        let mut row = step.to_string();
        for v in self.components() {
            row.push(',');
            row.push_str(&v.to_string());
        }
        row
    }

    /// Largest violation of `mc = dis − λ·div`, `tdsa = mc_high + mc_mid`
    /// and `total = ce + μ·tdsa`.
    pub fn identity_residual(&self, mu: f64, lambda: f64) -> f64 {
        [
            self.mc_high - (self.dis_high - lambda * self.div_high),
            self.mc_mid - (self.dis_mid - lambda * self.div_mid),
            self.tdsa - (self.mc_high + self.mc_mid),
            self.total - (self.ce + mu * self.tdsa),
        ]
        .iter()
        .fold(0.0f64, |m, r| m.max(r.abs()))
    }

    /// Componentwise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let k = items.len() as f64;
        let mut acc = [0.0; 9];
        for b in items {
            for (a, v) in acc.iter_mut().zip(b.components()) {
                *a += v;
            }
        }
        let [ce, dis_high, div_high, mc_high, dis_mid, div_mid, mc_mid, tdsa, total] = acc.map(|v| v / k);
        LossBreakdown {
            ce,
            dis_high,
            div_high,
            mc_high,
            dis_mid,
            div_mid,
            mc_mid,
            tdsa,
            total,
        }
    }
}

/// Positionwise maximum over the channels of one class group.
pub fn ccmp<T: Real>(tape: &mut Tape<T>, group: Var, channels_per_class: usize) -> Result<Var> {
    let c = tape.shape(group).c;
    if c != channels_per_class {
        return Err(Error::dim(
            "ccmp",
            format!("group has {c} channels, expected {channels_per_class}"),
        ));
    }
    tape.group_max(group, channels_per_class)
}

/// Per-class pooled responses `g(F^i)` as an n×S×1×1 tensor.
pub fn class_scores<T: Real>(tape: &mut Tape<T>, f: Var, spec: StageSpec, masks: &MaskSet) -> Result<Var> {
    spec.check_channels("discriminality_loss", tape.shape(f).c)?;
    masks.check(spec)?;
    let gated = tape.channel_scale(f, &masks.channel_scale::<T>())?;
    let pooled = tape.group_max(gated, spec.channels_per_class)?;
    tape.gap(pooled)
}

/// Batch-mean cross entropy of the softmax over group scores.
pub fn discriminality_loss<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    labels: &[usize],
    spec: StageSpec,
    masks: &MaskSet,
) -> Result<Var> {
    let scores = class_scores(tape, f, spec, masks)?;
    tape.cross_entropy(scores, labels)
}

/// Mean over groups and batch of `Σ_positions max_channels softmax(F^i)`.
pub fn diversity_loss<T: Real>(tape: &mut Tape<T>, f: Var, spec: StageSpec) -> Result<Var> {
    spec.check_channels("diversity_loss", tape.shape(f).c)?;
    let p = tape.spatial_softmax(f)?;
    let m = tape.group_max(p, spec.channels_per_class)?;
    let h = tape.spatial_sum(m)?;
    tape.mean(h)
}

/// Tape handles of one stage's mutual-channel loss.
#[derive(Clone, Copy, Debug)]
pub struct McTerms {
    pub dis: Var,
    pub div: Var,
    pub mc: Var,
}

pub fn mc_loss<T: Real>(
    tape: &mut Tape<T>,
    f: Var,
    labels: &[usize],
    spec: StageSpec,
    lambda: f64,
    masks: &MaskSet,
) -> Result<McTerms> {
    let dis = discriminality_loss(tape, f, labels, spec, masks)?;
    let div = diversity_loss(tape, f, spec)?;
    let weighted = tape.scale(div, T::from_f(-lambda))?;
    let mc = tape.add(dis, weighted)?;
    Ok(McTerms { dis, div, mc })
}

/// Gates `f_l` with `sigmoid(repeat(upsample(f_h)))`.
pub fn tdsa_attention<T: Real>(
    tape: &mut Tape<T>,
    f_l: Var,
    f_h: Var,
    repeat: usize,
    method: UpsampleMethod,
    detach: bool,
) -> Result<Var> {
    let (sl, sh) = (tape.shape(f_l), tape.shape(f_h));
    if repeat == 0 || sh.c * repeat != sl.c || sh.n != sl.n {
        return Err(Error::dim(
            "tdsa_attention",
            format!("high {sh} × repeat {repeat} does not cover middle {sl}"),
        ));
    }
    let source = if detach { tape.detach(f_h)? } else { f_h };
    let up = tape.upsample(source, method, sl.h, sl.w)?;
    let rep = tape.channel_repeat(up, repeat)?;
    let gate = tape.sigmoid(rep)?;
    tape.mul(f_l, gate)
}

/// Tape handles of the two-stage loss.
#[derive(Clone, Copy, Debug)]
pub struct TdsaTerms {
    pub high: McTerms,
    pub mid: McTerms,
    pub gated: Var,
    pub tdsa: Var,
}

/// Channel repeat factor between the two stages.
pub fn repeat_factor(spec_h: StageSpec, spec_l: StageSpec) -> Result<usize> {
    if spec_h.num_classes != spec_l.num_classes {
        return Err(Error::contract(
            "tdsa_loss",
            format!("class counts differ: {} vs {}", spec_h.num_classes, spec_l.num_classes),
        ));
    }
    if !spec_l.channels_per_class.is_multiple_of(spec_h.channels_per_class) {
        return Err(Error::contract(
            "tdsa_loss",
            format!(
                "middle ξ {} is not a multiple of high ξ {}",
                spec_l.channels_per_class, spec_h.channels_per_class
            ),
        ));
    }
    Ok(spec_l.channels_per_class / spec_h.channels_per_class)
}

#[allow(clippy::too_many_arguments)]
pub fn tdsa_loss_with_masks<T: Real>(
    tape: &mut Tape<T>,
    f_h: Var,
    f_l: Var,
    labels: &[usize],
    spec_h: StageSpec,
    spec_l: StageSpec,
    cfg: &LossConfig,
    masks_h: &MaskSet,
    masks_l: &MaskSet,
) -> Result<TdsaTerms> {
    let repeat = repeat_factor(spec_h, spec_l)?;
    let gated = tdsa_attention(tape, f_l, f_h, repeat, cfg.upsample, cfg.detach_attention)?;
    let high = mc_loss(tape, f_h, labels, spec_h, cfg.lambda, masks_h)?;
    let mid = mc_loss(tape, gated, labels, spec_l, cfg.lambda, masks_l)?;
    let tdsa = tape.add(high.mc, mid.mc)?;
    Ok(TdsaTerms { high, mid, gated, tdsa })
}

/// Samples one mask set per stage according to `cfg.mask_mode`, then
/// evaluates the two-stage loss.
#[allow(clippy::too_many_arguments)]
pub fn tdsa_loss<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    f_h: Var,
    f_l: Var,
    labels: &[usize],
    spec_h: StageSpec,
    spec_l: StageSpec,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<TdsaTerms> {
    let masks_h = cfg.sample_masks(spec_h, rng);
    let masks_l = cfg.sample_masks(spec_l, rng);
    tdsa_loss_with_masks(tape, f_h, f_l, labels, spec_h, spec_l, cfg, &masks_h, &masks_l)
}

/// Handles and values of the full objective.
#[derive(Clone, Copy, Debug)]
pub struct TotalLoss {
    pub total: Var,
    pub ce: Var,
    /// Absent in the cross-entropy baseline (`μ = 0`).
    pub tdsa: Option<TdsaTerms>,
    pub breakdown: LossBreakdown,
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss_with_masks<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    f_h: Var,
    f_l: Var,
    labels: &[usize],
    spec_h: StageSpec,
    spec_l: StageSpec,
    cfg: &LossConfig,
    masks_h: &MaskSet,
    masks_l: &MaskSet,
) -> Result<TotalLoss> {
    cfg.validate()?;
    let ls = tape.shape(logits);
    if ls.item() != spec_h.num_classes {
        return Err(Error::dim(
            "total_loss",
            format!("logits {ls} do not hold {} classes", spec_h.num_classes),
        ));
    }
    let ce = tape.cross_entropy(logits, labels)?;
    if cfg.is_baseline() {
        let breakdown = LossBreakdown {
            ce: tape.value(ce).item().to_f(),
            total: tape.value(ce).item().to_f(),
            ..LossBreakdown::default()
        };
        return Ok(TotalLoss {
            total: ce,
            ce,
            tdsa: None,
            breakdown,
        });
    }
    let terms = tdsa_loss_with_masks(tape, f_h, f_l, labels, spec_h, spec_l, cfg, masks_h, masks_l)?;
    let weighted = tape.scale(terms.tdsa, T::from_f(cfg.mu))?;
    let total = tape.add(ce, weighted)?;
    let v = |tape: &Tape<T>, x: Var| tape.value(x).item().to_f();
    let breakdown = LossBreakdown {
        ce: v(tape, ce),
        dis_high: v(tape, terms.high.dis),
        div_high: v(tape, terms.high.div),
        mc_high: v(tape, terms.high.mc),
        dis_mid: v(tape, terms.mid.dis),
        div_mid: v(tape, terms.mid.div),
        mc_mid: v(tape, terms.mid.mc),
        tdsa: v(tape, terms.tdsa),
        total: v(tape, total),
    };
    Ok(TotalLoss {
        total,
        ce,
        tdsa: Some(terms),
        breakdown,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    logits: Var,
    f_h: Var,
    f_l: Var,
    labels: &[usize],
    spec_h: StageSpec,
    spec_l: StageSpec,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<TotalLoss> {
    let masks_h = cfg.sample_masks(spec_h, rng);
    let masks_l = cfg.sample_masks(spec_l, rng);
    total_loss_with_masks(tape, logits, f_h, f_l, labels, spec_h, spec_l, cfg, &masks_h, &masks_l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tensor(shape: Shape, v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn stage_spec_groups_are_contiguous() {
        let s = StageSpec::new(3, 2).unwrap();
        assert_eq!(s.total_channels(), 6);
        assert_eq!(s.group(1), 2..4);
        assert!(StageSpec::new(0, 3).is_err());
        assert!(StageSpec::new(2, 0).is_err());
    }

    #[test]
    fn masks_have_floor_half_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for xi in 1..=8 {
            let spec = StageSpec::new(5, xi).unwrap();
            for _ in 0..20 {
                let m = MaskSet::sample(spec, &mut rng);
                for v in m.masks() {
                    assert_eq!(v.iter().filter(|&&b| b == 0).count(), xi / 2);
                }
            }
        }
        let one = MaskSet::sample(StageSpec::new(2, 1).unwrap(), &mut rng);
        assert_eq!(one, MaskSet::all_ones(StageSpec::new(2, 1).unwrap()));
    }

    #[test]
    fn mask_sampling_is_seeded() {
        let spec = StageSpec::new(4, 5).unwrap();
        let a = MaskSet::sample(spec, &mut ChaCha8Rng::seed_from_u64(9));
        let b = MaskSet::sample(spec, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn mask_positions_are_uniform() {
        let spec = StageSpec::new(1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let trials = 10_000;
        let mut zeros = [0usize; 2];
        for _ in 0..trials {
            let m = MaskSet::sample(spec, &mut rng);
            for (z, &b) in zeros.iter_mut().zip(&m.masks()[0]) {
                *z += usize::from(b == 0);
            }
        }
        for z in zeros {
            let f = z as f64 / trials as f64;
            assert!((f - 0.5).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn ccmp_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(tensor(Shape::new(1, 2, 1, 2), &[1.0, 2.0, 3.0, 0.0])).unwrap();
        let m = ccmp(&mut tape, g, 2).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 2.0]);
        let single = tape.narrow_channels(g, 0, 1).unwrap();
        let id = ccmp(&mut tape, single, 1).unwrap();
        assert_eq!(tape.value(id).data(), &[1.0, 2.0]);
        assert!(matches!(ccmp(&mut tape, g, 3), Err(Error::Dimension { .. })));
    }

    #[test]
    fn discriminality_equal_scores_is_ln2() {
        let spec = StageSpec::new(2, 2).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(Tensor4::full(Shape::new(3, 4, 2, 2), 0.7)).unwrap();
        let l = discriminality_loss(&mut tape, f, &[0, 1, 1], spec, &MaskSet::all_ones(spec)).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            discriminality_loss(&mut tape, f, &[0, 1, 2], spec, &MaskSet::all_ones(spec)),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn discriminality_dominant_true_class_tends_to_zero() {
        let spec = StageSpec::new(2, 1).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(tensor(Shape::new(1, 2, 1, 1), &[60.0, 0.0])).unwrap();
        let l = discriminality_loss(&mut tape, f, &[0], spec, &MaskSet::all_ones(spec)).unwrap();
        assert!(tape.value(l).item() < 1e-20);
    }

    #[test]
    fn diversity_closed_forms() {
        let spec = StageSpec::new(1, 2).unwrap();
        let mut tape = Tape::new();
        let l3 = 3f64.ln();
        let f = tape.constant(tensor(Shape::new(1, 2, 1, 2), &[l3, 0.0, 0.0, l3])).unwrap();
        let d = diversity_loss(&mut tape, f, spec).unwrap();
        assert!((tape.value(d).item() - 1.5).abs() < 1e-15);

        let same = tape.constant(Tensor4::from_fn(Shape::new(2, 6, 3, 3), |n, c, h, w| {
            ((n + h * 3 + w) as f64).sin() + (c / 3) as f64
        }))
        .unwrap();
        let d = diversity_loss(&mut tape, same, StageSpec::new(2, 3).unwrap()).unwrap();
        assert!((tape.value(d).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mc_with_zero_lambda_is_discriminality() {
        let spec = StageSpec::new(2, 2).unwrap();
        let mut tape = Tape::new();
        let f = tape
            .constant(Tensor4::from_fn(Shape::new(2, 4, 2, 2), |n, c, h, w| ((n * 5 + c * 3 + h + w) as f64).cos()))
            .unwrap();
        let masks = MaskSet::all_ones(spec);
        let t = mc_loss(&mut tape, f, &[1, 0], spec, 0.0, &masks).unwrap();
        assert_eq!(tape.value(t.mc).item(), tape.value(t.dis).item());
        let t10 = mc_loss(&mut tape, f, &[1, 0], spec, 10.0, &masks).unwrap();
        let expect = tape.value(t10.dis).item() - 10.0 * tape.value(t10.div).item();
        assert!((tape.value(t10.mc).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_high_features_halve_middle() {
        let mut tape = Tape::new();
        let fl = Tensor4::from_fn(Shape::new(1, 4, 4, 4), |_, c, h, w| (c as f64 - 1.5) * (h + w) as f64);
        let l = tape.constant(fl.clone()).unwrap();
        let h = tape.constant(Tensor4::zeros(Shape::new(1, 2, 2, 2))).unwrap();
        for m in UpsampleMethod::ALL {
            let g = tdsa_attention(&mut tape, l, h, 2, m, false).unwrap();
            assert_eq!(tape.value(g), &fl.map(|v| 0.5 * v));
        }
        assert!(matches!(
            tdsa_attention(&mut tape, l, h, 3, UpsampleMethod::Nearest, false),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn repeat_factor_contract() {
        let h = StageSpec::new(4, 3).unwrap();
        assert_eq!(repeat_factor(h, StageSpec::new(4, 6).unwrap()).unwrap(), 2);
        assert!(matches!(repeat_factor(h, StageSpec::new(5, 3).unwrap()), Err(Error::Contract { .. })));
        assert!(repeat_factor(h, StageSpec::new(4, 4).unwrap()).is_err());
    }

    #[test]
    fn baseline_total_is_cross_entropy() {
        let spec_h = StageSpec::new(2, 1).unwrap();
        let spec_l = StageSpec::new(2, 2).unwrap();
        let mut tape = Tape::new();
        let logits = tape.param(tensor(Shape::new(2, 2, 1, 1), &[0.3, -0.1, 1.0, 2.0])).unwrap();
        let fh = tape.param(Tensor4::full(Shape::new(2, 2, 2, 2), 0.1)).unwrap();
        let fl = tape.param(Tensor4::full(Shape::new(2, 4, 4, 4), 0.2)).unwrap();
        let cfg = LossConfig {
            mu: 0.0,
            ..LossConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = total_loss(&mut tape, logits, fh, fl, &[0, 1], spec_h, spec_l, &cfg, &mut rng).unwrap();
        assert_eq!(out.total, out.ce);
        assert_eq!(out.breakdown.tdsa, 0.0);
        assert_eq!(out.breakdown.total, out.breakdown.ce);
    }

    #[test]
    fn csv_row_layout() {
        let b = LossBreakdown {
            ce: 1.0,
            total: 2.5,
            ..Default::default()
        };
        assert_eq!(b.csv_row(7), "7,1,0,0,0,0,0,0,0,2.5");
        assert_eq!(LossBreakdown::CSV_HEADER.split(',').count(), 10);
    }

    #[test]
    fn invalid_weights_are_rejected() {
        let cfg = LossConfig {
            lambda: -1.0,
            ..LossConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
