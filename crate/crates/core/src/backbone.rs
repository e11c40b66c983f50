//! Small VGG-style classifier with a middle-level and a high-level tap.
//!
//! Layout for widths `[w1, .., wB]`:
//!
//! ```text
//! block k      : (conv3×3 → BN → ReLU) × 2
//! blocks 1..B-2: block, then 2×2 max pool
//! block B-1    : block, 1×1 conv [→ BN] → F_l  (S·3·ξ_mult channels)
//! between taps : log2(ratio) × 2×2 max pool applied to F_l
//! block B      : block, 1×1 conv [→ BN] → F_h  (S·ξ_high channels)
//! head         : linear(GAP(F_h)) → logits (S)
//! ```
//!
//! The high tap is computed from the middle tap, and the classifier reads
//! only the high tap.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::loss::StageSpec;
use crate::tensor::{Real, Shape, Tensor4};

/// Channels per class at the high tap when not configured otherwise.
pub const DEFAULT_XI_HIGH: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub xi_high: usize,
    /// Middle-level channels per class are `xi_high · xi_mult`.
    pub xi_mult: usize,
    /// Spatial size of the middle tap divided by that of the high tap.
    pub ratio: usize,
    /// Batch-normalize the tap projections instead of giving them a bias.
    #[serde(default)]
    pub tap_norm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_h: 64,
            input_w: 64,
            in_channels: 3,
            widths: vec![32, 64, 128, 128],
            num_classes: 8,
            xi_high: DEFAULT_XI_HIGH,
            xi_mult: 2,
            ratio: 2,
            tap_norm: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.len() < 2 {
            return bad(format!("need at least two blocks, got widths {:?}", self.widths));
        }
        if self.widths.contains(&0) || self.in_channels == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.num_classes < 2 || self.xi_high == 0 || self.xi_mult == 0 {
            return bad(format!(
                "need S ≥ 2, ξ_high ≥ 1, ξ_mult ≥ 1 (S={}, ξ_high={}, ξ_mult={})",
                self.num_classes, self.xi_high, self.xi_mult
            ));
        }
        if !self.ratio.is_power_of_two() {
            return bad(format!("tap ratio must be a power of two, got {}", self.ratio));
        }
        let (mh, mw) = self.mid_hw();
        let (hh, hw) = self.high_hw();
        if hh == 0 || hw == 0 || mh != hh * self.ratio || mw != hw * self.ratio {
            return bad(format!(
                "input {}×{} too small or not divisible for {} blocks with ratio {}",
                self.input_h,
                self.input_w,
                self.widths.len(),
                self.ratio
            ));
        }
        Ok(())
    }

    fn pools_before_mid(&self) -> u32 {
        (self.widths.len() - 2) as u32
    }

    fn pools_between(&self) -> u32 {
        self.ratio.trailing_zeros()
    }

    pub fn mid_hw(&self) -> (usize, usize) {
        let k = 1 << self.pools_before_mid();
        (self.input_h / k, self.input_w / k)
    }

    pub fn high_hw(&self) -> (usize, usize) {
        let (h, w) = self.mid_hw();
        (h / self.ratio, w / self.ratio)
    }

    pub fn spec_high(&self) -> StageSpec {
        StageSpec::new(self.num_classes, self.xi_high).expect("validated config")
    }

    pub fn spec_mid(&self) -> StageSpec {
        StageSpec::new(self.num_classes, self.xi_high * self.xi_mult).expect("validated config")
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, self.in_channels, self.input_h, self.input_w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Weight decay applies to conv and linear weights only.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::LinearWeight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor4<T>,
}

/// Named parameter arrays in a fixed definition order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub entries: Vec<Param<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor4<T>> {
        self.index_of(name).map(|i| &self.entries[i].value)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for p in &self.entries {
            p.value.ensure_finite("parameter update")?;
        }
        Ok(())
    }
}

fn bn_names(prefix: &str) -> [String; 4] {
    [
        format!("{prefix}.scale"),
        format!("{prefix}.shift"),
        format!("{prefix}.running_mean"),
        format!("{prefix}.running_var"),
    ]
}

fn block_names(b: usize, j: usize) -> (String, [String; 4]) {
    (format!("block{b}.conv{j}.weight"), bn_names(&format!("block{b}.bn{j}")))
}

/// Kaiming-normal conv/linear weights (std `sqrt(2 / fan_in)`), zero
/// biases, unit BN scale, zero BN shift and running mean, unit running var.
pub fn init_params<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<ModelParams<f32>> {
    cfg.validate()?;
    let mut entries = Vec::new();
    let kaiming = |name: String, kind: ParamKind, shape: Shape, fan_in: usize, rng: &mut R| {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data = (0..shape.numel()).map(|_| normal.sample(rng) as f32).collect();
        Param {
            name,
            kind,
            value: Tensor4::from_vec(shape, data).expect("init shape"),
        }
    };
    let constant = |name: String, kind: ParamKind, c: usize, v: f32| Param {
        name,
        kind,
        value: Tensor4::full(Shape::new(1, c, 1, 1), v),
    };
    let push_bn = |entries: &mut Vec<Param<f32>>, names: [String; 4], c: usize| {
        let [scale, shift, rmean, rvar] = names;
        entries.push(constant(scale, ParamKind::BnScale, c, 1.0));
        entries.push(constant(shift, ParamKind::BnShift, c, 0.0));
        entries.push(constant(rmean, ParamKind::RunningMean, c, 0.0));
        entries.push(constant(rvar, ParamKind::RunningVar, c, 1.0));
    };
    let push_tail = |entries: &mut Vec<Param<f32>>, prefix: &str, c: usize| {
        if cfg.tap_norm {
            push_bn(entries, bn_names(&format!("{prefix}.bn")), c);
        } else {
            entries.push(constant(format!("{prefix}.bias"), ParamKind::Bias, c, 0.0));
        }
    };

    let spec_mid = cfg.spec_mid();
    let spec_high = cfg.spec_high();
    let last = cfg.widths.len() - 1;
    let mut cin = cfg.in_channels;
    for (b, &w) in cfg.widths.iter().enumerate() {
        if b == last {
            cin = spec_mid.total_channels();
        }
        for j in 0..2 {
            let (wname, bn) = block_names(b, j);
            let c_in = if j == 0 { cin } else { w };
            entries.push(kaiming(wname, ParamKind::ConvWeight, Shape::new(w, c_in, 3, 3), c_in * 9, rng));
            push_bn(&mut entries, bn, w);
        }
        cin = w;
        if b == last - 1 {
            let out = spec_mid.total_channels();
            entries.push(kaiming("mid.weight".into(), ParamKind::ConvWeight, Shape::new(out, w, 1, 1), w, rng));
            push_tail(&mut entries, "mid", out);
        }
    }
    let out = spec_high.total_channels();
    let w = cfg.widths[last];
    entries.push(kaiming("high.weight".into(), ParamKind::ConvWeight, Shape::new(out, w, 1, 1), w, rng));
    push_tail(&mut entries, "high", out);
    entries.push(kaiming(
        "fc.weight".into(),
        ParamKind::LinearWeight,
        Shape::new(cfg.num_classes, out, 1, 1),
        out,
        rng,
    ));
    entries.push(constant("fc.bias".into(), ParamKind::Bias, cfg.num_classes, 0.0));
    Ok(ModelParams { entries })
}

/// A recorded forward pass.
pub struct ForwardPass<T> {
    pub tape: Tape<T>,
    pub f_l: Var,
    pub f_h: Var,
    pub logits: Var,
    /// Tape handle of every parameter entry, `None` for running statistics.
    pub param_vars: Vec<Option<Var>>,
    /// Batch statistics per batch-norm layer, keyed by the running-mean
    /// entry index. Empty in eval mode.
    pub bn_stats: Vec<(usize, BatchStats<T>)>,
}

struct Builder<'a, T> {
    tape: Tape<T>,
    params: &'a ModelParams<T>,
    vars: Vec<Option<Var>>,
    stats: Vec<(usize, BatchStats<T>)>,
    train: bool,
}

impl<T: Real> Builder<'_, T> {
    fn var(&mut self, name: &str) -> Result<Var> {
        let i = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("parameter {name} missing")))?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let v = self.tape.param(self.params.entries[i].value.clone())?;
        self.vars[i] = Some(v);
        Ok(v)
    }

    fn conv_bn_relu(&mut self, x: Var, b: usize, j: usize) -> Result<Var> {
        let (wname, bn) = block_names(b, j);
        let w = self.var(&wname)?;
        let y = self.tape.conv2d(x, w, None, 1)?;
        let y = self.bn(y, bn)?;
        self.tape.relu(y)
    }

    fn bn(&mut self, y: Var, names: [String; 4]) -> Result<Var> {
        let [scale, shift, rmean, rvar] = names;
        let gamma = self.var(&scale)?;
        let beta = self.var(&shift)?;
        let (y, stats) = if self.train {
            self.tape.batch_norm(y, gamma, beta, None)?
        } else {
            let rm = self.params.get(&rmean).ok_or_else(|| Error::Config(format!("{rmean} missing")))?;
            let rv = self.params.get(&rvar).ok_or_else(|| Error::Config(format!("{rvar} missing")))?;
            self.tape.batch_norm(y, gamma, beta, Some((rm.data(), rv.data())))?
        };
        if let Some(stats) = stats {
            let idx = self.params.index_of(&rmean).expect("running mean present");
            self.stats.push((idx, stats));
        }
        Ok(y)
    }

    fn project(&mut self, x: Var, prefix: &str, norm: bool) -> Result<Var> {
        let w = self.var(&format!("{prefix}.weight"))?;
        if norm {
            let y = self.tape.conv2d(x, w, None, 0)?;
            return self.bn(y, bn_names(&format!("{prefix}.bn")));
        }
        let b = self.var(&format!("{prefix}.bias"))?;
        self.tape.conv2d(x, w, Some(b), 0)
    }
}

/// Runs the network on `x`. In training mode batch norm uses batch
/// statistics (reported in [`ForwardPass::bn_stats`]); otherwise it uses the
/// running statistics stored in `params`.
pub fn forward<T: Real>(x: &Tensor4<T>, params: &ModelParams<T>, cfg: &BackboneConfig, train: bool) -> Result<ForwardPass<T>> {
    let xs = x.shape();
    if (xs.c, xs.h, xs.w) != (cfg.in_channels, cfg.input_h, cfg.input_w) {
        return Err(Error::dim(
            "backbone forward",
            format!("input {xs}, expected n×{}×{}×{}", cfg.in_channels, cfg.input_h, cfg.input_w),
        ));
    }
    let mut b = Builder {
        tape: Tape::new(),
        params,
        vars: vec![None; params.entries.len()],
        stats: Vec::new(),
        train,
    };
    let last = cfg.widths.len() - 1;
    let mut h = b.tape.constant(x.clone())?;
    let mut f_l = None;
    for blk in 0..cfg.widths.len() {
        h = b.conv_bn_relu(h, blk, 0)?;
        h = b.conv_bn_relu(h, blk, 1)?;
        if blk + 1 < last {
            h = b.tape.max_pool2(h)?;
        } else if blk + 1 == last {
            let mid = b.project(h, "mid", cfg.tap_norm)?;
            f_l = Some(mid);
            h = mid;
            for _ in 0..cfg.pools_between() {
                h = b.tape.max_pool2(h)?;
            }
        }
    }
    let f_l = f_l.expect("at least two blocks");
    let f_h = b.project(h, "high", cfg.tap_norm)?;
    let pooled = b.tape.gap(f_h)?;
    let w = b.var("fc.weight")?;
    let bias = b.var("fc.bias")?;
    let logits = b.tape.linear(pooled, w, bias)?;
    Ok(ForwardPass {
        tape: b.tape,
        f_l,
        f_h,
        logits,
        param_vars: b.vars,
        bn_stats: b.stats,
    })
}

/// Blends batch statistics into running averages with the given momentum.
pub fn update_running_stats<T: Real>(params: &mut ModelParams<T>, stats: &[(usize, BatchStats<T>)], momentum: f64) {
    let m = T::from_f(momentum);
    let keep = T::one() - m;
    for (idx, s) in stats {
        for (offset, values) in [(0, &s.mean), (1, &s.var)] {
            let entry = &mut params.entries[idx + offset];
            for (r, &v) in entry.value.data_mut().iter_mut().zip(values.iter()) {
                *r = keep * *r + m * v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_shapes() {
        let cfg = BackboneConfig::default();
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor4::<f32>::full(cfg.input_shape(1), 0.5);
        let pass = forward(&x, &params, &cfg, false).unwrap();
        assert_eq!(pass.tape.shape(pass.f_l), Shape::new(1, 48, 16, 16));
        assert_eq!(pass.tape.shape(pass.f_h), Shape::new(1, 24, 8, 8));
        assert_eq!(pass.tape.shape(pass.logits), Shape::new(1, 8, 1, 1));
    }

    #[test]
    fn init_is_seeded_and_bn_is_identity() {
        let cfg = BackboneConfig {
            widths: vec![4, 4, 4],
            input_h: 16,
            input_w: 16,
            ..BackboneConfig::default()
        };
        let a = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        for p in &a.entries {
            match p.kind {
                ParamKind::BnScale | ParamKind::RunningVar => assert!(p.value.data().iter().all(|&v| v == 1.0)),
                ParamKind::BnShift | ParamKind::RunningMean | ParamKind::Bias => {
                    assert!(p.value.data().iter().all(|&v| v == 0.0))
                }
                _ => {}
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = BackboneConfig::default();
        for cfg in [
            BackboneConfig { widths: vec![8], ..base.clone() },
            BackboneConfig { ratio: 3, ..base.clone() },
            BackboneConfig { input_h: 4, ..base.clone() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let cfg = BackboneConfig {
            widths: vec![4, 4],
            input_h: 8,
            input_w: 8,
            ..BackboneConfig::default()
        };
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor4::<f32>::zeros(Shape::new(1, 3, 9, 8));
        assert!(matches!(forward(&x, &params, &cfg, false), Err(Error::Dimension { .. })));
    }
}
