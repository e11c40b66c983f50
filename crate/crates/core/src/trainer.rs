//! Mini-batch SGD over the backbone with the combined objective, plus
//! evaluation metrics.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, ModelParams};
use crate::datagen::{sample_seed, Dataset};
use crate::error::{Error, Result};
use crate::loss::{self, LossBreakdown, LossConfig, MaskSet};
use crate::tensor::Tensor4;

/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Random horizontal flips of training images.
    pub hflip: bool,
    pub loss: LossConfig,
    pub backbone: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 32,
            lr: 0.1,
            lr_decay: 0.1,
            milestones: vec![30, 45],
            weight_decay: 5e-4,
            momentum: 0.9,
            seed: 0,
            hflip: false,
            loss: LossConfig::default(),
            backbone: BackboneConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones must be strictly increasing: {:?}", self.milestones));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return bad(format!("milestones {:?} must be below {} epochs", self.milestones, self.epochs));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        self.loss.validate()?;
        self.backbone.validate()
    }
}

/// Learning rate in effect during `epoch` (0-based).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.milestones.iter().filter(|&&m| epoch >= m).count();
    cfg.lr * cfg.lr_decay.powi(passed as i32)
}

/// Evaluation results on one split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub samples: usize,
    /// Top-1 accuracy of the logits.
    pub accuracy: f64,
    /// Top-1 accuracy of argmax over per-class pooled high-level responses.
    pub alignment_accuracy: f64,
    /// Mean fraction of true-class gated middle-level activation inside the
    /// region mask; `None` when the dataset has no masks.
    pub containment: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the per-step breakdowns of this epoch.
    pub loss: LossBreakdown,
    pub eval: Option<EvalMetrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epochs: Vec<EpochRecord>,
    pub final_eval: Option<EvalMetrics>,
}

impl Metrics {
    pub const CSV_HEADER: &'static str =
        "epoch,ce,dis_high,div_high,mc_high,dis_mid,div_mid,mc_mid,tdsa,total,lr,test_acc,align_acc,containment";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&r.loss.csv_row(r.epoch));
            out.push_str(&format!(",{}", r.lr));
            match r.eval {
                Some(e) => {
                    let c = e.containment.map(|c| c.to_string()).unwrap_or_default();
                    out.push_str(&format!(",{},{},{c}", e.accuracy, e.alignment_accuracy));
                }
                None => out.push_str(",,,"),
            }
            out.push('\n');
        }
        out
    }
}

/// Independent random streams of one run. Keeping them apart lets a
/// baseline run (which draws no masks) see the same initialization and
/// batch order as a loss-augmented run with the same seed.
struct Streams {
    order: ChaCha8Rng,
    masks: ChaCha8Rng,
    flips: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Streams {
            order: ChaCha8Rng::seed_from_u64(sample_seed(seed, 10, 0)),
            masks: ChaCha8Rng::seed_from_u64(sample_seed(seed, 11, 0)),
            flips: ChaCha8Rng::seed_from_u64(sample_seed(seed, 12, 0)),
        }
    }
}

pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sample_seed(seed, 13, 0))
}

fn hflip_items(images: &mut Tensor4<f32>, flip: &[bool]) {
    let s = images.shape();
    let item = s.item();
    for (n, &f) in flip.iter().enumerate() {
        if !f {
            continue;
        }
        for row in images.data_mut()[n * item..(n + 1) * item].chunks_mut(s.w) {
            row.reverse();
        }
    }
}

fn check_dataset(ds: &Dataset, cfg: &BackboneConfig) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::contract("train", "dataset is empty"));
    }
    if let Some(&bad) = ds.labels.iter().find(|&&l| l >= cfg.num_classes) {
        return Err(Error::contract("train", format!("label {bad} ≥ {} classes", cfg.num_classes)));
    }
    let s = ds.images.shape();
    if (s.c, s.h, s.w) != (cfg.in_channels, cfg.input_h, cfg.input_w) {
        return Err(Error::dim(
            "train",
            format!("images {s} do not match the {}×{} input", cfg.input_h, cfg.input_w),
        ));
    }
    Ok(())
}

/// Result of one optimizer step.
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
}

/// SGD state: one velocity buffer per parameter entry.
pub struct Sgd {
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(params: &ModelParams<f32>) -> Self {
        Sgd {
            velocity: params.entries.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// Runs forward, loss, backward and the parameter update on one batch.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        params: &mut ModelParams<f32>,
        images: &Tensor4<f32>,
        labels: &[usize],
        cfg: &TrainConfig,
        lr: f64,
        masks_h: &MaskSet,
        masks_l: &MaskSet,
    ) -> Result<StepOutcome> {
        let bb = &cfg.backbone;
        let mut pass = backbone::forward(images, params, bb, true)?;
        let loss = loss::total_loss_with_masks(
            &mut pass.tape,
            pass.logits,
            pass.f_h,
            pass.f_l,
            labels,
            bb.spec_high(),
            bb.spec_mid(),
            &cfg.loss,
            masks_h,
            masks_l,
        )?;
        let mut grads = pass.tape.backward(loss.total)?;
        let (lr, mom, wd) = (lr as f32, cfg.momentum as f32, cfg.weight_decay as f32);
        for (i, var) in pass.param_vars.iter().enumerate() {
            let (Some(var), true) = (var, params.entries[i].kind.trainable()) else {
                continue;
            };
            let Some(g) = grads.take(*var) else { continue };
            let decay = if params.entries[i].kind.decays() { wd } else { 0.0 };
            let p = params.entries[i].value.data_mut();
            for ((p, v), &g) in p.iter_mut().zip(self.velocity[i].iter_mut()).zip(g.data()) {
                let d = g + decay * *p;
                *v = mom * *v + d;
                *p -= lr * *v;
            }
        }
        backbone::update_running_stats(params, &pass.bn_stats, BN_MOMENTUM);
        params.ensure_finite()?;
        Ok(StepOutcome {
            breakdown: loss.breakdown,
        })
    }
}

fn diverged(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            batch,
            detail: e.to_string(),
        },
        other => other,
    }
}

/// Trains from a seeded initialization. When `test` is given it is
/// evaluated after every `eval_every` epochs (0 = final epoch only) and
/// once more into [`Metrics::final_eval`].
pub fn train(
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    eval_every: usize,
) -> Result<(ModelParams<f32>, Metrics)> {
    cfg.validate()?;
    check_dataset(data, &cfg.backbone)?;
    let mut params = backbone::init_params(&cfg.backbone, &mut init_rng(cfg.seed))?;
    let mut streams = Streams::new(cfg.seed);
    let mut sgd = Sgd::new(&params);
    let mut metrics = Metrics::default();
    let (spec_h, spec_l) = (cfg.backbone.spec_high(), cfg.backbone.spec_mid());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut streams.order);
        let mut rows = Vec::new();
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut images = data.images.select_batch(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            if cfg.hflip {
                let flips: Vec<bool> = idx.iter().map(|_| streams.flips.gen()).collect();
                hflip_items(&mut images, &flips);
            }
            let (masks_h, masks_l) = if cfg.loss.is_baseline() {
                (MaskSet::all_ones(spec_h), MaskSet::all_ones(spec_l))
            } else {
                (
                    cfg.loss.sample_masks(spec_h, &mut streams.masks),
                    cfg.loss.sample_masks(spec_l, &mut streams.masks),
                )
            };
            let out = sgd
                .step(&mut params, &images, &labels, cfg, lr, &masks_h, &masks_l)
                .map_err(|e| diverged(epoch, batch, e))?;
            if !out.breakdown.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    detail: format!("loss breakdown {:?}", out.breakdown),
                });
            }
            rows.push(out.breakdown);
        }
        let last = epoch + 1 == cfg.epochs;
        let due = eval_every > 0 && (epoch + 1) % eval_every == 0;
        let eval = match test {
            Some(t) if due || (last && eval_every == 0) => Some(evaluate(&params, t, cfg)?),
            _ => None,
        };
        metrics.epochs.push(EpochRecord {
            epoch,
            lr,
            loss: LossBreakdown::mean(&rows),
            eval,
        });
    }
    if let Some(t) = test {
        metrics.final_eval = match metrics.epochs.last().and_then(|r| r.eval) {
            Some(e) => Some(e),
            None => Some(evaluate(&params, t, cfg)?),
        };
    }
    Ok((params, metrics))
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of each cell of an `h×w` grid covered by a binary `H×W` mask.
/// `None` unless the grid divides the mask evenly.
pub fn mask_coverage(mask: &[u8], mh: usize, mw: usize, h: usize, w: usize) -> Option<Vec<f64>> {
    if h == 0 || w == 0 || !mh.is_multiple_of(h) || !mw.is_multiple_of(w) || mask.len() != mh * mw {
        return None;
    }
    let (fy, fx) = (mh / h, mw / w);
    let area = (fy * fx) as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..mh {
        for x in 0..mw {
            if mask[y * mw + x] > 0 {
                out[(y / fy) * w + x / fx] += 1.0 / area;
            }
        }
    }
    Some(out)
}

/// Share of the non-negative mass of `act` (an h×w map) lying inside the
/// covered cells. `None` when the map carries no mass.
pub fn containment(act: &[f64], coverage: &[f64]) -> Option<f64> {
    let mut inside = 0.0;
    let mut total = 0.0;
    for (&a, &c) in act.iter().zip(coverage) {
        let a = a.max(0.0);
        inside += a * c;
        total += a;
    }
    (total > 0.0).then(|| inside / total)
}

/// Per-sample outputs of an eval-mode pass, used by metrics and the
/// visualizer.
pub struct EvalBatch {
    pub logits: Tensor4<f32>,
    pub scores: Tensor4<f32>,
    pub f_l: Tensor4<f32>,
    pub f_h: Tensor4<f32>,
    pub gated: Tensor4<f32>,
}

/// Eval-mode forward pass with all-ones masks.
pub fn infer(params: &ModelParams<f32>, images: &Tensor4<f32>, cfg: &TrainConfig) -> Result<EvalBatch> {
    let bb = &cfg.backbone;
    let mut pass = backbone::forward(images, params, bb, false)?;
    let spec_h = bb.spec_high();
    let repeat = loss::repeat_factor(spec_h, bb.spec_mid())?;
    let scores = loss::class_scores(&mut pass.tape, pass.f_h, spec_h, &MaskSet::all_ones(spec_h))?;
    let gated = loss::tdsa_attention(&mut pass.tape, pass.f_l, pass.f_h, repeat, cfg.loss.upsample, false)?;
    let t = &pass.tape;
    Ok(EvalBatch {
        logits: t.value(pass.logits).clone(),
        scores: t.value(scores).clone(),
        f_l: t.value(pass.f_l).clone(),
        f_h: t.value(pass.f_h).clone(),
        gated: t.value(gated).clone(),
    })
}

/// Accuracy, channel-alignment accuracy and attention containment.
pub fn evaluate(params: &ModelParams<f32>, data: &Dataset, cfg: &TrainConfig) -> Result<EvalMetrics> {
    let bb = &cfg.backbone;
    check_dataset(data, bb)?;
    let spec_l = bb.spec_mid();
    let xi_l = spec_l.channels_per_class();
    let ims = data.images.shape();
    let (mut hits, mut aligned) = (0usize, 0usize);
    let (mut contain_sum, mut contain_n) = (0.0, 0usize);
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let out = infer(params, &data.images.select_batch(idx), cfg)?;
        let gs = out.gated.shape();
        for (k, &i) in idx.iter().enumerate() {
            let y = data.labels[i];
            let s = out.logits.shape().item();
            hits += usize::from(argmax(&out.logits.data()[k * s..(k + 1) * s]) == y);
            aligned += usize::from(argmax(&out.scores.data()[k * s..(k + 1) * s]) == y);
            let Some(regions) = &data.region_masks else { continue };
            let Some(cov) = mask_coverage(&regions[i], ims.h, ims.w, gs.h, gs.w) else { continue };
            let mut act = vec![0.0f64; gs.plane()];
            for c in spec_l.group(y) {
                for (a, &v) in act.iter_mut().zip(out.gated.plane(k, c)) {
                    *a += f64::from(v.max(0.0));
                }
            }
            debug_assert_eq!(spec_l.group(y).len(), xi_l);
            if let Some(f) = containment(&act, &cov) {
                contain_sum += f;
                contain_n += 1;
            }
        }
    }
    let n = data.len() as f64;
    Ok(EvalMetrics {
        samples: data.len(),
        accuracy: hits as f64 / n,
        alignment_accuracy: aligned as f64 / n,
        containment: (contain_n > 0).then(|| contain_sum / contain_n as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn schedule_steps_at_milestones() {
        let cfg = TrainConfig {
            epochs: 300,
            milestones: vec![150, 225],
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.1);
        assert!((lr_at(150, &cfg) - 0.01).abs() < 1e-15);
        assert!((lr_at(225, &cfg) - 0.001).abs() < 1e-15);
        assert!((lr_at(149, &cfg) - 0.1).abs() < 1e-15);
        let flat = TrainConfig {
            milestones: vec![],
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(59, &flat), 0.1);
    }

    #[test]
    fn milestones_are_validated() {
        let mut cfg = TrainConfig {
            milestones: vec![30, 30],
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.milestones = vec![10, 60];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn uniform_map_containment_is_area_fraction() {
        let mut mask = vec![0u8; 64];
        for y in 0..4 {
            for x in 0..6 {
                mask[y * 8 + x] = 1;
            }
        }
        let cov = mask_coverage(&mask, 8, 8, 4, 4).unwrap();
        let act = vec![2.5; 16];
        let f = containment(&act, &cov).unwrap();
        assert!((f - 24.0 / 64.0).abs() < 1e-12);
        assert!(containment(&[0.0; 16], &cov).is_none());
    }

    #[test]
    fn hflip_reverses_rows() {
        let mut t = Tensor4::from_fn(Shape::new(2, 1, 1, 3), |n, _, _, w| (n * 3 + w) as f32);
        hflip_items(&mut t, &[true, false]);
        assert_eq!(t.data(), &[2.0, 1.0, 0.0, 3.0, 4.0, 5.0]);
    }
}
