//! Flat `key = value` run configuration.
//!
//! Lines are trimmed; blank lines and lines starting with `#` are skipped.
//! Keys are listed in [`KEYS`]. Later assignments (command-line flags are
//! applied after the file) override earlier ones.

use std::fmt::Display;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::SyntheticSpec;
use crate::error::{Error, Result};
use crate::resample::UpsampleMethod;
use crate::trainer::TrainConfig;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "training seed (init, batch order, masks)"),
    ("upsample", "nearest | bilinear | bicubic"),
    ("xi", "middle-level channels per class = 3·xi (ξ_mult)"),
    ("xi_high", "high-level channels per class"),
    ("mu", "weight of the attention loss; 0 selects the CE baseline"),
    ("lambda", "weight of the diversity component"),
    ("detach_attention", "stop gradients through the attention gate (true|false)"),
    ("epochs", "training epochs"),
    ("batch_size", "mini-batch size"),
    ("lr", "base learning rate"),
    ("lr_decay", "learning-rate factor applied at each milestone"),
    ("milestones", "comma-separated epochs at which the rate decays"),
    ("weight_decay", "L2 penalty on conv and linear weights"),
    ("momentum", "SGD momentum"),
    ("hflip", "random horizontal flips (true|false)"),
    ("image_size", "square input size in pixels"),
    ("widths", "comma-separated conv widths, one per block"),
    ("classes", "number of classes S"),
    ("ratio", "spatial ratio between the middle and high taps"),
    ("tap_norm", "batch-normalize the tap projections (true|false)"),
    ("data_seed", "synthetic dataset seed"),
    ("train_per_class", "synthetic training images per class"),
    ("test_per_class", "synthetic test images per class"),
    ("global_vocab", "synthetic global arrangements"),
    ("local_vocab", "synthetic local textures"),
    ("noise", "synthetic pixel noise standard deviation"),
    ("contrast", "synthetic texture contrast"),
    ("distractors", "synthetic background distractor patches"),
];

/// Training and synthetic-data settings of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: SyntheticSpec,
}


fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {value}: expected true or false"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl RunConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "seed" => t.seed = parse(key, value)?,
            "upsample" => t.loss.upsample = parse(key, value)?,
            "xi" => t.backbone.xi_mult = parse(key, value)?,
            "xi_high" => t.backbone.xi_high = parse(key, value)?,
            "mu" => t.loss.mu = parse(key, value)?,
            "lambda" => t.loss.lambda = parse(key, value)?,
            "detach_attention" => t.loss.detach_attention = parse_bool(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "lr_decay" => t.lr_decay = parse(key, value)?,
            "milestones" => t.milestones = parse_list(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "hflip" => t.hflip = parse_bool(key, value)?,
            "image_size" => {
                let s: usize = parse(key, value)?;
                t.backbone.input_h = s;
                t.backbone.input_w = s;
                d.image_size = s;
            }
            "widths" => t.backbone.widths = parse_list(key, value)?,
            "classes" => {
                let s: usize = parse(key, value)?;
                t.backbone.num_classes = s;
                d.num_classes = s;
            }
            "ratio" => t.backbone.ratio = parse(key, value)?,
            "tap_norm" => t.backbone.tap_norm = parse_bool(key, value)?,
            "data_seed" => d.seed = parse(key, value)?,
            "train_per_class" => d.train_per_class = parse(key, value)?,
            "test_per_class" => d.test_per_class = parse(key, value)?,
            "global_vocab" => d.global_vocab = parse(key, value)?,
            "local_vocab" => d.local_vocab = parse(key, value)?,
            "noise" => d.noise = parse(key, value)?,
            "contrast" => d.contrast = parse(key, value)?,
            "distractors" => d.distractors = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every assignment of a config file.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_pairs(text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    /// Renders the configuration as a file that [`RunConfig::apply_text`]
    /// reads back to an equal value.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let d = &self.data;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let lines = [
            ("seed", t.seed.to_string()),
            ("upsample", t.loss.upsample.to_string()),
            ("xi", t.backbone.xi_mult.to_string()),
            ("xi_high", t.backbone.xi_high.to_string()),
            ("mu", t.loss.mu.to_string()),
            ("lambda", t.loss.lambda.to_string()),
            ("detach_attention", t.loss.detach_attention.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("lr_decay", t.lr_decay.to_string()),
            ("milestones", list(&t.milestones)),
            ("weight_decay", t.weight_decay.to_string()),
            ("momentum", t.momentum.to_string()),
            ("hflip", t.hflip.to_string()),
            ("image_size", t.backbone.input_h.to_string()),
            ("widths", list(&t.backbone.widths)),
            ("classes", t.backbone.num_classes.to_string()),
            ("ratio", t.backbone.ratio.to_string()),
            ("tap_norm", t.backbone.tap_norm.to_string()),
            ("data_seed", d.seed.to_string()),
            ("train_per_class", d.train_per_class.to_string()),
            ("test_per_class", d.test_per_class.to_string()),
            ("global_vocab", d.global_vocab.to_string()),
            ("local_vocab", d.local_vocab.to_string()),
            ("noise", d.noise.to_string()),
            ("contrast", d.contrast.to_string()),
            ("distractors", d.distractors.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate()?;
        if self.data.image_size != self.train.backbone.input_h || self.data.num_classes != self.train.backbone.num_classes {
            return Err(Error::Config("dataset and backbone disagree on image size or classes".into()));
        }
        Ok(())
    }

    pub fn upsample(&self) -> UpsampleMethod {
        self.train.loss.upsample
    }
}

/// Splits a config file into `(key, value)` pairs, reporting the line of
/// any malformed entry.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)));
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}
