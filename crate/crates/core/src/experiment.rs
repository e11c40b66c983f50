//! Batches of independent training runs, evaluated in parallel.

use crate::datagen::Dataset;
use crate::error::Result;
use crate::par;
use crate::trainer::{self, EvalMetrics, TrainConfig};

/// Final test metrics of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub config: TrainConfig,
    pub eval: EvalMetrics,
}

/// Trains every configuration on `train` and evaluates it on `test`.
/// Results come back in input order whatever the worker count.
pub fn run_configs(train: &Dataset, test: &Dataset, configs: &[TrainConfig]) -> Vec<Result<RunOutcome>> {
    par::map_slice(configs, |cfg| {
        let (_, metrics) = trainer::train(train, Some(test), cfg, 0)?;
        Ok(RunOutcome {
            config: cfg.clone(),
            eval: metrics.final_eval.unwrap_or_default(),
        })
    })
}

/// `base` once per seed.
pub fn seed_sweep(base: &TrainConfig, seeds: &[u64]) -> Vec<TrainConfig> {
    seeds
        .iter()
        .map(|&seed| TrainConfig { seed, ..base.clone() })
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// `max − min`.
pub fn spread(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        assert_eq!(mean(&[1.0, 2.0, 6.0]), 3.0);
        assert_eq!(spread(&[0.5, 0.25, 0.75]), 0.5);
        assert!(mean(&[]).is_nan());
    }

    #[test]
    fn sweep_varies_only_the_seed() {
        let base = TrainConfig::default();
        let v = seed_sweep(&base, &[3, 4]);
        assert_eq!(v[1].seed, 4);
        assert_eq!(TrainConfig { seed: base.seed, ..v[0].clone() }, base);
    }
}
