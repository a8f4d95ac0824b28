//! Recall-model training recipe shared by the CLI and the tests.

use super::config::RunConfig;
use crate::error::Result;
use crate::model::{train, LrSchedule, Model, TrainConfig, TrainOutcome};
use crate::tasks::kv_training_example;

pub fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        steps: cfg.train_steps,
        lr: cfg.train_lr,
        schedule: LrSchedule::WarmupCosine { warmup: (cfg.train_steps / 20).max(1), min_ratio: 0.1 },
        optimizer: cfg.train_opt.optimizer(),
        clip: 1.0,
        log_every: (cfg.train_steps / 100).max(1),
        seed: cfg.seed,
    }
}

/// Trains a fresh model on kv-recall sequences drawn from the configured item
/// spec. Deterministic given the config.
pub fn train_recall_model(cfg: &RunConfig) -> Result<(Model, TrainOutcome)> {
    cfg.validate_settings()?;
    let spec = cfg.kv_spec();
    spec.validate()?;
    let mut model = Model::init(cfg.model_config())?;
    let outcome = train(&mut model, &train_config(cfg), |rng| {
        (0..cfg.train_batch).map(|_| kv_training_example(rng, spec, cfg.train_lookups)).collect()
    })?;
    Ok((model, outcome))
}
