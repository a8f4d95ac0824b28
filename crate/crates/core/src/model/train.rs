use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backprop::{backprop, Example};
use super::Model;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Momentum { beta: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup then cosine decay to `min_ratio * lr`.
    WarmupCosine { warmup: usize, min_ratio: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub schedule: LrSchedule,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip: f32,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.1,
            schedule: LrSchedule::WarmupCosine { warmup: 100, min_ratio: 0.1 },
            optimizer: Optimizer::Momentum { beta: 0.9 },
            clip: 1.0,
            log_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f32 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::WarmupCosine { warmup, min_ratio } => {
                if step < warmup {
                    return self.lr * (step + 1) as f32 / warmup as f32;
                }
                let span = self.steps.saturating_sub(warmup).max(1) as f32;
                let t = ((step - warmup) as f32 / span).min(1.0);
                let cos = 0.5 * (1.0 + (std::f32::consts::PI * t).cos());
                self.lr * (min_ratio + (1.0 - min_ratio) * cos)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// `(step, mean loss since the previous entry)` every `log_every` steps
    /// and at the final step.
    pub curve: Vec<(usize, f64)>,
    pub final_loss: f64,
}

impl TrainOutcome {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.curve {
            s.push_str(&format!("{step},{loss}\n"));
        }
        s
    }
}

/// Full-attention training. `next_batch` draws each batch from the seeded
/// generator, so a run is reproducible from `(model seed, cfg, next_batch)`.
pub fn train(
    model: &mut Model,
    cfg: &TrainConfig,
    mut next_batch: impl FnMut(&mut ChaCha8Rng) -> Vec<Example>,
) -> Result<TrainOutcome> {
    if cfg.steps == 0 {
        return Err(Error::Config("training needs at least one step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = model.param_count();
    let mut m1 = vec![0.0f32; n];
    let mut m2 = vec![0.0f32; n];
    let mut curve = Vec::new();
    let mut last = f64::NAN;
    let mut window = (0.0f64, 0usize);
    for step in 0..cfg.steps {
        let batch = next_batch(&mut rng);
        let (loss, mut grads) = backprop(model, &batch);
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: format!("loss {loss}, lr {}, last logged loss {last}", cfg.lr_at(step)),
            });
        }
        if cfg.clip > 0.0 {
            let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt() as f32;
            if norm > cfg.clip {
                let s = cfg.clip / norm;
                grads.iter_mut().for_each(|g| *g *= s);
            }
        }
        let lr = cfg.lr_at(step);
        let params = model.params_mut();
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(&grads) {
                    *p -= lr * g;
                }
            }
            Optimizer::Momentum { beta } => {
                for ((p, g), v) in params.iter_mut().zip(&grads).zip(m1.iter_mut()) {
                    *v = beta * *v + g;
                    *p -= lr * *v;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = (step + 1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), a), b) in params.iter_mut().zip(&grads).zip(m1.iter_mut()).zip(m2.iter_mut()) {
                    *a = beta1 * *a + (1.0 - beta1) * g;
                    *b = beta2 * *b + (1.0 - beta2) * g * g;
                    *p -= lr * (*a / c1) / ((*b / c2).sqrt() + eps);
                }
            }
        }
        last = loss;
        window.0 += loss;
        window.1 += 1;
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            curve.push((step, window.0 / window.1 as f64));
            window = (0.0, 0);
        }
    }
    Ok(TrainOutcome { curve, final_loss: last })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{loss_forward, ModelConfig};

    fn overfit_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            lr: 3e-3,
            schedule: LrSchedule::Constant,
            optimizer: Optimizer::Adam { beta1: 0.9, beta2: 0.99, eps: 1e-8 },
            clip: 1.0,
            log_every: 10,
            seed: 1,
        }
    }

    #[test]
    fn overfits_one_sample() {
        let mut model = Model::init(ModelConfig { model_dim: 32, mlp_dim: 64, heads: 2, ..ModelConfig::small() }).unwrap();
        let ex = Example::unweighted(crate::model::encode_text("hello parallel world"));
        let before = loss_forward(&model, std::slice::from_ref(&ex));
        let out = train(&mut model, &overfit_cfg(150), |_| vec![ex.clone()]).unwrap();
        let after = loss_forward(&model, std::slice::from_ref(&ex));
        assert!(after < 0.1 * before, "{before} -> {after}");
        let first = out.curve.first().unwrap().1;
        let last = out.curve.last().unwrap().1;
        assert!(last < first);
    }

    #[test]
    fn training_is_reproducible() {
        let run = || {
            let mut model = Model::init(ModelConfig::small()).unwrap();
            let out = train(&mut model, &overfit_cfg(20), |rng| {
                use rand::Rng;
                vec![Example::unweighted((0..6).map(|_| rng.random_range(0..256)).collect())]
            })
            .unwrap();
            (model.digest(), out)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_is_reported() {
        let mut model = Model::init(ModelConfig::small()).unwrap();
        let cfg = TrainConfig { lr: f32::INFINITY, clip: 0.0, optimizer: Optimizer::Sgd, ..overfit_cfg(5) };
        let ex = Example::unweighted(vec![1, 2, 3]);
        let err = train(&mut model, &cfg, |_| vec![ex.clone()]).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig { steps: 100, lr: 1.0, schedule: LrSchedule::WarmupCosine { warmup: 10, min_ratio: 0.1 }, ..Default::default() };
        assert!((cfg.lr_at(9) - 1.0).abs() < 1e-6);
        assert!(cfg.lr_at(50) < 1.0 && cfg.lr_at(50) > 0.1);
        assert!((cfg.lr_at(100) - 0.1).abs() < 1e-6);
    }
}
