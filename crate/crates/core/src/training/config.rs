use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRunConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub eval_interval: usize,
    pub eval_iters: usize,
    pub seed: u64,
    pub adamw: AdamWConfig,
    /// Maximum global gradient norm; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Fine-tuning only: also train the final layer norm.
    pub train_final_norm: bool,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainRunConfig {
    /// Pre-training recipe: batch 64, evaluation every 2000 iterations over
    /// 200 batches.
    pub fn pretrain() -> Self {
        TrainRunConfig {
            learning_rate: 3e-4,
            batch_size: 64,
            max_iters: 500_000,
            eval_interval: 2000,
            eval_iters: 200,
            seed: 1337,
            adamw: AdamWConfig::default(),
            grad_clip: None,
            train_final_norm: false,
        }
    }

    /// Fine-tuning recipe: batch 128 for 1000 iterations.
    pub fn finetune() -> Self {
        TrainRunConfig { batch_size: 128, max_iters: 1000, eval_interval: 1000, ..Self::pretrain() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_iters", self.max_iters),
            ("eval_interval", self.eval_interval),
            ("eval_iters", self.eval_iters),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.eval_interval > self.max_iters {
            return Err(Error::Config(format!(
                "eval_interval {} exceeds max_iters {}",
                self.eval_interval, self.max_iters
            )));
        }
        let a = &self.adamw;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0 && a.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid AdamW settings {a:?}")));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        Ok(())
    }

    /// Iterations after which an evaluation row is recorded.
    pub fn eval_points(&self) -> Vec<usize> {
        let mut points: Vec<usize> = (1..=self.max_iters / self.eval_interval).map(|k| k * self.eval_interval).collect();
        if !self.max_iters.is_multiple_of(self.eval_interval) {
            points.push(self.max_iters);
        }
        points
    }
}
