use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
    /// Relative improvement needed to reset the patience counter.
    pub min_delta: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            factor: 0.1,
            patience: 10,
            min_delta: 1e-4,
        }
    }
}

/// Reduce-on-plateau: after `patience` consecutive epochs without a relative
/// improvement of `min_delta` over the best loss so far, multiply the learning
/// rate by `factor` and start counting again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub cfg: SchedulerConfig,
    pub lr: f64,
    pub best: f64,
    pub wait: usize,
}

impl Plateau {
    pub fn new(cfg: SchedulerConfig, lr: f64) -> Self {
        Self {
            cfg,
            lr,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    pub fn improves(&self, loss: f64) -> bool {
        !self.best.is_finite() || loss < self.best - self.cfg.min_delta * self.best.abs()
    }

    /// Feeds one epoch's validation loss; returns true when the rate was reduced.
    pub fn observe(&mut self, loss: f64) -> bool {
        if self.improves(loss) {
            self.best = loss;
            self.wait = 0;
            return false;
        }
        self.wait += 1;
        if self.wait >= self.cfg.patience {
            self.lr *= self.cfg.factor;
            self.wait = 0;
            return true;
        }
        false
    }
}
