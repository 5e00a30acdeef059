use serde::{Deserialize, Serialize};

use crate::params::ComponentRates;

/// Cosine annealing from `peak` at step 0 to `floor` at step `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub peak: f64,
    pub floor: f64,
    pub total: usize,
}

impl CosineSchedule {
    pub fn new(peak: f64, floor: f64, total: usize) -> Self {
        Self { peak, floor, total }
    }

    pub fn rate(&self, step: usize) -> f64 {
        if self.total == 0 || step >= self.total {
            return self.floor;
        }
        let progress = step as f64 / self.total as f64;
        self.floor + (self.peak - self.floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn trace(&self) -> Vec<f64> {
        (0..self.total).map(|t| self.rate(t)).collect()
    }
}

/// Anneals every component rate from its own peak towards a common floor.
pub fn anneal(peaks: &ComponentRates, floor: f64, step: usize, total: usize) -> ComponentRates {
    let at = |peak| CosineSchedule::new(peak, floor, total).rate(step);
    ComponentRates {
        encoder: at(peaks.encoder),
        attention: at(peaks.attention),
        head: at(peaks.head),
    }
}
