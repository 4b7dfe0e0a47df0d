use serde::{Deserialize, Serialize};

/// Slope of the critic's activated-neuron ratio over a trailing window,
/// clamped to `[lower_bound, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonTracker {
    pub history: Vec<f64>,
    pub window: usize,
    pub lower_bound: f64,
}

impl EpsilonTracker {
    pub fn new(window: usize, lower_bound: f64) -> Self {
        Self {
            history: Vec::new(),
            window,
            lower_bound,
        }
    }

    pub fn record(&mut self, ratio: f64) {
        self.history.push(ratio);
    }

    /// 1 until two points exist, which disables review.
    pub fn epsilon(&self) -> f64 {
        compute_epsilon(&self.history, self.window, self.lower_bound)
    }
}

pub fn compute_epsilon(history: &[f64], window: usize, lower_bound: f64) -> f64 {
    if history.len() < 2 {
        return 1.0;
    }
    let latest = history.len() - 1;
    let past = latest.saturating_sub(window);
    let raw = (history[latest] - history[past]).abs();
    if raw.is_nan() {
        return 1.0;
    }
    raw.clamp(lower_bound, 1.0)
}
