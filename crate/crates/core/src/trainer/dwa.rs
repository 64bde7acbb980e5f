use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_TASKS: usize = 2;

/// When the task weights are recomputed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DwaGranularity {
    #[default]
    Epoch,
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DwaConfig {
    pub temperature: f64,
    pub granularity: DwaGranularity,
}

impl Default for DwaConfig {
    fn default() -> Self {
        Self { temperature: 0.2, granularity: DwaGranularity::Epoch }
    }
}

/// Loss history and current weights for dynamic weight averaging.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskWeightState {
    /// `[L(t-2), L(t-1)]` per task; only meaningful once `t >= 2`.
    pub history: [[f64; 2]; NUM_TASKS],
    pub temperature: f64,
    /// Number of recorded loss vectors.
    pub t: usize,
    pub lambda: [f64; NUM_TASKS],
}

impl TaskWeightState {
    pub fn new(temperature: f64) -> Self {
        Self { history: [[0.0; 2]; NUM_TASKS], temperature, t: 0, lambda: [1.0; NUM_TASKS] }
    }

    /// Appends one loss per task and refreshes `lambda`.
    pub fn record(&mut self, losses: [f64; NUM_TASKS]) {
        for (h, l) in self.history.iter_mut().zip(losses) {
            h[0] = h[1];
            h[1] = l;
        }
        self.t += 1;
        let (a, b) = dwa_weights(self);
        self.lambda = [a, b];
    }
}

/// Task weights from the last two recorded losses: `w_k = L_k(t-1)/L_k(t-2)`,
/// `λ_k = K·softmax(w / T)_k`. Before two records both weights are 1.
pub fn dwa_weights(state: &TaskWeightState) -> (f64, f64) {
    if state.t < 2 {
        return (1.0, 1.0);
    }
    let w: Vec<f64> = state
        .history
        .iter()
        .enumerate()
        .map(|(k, h)| {
            if h[0] == 0.0 {
                log::warn!("task {} loss history has a zero denominator; using a neutral ratio", k + 1);
                1.0
            } else {
                h[1] / h[0]
            }
        })
        .collect();
    let top = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|x| ((x - top) / state.temperature).exp()).collect();
    let sum: f64 = e.iter().sum();
    let k = NUM_TASKS as f64;
    (k * e[0] / sum, k * e[1] / sum)
}

/// `λ_1·L_cap + λ_2·L_det`, rejecting non-finite inputs.
pub fn total_loss(l_cap: f64, l_det: f64, lambda: (f64, f64)) -> Result<f64> {
    if !l_cap.is_finite() || !l_det.is_finite() {
        return Err(Error::NonFinite(format!("losses cap={l_cap} det={l_det}")));
    }
    Ok(lambda.0 * l_cap + lambda.1 * l_det)
}
