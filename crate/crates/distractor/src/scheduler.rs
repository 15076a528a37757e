//! Loss-driven reward-scale schedule.
//!
//! The reward scale tracks how hard training currently is: it rises toward
//! `max_scale` while the recent average loss sits above `threshold` and
//! relaxes toward `base_scale` as the loss falls below it, moving along a
//! sigmoid with steepness `alpha`. Recent loss is the mean over a sliding
//! window of per-batch values. A constant mode pins the scale for ablations.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SchedulerError {
    #[error("invalid scheduler config: {0}")]
    InvalidConfig(String),
    #[error("observed loss must be finite, got {0}")]
    NonFiniteLoss(f64),
}

/// Numerically stable logistic function. Branching on the sign keeps the
/// exponential argument non-positive, so it never overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    Adaptive,
    Constant,
}

impl fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScaleMode::Adaptive => write!(f, "adaptive"),
            ScaleMode::Constant => write!(f, "constant"),
        }
    }
}

impl FromStr for ScaleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adaptive" => Ok(ScaleMode::Adaptive),
            "constant" => Ok(ScaleMode::Constant),
            other => Err(format!("unknown scale mode {other:?} (expected adaptive or constant)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Lower bound of the adaptive scale. Default: 0.1.
    pub base_scale: f64,
    /// Upper bound of the adaptive scale. Default: 0.2.
    pub max_scale: f64,
    /// Sigmoid steepness. Default: 5.0.
    pub alpha: f64,
    /// Loss level at which the scale sits exactly midway. Default: 1.0.
    pub threshold: f64,
    pub mode: ScaleMode,
    /// Scale used in constant mode. Default: 0.15.
    pub constant_scale: f64,
    /// Sliding-window length for the recent-loss average. Default: 100.
    pub loss_window: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            base_scale: 0.1,
            max_scale: 0.2,
            alpha: 5.0,
            threshold: 1.0,
            mode: ScaleMode::Adaptive,
            constant_scale: 0.15,
            loss_window: 100,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        let finite = [
            self.base_scale,
            self.max_scale,
            self.alpha,
            self.threshold,
            self.constant_scale,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(SchedulerError::InvalidConfig(
                "all scheduler parameters must be finite".to_string(),
            ));
        }
        if self.base_scale <= 0.0 {
            return Err(SchedulerError::InvalidConfig(format!(
                "base_scale must be > 0, got {}",
                self.base_scale
            )));
        }
        if self.max_scale <= self.base_scale {
            return Err(SchedulerError::InvalidConfig(format!(
                "max_scale must exceed base_scale, got {} <= {}",
                self.max_scale, self.base_scale
            )));
        }
        if self.alpha <= 0.0 {
            return Err(SchedulerError::InvalidConfig(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.constant_scale <= 0.0 {
            return Err(SchedulerError::InvalidConfig(format!(
                "constant_scale must be > 0, got {}",
                self.constant_scale
            )));
        }
        if self.loss_window == 0 {
            return Err(SchedulerError::InvalidConfig(
                "loss_window must be at least 1".to_string(),
            ));
        }
        Ok(())
    }

    /// Reward scale for a given recent average loss.
    ///
    /// Adaptive mode: `base + (max - base) * sigmoid(alpha * (loss - threshold))`,
    /// clamped into `[base, max]` so saturation never escapes the band.
    /// Constant mode ignores the loss entirely.
    pub fn scale_for_loss(&self, avg_loss: f64) -> f64 {
        match self.mode {
            ScaleMode::Constant => self.constant_scale,
            ScaleMode::Adaptive => {
                let span = self.max_scale - self.base_scale;
                let s = self.base_scale + span * sigmoid(self.alpha * (avg_loss - self.threshold));
                s.clamp(self.base_scale, self.max_scale)
            }
        }
    }

    /// Scale used before any loss has been observed: the band midpoint in
    /// adaptive mode (the sigmoid value at `threshold`), the pinned value in
    /// constant mode.
    pub fn initial_scale(&self) -> f64 {
        self.scale_for_loss(self.threshold)
    }
}

/// FIFO window of recent per-batch losses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedulerState {
    window: VecDeque<f64>,
    capacity: usize,
}

impl SchedulerState {
    pub fn new(capacity: usize) -> Self {
        Self {
            window: VecDeque::with_capacity(capacity.min(4096)),
            capacity: capacity.max(1),
        }
    }

    /// Pushes one batch loss, evicting the oldest once the window is full.
    pub fn observe(&mut self, loss: f64) -> Result<(), SchedulerError> {
        if !loss.is_finite() {
            return Err(SchedulerError::NonFiniteLoss(loss));
        }
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(loss);
        Ok(())
    }

    /// Exact mean of the window contents, oldest first; `None` while empty.
    pub fn avg_loss(&self) -> Option<f64> {
        if self.window.is_empty() {
            return None;
        }
        let sum: f64 = self.window.iter().sum();
        Some(sum / self.window.len() as f64)
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }
}
