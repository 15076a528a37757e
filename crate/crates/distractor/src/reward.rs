//! Reward assignment for training labels.
//!
//! Gold distractors earn the full reward scale. Generated candidates earn
//! `gen_coefficient * scale * confidence`: the discount keeps human
//! annotations strictly ahead of model output of equal confidence, and the
//! confidence factor shrinks rewards for candidates the generator itself was
//! unsure about. Uniform mode drops the discount (coefficient 1.0), which is
//! the usual ablation against the dual scheme.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::CandidatePool;

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("reward scale must be positive and finite, got {0}")]
    NonPositiveScale(f64),
    #[error("confidence must lie in [0, 1], got {0}")]
    ConfidenceOutOfRange(f64),
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// Discounted, confidence-weighted rewards for generated labels.
    Dual,
    /// Generated labels keep the full coefficient (1.0); ablation mode.
    Uniform,
}

impl fmt::Display for RewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewardMode::Dual => write!(f, "dual"),
            RewardMode::Uniform => write!(f, "uniform"),
        }
    }
}

impl FromStr for RewardMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dual" => Ok(RewardMode::Dual),
            "uniform" => Ok(RewardMode::Uniform),
            other => Err(format!("unknown reward mode {other:?} (expected dual or uniform)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Discount for generated labels in dual mode. Default: 0.9.
    pub gen_coefficient: f64,
    pub mode: RewardMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            gen_coefficient: 0.9,
            mode: RewardMode::Dual,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !self.gen_coefficient.is_finite()
            || self.gen_coefficient <= 0.0
            || self.gen_coefficient > 1.0
        {
            return Err(RewardError::InvalidConfig(format!(
                "gen_coefficient must lie in (0, 1], got {}",
                self.gen_coefficient
            )));
        }
        Ok(())
    }

    /// Coefficient actually applied to generated labels under the mode.
    pub fn effective_coefficient(&self) -> f64 {
        match self.mode {
            RewardMode::Dual => self.gen_coefficient,
            RewardMode::Uniform => 1.0,
        }
    }
}

fn check_scale(scale: f64) -> Result<(), RewardError> {
    if !scale.is_finite() || scale <= 0.0 {
        return Err(RewardError::NonPositiveScale(scale));
    }
    Ok(())
}

/// Reward for a gold label: `1 * scale`.
pub fn reward_gold(scale: f64) -> Result<f64, RewardError> {
    check_scale(scale)?;
    Ok(scale)
}

/// Reward for a generated label: `coefficient * scale * confidence`.
pub fn reward_generated(
    scale: f64,
    confidence: f64,
    config: &RewardConfig,
) -> Result<f64, RewardError> {
    check_scale(scale)?;
    if !confidence.is_finite() || !(0.0..=1.0).contains(&confidence) {
        return Err(RewardError::ConfidenceOutOfRange(confidence));
    }
    Ok(config.effective_coefficient() * scale * confidence)
}

/// Where a training label came from; generated labels carry the generator's
/// confidence, gold labels by construction have none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Gold,
    Generated { confidence: f64 },
}

/// A pool entry with its assigned reward.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabeledDistractor {
    pub token: String,
    pub origin: Origin,
    pub reward: f64,
}

/// Labels every pool entry at the given scale: gold entries first, generated
/// entries after, both in pool order.
pub fn assign_rewards(
    pool: &CandidatePool,
    scale: f64,
    config: &RewardConfig,
) -> Result<Vec<LabeledDistractor>, RewardError> {
    let mut labeled = Vec::with_capacity(pool.gold.len() + pool.generated.len());
    for token in &pool.gold {
        labeled.push(LabeledDistractor {
            token: token.clone(),
            origin: Origin::Gold,
            reward: reward_gold(scale)?,
        });
    }
    for cand in &pool.generated {
        labeled.push(LabeledDistractor {
            token: cand.token.clone(),
            origin: Origin::Generated {
                confidence: cand.confidence,
            },
            reward: reward_generated(scale, cand.confidence, config)?,
        });
    }
    Ok(labeled)
}
