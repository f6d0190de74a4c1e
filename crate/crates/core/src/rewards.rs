//! Scalar rewards: cosine tolerance reward, trace averaging, format reward.

use std::f64::consts::PI;

use crate::captions::{Caption, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig {
    /// Tolerance margin on the MOS scale.
    pub tolerance: f64,
    pub format_weight: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            tolerance: 1.0,
            format_weight: 1.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::invalid("rewards.tolerance must be positive"));
        }
        if !(self.format_weight >= 0.0 && self.format_weight.is_finite()) {
            return Err(Error::invalid("rewards.format_weight must be non-negative"));
        }
        Ok(())
    }
}

/// `0.5 (1 + cos(π x / t))` for `x = |pred - mos| < t`, zero beyond.
pub fn tolerance_reward(pred: f64, mos: f64, t: f64) -> Result<f64> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!("tolerance must be positive, got {t}")));
    }
    if !pred.is_finite() || !mos.is_finite() {
        return Err(Error::invalid("prediction and mos must be finite"));
    }
    let x = (pred - mos).abs();
    Ok(if x < t { 0.5 * (1.0 + (PI * x / t).cos()) } else { 0.0 })
}

/// Mean tolerance reward over the score predictions drawn from one trace.
pub fn trace_reward(scores: &[f64], mos: f64, t: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("trace reward needs at least one score"));
    }
    let mut total = 0.0;
    for &s in scores {
        total += tolerance_reward(s, mos, t)?;
    }
    Ok(total / scores.len() as f64)
}

/// 1 when the caption terminated with EOS inside the length cap and a score
/// was emitted after it.
pub fn format_reward(caption: &Caption, vocab: &Vocabulary, score_emitted: bool) -> f64 {
    let complete = caption.is_complete(vocab) && caption.len() <= vocab.max_caption_len();
    if complete && score_emitted {
        1.0
    } else {
        0.0
    }
}
