//! Length and keyword-rank penalties and the composite beam score.
//!
//! A beam's score is its cumulative log-probability divided by
//! `lp(len) * rp`, where `lp` peaks at the target length `r` and `rp`
//! rewards well-ranked keywords placed early in the sequence.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PenaltyError {
    #[error("target length r must be >= 1")]
    TargetLength,
    #[error("alpha must be finite and >= 0, got {0}")]
    Alpha(f64),
    #[error("beta must be finite, got {0}")]
    Beta(f64),
    #[error("position_scale must be finite and > 0, got {0}")]
    PositionScale(f64),
}

/// How several keyword matches in one beam combine into one rank penalty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankCombine {
    #[default]
    Max,
    Product,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyParams {
    /// Target length in decoder subtokens.
    pub r: u32,
    pub alpha: f64,
    pub beta: f64,
    pub position_scale: f64,
    pub combine: RankCombine,
}

impl Default for PenaltyParams {
    fn default() -> Self {
        Self {
            r: 12,
            alpha: 0.6,
            beta: 1.5,
            position_scale: 3.0,
            combine: RankCombine::Max,
        }
    }
}

impl PenaltyParams {
    pub fn validate(&self) -> Result<(), PenaltyError> {
        if self.r < 1 {
            return Err(PenaltyError::TargetLength);
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(PenaltyError::Alpha(self.alpha));
        }
        if !self.beta.is_finite() {
            return Err(PenaltyError::Beta(self.beta));
        }
        if !(self.position_scale > 0.0 && self.position_scale.is_finite()) {
            return Err(PenaltyError::PositionScale(self.position_scale));
        }
        Ok(())
    }
}

/// Triangular length profile with its maximum at `r`.
pub fn theta(len: usize, r: u32) -> i64 {
    let (len, r) = (len as i64, i64::from(r));
    if len < r {
        len
    } else {
        2 * r - len
    }
}

/// Lowest θ fed into the length penalty; keeps the base of the power at ≥ 1
/// for lengths far beyond `2r`.
const THETA_FLOOR: i64 = -5;

pub fn length_penalty(len: usize, params: &PenaltyParams) -> f64 {
    let t = theta(len, params.r).max(THETA_FLOOR) as f64;
    (5.0 + t + 1.0).powf(params.alpha) / (5.0f64 + 1.0).powf(params.alpha)
}

pub fn rank_penalty(rank: u32, match_pos: usize, params: &PenaltyParams) -> f64 {
    1.0 + (-(f64::from(rank)) - match_pos as f64 / params.position_scale + params.beta).exp()
}

/// A completed keyword occurrence inside a beam.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeywordMatch {
    pub keyword_index: usize,
    pub rank: u32,
    /// 0-based index (BOS excluded) of the first subtoken of the occurrence.
    pub match_pos: usize,
}

/// Effective rank penalty; 1 when there are no matches.
pub fn effective_rank_penalty(matches: &[KeywordMatch], params: &PenaltyParams) -> f64 {
    let each = matches
        .iter()
        .map(|m| rank_penalty(m.rank, m.match_pos, params));
    match params.combine {
        RankCombine::Max => each.fold(1.0, f64::max),
        RankCombine::Product => each.product(),
    }
}

pub fn composite_score(
    cum_log_prob: f64,
    len: usize,
    matches: &[KeywordMatch],
    params: &PenaltyParams,
) -> f64 {
    cum_log_prob / (length_penalty(len, params) * effective_rank_penalty(matches, params))
}
