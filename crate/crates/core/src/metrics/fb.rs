use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Raw next-token probabilities of "he" and "she".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenderProbe {
    p_he: f64,
    p_she: f64,
}

/// Slack for rounding in probabilities that come out of a softmax.
const PROB_SLACK: f64 = 1e-12;

impl GenderProbe {
    pub fn new(p_he: f64, p_she: f64) -> Result<Self, MetricsError> {
        for (name, p) in [("p_he", p_he), ("p_she", p_she)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(MetricsError::Validation(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        if p_he + p_she > 1.0 + PROB_SLACK {
            return Err(MetricsError::Validation(format!(
                "p_he + p_she = {} exceeds 1",
                p_he + p_she
            )));
        }
        Ok(GenderProbe { p_he, p_she })
    }

    /// For values read straight off a softmax, which satisfy the invariants
    /// up to rounding.
    pub(crate) fn from_model(p_he: f64, p_she: f64) -> Self {
        debug_assert!(Self::new(p_he, p_she).is_ok(), "{p_he} {p_she}");
        GenderProbe { p_he, p_she }
    }

    pub fn p_he(&self) -> f64 {
        self.p_he
    }

    pub fn p_she(&self) -> f64 {
        self.p_she
    }
}

/// Real-world gender shares of a profession derived from its factual score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactualShares {
    pub f_he: f64,
    pub f_she: f64,
    pub f_score: f64,
}

pub fn factual_shares(f_score: f64) -> Result<FactualShares, MetricsError> {
    if !(-1.0..=1.0).contains(&f_score) {
        return Err(MetricsError::Validation(format!(
            "f_score {f_score} is outside [-1, 1]"
        )));
    }
    Ok(FactualShares {
        f_he: (1.0 + f_score) / 2.0,
        f_she: (1.0 - f_score) / 2.0,
        f_score,
    })
}

impl FactualShares {
    /// Rebuilds shares from a `(f_he, f_she)` pair that sums to one.
    pub fn from_pair(f_he: f64, f_she: f64) -> Result<Self, MetricsError> {
        if !(0.0..=1.0).contains(&f_he) || !(0.0..=1.0).contains(&f_she) {
            return Err(MetricsError::Validation(format!(
                "shares ({f_he}, {f_she}) outside [0, 1]"
            )));
        }
        if (f_he + f_she - 1.0).abs() > 1e-12 {
            return Err(MetricsError::Validation(format!(
                "shares ({f_he}, {f_she}) do not sum to 1"
            )));
        }
        factual_shares(f_he - f_she)
    }
}

/// `|p_he - f_he| + |p_she - f_she|`, in `[0, 2]`.
pub fn fb_score(probe: &GenderProbe, shares: &FactualShares) -> f64 {
    (probe.p_he - shares.f_he).abs() + (probe.p_she - shares.f_she).abs()
}
