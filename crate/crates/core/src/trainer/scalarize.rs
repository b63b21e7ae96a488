//! Scalarization of per-objective returns: linear weighting, Tchebycheff
//! worst-case value, its smooth softmax relaxation, and the online
//! mirror-descent state that adapts objective weights during training.

use crate::error::{Error, Result};
use crate::numkernel::softmax;
use crate::simplex::PreferenceVector;

/// Which scalar objective an oracle or sweep optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scalarizer {
    Linear,
    Tch,
}

/// `sum_i lambda_i * R_i`.
pub fn linear_scalarize(rewards: &[f64], lambda: &PreferenceVector) -> Result<f64> {
    if rewards.len() != lambda.dim() {
        return Err(Error::InvalidInput(format!(
            "{} rewards for {} objectives",
            rewards.len(),
            lambda.dim()
        )));
    }
    Ok(rewards.iter().zip(lambda.weights()).map(|(r, l)| r * l).sum())
}

/// Worst-case weighted gap `min_i lambda_i * (R_i - z*_i)`, taken over the
/// coordinates with positive preference mass. Zero-weight objectives are
/// excluded: they would otherwise pin the min at a constant zero.
pub fn tch_value(rewards: &[f64], lambda: &PreferenceVector, z_star: &[f64]) -> Result<f64> {
    if rewards.len() != lambda.dim() || z_star.len() != lambda.dim() {
        return Err(Error::InvalidInput(format!(
            "tch dimensions disagree: {} rewards, {} objectives, {} reference entries",
            rewards.len(),
            lambda.dim(),
            z_star.len()
        )));
    }
    let mut best = f64::INFINITY;
    for ((r, &l), z) in rewards.iter().zip(lambda.weights()).zip(z_star) {
        if l > 0.0 {
            best = best.min(l * (r - z));
        }
    }
    if best == f64::INFINITY {
        return Err(Error::InvalidInput("preference has no positive coordinate".into()));
    }
    Ok(best)
}

/// Smoothed worst-objective indicator: `softmax(lambda_i * (z*_i - R_i) / mu)`.
/// At mu = 1 this is the plain exponential weighting; small mu approaches a
/// one-hot on the worst objective, large mu approaches uniform.
pub fn stch_weights(
    rewards: &[f64],
    lambda: &PreferenceVector,
    z_star: &[f64],
    mu: f64,
) -> Result<Vec<f64>> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::InvalidInput(format!("smoothing mu {mu} must be positive")));
    }
    if rewards.len() != lambda.dim() || z_star.len() != lambda.dim() {
        return Err(Error::InvalidInput("stch dimensions disagree".into()));
    }
    let scores: Vec<f64> = rewards
        .iter()
        .zip(lambda.weights())
        .zip(z_star)
        .map(|((r, &l), z)| l * (z - r) / mu)
        .collect();
    softmax(&scores, 1.0)
}

/// Step-size schedule for the mirror-descent weight update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaSchedule {
    /// Fixed step size.
    Constant,
    /// `alpha / t` decay, satisfying the usual stochastic-approximation
    /// conditions.
    RobbinsMonro,
}

/// Whether the preference weight multiplies the gap inside the update
/// exponent. The literal published update carries lambda; the alternative
/// applies the raw gap only. `FixedWeights` disables the update entirely,
/// turning the mixed advantage into plain linear scalarization at whatever
/// weights the state was built with (the ablation baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmdUpdateRule {
    WithLambda,
    GapOnly,
    FixedWeights,
}

/// Mirror-descent state over objective weights in log space.
#[derive(Debug, Clone)]
pub struct OmdState {
    pub log_w: Vec<f64>,
    pub alpha: f64,
    pub z_star: Vec<f64>,
    pub smoothing_mu: f64,
    pub schedule: AlphaSchedule,
    pub rule: OmdUpdateRule,
    /// Completed update count (drives the Robbins-Monro denominator).
    pub t: u64,
}

impl OmdState {
    /// Uniform weights over `z_star.len()` objectives.
    pub fn new(z_star: Vec<f64>, alpha: f64) -> Result<Self> {
        if z_star.is_empty() {
            return Err(Error::InvalidInput("reference point is empty".into()));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidInput(format!("alpha {alpha} must be positive")));
        }
        let n = z_star.len();
        Ok(Self {
            log_w: vec![-(n as f64).ln(); n],
            alpha,
            z_star,
            smoothing_mu: 1.0,
            schedule: AlphaSchedule::Constant,
            rule: OmdUpdateRule::WithLambda,
            t: 0,
        })
    }

    pub fn with_schedule(mut self, schedule: AlphaSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn with_rule(mut self, rule: OmdUpdateRule) -> Self {
        self.rule = rule;
        self
    }

    /// Pins the weights to `w` and switches to the non-adaptive rule, so the
    /// mixed advantage stays a fixed linear scalarization.
    pub fn with_fixed_weights(mut self, w: &[f64]) -> Result<Self> {
        if w.len() != self.log_w.len() {
            return Err(Error::InvalidInput(format!(
                "{} fixed weights for {} objectives",
                w.len(),
                self.log_w.len()
            )));
        }
        if w.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
            return Err(Error::InvalidInput("fixed weights must be positive".into()));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("fixed weights sum to {sum}, not 1")));
        }
        self.log_w = w.iter().map(|x| x.ln()).collect();
        self.rule = OmdUpdateRule::FixedWeights;
        Ok(self)
    }

    /// Current simplex-valued weights.
    pub fn weights(&self) -> Vec<f64> {
        let max = self.log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.log_w.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|e| e / sum).collect()
    }
}

/// One multiplicative-weights step: `log w_i += alpha_t * lambda_i * (z*_i -
/// R_i)`, then renormalization so the weights sum to one exactly.
pub fn omd_update(
    state: &OmdState,
    lambda: &PreferenceVector,
    batch_mean_rewards: &[f64],
) -> Result<OmdState> {
    let n = state.log_w.len();
    if lambda.dim() != n || batch_mean_rewards.len() != n {
        return Err(Error::InvalidInput(format!(
            "omd dimensions disagree: {n} weights, {} objectives, {} rewards",
            lambda.dim(),
            batch_mean_rewards.len()
        )));
    }
    for r in batch_mean_rewards {
        if !r.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite mean reward {r}")));
        }
    }
    let mut next = state.clone();
    next.t = state.t + 1;
    if state.rule == OmdUpdateRule::FixedWeights {
        return Ok(next);
    }
    let alpha_t = match state.schedule {
        AlphaSchedule::Constant => state.alpha,
        AlphaSchedule::RobbinsMonro => state.alpha / next.t as f64,
    };
    for i in 0..n {
        let gap = state.z_star[i] - batch_mean_rewards[i];
        let factor = match state.rule {
            OmdUpdateRule::WithLambda => lambda.weights()[i],
            OmdUpdateRule::GapOnly => 1.0,
            OmdUpdateRule::FixedWeights => unreachable!("handled above"),
        };
        next.log_w[i] += alpha_t * factor * gap;
    }
    // Renormalize in log space so exp(log_w) sums to one.
    let max = next.log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + next.log_w.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    for l in next.log_w.iter_mut() {
        *l -= lse;
    }
    Ok(next)
}

/// Per-step weighted advantage `A_t = sum_i w_i * adv[t][i]`.
pub fn mixed_advantage(advantages: &[Vec<f64>], w: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(advantages.len());
    for (t, row) in advantages.iter().enumerate() {
        if row.len() != w.len() {
            return Err(Error::InvalidInput(format!(
                "advantage row {t} has {} objectives, weights have {}",
                row.len(),
                w.len()
            )));
        }
        out.push(row.iter().zip(w).map(|(a, wi)| a * wi).sum());
    }
    Ok(out)
}
