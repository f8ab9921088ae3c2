//! Group-relative advantages and the clipped, KL-regularized GRPO objective.
//!
//! For a group of `n` captions sampled for one image,
//!
//! ```text
//! A_i  = (R_i - mean R) / std R                      (population std)
//! L    = -(1/n) sum_i s_i + beta * (1/n) sum_i mean_t k3(ref_it - new_it)
//! s_i  = mean_t min(rho_it A_i, clip(rho_it, 1-eps, 1+eps) A_i)   token ratios
//!      = min(rho_i A_i, clip(rho_i, 1-eps, 1+eps) A_i)            sequence ratio
//! k3(d) = exp(d) - d - 1
//! ```
//!
//! Old-policy and reference log-probabilities are constants of the loss.

use crate::error::{Error, Result};
use crate::policy::{backprop, trace, PolicyParams, SampledSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatioMode {
    Token,
    Sequence,
}

impl RatioMode {
    pub fn name(self) -> &'static str {
        match self {
            RatioMode::Token => "token",
            RatioMode::Sequence => "sequence",
        }
    }

    pub fn from_name(s: &str) -> Option<RatioMode> {
        match s {
            "token" => Some(RatioMode::Token),
            "sequence" => Some(RatioMode::Sequence),
            _ => None,
        }
    }
}

/// Standardize rewards within a group; all zeros when the population
/// standard deviation is at most `eps`.
pub fn compute_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Contract(format!(
            "a group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    if std <= eps {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Single-sample KL estimate `exp(d) - d - 1` with `d = ref - new`.
pub fn k3(new_logprob: f64, ref_logprob: f64) -> f64 {
    let d = ref_logprob - new_logprob;
    d.exp() - d - 1.0
}

/// Per-token k3 averaged over the tokens of one sequence.
pub fn kl_term(new_logprobs: &[f64], ref_logprobs: &[f64]) -> Result<f64> {
    if new_logprobs.len() != ref_logprobs.len() {
        return Err(Error::Contract(format!(
            "{} new log-probabilities against {} reference ones",
            new_logprobs.len(),
            ref_logprobs.len()
        )));
    }
    if new_logprobs.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = new_logprobs
        .iter()
        .zip(ref_logprobs)
        .map(|(&n, &r)| k3(n, r))
        .sum();
    Ok(sum / new_logprobs.len() as f64)
}

/// Exact `KL(p || q)` between two categorical distributions given as log-probabilities.
pub fn categorical_kl(p_logprobs: &[f64], q_logprobs: &[f64]) -> f64 {
    p_logprobs
        .iter()
        .zip(q_logprobs)
        .filter(|(lp, _)| lp.is_finite())
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum()
}

/// `min(rho A, clip(rho, 1-eps, 1+eps) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Whether the clipped branch is the minimum (the ratio's gradient is cut).
pub fn clip_binds(ratio: f64, advantage: f64, epsilon: f64) -> bool {
    (advantage > 0.0 && ratio > 1.0 + epsilon) || (advantage < 0.0 && ratio < 1.0 - epsilon)
}

/// Everything the loss needs about one image's rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub image_id: u64,
    pub generator_seed: u64,
    pub samples: Vec<SampledSequence>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Per-token log-probabilities under the frozen reference policy.
    pub ref_logprobs: Vec<Vec<f64>>,
}

impl RolloutGroup {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub epsilon: f64,
    pub beta: f64,
    pub ratio_mode: RatioMode,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub clipped_tokens: usize,
    pub tokens: usize,
}

/// Loss of one group at `params`; its gradient, scaled by `scale`, is added into `grad`.
pub fn grpo_loss(
    group: &RolloutGroup,
    features: &[f64],
    params: &PolicyParams,
    config: &LossConfig,
    scale: f64,
    grad: &mut [f64],
) -> Result<LossStats> {
    let n = group.len() as f64;
    let numerical = |detail: String| Error::Numerical { step: 0, detail };
    let mut stats = LossStats::default();
    for (i, sample) in group.samples.iter().enumerate() {
        let tr = trace(params, features, &sample.caption);
        let new = &tr.logprobs;
        let old = &sample.logprobs;
        let len = new.len() as f64;
        let adv = group.advantages[i];
        if let Some(bad) = new.iter().find(|v| !v.is_finite()) {
            return Err(numerical(format!(
                "image {} rollout {i}: log-probability {bad}",
                group.image_id
            )));
        }
        let mut weights = vec![0.0; new.len()];
        match config.ratio_mode {
            RatioMode::Token => {
                let mut s = 0.0;
                for t in 0..new.len() {
                    let ratio = (new[t] - old[t]).exp();
                    s += clipped_surrogate(ratio, adv, config.epsilon);
                    if clip_binds(ratio, adv, config.epsilon) {
                        stats.clipped_tokens += 1;
                    } else {
                        weights[t] = -ratio * adv / (n * len);
                    }
                }
                stats.surrogate += s / (len * n);
            }
            RatioMode::Sequence => {
                let ratio = (new.iter().sum::<f64>() - old.iter().sum::<f64>()).exp();
                stats.surrogate += clipped_surrogate(ratio, adv, config.epsilon) / n;
                if clip_binds(ratio, adv, config.epsilon) {
                    stats.clipped_tokens += new.len();
                } else {
                    weights.iter_mut().for_each(|w| *w = -ratio * adv / n);
                }
            }
        }
        if config.beta > 0.0 {
            let refs = &group.ref_logprobs[i];
            stats.kl += kl_term(new, refs)? / n;
            for (t, w) in weights.iter_mut().enumerate() {
                let d = refs[t] - new[t];
                *w += config.beta * (1.0 - d.exp()) / (n * len);
            }
        }
        stats.tokens += new.len();
        if scale != 0.0 {
            weights.iter_mut().for_each(|w| *w *= scale);
            backprop(params, features, &sample.caption, &tr, &weights, grad);
        }
    }
    stats.loss = -stats.surrogate + config.beta * stats.kl;
    if !stats.loss.is_finite() {
        return Err(numerical(format!(
            "image {}: loss {} (surrogate {}, kl {})",
            group.image_id, stats.loss, stats.surrogate, stats.kl
        )));
    }
    Ok(stats)
}
