//! Image-agnostic warm start for the caption policy.
//!
//! Before reinforcement fine-tuning, the policy is fitted by teacher forcing
//! to canonical captions of an independent set of scenes, with the image
//! features held at zero. The result knows the caption grammar and the
//! marginal statistics of scene descriptions but nothing about any particular
//! image; grounding has to come from the cycle reward.

use crate::caption::{canonical_caption, Vocab};
use crate::error::{Error, Result};
use crate::policy::{backprop, trace, PolicyParams};
use crate::seed::mix;
use crate::trainer::{AdamState, TrainConfig};
use crate::world::{sample_dataset, WorldConfig};

const WARM_DOMAIN: u64 = 0x5741_524D;

#[derive(Debug, Clone, PartialEq)]
pub struct WarmStartConfig {
    /// Adam steps; 0 disables the warm start.
    pub steps: u64,
    pub scenes: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        WarmStartConfig {
            steps: 300,
            scenes: 256,
            batch_size: 32,
            learning_rate: 3e-3,
        }
    }
}

impl WarmStartConfig {
    pub fn disabled() -> Self {
        WarmStartConfig {
            steps: 0,
            ..Self::default()
        }
    }
}

/// Fit `params` in place; returns the mean per-token negative log-likelihood
/// of the last batch.
pub fn warm_start(
    params: &mut PolicyParams,
    vocab: &Vocab,
    world: &WorldConfig,
    cfg: &WarmStartConfig,
    seed: u64,
) -> Result<f64> {
    if cfg.steps == 0 {
        return Ok(f64::NAN);
    }
    if cfg.scenes == 0 || cfg.batch_size == 0 {
        return Err(Error::Config(
            "warm start needs scenes and a positive batch size".into(),
        ));
    }
    let scenes = sample_dataset(mix(&[WARM_DOMAIN, seed]), cfg.scenes, world)?;
    let captions = scenes
        .iter()
        .map(|s| canonical_caption(s, vocab))
        .collect::<Result<Vec<_>>>()?;
    let zeros = vec![0.0; params.dims().features];
    let adam_cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut adam = AdamState::new(params.as_slice().len());
    let mut grad = vec![0.0; params.as_slice().len()];
    let mut last = 0.0;
    for step in 0..cfg.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        last = 0.0;
        let b = cfg.batch_size as f64;
        for k in 0..cfg.batch_size {
            let i = ((step as usize) * cfg.batch_size + k) % captions.len();
            let cap = &captions[i];
            let tr = trace(params, &zeros, cap);
            let len = tr.logprobs.len() as f64;
            last -= tr.logprobs.iter().sum::<f64>() / (len * b);
            let weights = vec![-1.0 / (len * b); tr.logprobs.len()];
            backprop(params, &zeros, cap, &tr, &weights, &mut grad);
        }
        let lr = cfg.learning_rate * (1.0 - step as f64 / cfg.steps as f64);
        adam.update(params.as_mut_slice(), &grad, lr, &adam_cfg);
    }
    if !params.is_finite() || !last.is_finite() {
        return Err(Error::Numerical {
            step: 0,
            detail: format!("warm start diverged (loss {last})"),
        });
    }
    Ok(last)
}
