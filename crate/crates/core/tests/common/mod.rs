//! Fixtures and finite-difference oracles shared by the integration tests.
#![allow(dead_code)]

use cyclecap::caption::canonical_caption;
use cyclecap::grpo::{
    compute_advantages, grpo_loss, LossConfig, LossStats, RatioMode, RolloutGroup,
};
use cyclecap::policy::{logprob_of, sample_caption};
use cyclecap::render::render_scene;
use cyclecap::seed::rng_for;
use cyclecap::world::sample_scene;
use cyclecap::{
    Caption, ImageEncoder, PolicyDims, PolicyParams, RendererConfig, Vocab, WorldConfig,
};
use rand::Rng;

pub const H: f64 = 1e-5;

pub struct Fixture {
    pub vocab: Vocab,
    pub params: PolicyParams,
    pub features: Vec<f64>,
    pub caption: Caption,
}

/// Random policy, features of a rendered scene and its canonical caption.
/// Weights are widened beyond the default init so every layer carries
/// gradient of useful size.
pub fn fixture(seed: u64) -> Fixture {
    let vocab = Vocab::new(8);
    let mut params = PolicyParams::init(PolicyDims::new(vocab.len()), seed);
    let mut rng = rng_for(&[0xF1D0, seed]);
    for v in params.as_mut_slice() {
        *v = *v * 6.0 + rng.random_range(-0.05..0.05);
    }
    let scene = sample_scene(seed ^ 0x55, &WorldConfig::default()).unwrap();
    let image = render_scene(&scene, &RendererConfig::exact());
    let features = ImageEncoder::new(64, 64, 64, seed).encode(&image).unwrap();
    let caption = canonical_caption(&scene, &vocab).unwrap();
    Fixture {
        vocab,
        params,
        features,
        caption,
    }
}

pub fn with_coord(params: &PolicyParams, i: usize, delta: f64) -> PolicyParams {
    let mut p = params.clone();
    p.as_mut_slice()[i] += delta;
    p
}

/// `|a - b| / max(|a|, |b|)`, with exact agreement (including two zeros) as 0.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Coordinates spread over every parameter block: `count` draws, without replacement.
pub fn random_coords(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_for(&[0xC00D, seed]);
    rand::seq::index::sample(&mut rng, len, count).into_vec()
}

/// Central difference of the total log-likelihood at coordinate `i`.
pub fn fd_logprob(fx: &Fixture, i: usize) -> f64 {
    let up = logprob_of(&with_coord(&fx.params, i, H), &fx.features, &fx.caption).0;
    let down = logprob_of(&with_coord(&fx.params, i, -H), &fx.features, &fx.caption).0;
    (up - down) / (2.0 * H)
}

/// A rollout group sampled from `old`, with reference log-probabilities
/// under `reference` and advantages from arbitrary distinct rewards.
pub fn group_for(
    fx: &Fixture,
    old: &PolicyParams,
    reference: &PolicyParams,
    n: usize,
    seed: u64,
) -> RolloutGroup {
    let samples: Vec<_> = (0..n as u64)
        .map(|i| sample_caption(old, &fx.features, &fx.vocab, seed * 1000 + i, 1.0, 24).unwrap())
        .collect();
    let mut rng = rng_for(&[0xA11, seed]);
    let rewards: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    RolloutGroup {
        image_id: 0,
        generator_seed: 0,
        advantages: compute_advantages(&rewards, 1e-8).unwrap(),
        ref_logprobs: samples
            .iter()
            .map(|s| logprob_of(reference, &fx.features, &s.caption).1)
            .collect(),
        rewards,
        samples,
    }
}

pub fn loss_at(
    group: &RolloutGroup,
    fx: &Fixture,
    params: &PolicyParams,
    cfg: &LossConfig,
) -> LossStats {
    grpo_loss(group, &fx.features, params, cfg, 0.0, &mut []).unwrap()
}

pub fn analytic_loss_grad(
    group: &RolloutGroup,
    fx: &Fixture,
    params: &PolicyParams,
    cfg: &LossConfig,
) -> Vec<f64> {
    let mut g = vec![0.0; params.as_slice().len()];
    grpo_loss(group, &fx.features, params, cfg, 1.0, &mut g).unwrap();
    g
}

pub struct LossCheck {
    pub checked: usize,
    pub worst: f64,
    pub clipped_tokens: usize,
    pub tokens: usize,
}

/// Compare the analytic loss gradient with central differences on `count`
/// coordinates. Coordinates whose ±h probes change which tokens are clipped
/// straddle a kink of the objective and are replaced by fresh draws.
pub fn check_loss_gradient(
    group: &RolloutGroup,
    fx: &Fixture,
    params: &PolicyParams,
    cfg: &LossConfig,
    count: usize,
    seed: u64,
) -> LossCheck {
    let base = loss_at(group, fx, params, cfg);
    let g = analytic_loss_grad(group, fx, params, cfg);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in random_coords(g.len(), g.len(), seed) {
        if checked == count {
            break;
        }
        let up = loss_at(group, fx, &with_coord(params, i, H), cfg);
        let down = loss_at(group, fx, &with_coord(params, i, -H), cfg);
        if up.clipped_tokens != base.clipped_tokens || down.clipped_tokens != base.clipped_tokens {
            continue;
        }
        let fd = (up.loss - down.loss) / (2.0 * H);
        worst = worst.max(rel_err(g[i], fd));
        checked += 1;
    }
    LossCheck {
        checked,
        worst,
        clipped_tokens: base.clipped_tokens,
        tokens: base.tokens,
    }
}

pub fn loss_config(mode: RatioMode, beta: f64) -> LossConfig {
    LossConfig {
        epsilon: 0.02,
        beta,
        ratio_mode: mode,
    }
}

/// Old policy perturbed away from `params` so that many ratios leave the
/// trust region.
pub fn perturbed(params: &PolicyParams, scale: f64, seed: u64) -> PolicyParams {
    let mut p = params.clone();
    let mut rng = rng_for(&[0xBEEF, seed]);
    for v in p.as_mut_slice() {
        *v += scale * rng.random_range(-1.0..1.0);
    }
    p
}
