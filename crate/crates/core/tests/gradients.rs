mod common;

use common::*;
use cyclecap::grpo::RatioMode;
use cyclecap::policy::grad_logprob;

#[test]
fn logprob_gradient_matches_central_differences() {
    for seed in [1, 2] {
        let fx = fixture(seed);
        let g = grad_logprob(&fx.params, &fx.features, &fx.caption);
        let mut worst: f64 = 0.0;
        for i in random_coords(g.len(), 200, seed) {
            let fd = fd_logprob(&fx, i);
            worst = worst.max(rel_err(g[i], fd));
        }
        assert!(worst < 1e-4, "seed {seed}: worst relative error {worst:e}");
    }
}

#[test]
fn loss_gradient_at_unit_ratio() {
    for mode in [RatioMode::Token, RatioMode::Sequence] {
        let fx = fixture(3);
        let reference = perturbed(&fx.params, 0.05, 1);
        let group = group_for(&fx, &fx.params, &reference, 6, 3);
        let cfg = loss_config(mode, 0.04);
        let base = loss_at(&group, &fx, &fx.params, &cfg);
        assert_eq!(base.clipped_tokens, 0);
        assert!(
            (base.surrogate).abs() < 1e-12,
            "mean advantage is zero at rho = 1"
        );
        let c = check_loss_gradient(&group, &fx, &fx.params, &cfg, 120, 3);
        assert_eq!(c.checked, 120);
        assert!(
            c.worst < 1e-3,
            "{mode:?}: worst relative error {:e}",
            c.worst
        );
    }
}

#[test]
fn loss_gradient_with_active_clipping() {
    for mode in [RatioMode::Token, RatioMode::Sequence] {
        let fx = fixture(4);
        let old = perturbed(&fx.params, 0.02, 2);
        let group = group_for(&fx, &old, &fx.params, 8, 4);
        let cfg = loss_config(mode, 0.04);
        let c = check_loss_gradient(&group, &fx, &fx.params, &cfg, 120, 4);
        assert!(c.clipped_tokens > 0, "{mode:?}: no clipping in this state");
        assert!(c.clipped_tokens < c.tokens, "{mode:?}: everything clipped");
        assert_eq!(c.checked, 120);
        assert!(
            c.worst < 1e-3,
            "{mode:?}: worst relative error {:e}",
            c.worst
        );
    }
}

#[test]
fn first_inner_epoch_without_kl_is_advantage_weighted_likelihood() {
    let fx = fixture(5);
    let group = group_for(&fx, &fx.params, &fx.params, 5, 5);
    let cfg = loss_config(RatioMode::Token, 0.0);
    let stats = loss_at(&group, &fx, &fx.params, &cfg);
    assert!(stats.loss.abs() < 1e-12);
    let g = analytic_loss_grad(&group, &fx, &fx.params, &cfg);
    // -(1/n) sum_i A_i / L_i * grad log pi(y_i), built from whole-sequence gradients.
    let n = group.samples.len() as f64;
    let mut expect = vec![0.0; g.len()];
    for (s, a) in group.samples.iter().zip(&group.advantages) {
        let gl = grad_logprob(&fx.params, &fx.features, &s.caption);
        let len = s.logprobs.len() as f64;
        for (e, v) in expect.iter_mut().zip(gl) {
            *e -= a / (n * len) * v;
        }
    }
    for (a, b) in g.iter().zip(&expect) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn identity_policy_has_zero_loss_and_kl_gradient() {
    let fx = fixture(6);
    let group = group_for(&fx, &fx.params, &fx.params, 4, 6);
    let mut flat = group.clone();
    flat.advantages = vec![0.0; 4];
    let cfg = loss_config(RatioMode::Token, 0.04);
    let stats = loss_at(&flat, &fx, &fx.params, &cfg);
    assert_eq!(stats.loss, 0.0);
    assert!(analytic_loss_grad(&flat, &fx, &fx.params, &cfg)
        .iter()
        .all(|&v| v == 0.0));
}
