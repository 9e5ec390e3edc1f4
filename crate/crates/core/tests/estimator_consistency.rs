//! Monte-Carlo estimators against the exact tabular oracle.
//!
//! The tabular environment ends each episode with probability `1 − γ` after
//! every step, so undiscounted reward-to-go sampled there is an unbiased
//! stand-in for the discounted `Q_δ` and both the attack direction and the
//! training gradient can be compared with closed-form values.

use uaplab::attacks::{reward_uap, AttackConfig, Estimator};
use uaplab::mdp::{rollout_batch, DifferentiablePolicy, RolloutOptions};
use uaplab::oracle::{chain3, grad_j_analytic, score_weights, suite_fixture, TabularDeltaMdp, TabularEnv};
use uaplab::policy::PolicyNet;
use uaplab::train::{batch_gradient, GradientWeights};
use uaplab::vector::{axpy, cosine};

fn attack_direction_cosine(m: &TabularDeltaMdp, trajectories: usize, seed: u64) -> f64 {
    let env = TabularEnv::new(m);
    let cfg = AttackConfig { estimator: Estimator::RewardToGo, gamma: 1.0, n: 1, l: trajectories, seed, ..AttackConfig::default() };
    let result = reward_uap(&m.policy, &env, &cfg).unwrap();
    // the update is −α·direction; the descent direction of J is −∇J
    let update: Vec<f64> = result.steps[0].direction.iter().map(|v| -v).collect();
    let descent: Vec<f64> = grad_j_analytic(m).unwrap().iter().map(|v| -v).collect();
    cosine(&update, &descent)
}

#[test]
fn reward_to_go_direction_matches_exact_gradient_on_chain3() {
    let c = attack_direction_cosine(&chain3(), 10_000, 11);
    assert!(c >= 0.9, "cosine {c}");
}

#[test]
fn reward_to_go_direction_on_random_fixtures() {
    for i in 0..3 {
        let m = suite_fixture(5, i).unwrap();
        let m = m.with_delta(vec![0.0; m.dim()]);
        let c = attack_direction_cosine(&m, 10_000, 100 + i as u64);
        assert!(c >= 0.9, "fixture {i}: cosine {c}");
    }
}

#[test]
fn direction_improves_with_samples() {
    let m = suite_fixture(8, 4).unwrap();
    let m = m.with_delta(vec![0.0; m.dim()]);
    let small: f64 = (0..8).map(|s| attack_direction_cosine(&m, 5, s)).sum::<f64>() / 8.0;
    let large = attack_direction_cosine(&m, 20_000, 99);
    assert!(large > small, "{large} vs {small}");
}

/// Exact `∇θ J` for a network policy acting on tabular observations.
fn exact_parameter_gradient(m: &TabularDeltaMdp, net: &PolicyNet) -> Vec<f64> {
    let pi: Vec<Vec<f64>> = m.observations.iter().map(|o| net.probs(o).unwrap()).collect();
    let w = score_weights(&m.mdp, &pi).unwrap();
    let mut total = vec![0.0; net.params().param_count()];
    for (s, o) in m.observations.iter().enumerate() {
        for (a, weight) in w[s].iter().enumerate() {
            axpy(*weight, &net.grad_logp_params(o, a).unwrap().to_flat(), &mut total);
        }
    }
    total
}

#[test]
fn baselined_reinforce_is_unbiased_on_tabular_fixture() {
    let m = chain3();
    let mut net = PolicyNet::new(2, &[8], 2, 4).unwrap();
    // a non-trivial baseline; any state-dependent baseline must leave the policy term unbiased
    let mut flat = net.params().to_flat();
    let n = flat.len();
    for (i, v) in flat[n - 9..].iter_mut().enumerate() {
        *v = 0.3 * (i as f64 - 4.0);
    }
    net.params_mut().set_flat(&flat).unwrap();
    let exact = exact_parameter_gradient(&m, &net);

    let env = TabularEnv::new(&m);
    let episodes: Vec<(usize, u64)> = (0..100_000u64).map(|i| (0, i)).collect();
    let trajectories = rollout_batch(&env, &net, None, &episodes, &RolloutOptions::default()).unwrap();
    let w = GradientWeights { gamma: 1.0, entropy_coef: 0.0, value_coef: 0.0, baseline: true };
    let mc = batch_gradient(&net, &trajectories, &w).unwrap().to_flat();
    let c = cosine(&mc, &exact);
    assert!(c >= 0.95, "cosine {c}");
}
