//! Exact tabular identities on the seeded fixture suite, cross-checked with
//! independent iterative solvers written here rather than the LU path.

use proptest::prelude::*;
use uaplab::mdp::{rollout_batch, RolloutOptions};
use uaplab::oracle::{
    chain3, disturbed_policy_matrix, exact_discounted_distribution, exact_j, exact_value_functions,
    gradcheck, random_fixture, suite_fixture, FixtureFile, FixtureSpec, TabularDeltaMdp, TabularEnv,
    DEFAULT_FD_STEP, MAX_ACTIONS, MAX_STATES,
};

const SUITE_SEED: u64 = 0;
const SUITE_SIZE: usize = 20;

/// Policy evaluation by repeated Bellman backups.
fn iterative_q(m: &TabularDeltaMdp) -> Vec<Vec<f64>> {
    let pi = disturbed_policy_matrix(m).unwrap();
    let (ns, na) = (m.mdp.state_count(), m.mdp.action_count());
    let mut v = vec![0.0; ns];
    // γ ≤ 0.95 so 1500 sweeps shrink the error below 1e-30 relative
    for _ in 0..1500 {
        let q = backup(m, &v);
        v = (0..ns).map(|s| (0..na).map(|a| pi[s][a] * q[s][a]).sum()).collect();
    }
    backup(m, &v)
}

fn backup(m: &TabularDeltaMdp, v: &[f64]) -> Vec<Vec<f64>> {
    let (ns, na, g) = (m.mdp.state_count(), m.mdp.action_count(), m.mdp.discount());
    (0..ns)
        .map(|s| {
            (0..na)
                .map(|a| m.mdp.reward(s, a) + g * (0..ns).map(|t| m.mdp.transition(s, a, t) * v[t]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// `d = (1 − γ) Σ_t γ^t P(s_t = ·)` by forward propagation.
fn propagated_distribution(m: &TabularDeltaMdp) -> Vec<f64> {
    let pi = disturbed_policy_matrix(m).unwrap();
    let (ns, na, g) = (m.mdp.state_count(), m.mdp.action_count(), m.mdp.discount());
    let mut p = m.mdp.initial_dist().to_vec();
    let mut d = vec![0.0; ns];
    let mut w = 1.0 - g;
    for _ in 0..1500 {
        for s in 0..ns {
            d[s] += w * p[s];
        }
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                for (t, slot) in next.iter_mut().enumerate() {
                    *slot += p[s] * pi[s][a] * m.mdp.transition(s, a, t);
                }
            }
        }
        p = next;
        w *= g;
    }
    d
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn suite_respects_size_caps() {
    for i in 0..SUITE_SIZE {
        let m = suite_fixture(SUITE_SEED, i).unwrap();
        assert!(m.mdp.state_count() <= MAX_STATES && m.mdp.action_count() <= MAX_ACTIONS);
    }
}

#[test]
fn gradcheck_suite_passes_all_identities() {
    let rows = gradcheck(SUITE_SIZE, SUITE_SEED, DEFAULT_FD_STEP).unwrap();
    assert_eq!(rows.len(), SUITE_SIZE);
    for r in &rows {
        assert!(r.bellman_residual < 1e-10, "{r:?}");
        assert!(r.flow_residual < 1e-10, "{r:?}");
        assert!(r.grad_rel_error < 1e-4, "{r:?}");
        assert!(r.forms_max_diff < 1e-10, "{r:?}");
        assert!(r.j_form_gap < 1e-10, "{r:?}");
    }
}

#[test]
fn lu_values_match_iterative_evaluation() {
    for i in 0..SUITE_SIZE {
        let m = suite_fixture(SUITE_SEED, i).unwrap();
        let (_, q) = exact_value_functions(&m).unwrap();
        let q_iter = iterative_q(&m);
        for (row, row_iter) in q.iter().zip(&q_iter) {
            assert!(max_abs_diff(row, row_iter) < 1e-9, "fixture {i}");
        }
    }
}

#[test]
fn lu_distribution_matches_forward_propagation() {
    for i in 0..SUITE_SIZE {
        let m = suite_fixture(SUITE_SEED, i).unwrap();
        let d = exact_discounted_distribution(&m).unwrap();
        assert!(max_abs_diff(&d, &propagated_distribution(&m)) < 1e-9, "fixture {i}");
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn chain3_objective_matches_monte_carlo() {
    let m = chain3();
    let j = exact_j(&m).unwrap();
    let env = TabularEnv::new(&m);
    let options = RolloutOptions { horizon: 100_000, ..RolloutOptions::default() };
    let (mut sum, mut sum_sq, mut count) = (0.0, 0.0, 0.0);
    for chunk in 0..10u64 {
        let episodes: Vec<(usize, u64)> = (0..100_000u64).map(|i| (0, chunk * 100_000 + i)).collect();
        for t in rollout_batch(&env, &m.policy, None, &episodes, &options).unwrap() {
            let g = t.total_reward();
            sum += g;
            sum_sq += g * g;
            count += 1.0;
        }
    }
    let mean = sum / count;
    let se = ((sum_sq / count - mean * mean) / count).sqrt();
    assert!((mean - j).abs() < 3.0 * se, "mean {mean} exact {j} se {se}");
}

#[test]
fn fixture_file_round_trip_preserves_oracle_outputs() {
    let dir = tempfile::tempdir().unwrap();
    for i in [0, 7, 19] {
        let m = suite_fixture(SUITE_SEED, i).unwrap();
        let path = dir.path().join(format!("f{i}.json"));
        FixtureFile::from_instance(&m).save(&path).unwrap();
        let back = FixtureFile::load(&path).unwrap().into_instance().unwrap();
        assert_eq!(exact_j(&m).unwrap().to_bits(), exact_j(&back).unwrap().to_bits());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bellman_holds_on_arbitrary_small_fixtures(seed in any::<u64>()) {
        let spec = FixtureSpec { max_states: 12, max_actions: 4, min_dim: 1, max_dim: 5 };
        let m = random_fixture(seed, &spec).unwrap();
        let (v, q) = exact_value_functions(&m).unwrap();
        let q_back = backup(&m, &v);
        for (row, row_back) in q.iter().zip(&q_back) {
            prop_assert!(max_abs_diff(row, row_back) < 1e-10);
        }
        let d = exact_discounted_distribution(&m).unwrap();
        prop_assert!(d.iter().all(|x| *x >= -1e-12));
    }

    #[test]
    fn shifting_rewards_shifts_values(seed in any::<u64>(), c in -2.0f64..2.0) {
        let spec = FixtureSpec { max_states: 8, max_actions: 3, min_dim: 1, max_dim: 4 };
        let m = random_fixture(seed, &spec).unwrap();
        let shifted_reward: Vec<f64> = m.mdp.reward_table().iter().map(|r| r + c).collect();
        let mdp = uaplab::mdp::MdpSpec::new(
            m.mdp.state_count(),
            m.mdp.action_count(),
            m.mdp.transition_tensor().to_vec(),
            shifted_reward,
            m.mdp.discount(),
            m.mdp.initial_dist().to_vec(),
        ).unwrap();
        let shifted = TabularDeltaMdp::new(mdp, m.observations.clone(), m.policy.clone(), m.delta.clone()).unwrap();
        let gap = exact_j(&shifted).unwrap() - exact_j(&m).unwrap();
        prop_assert!((gap - c / (1.0 - m.mdp.discount())).abs() < 1e-9);
    }
}
