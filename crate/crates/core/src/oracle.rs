//! Exact δ-MDP quantities on small finite MDPs.
//!
//! Every state carries a real observation vector, the policy is a linear
//! softmax over `observation + δ`, and all value quantities come from dense
//! linear solves. That makes the disturbed Bellman equation, the disturbed
//! policy-gradient formula and the discounted-distribution flow identity
//! checkable to machine precision:
//!
//! * `V = R_π + γ P_π V`, `Q = R + γ P V`
//! * `d = (1 − γ) μ₀ + γ P_πᵀ d`
//! * `J = μ₀ · V = (1/(1 − γ)) Σ_s d(s) Σ_a π(a|s+δ) R(s, a)`
//! * `∇_δ J = (1/(1 − γ)) Σ_s d(s) Σ_a Q(s, a) ∇_x π(a | O[s] + δ)`
//!
//! [`grad_j_fd`] differentiates [`exact_j`] numerically and is the
//! independent check on [`grad_j_analytic`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::mdp::{
    derive_seed, sample_categorical, DifferentiablePolicy, Environment, MdpSpec, Observation,
    StateHandle, Transition,
};
use crate::vector::{dot, relative_error, softmax};

/// Largest instance the oracle accepts.
pub const MAX_STATES: usize = 50;
pub const MAX_ACTIONS: usize = 5;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;
const MIN_FD_STEP: f64 = 1e-10;

/// `π(a|x) = softmax(W x)_a` with `W ∈ R^{|A|×d}` stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmaxPolicy {
    action_count: usize,
    dim: usize,
    weights: Vec<f64>,
}

impl LinearSoftmaxPolicy {
    pub fn new(action_count: usize, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != action_count * dim {
            return Err(Error::DimensionMismatch { expected: action_count * dim, found: weights.len() });
        }
        ensure_finite(&weights, "policy weights")?;
        Ok(Self { action_count, dim, weights })
    }

    pub fn zeros(action_count: usize, dim: usize) -> Self {
        Self { action_count, dim, weights: vec![0.0; action_count * dim] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidInput("ragged weight matrix".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.weights[a * self.dim..(a + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.weights.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.action_count).map(|a| dot(self.row(a), x)).collect()
    }

    fn mean_row(&self, probs: &[f64]) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for (a, p) in probs.iter().enumerate() {
            for (m, w) in mean.iter_mut().zip(self.row(a)) {
                *m += p * w;
            }
        }
        mean
    }

    /// `∇_x π(a|x) = π(a|x) (W_a − Σ_b π(b|x) W_b)`.
    pub fn grad_prob_input(&self, x: &[f64], action: usize) -> Vec<f64> {
        let probs = softmax(&self.logits(x));
        let mean = self.mean_row(&probs);
        self.row(action).iter().zip(&mean).map(|(w, m)| probs[action] * (w - m)).collect()
    }
}

impl DifferentiablePolicy for LinearSoftmaxPolicy {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn action_count(&self) -> usize {
        self.action_count
    }

    fn probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: x.len() });
        }
        Ok(softmax(&self.logits(x)))
    }

    fn grad_logp_input(&self, x: &[f64], action: usize) -> Result<Vec<f64>> {
        let probs = self.probs(x)?;
        let mean = self.mean_row(&probs);
        Ok(self.row(action).iter().zip(&mean).map(|(w, m)| w - m).collect())
    }
}

/// A finite MDP whose states emit observation vectors, a linear softmax
/// policy, and the universal perturbation δ.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDeltaMdp {
    pub mdp: MdpSpec,
    /// `O[s]`, one row per state.
    pub observations: Vec<Vec<f64>>,
    pub policy: LinearSoftmaxPolicy,
    pub delta: Vec<f64>,
}

impl TabularDeltaMdp {
    pub fn new(
        mdp: MdpSpec,
        observations: Vec<Vec<f64>>,
        policy: LinearSoftmaxPolicy,
        delta: Vec<f64>,
    ) -> Result<Self> {
        if mdp.state_count() > MAX_STATES || mdp.action_count() > MAX_ACTIONS {
            return Err(Error::InvalidInput(format!(
                "oracle instances are capped at {MAX_STATES} states and {MAX_ACTIONS} actions"
            )));
        }
        if observations.len() != mdp.state_count() {
            return Err(Error::DimensionMismatch { expected: mdp.state_count(), found: observations.len() });
        }
        let dim = delta.len();
        for row in &observations {
            if row.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: row.len() });
            }
            ensure_finite(row, "observation table")?;
        }
        ensure_finite(&delta, "delta")?;
        if policy.input_dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: policy.input_dim() });
        }
        if policy.action_count() != mdp.action_count() {
            return Err(Error::DimensionMismatch {
                expected: mdp.action_count(),
                found: policy.action_count(),
            });
        }
        Ok(Self { mdp, observations, policy, delta })
    }

    pub fn dim(&self) -> usize {
        self.delta.len()
    }

    pub fn with_delta(&self, delta: Vec<f64>) -> Self {
        Self { delta, ..self.clone() }
    }

    /// `O[s] + δ`.
    pub fn disturbed_observation(&self, s: usize) -> Vec<f64> {
        self.observations[s].iter().zip(&self.delta).map(|(o, d)| o + d).collect()
    }
}

/// Everything the oracle computes for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub j_delta: f64,
    pub d_delta: Vec<f64>,
    pub q_delta: Vec<Vec<f64>>,
    pub v_delta: Vec<f64>,
    pub grad_j_analytic: Vec<f64>,
    pub grad_j_fd: Vec<f64>,
    pub bellman_residual: f64,
}

/// `Π[s][a] = π(a | O[s] + δ)`.
pub fn disturbed_policy_matrix(m: &TabularDeltaMdp) -> Result<Vec<Vec<f64>>> {
    (0..m.mdp.state_count()).map(|s| m.policy.probs(&m.disturbed_observation(s))).collect()
}

fn policy_reward(mdp: &MdpSpec, pi: &[Vec<f64>]) -> Vec<f64> {
    (0..mdp.state_count())
        .map(|s| (0..mdp.action_count()).map(|a| pi[s][a] * mdp.reward(s, a)).sum())
        .collect()
}

fn policy_transition(mdp: &MdpSpec, pi: &[Vec<f64>]) -> DMatrix<f64> {
    let n = mdp.state_count();
    let mut p = DMatrix::zeros(n, n);
    for s in 0..n {
        for (a, prob) in pi[s].iter().enumerate() {
            for (next, t) in mdp.transition_row(s, a).iter().enumerate() {
                p[(s, next)] += prob * t;
            }
        }
    }
    p
}

fn solve(a: DMatrix<f64>, b: DVector<f64>) -> Result<Vec<f64>> {
    let x = a.lu().solve(&b).ok_or(Error::Singular)?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x.iter().copied().collect())
    } else {
        Err(Error::Singular)
    }
}

/// Exact `(V, Q)` of an arbitrary stochastic policy matrix `pi[s][a]`.
pub fn values_for_policy(mdp: &MdpSpec, pi: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = mdp.state_count();
    let gamma = mdp.discount();
    let p_pi = policy_transition(mdp, pi);
    let lhs = DMatrix::identity(n, n) - p_pi * gamma;
    let v = solve(lhs, DVector::from_vec(policy_reward(mdp, pi)))?;
    let q = (0..n)
        .map(|s| {
            (0..mdp.action_count())
                .map(|a| mdp.reward(s, a) + gamma * dot(mdp.transition_row(s, a), &v))
                .collect()
        })
        .collect();
    Ok((v, q))
}

/// Exact `d` of an arbitrary policy matrix.
pub fn distribution_for_policy(mdp: &MdpSpec, pi: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = mdp.state_count();
    let gamma = mdp.discount();
    let p_pi = policy_transition(mdp, pi);
    let lhs = DMatrix::identity(n, n) - p_pi.transpose() * gamma;
    let rhs = DVector::from_iterator(n, mdp.initial_dist().iter().map(|mu| (1.0 - gamma) * mu));
    solve(lhs, rhs)
}

/// Exact disturbed value functions `(V_δ, Q_δ)`.
pub fn exact_value_functions(m: &TabularDeltaMdp) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    values_for_policy(&m.mdp, &disturbed_policy_matrix(m)?)
}

/// Exact discounted future state distribution `d_δ`.
pub fn exact_discounted_distribution(m: &TabularDeltaMdp) -> Result<Vec<f64>> {
    distribution_for_policy(&m.mdp, &disturbed_policy_matrix(m)?)
}

/// `J_δ` through the occupancy form `(1/(1−γ)) E_{d_δ, π_δ}[R]`.
pub fn exact_j(m: &TabularDeltaMdp) -> Result<f64> {
    let pi = disturbed_policy_matrix(m)?;
    let d = distribution_for_policy(&m.mdp, &pi)?;
    let r_pi = policy_reward(&m.mdp, &pi);
    Ok(dot(&d, &r_pi) / (1.0 - m.mdp.discount()))
}

/// `J_δ` through the start-state form `μ₀ · V_δ`.
pub fn exact_j_from_values(m: &TabularDeltaMdp) -> Result<f64> {
    let (v, _) = exact_value_functions(m)?;
    Ok(dot(m.mdp.initial_dist(), &v))
}

/// Policy-gradient weights `d(s) π(a|s) Q(s, a) / (1 − γ)` for an arbitrary
/// policy matrix. Contracting them with `∇ log π(a|s)` (w.r.t. any
/// parameterisation) yields the exact gradient of `J`.
pub fn score_weights(mdp: &MdpSpec, pi: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let (_, q) = values_for_policy(mdp, pi)?;
    let d = distribution_for_policy(mdp, pi)?;
    let scale = 1.0 / (1.0 - mdp.discount());
    Ok((0..mdp.state_count())
        .map(|s| (0..mdp.action_count()).map(|a| scale * d[s] * pi[s][a] * q[s][a]).collect())
        .collect())
}

/// Both algebraic forms of the disturbed policy gradient:
/// `(1/(1−γ)) Σ_s d Σ_a Q ∇π` and `(1/(1−γ)) Σ_s d Σ_a π Q ∇log π`.
pub fn gradient_forms(m: &TabularDeltaMdp) -> Result<(Vec<f64>, Vec<f64>)> {
    let pi = disturbed_policy_matrix(m)?;
    let (_, q) = values_for_policy(&m.mdp, &pi)?;
    let d = distribution_for_policy(&m.mdp, &pi)?;
    let scale = 1.0 / (1.0 - m.mdp.discount());
    let dim = m.dim();
    let mut grad_pi_form = vec![0.0; dim];
    let mut score_form = vec![0.0; dim];
    for s in 0..m.mdp.state_count() {
        let x = m.disturbed_observation(s);
        for a in 0..m.mdp.action_count() {
            let grad_pi = m.policy.grad_prob_input(&x, a);
            let grad_logp = m.policy.grad_logp_input(&x, a)?;
            let w = scale * d[s] * q[s][a];
            for i in 0..dim {
                grad_pi_form[i] += w * grad_pi[i];
                score_form[i] += w * pi[s][a] * grad_logp[i];
            }
        }
    }
    Ok((grad_pi_form, score_form))
}

/// Exact `∇_δ J_δ` via the disturbed policy-gradient sum.
pub fn grad_j_analytic(m: &TabularDeltaMdp) -> Result<Vec<f64>> {
    Ok(gradient_forms(m)?.0)
}

/// Central differences of [`exact_j`] along each coordinate of δ.
pub fn grad_j_fd(m: &TabularDeltaMdp, h: f64) -> Result<Vec<f64>> {
    if !(h >= MIN_FD_STEP) || !h.is_finite() {
        return Err(Error::InvalidInput(format!("finite-difference step {h} below {MIN_FD_STEP}")));
    }
    (0..m.dim())
        .map(|i| {
            let mut plus = m.delta.clone();
            let mut minus = m.delta.clone();
            plus[i] += h;
            minus[i] -= h;
            Ok((exact_j(&m.with_delta(plus))? - exact_j(&m.with_delta(minus))?) / (2.0 * h))
        })
        .collect()
}

/// Largest violation of either disturbed Bellman equation for a given `(V, Q)`.
pub fn bellman_residual_of(mdp: &MdpSpec, pi: &[Vec<f64>], v: &[f64], q: &[Vec<f64>]) -> f64 {
    let gamma = mdp.discount();
    let n = mdp.state_count();
    let next_q: Vec<f64> = (0..n).map(|s| dot(&pi[s], &q[s])).collect();
    let mut worst = 0.0_f64;
    for s in 0..n {
        let mut expected_v = 0.0;
        for a in 0..mdp.action_count() {
            let row = mdp.transition_row(s, a);
            let q_target = mdp.reward(s, a) + gamma * dot(row, &next_q);
            worst = worst.max((q[s][a] - q_target).abs());
            expected_v += pi[s][a] * (mdp.reward(s, a) + gamma * dot(row, v));
        }
        worst = worst.max((v[s] - expected_v).abs());
    }
    worst
}

/// Bellman residual of the exact solution.
pub fn bellman_residual(m: &TabularDeltaMdp) -> Result<f64> {
    let pi = disturbed_policy_matrix(m)?;
    let (v, q) = values_for_policy(&m.mdp, &pi)?;
    Ok(bellman_residual_of(&m.mdp, &pi, &v, &q))
}

/// Max-abs residual of `d(s) − (1−γ)μ₀(s) = γ Σ_{s'} d(s') Σ_a π(a|s') P(s|s', a)`.
pub fn flow_residual(m: &TabularDeltaMdp, d: &[f64]) -> Result<f64> {
    let pi = disturbed_policy_matrix(m)?;
    let mdp = &m.mdp;
    let gamma = mdp.discount();
    let n = mdp.state_count();
    let mut inflow = vec![0.0; n];
    for (prev, dp) in d.iter().enumerate() {
        for a in 0..mdp.action_count() {
            for (s, t) in mdp.transition_row(prev, a).iter().enumerate() {
                inflow[s] += dp * pi[prev][a] * t;
            }
        }
    }
    Ok((0..n)
        .map(|s| (d[s] - (1.0 - gamma) * mdp.initial_dist()[s] - gamma * inflow[s]).abs())
        .fold(0.0, f64::max))
}

/// Runs every exact computation on one instance.
pub fn analyze(m: &TabularDeltaMdp, h: f64) -> Result<OracleReport> {
    let (v_delta, q_delta) = exact_value_functions(m)?;
    Ok(OracleReport {
        j_delta: exact_j(m)?,
        d_delta: exact_discounted_distribution(m)?,
        q_delta,
        v_delta,
        grad_j_analytic: grad_j_analytic(m)?,
        grad_j_fd: grad_j_fd(m, h)?,
        bellman_residual: bellman_residual(m)?,
    })
}

// ---------------------------------------------------------------------------
// Fixtures

/// Parameters of the randomized fixture family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureSpec {
    pub max_states: usize,
    pub max_actions: usize,
    pub min_dim: usize,
    pub max_dim: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self { max_states: MAX_STATES, max_actions: MAX_ACTIONS, min_dim: 2, max_dim: 8 }
    }
}

fn dirichlet_ones<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x: f64| x / total).collect()
}

fn uniform_vec<R: Rng>(n: usize, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Seeded random instance: Dirichlet(1) transitions, rewards and weights
/// uniform in [−1, 1], observations uniform in [−1, 1], δ uniform in
/// [−0.5, 0.5], γ uniform in [0.5, 0.95].
pub fn random_fixture(seed: u64, spec: &FixtureSpec) -> Result<TabularDeltaMdp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = rng.random_range(2..=spec.max_states);
    let actions = rng.random_range(2..=spec.max_actions);
    let dim = rng.random_range(spec.min_dim..=spec.max_dim);
    let gamma = rng.random_range(0.5..0.95);
    let mut transition = Vec::with_capacity(states * actions * states);
    for _ in 0..states * actions {
        transition.extend(dirichlet_ones(states, &mut rng));
    }
    normalize_rows(&mut transition, states);
    let reward = uniform_vec(states * actions, -1.0, 1.0, &mut rng);
    let mut initial = dirichlet_ones(states, &mut rng);
    normalize_rows(&mut initial, states);
    let mdp = MdpSpec::new(states, actions, transition, reward, gamma, initial)?;
    let observations = (0..states).map(|_| uniform_vec(dim, -1.0, 1.0, &mut rng)).collect();
    let policy = LinearSoftmaxPolicy::new(actions, dim, uniform_vec(actions * dim, -1.0, 1.0, &mut rng))?;
    let delta = uniform_vec(dim, -0.5, 0.5, &mut rng);
    TabularDeltaMdp::new(mdp, observations, policy, delta)
}

/// Re-normalizes each row so its sum is 1 to within one ulp-ish.
fn normalize_rows(values: &mut [f64], width: usize) {
    for row in values.chunks_mut(width) {
        let total: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// The `k`-th fixture of a seeded suite.
pub fn suite_fixture(seed: u64, index: usize) -> Result<TabularDeltaMdp> {
    random_fixture(derive_seed(seed, index as u64), &FixtureSpec::default())
}

/// Three-state chain: action 0 steps left, action 1 steps right (each with
/// probability 0.9, otherwise stays); reward 1 in the right-most state and a
/// 0.1 cost for moving right. Two-dimensional observations.
pub fn chain3() -> TabularDeltaMdp {
    let p = |s: usize, a: usize| -> Vec<f64> {
        let target = if a == 0 { s.saturating_sub(1) } else { (s + 1).min(2) };
        let mut row = vec![0.0; 3];
        row[s] += 0.1;
        row[target] += 0.9;
        row
    };
    let mut transition = Vec::new();
    let mut reward = Vec::new();
    for s in 0..3 {
        for a in 0..2 {
            transition.extend(p(s, a));
            let base = if s == 2 { 1.0 } else { 0.0 };
            reward.push(base - if a == 1 { 0.1 } else { 0.0 });
        }
    }
    let mdp = MdpSpec::new(3, 2, transition, reward, 0.9, vec![1.0, 0.0, 0.0]).expect("chain3 is valid");
    let observations = vec![vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]];
    let policy = LinearSoftmaxPolicy::from_rows(&[vec![1.0, -1.0], vec![-0.5, 0.5]]).expect("valid");
    TabularDeltaMdp::new(mdp, observations, policy, vec![0.0, 0.0]).expect("chain3 is valid")
}

/// On-disk fixture layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureFile {
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]`
    pub reward: Vec<Vec<f64>>,
    /// `observations[s]`
    pub observations: Vec<Vec<f64>>,
    /// `weights[a]`, one row per action
    pub weights: Vec<Vec<f64>>,
    pub gamma: f64,
    pub initial: Vec<f64>,
    pub delta: Vec<f64>,
}

impl FixtureFile {
    pub fn from_instance(m: &TabularDeltaMdp) -> Self {
        let n = m.mdp.state_count();
        let a_count = m.mdp.action_count();
        Self {
            transition: (0..n)
                .map(|s| (0..a_count).map(|a| m.mdp.transition_row(s, a).to_vec()).collect())
                .collect(),
            reward: (0..n).map(|s| (0..a_count).map(|a| m.mdp.reward(s, a)).collect()).collect(),
            observations: m.observations.clone(),
            weights: m.policy.rows(),
            gamma: m.mdp.discount(),
            initial: m.mdp.initial_dist().to_vec(),
            delta: m.delta.clone(),
        }
    }

    pub fn into_instance(self) -> Result<TabularDeltaMdp> {
        let n = self.transition.len();
        let a_count = self.transition.first().map_or(0, |r| r.len());
        if self.transition.iter().any(|r| r.len() != a_count) || self.reward.iter().any(|r| r.len() != a_count) {
            return Err(Error::Schema("ragged transition or reward table".into()));
        }
        let transition: Vec<f64> = self.transition.into_iter().flatten().flatten().collect();
        let mdp = MdpSpec::new(n, a_count, transition, self.reward.concat(), self.gamma, self.initial)?;
        let policy = LinearSoftmaxPolicy::from_rows(&self.weights)?;
        TabularDeltaMdp::new(mdp, self.observations, policy, self.delta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_reader(BufReader::new(File::open(path)?)).map_err(|e| Error::Schema(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Gradient-check suite

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub fixture: usize,
    pub states: usize,
    pub actions: usize,
    pub dim: usize,
    pub gamma: f64,
    pub bellman_residual: f64,
    pub flow_residual: f64,
    pub j_form_gap: f64,
    pub grad_rel_error: f64,
    pub forms_max_diff: f64,
}

impl GradcheckRow {
    pub fn passes(&self, tol: f64) -> bool {
        self.bellman_residual < 1e-10
            && self.flow_residual < 1e-10
            && self.j_form_gap < 1e-10
            && self.grad_rel_error < tol
            && self.forms_max_diff < 1e-10
    }
}

pub fn gradcheck_instance(index: usize, m: &TabularDeltaMdp, h: f64) -> Result<GradcheckRow> {
    let report = analyze(m, h)?;
    let (grad_pi_form, score_form) = gradient_forms(m)?;
    let forms_max_diff = grad_pi_form
        .iter()
        .zip(&score_form)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(GradcheckRow {
        fixture: index,
        states: m.mdp.state_count(),
        actions: m.mdp.action_count(),
        dim: m.dim(),
        gamma: m.mdp.discount(),
        bellman_residual: report.bellman_residual,
        flow_residual: flow_residual(m, &report.d_delta)?,
        j_form_gap: (report.j_delta - exact_j_from_values(m)?).abs(),
        grad_rel_error: relative_error(&report.grad_j_analytic, &report.grad_j_fd, 1e-12),
        forms_max_diff,
    })
}

/// Runs the oracle checks on `count` seeded fixtures.
pub fn gradcheck(count: usize, seed: u64, h: f64) -> Result<Vec<GradcheckRow>> {
    (0..count).map(|i| gradcheck_instance(i, &suite_fixture(seed, i)?, h)).collect()
}

pub fn write_gradcheck_csv<W: std::io::Write>(rows: &[GradcheckRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Environment embedding

/// A [`TabularDeltaMdp`] played as an episodic environment.
///
/// After every step the episode terminates with probability `1 − γ`, so the
/// undiscounted return of an episode is an unbiased sample of the discounted
/// value and the visited states follow `d_δ`.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    mdp: MdpSpec,
    observations: Vec<Vec<f64>>,
    state: usize,
    rng: ChaCha8Rng,
    done: bool,
}

impl TabularEnv {
    pub fn new(m: &TabularDeltaMdp) -> Self {
        Self {
            mdp: m.mdp.clone(),
            observations: m.observations.clone(),
            state: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
            done: true,
        }
    }

    fn observation(&self) -> Observation {
        Observation::flat(self.observations[self.state].clone()).expect("finite observation table")
    }
}

impl Environment for TabularEnv {
    fn observation_dim(&self) -> usize {
        self.observations[0].len()
    }

    fn action_count(&self) -> usize {
        self.mdp.action_count()
    }

    fn episode_count(&self) -> usize {
        1
    }

    fn reset(&mut self, _episode_id: usize, seed: u64) -> Result<Observation> {
        self.rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7AB1E));
        self.state = sample_categorical(self.mdp.initial_dist(), &mut self.rng);
        self.done = false;
        Ok(self.observation())
    }

    fn step(&mut self, action: usize) -> Result<Transition> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        if action >= self.mdp.action_count() {
            return Err(Error::InvalidInput(format!("action {action} out of range")));
        }
        let reward = self.mdp.reward(self.state, action);
        self.state = sample_categorical(self.mdp.transition_row(self.state, action), &mut self.rng);
        let u: f64 = self.rng.random();
        self.done = u >= self.mdp.discount();
        Ok(Transition { observation: self.observation(), reward, done: self.done, goal_reached: false })
    }

    fn state(&self) -> StateHandle {
        StateHandle::Index(self.state)
    }
}
