//! MDP and δ-MDP building blocks.
//!
//! This module holds the pieces every other module consumes: the explicit
//! finite [`MdpSpec`], observations and the universal [`Perturbation`] that is
//! added to each of them, trajectory containers, discounted-return arithmetic,
//! and the [`Environment`] / [`DifferentiablePolicy`] contracts together with
//! [`rollout`], which plays a policy through a perturbed environment.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::vector::{l2_norm, linf_norm};

/// Default episode length cap.
pub const DEFAULT_HORIZON: usize = 500;

const ROW_TOLERANCE: f64 = 1e-12;

/// Explicit finite MDP `(S, A, P, R, γ, μ₀)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpSpec {
    state_count: usize,
    action_count: usize,
    /// Flattened `P[s][a][s']`.
    transition: Vec<f64>,
    /// Flattened `R[s][a]`.
    reward: Vec<f64>,
    discount: f64,
    initial_dist: Vec<f64>,
}

impl MdpSpec {
    pub fn new(
        state_count: usize,
        action_count: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        if state_count == 0 || action_count == 0 {
            return Err(Error::InvalidInput("state and action counts must be positive".into()));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::InvalidInput(format!("discount {discount} outside (0, 1)")));
        }
        let sa = state_count * action_count;
        if transition.len() != sa * state_count {
            return Err(Error::DimensionMismatch {
                expected: sa * state_count,
                found: transition.len(),
            });
        }
        if reward.len() != sa {
            return Err(Error::DimensionMismatch { expected: sa, found: reward.len() });
        }
        if initial_dist.len() != state_count {
            return Err(Error::DimensionMismatch {
                expected: state_count,
                found: initial_dist.len(),
            });
        }
        ensure_finite(&transition, "transition tensor")?;
        ensure_finite(&reward, "reward table")?;
        ensure_finite(&initial_dist, "initial distribution")?;
        for (row_index, row) in transition.chunks(state_count).enumerate() {
            check_distribution(row, &format!("transition row {row_index}"))?;
        }
        check_distribution(&initial_dist, "initial distribution")?;
        Ok(Self { state_count, action_count, transition, reward, discount, initial_dist })
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// `P(· | s, a)` as a slice over next states.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.action_count + a) * self.state_count;
        &self.transition[start..start + self.state_count]
    }

    pub fn transition(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition_row(s, a)[next]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.action_count + a]
    }

    pub fn reward_table(&self) -> &[f64] {
        &self.reward
    }

    pub fn transition_tensor(&self) -> &[f64] {
        &self.transition
    }

    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        Self::new(
            self.state_count,
            self.action_count,
            self.transition.clone(),
            self.reward.clone(),
            discount,
            self.initial_dist.clone(),
        )
    }
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| *p < 0.0) {
        return Err(Error::InvalidInput(format!("{what} has a negative entry")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::InvalidInput(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

/// Rendering hint for an observation vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

impl Shape {
    pub fn flat(dim: usize) -> Self {
        Self { rows: 1, cols: dim, channels: 1 }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub data: Vec<f64>,
    pub shape: Shape,
}

impl Observation {
    pub fn new(data: Vec<f64>, shape: Shape) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::DimensionMismatch { expected: shape.len(), found: data.len() });
        }
        ensure_finite(&data, "observation")?;
        Ok(Self { data, shape })
    }

    pub fn flat(data: Vec<f64>) -> Result<Self> {
        let shape = Shape::flat(data.len());
        Self::new(data, shape)
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormOrder {
    #[default]
    L2,
    Linf,
}

impl NormOrder {
    pub fn norm(self, v: &[f64]) -> f64 {
        match self {
            NormOrder::L2 => l2_norm(v),
            NormOrder::Linf => linf_norm(v),
        }
    }
}

impl std::str::FromStr for NormOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2" | "l2" | "L2" => Ok(NormOrder::L2),
            "inf" | "linf" | "Linf" => Ok(NormOrder::Linf),
            other => Err(Error::InvalidInput(format!("unknown norm order `{other}`"))),
        }
    }
}

impl std::fmt::Display for NormOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormOrder::L2 => "l2",
            NormOrder::Linf => "linf",
        })
    }
}

/// The universal noise δ together with its norm budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub delta: Vec<f64>,
    pub epsilon: f64,
    pub norm_order: NormOrder,
}

impl Perturbation {
    pub fn zeros(dim: usize, epsilon: f64, norm_order: NormOrder) -> Self {
        Self { delta: vec![0.0; dim], epsilon, norm_order }
    }

    pub fn dim(&self) -> usize {
        self.delta.len()
    }

    pub fn norm(&self) -> f64 {
        self.norm_order.norm(&self.delta)
    }

    pub fn is_zero(&self) -> bool {
        self.delta.iter().all(|v| *v == 0.0)
    }
}

/// Adds δ to an observation, optionally clamping into `range`.
pub fn disturb(obs: &Observation, delta: &Perturbation, range: Option<(f64, f64)>) -> Result<Observation> {
    if obs.dim() != delta.dim() {
        return Err(Error::DimensionMismatch { expected: obs.dim(), found: delta.dim() });
    }
    let data = obs
        .data
        .iter()
        .zip(&delta.delta)
        .map(|(o, d)| {
            let v = o + d;
            match range {
                Some((lo, hi)) => v.clamp(lo, hi),
                None => v,
            }
        })
        .collect();
    Ok(Observation { data, shape: obs.shape })
}

fn check_gamma(gamma: f64) -> Result<()> {
    // γ = 1 is accepted for finite lists: episodic rollouts that embed the
    // discount as a termination probability need the undiscounted tail sum.
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("discount {gamma} outside (0, 1]")))
    }
}

/// `Σ_t γ^t r_t`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    ensure_finite(rewards, "rewards")?;
    Ok(rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc))
}

/// Tail sums `R̂_t = Σ_{t' ≥ t} γ^{t'−t} r_{t'}`, same length as the input.
pub fn reward_to_go(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    ensure_finite(rewards, "rewards")?;
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// Environment-specific state handle recorded in each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateHandle {
    Index(usize),
    Pose { row: usize, col: usize, heading: u8 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: StateHandle,
    /// Undisturbed observation.
    pub observation: Observation,
    pub action: usize,
    pub reward: f64,
    /// `log π(a | o + δ)` at sampling time.
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub episode_id: usize,
    pub seed: u64,
    pub steps: Vec<Step>,
    pub goal_reached: bool,
    /// Ended by the horizon cap rather than by the environment.
    pub truncated: bool,
    /// Observation after the last step (undisturbed).
    pub final_observation: Observation,
    /// Environment state after the last step.
    pub final_state: StateHandle,
    pub geodesic_start_distance: f64,
    pub path_length: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Outcome of a single environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub goal_reached: bool,
}

/// Episodic environment contract.
///
/// Implementations must be deterministic given `(episode_id, seed, actions)`.
pub trait Environment: Send {
    fn observation_dim(&self) -> usize;
    fn action_count(&self) -> usize;
    /// Number of distinct episodes `reset` accepts.
    fn episode_count(&self) -> usize;
    /// Valid observation range, used only when clamping is enabled.
    fn observation_range(&self) -> Option<(f64, f64)> {
        None
    }
    fn reset(&mut self, episode_id: usize, seed: u64) -> Result<Observation>;
    fn step(&mut self, action: usize) -> Result<Transition>;
    fn state(&self) -> StateHandle;
    fn geodesic_start_distance(&self) -> f64 {
        0.0
    }
    fn path_length(&self) -> f64 {
        0.0
    }
}

/// A stochastic policy over discrete actions that is differentiable in its input.
pub trait DifferentiablePolicy: Sync {
    fn input_dim(&self) -> usize;
    fn action_count(&self) -> usize;
    fn probs(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// `∇_x log π(a | x)`.
    fn grad_logp_input(&self, x: &[f64], action: usize) -> Result<Vec<f64>>;
    /// State-value estimate, when the policy carries a value head.
    fn value(&self, _x: &[f64]) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// Inverse-CDF categorical draw from one uniform variate.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// SplitMix64 mix of a base seed and a stream index.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOptions {
    pub horizon: usize,
    /// Clamp disturbed observations into the environment's declared range.
    pub clamp: bool,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self { horizon: DEFAULT_HORIZON, clamp: false }
    }
}

/// Plays `policy` through `env` with every observation disturbed by `delta`.
///
/// Action sampling draws from a ChaCha8 stream seeded with `seed`; with
/// `delta = None` nothing is added to the observations.
pub fn rollout<E, P>(
    env: &mut E,
    policy: &P,
    delta: Option<&Perturbation>,
    episode_id: usize,
    seed: u64,
    options: &RolloutOptions,
) -> Result<Trajectory>
where
    E: Environment + ?Sized,
    P: DifferentiablePolicy + ?Sized,
{
    if policy.input_dim() != env.observation_dim() {
        return Err(Error::DimensionMismatch {
            expected: env.observation_dim(),
            found: policy.input_dim(),
        });
    }
    if let Some(d) = delta {
        if d.dim() != env.observation_dim() {
            return Err(Error::DimensionMismatch { expected: env.observation_dim(), found: d.dim() });
        }
    }
    let range = if options.clamp { env.observation_range() } else { None };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = env.reset(episode_id, seed)?;
    let mut steps = Vec::new();
    let mut goal_reached = false;
    let mut finished = false;
    while steps.len() < options.horizon {
        let state = env.state();
        let probs = match delta {
            Some(d) => policy.probs(&disturb(&obs, d, range)?.data)?,
            None => policy.probs(&obs.data)?,
        };
        let action = sample_categorical(&probs, &mut rng);
        let log_prob = probs[action].ln();
        let transition = env.step(action)?;
        steps.push(Step { state, observation: obs, action, reward: transition.reward, log_prob });
        obs = transition.observation;
        if transition.done {
            goal_reached = transition.goal_reached;
            finished = true;
            break;
        }
    }
    Ok(Trajectory {
        episode_id,
        seed,
        steps,
        goal_reached,
        truncated: !finished,
        final_observation: obs,
        final_state: env.state(),
        geodesic_start_distance: env.geodesic_start_distance(),
        path_length: env.path_length(),
    })
}

/// Runs one rollout per `(episode_id, seed)` pair in parallel.
///
/// Each worker owns a clone of `env`; results come back in input order, so
/// the output does not depend on the number of threads.
pub fn rollout_batch<E, P>(
    env: &E,
    policy: &P,
    delta: Option<&Perturbation>,
    episodes: &[(usize, u64)],
    options: &RolloutOptions,
) -> Result<Vec<Trajectory>>
where
    E: Environment + Clone + Sync,
    P: DifferentiablePolicy + ?Sized,
{
    episodes
        .par_iter()
        .map_init(|| env.clone(), |env, &(id, seed)| rollout(env, policy, delta, id, seed, options))
        .collect()
}

// ---------------------------------------------------------------------------
// Trajectory batch file

pub const TRAJECTORY_SCHEMA: &str = "uaplab.trajectory-batch";
pub const TRAJECTORY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub action: usize,
    pub reward: f64,
    pub log_prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode_id: usize,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub goal_reached: bool,
    pub geodesic_start_distance: f64,
    pub path_length: f64,
}

impl TrajectoryRecord {
    pub fn from_trajectory(t: &Trajectory, embed_observations: bool) -> Self {
        Self {
            episode_id: t.episode_id,
            seed: t.seed,
            steps: t
                .steps
                .iter()
                .map(|s| StepRecord {
                    action: s.action,
                    reward: s.reward,
                    log_prob: s.log_prob,
                    observation: embed_observations.then(|| s.observation.data.clone()),
                })
                .collect(),
            goal_reached: t.goal_reached,
            geodesic_start_distance: t.geodesic_start_distance,
            path_length: t.path_length,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub schema: String,
    pub version: u32,
    pub episodes: Vec<TrajectoryRecord>,
}

impl TrajectoryBatch {
    pub fn new(trajectories: &[Trajectory], embed_observations: bool) -> Self {
        Self {
            schema: TRAJECTORY_SCHEMA.to_string(),
            version: TRAJECTORY_VERSION,
            episodes: trajectories
                .iter()
                .map(|t| TrajectoryRecord::from_trajectory(t, embed_observations))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let batch: Self = serde_json::from_reader(BufReader::new(File::open(path)?))
            .map_err(|e| Error::Schema(e.to_string()))?;
        if batch.schema != TRAJECTORY_SCHEMA || batch.version != TRAJECTORY_VERSION {
            return Err(Error::Schema(format!(
                "expected {TRAJECTORY_SCHEMA} v{TRAJECTORY_VERSION}, found {} v{}",
                batch.schema, batch.version
            )));
        }
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn discounted_return_examples() {
        assert_eq!(discounted_return(&[1.0, 1.0, 1.0], 0.5).unwrap(), 1.75);
        assert_eq!(discounted_return(&[], 0.9).unwrap(), 0.0);
        assert!((discounted_return(&[0.0, 0.0, 2.5], 0.99).unwrap() - 2.45025).abs() < 1e-12);
    }

    #[test]
    fn discounted_return_rejects_non_finite() {
        assert!(matches!(discounted_return(&[1.0, f64::NAN], 0.9), Err(Error::NonFinite(_))));
        assert!(discounted_return(&[1.0], 0.0).is_err());
    }

    #[test]
    fn reward_to_go_examples() {
        assert_eq!(reward_to_go(&[1.0, 1.0, 1.0], 0.5).unwrap(), vec![1.75, 1.5, 1.0]);
        let v = reward_to_go(&[0.0, 0.0, 1.0], 0.9).unwrap();
        for (got, want) in v.iter().zip([0.81, 0.9, 1.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(reward_to_go(&[], 0.9).unwrap().is_empty());
    }

    #[test]
    fn disturb_examples() {
        let o = Observation::flat(vec![0.0; 4]).unwrap();
        let d = Perturbation { delta: vec![0.1; 4], epsilon: 1.0, norm_order: NormOrder::L2 };
        assert_eq!(disturb(&o, &d, None).unwrap().data, vec![0.1; 4]);

        let o = Observation::flat(vec![1.0, 1.0]).unwrap();
        let d = Perturbation { delta: vec![0.5, -0.5], epsilon: 1.0, norm_order: NormOrder::L2 };
        assert_eq!(disturb(&o, &d, Some((0.0, 1.0))).unwrap().data, vec![1.0, 0.5]);

        let bad = Perturbation::zeros(3, 1.0, NormOrder::L2);
        assert!(matches!(disturb(&o, &bad, None), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn mdp_spec_validation() {
        let ok = MdpSpec::new(1, 1, vec![1.0], vec![1.0], 0.9, vec![1.0]);
        assert!(ok.is_ok());
        assert!(MdpSpec::new(1, 1, vec![0.9], vec![1.0], 0.9, vec![1.0]).is_err());
        assert!(MdpSpec::new(1, 1, vec![1.0], vec![1.0], 1.0, vec![1.0]).is_err());
        assert!(MdpSpec::new(2, 1, vec![1.5, -0.5, 0.0, 1.0], vec![0.0, 0.0], 0.9, vec![1.0, 0.0]).is_err());
        assert!(MdpSpec::new(1, 1, vec![1.0], vec![1.0], 0.9, vec![0.5]).is_err());
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        assert_ne!(derive_seed(7, 0), derive_seed(7, 1));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }

    #[test]
    fn categorical_sampling_never_picks_zero_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a = sample_categorical(&[0.0, 0.3, 0.0, 0.7], &mut rng);
            assert!(a == 1 || a == 3);
        }
    }

    proptest! {
        #[test]
        fn reward_to_go_head_is_discounted_return(
            rewards in prop::collection::vec(-10.0f64..10.0, 0..40),
            gamma in 0.01f64..0.999,
        ) {
            let rtg = reward_to_go(&rewards, gamma).unwrap();
            let ret = discounted_return(&rewards, gamma).unwrap();
            prop_assert_eq!(rtg.first().copied().unwrap_or(0.0), ret);
            for t in 0..rewards.len().saturating_sub(1) {
                prop_assert!((rtg[t] - (rewards[t] + gamma * rtg[t + 1])).abs() < 1e-9);
            }
        }

        #[test]
        fn disturbing_by_zero_is_identity(data in prop::collection::vec(-5.0f64..5.0, 1..30)) {
            let o = Observation::flat(data.clone()).unwrap();
            let z = Perturbation::zeros(data.len(), 1.0, NormOrder::L2);
            prop_assert_eq!(disturb(&o, &z, None).unwrap().data, data);
        }
    }
}
