//! Universal perturbation attacks on a trained victim.
//!
//! Three adversaries share one configuration type:
//!
//! * [`baseline_uap`] treats observations from clean rollouts as an i.i.d.
//!   dataset and lowers the probability of the victim's preferred action;
//! * [`reward_uap`] resamples trajectories under the current δ at every outer
//!   step and descends the disturbed return, with either reward-to-go or a
//!   value-head bootstrap as the return surrogate;
//! * [`trajectory_uap`] uses the same loop but only needs the goal flag of
//!   each trajectory, weighting step `t` by `g·γ^(T−t)`.
//!
//! All updates are summed over trajectories and steps, then scaled by α.
//! The final δ is projected according to [`ProjectionMode`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    derive_seed, disturb, reward_to_go, rollout_batch, DifferentiablePolicy, Environment, NormOrder, Perturbation,
    RolloutOptions, Shape, Trajectory, DEFAULT_HORIZON,
};
use crate::report::config_hash;
use crate::vector::{axpy, l2_norm};

pub const PERTURBATION_FORMAT: &str = "uaplab.perturbation";
pub const PERTURBATION_VERSION: u32 = 1;

/// Recomputed log-probabilities may differ from rollout-time values by at most this.
pub const DRIFT_TOLERANCE: f64 = 1e-9;
const ZERO_STREAK_WARNING: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    RewardToGo,
    VictimQ,
    GoalIndicator,
    BaselineUap,
}

impl Estimator {
    pub const ALL: [Estimator; 4] =
        [Estimator::BaselineUap, Estimator::RewardToGo, Estimator::VictimQ, Estimator::GoalIndicator];

    /// Short adversary label used in tables and on the command line.
    pub fn label(self) -> &'static str {
        match self {
            Estimator::BaselineUap => "uap",
            Estimator::RewardToGo => "reward-rtg",
            Estimator::VictimQ => "reward-q",
            Estimator::GoalIndicator => "trajectory",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uap" | "baseline_uap" => Ok(Estimator::BaselineUap),
            "reward-rtg" | "reward_to_go" => Ok(Estimator::RewardToGo),
            "reward-q" | "victim_q" => Ok(Estimator::VictimQ),
            "trajectory" | "goal_indicator" => Ok(Estimator::GoalIndicator),
            other => Err(Error::InvalidInput(format!("unknown attack method `{other}`"))),
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// Unconstrained iterates, then a single rescale onto the sphere of radius ε.
    #[default]
    FinalBoundary,
    /// Project into the ball after every update and at the end.
    PerStepBall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub estimator: Estimator,
    /// Per-coordinate scale; the budget is `ε = η·√d`.
    pub eta: f64,
    pub norm_order: NormOrder,
    /// Step size; `None` means `0.01 / l`.
    pub alpha: Option<f64>,
    /// Outer steps.
    pub n: usize,
    /// Trajectories per outer step.
    pub l: usize,
    pub gamma: f64,
    pub projection_mode: ProjectionMode,
    pub seed: u64,
    /// Gradient steps of the baseline UAP over its fixed dataset.
    pub baseline_steps: usize,
    pub baseline_lr: f64,
    pub horizon: usize,
    pub clamp: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            estimator: Estimator::RewardToGo,
            eta: 0.5,
            norm_order: NormOrder::L2,
            alpha: None,
            n: 1,
            l: 5,
            gamma: 0.99,
            projection_mode: ProjectionMode::FinalBoundary,
            seed: 0,
            baseline_steps: 50,
            baseline_lr: 1.0,
            horizon: DEFAULT_HORIZON,
            clamp: false,
        }
    }
}

impl AttackConfig {
    pub fn epsilon(&self, dim: usize) -> f64 {
        self.eta * (dim as f64).sqrt()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(0.01 / self.l as f64)
    }

    /// Total trajectory budget `m = n·l`.
    pub fn m(&self) -> usize {
        self.n * self.l
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Validation("eta must be positive".into()));
        }
        if self.n == 0 || self.l == 0 {
            return Err(Error::Validation("n and l must be at least 1".into()));
        }
        if let Some(a) = self.alpha {
            if !(a >= 0.0) || !a.is_finite() {
                return Err(Error::Validation("alpha must be nonnegative".into()));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Validation("gamma must lie in (0, 1]".into()));
        }
        if !(self.baseline_lr >= 0.0) || self.horizon == 0 {
            return Err(Error::Validation("baseline_lr must be nonnegative and horizon positive".into()));
        }
        Ok(())
    }

    pub fn rollout_options(&self) -> RolloutOptions {
        RolloutOptions { horizon: self.horizon, clamp: self.clamp }
    }
}

/// Record of one outer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackStep {
    pub k: usize,
    /// δ_k, the perturbation the step's trajectories were sampled under.
    pub delta: Vec<f64>,
    /// `Σ_i Σ_t w_t ∇_x log π(a_t | o_t + δ_k)`; the update is `−α` times this.
    pub direction: Vec<f64>,
    pub mean_return: f64,
    pub successes: usize,
    pub trajectories: usize,
    pub stalled: bool,
    /// Fingerprints of the δ used for sampling and for the gradient.
    pub rollout_delta_hash: String,
    pub gradient_delta_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub estimator: Estimator,
    pub delta: Perturbation,
    pub eta: f64,
    /// δ_n before the final projection.
    pub unprojected: Vec<f64>,
    pub steps: Vec<AttackStep>,
    pub warnings: Vec<String>,
    pub clean_rollouts: usize,
    pub disturbed_rollouts: usize,
    pub sampled_steps: usize,
    pub wall_clock_secs: f64,
}

/// Projects `delta` according to `mode`.
///
/// `FinalBoundary` rescales any nonzero δ to norm exactly ε (up or down).
/// `PerStepBall` leaves δ alone inside the ball; outside it rescales for the
/// L2 norm and clips coordinates for L∞.
pub fn project(delta: &[f64], epsilon: f64, norm: NormOrder, mode: ProjectionMode) -> Vec<f64> {
    let current = norm.norm(delta);
    match mode {
        ProjectionMode::FinalBoundary => {
            if current == 0.0 {
                delta.to_vec()
            } else {
                let scaled: Vec<f64> = delta.iter().map(|v| v * (epsilon / current)).collect();
                // one correction pass absorbs the rounding of the division
                let again = norm.norm(&scaled);
                if again == epsilon {
                    scaled
                } else {
                    scaled.iter().map(|v| v * (epsilon / again)).collect()
                }
            }
        }
        ProjectionMode::PerStepBall => {
            if current <= epsilon {
                return delta.to_vec();
            }
            match norm {
                NormOrder::L2 => delta.iter().map(|v| v * (epsilon / current)).collect(),
                NormOrder::Linf => delta.iter().map(|v| v.clamp(-epsilon, epsilon)).collect(),
            }
        }
    }
}

/// Short hex fingerprint of a δ vector's exact bits.
pub fn delta_fingerprint(delta: &[f64]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in delta {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Per-step weights of one trajectory under the chosen surrogate.
pub fn step_weights<P>(policy: &P, traj: &Trajectory, delta: &Perturbation, cfg: &AttackConfig, range: Option<(f64, f64)>) -> Result<Vec<f64>>
where
    P: DifferentiablePolicy + ?Sized,
{
    match cfg.estimator {
        Estimator::RewardToGo => reward_to_go(&traj.rewards(), cfg.gamma),
        Estimator::GoalIndicator => Ok(goal_weights(traj.len(), traj.goal_reached, cfg.gamma)),
        Estimator::VictimQ => {
            let mut out = Vec::with_capacity(traj.len());
            for (t, step) in traj.steps.iter().enumerate() {
                let next = if t + 1 < traj.len() {
                    Some(&traj.steps[t + 1].observation)
                } else if traj.truncated {
                    Some(&traj.final_observation)
                } else {
                    None
                };
                let bootstrap = match next {
                    Some(obs) => policy
                        .value(&disturb(obs, delta, range)?.data)?
                        .ok_or_else(|| Error::InvalidInput("victim_q needs a policy with a value head".into()))?,
                    None => 0.0,
                };
                out.push(step.reward + cfg.gamma * bootstrap);
            }
            Ok(out)
        }
        Estimator::BaselineUap => Err(Error::InvalidInput("baseline_uap has no per-step weights".into())),
    }
}

/// `g·γ^(T−t)` for `t = 0..len`, where `T = len − 1`.
pub fn goal_weights(len: usize, goal_reached: bool, gamma: f64) -> Vec<f64> {
    if !goal_reached {
        return vec![0.0; len];
    }
    (0..len).map(|t| gamma.powi((len - 1 - t) as i32)).collect()
}

/// `Σ_t w_t ∇_x log π(a_t | o_t + δ)`, checking the recorded log-probabilities.
pub fn trajectory_direction<P>(
    policy: &P,
    traj: &Trajectory,
    weights: &[f64],
    delta: &Perturbation,
    range: Option<(f64, f64)>,
) -> Result<Vec<f64>>
where
    P: DifferentiablePolicy + ?Sized,
{
    let mut dir = vec![0.0; delta.dim()];
    for (step, &w) in traj.steps.iter().zip(weights) {
        let x = disturb(&step.observation, delta, range)?;
        let recomputed = policy.probs(&x.data)?[step.action].ln();
        if (recomputed - step.log_prob).abs() > DRIFT_TOLERANCE {
            return Err(Error::SamplingDrift { recorded: step.log_prob, recomputed });
        }
        if w != 0.0 {
            axpy(w, &policy.grad_logp_input(&x.data, step.action)?, &mut dir);
        }
    }
    Ok(dir)
}

/// `(episode_id, seed)` pairs sampled at outer step `k`; the baseline draws
/// all `m` of its clean rollouts at `k = 0`.
pub fn sampled_episodes(cfg: &AttackConfig, k: usize, episode_count: usize) -> Vec<(usize, u64)> {
    let count = if cfg.estimator == Estimator::BaselineUap { cfg.m() } else { cfg.l };
    pick_episodes(episode_count, cfg.seed, k, count)
}

fn pick_episodes(env_episodes: usize, seed: u64, k: usize, count: usize) -> Vec<(usize, u64)> {
    let step_seed = derive_seed(seed, k as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    (0..count).map(|i| (rng.random_range(0..env_episodes), derive_seed(step_seed, i as u64))).collect()
}

fn check_inputs<E, P>(env: &E, policy: &P, cfg: &AttackConfig) -> Result<usize>
where
    E: Environment,
    P: DifferentiablePolicy + ?Sized,
{
    cfg.validate()?;
    if policy.input_dim() != env.observation_dim() {
        return Err(Error::DimensionMismatch { expected: env.observation_dim(), found: policy.input_dim() });
    }
    if env.episode_count() == 0 {
        return Err(Error::NoData("the attack environment has no episodes".into()));
    }
    Ok(env.observation_dim())
}

/// Multi-step attack loop shared by the reward and trajectory adversaries.
fn consistent_attack<E, P>(policy: &P, env: &E, cfg: &AttackConfig) -> Result<AttackResult>
where
    E: Environment + Clone + Sync,
    P: DifferentiablePolicy + ?Sized,
{
    let started = std::time::Instant::now();
    let dim = check_inputs(env, policy, cfg)?;
    let epsilon = cfg.epsilon(dim);
    let options = cfg.rollout_options();
    let range = if cfg.clamp { env.observation_range() } else { None };
    let alpha = cfg.alpha();
    let mut delta = Perturbation::zeros(dim, epsilon, cfg.norm_order);
    let mut steps = Vec::with_capacity(cfg.n);
    let mut warnings = Vec::new();
    let mut zero_streak = 0;
    let mut sampled_steps = 0;
    for k in 0..cfg.n {
        let episodes = sampled_episodes(cfg, k, env.episode_count());
        let sampling_delta = delta.clone();
        let trajectories = rollout_batch(env, policy, Some(&sampling_delta), &episodes, &options)?;
        sampled_steps += trajectories.iter().map(Trajectory::len).sum::<usize>();
        let successes = trajectories.iter().filter(|t| t.goal_reached).count();
        let parts: Vec<Vec<f64>> = trajectories
            .par_iter()
            .map(|t| {
                let w = step_weights(policy, t, &delta, cfg, range)?;
                trajectory_direction(policy, t, &w, &delta, range)
            })
            .collect::<Result<_>>()?;
        let mut direction = vec![0.0; dim];
        for p in &parts {
            axpy(1.0, p, &mut direction);
        }
        let stalled = cfg.estimator == Estimator::GoalIndicator && successes == 0;
        if stalled {
            warnings.push(format!("step {k}: no sampled trajectory reached the goal; δ unchanged"));
        }
        if l2_norm(&direction) == 0.0 {
            zero_streak += 1;
            if zero_streak == ZERO_STREAK_WARNING {
                warnings.push(format!("steps {}..={k}: update direction was zero", k + 1 - ZERO_STREAK_WARNING));
            }
        } else {
            zero_streak = 0;
        }
        steps.push(AttackStep {
            k,
            delta: sampling_delta.delta.clone(),
            direction: direction.clone(),
            mean_return: trajectories.iter().map(Trajectory::total_reward).sum::<f64>() / cfg.l as f64,
            successes,
            trajectories: trajectories.len(),
            stalled,
            rollout_delta_hash: delta_fingerprint(&sampling_delta.delta),
            gradient_delta_hash: delta_fingerprint(&delta.delta),
        });
        if !stalled {
            axpy(-alpha, &direction, &mut delta.delta);
        }
        if cfg.projection_mode == ProjectionMode::PerStepBall {
            delta.delta = project(&delta.delta, epsilon, cfg.norm_order, ProjectionMode::PerStepBall);
        }
    }
    let unprojected = delta.delta.clone();
    delta.delta = project(&delta.delta, epsilon, cfg.norm_order, cfg.projection_mode);
    Ok(AttackResult {
        estimator: cfg.estimator,
        delta,
        eta: cfg.eta,
        unprojected,
        steps,
        warnings,
        clean_rollouts: 0,
        disturbed_rollouts: cfg.m(),
        sampled_steps,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Reward UAP with the reward-to-go or victim-Q surrogate.
pub fn reward_uap<E, P>(policy: &P, env: &E, cfg: &AttackConfig) -> Result<AttackResult>
where
    E: Environment + Clone + Sync,
    P: DifferentiablePolicy + ?Sized,
{
    if !matches!(cfg.estimator, Estimator::RewardToGo | Estimator::VictimQ) {
        return Err(Error::InvalidInput(format!("reward_uap cannot use the {} estimator", cfg.estimator)));
    }
    consistent_attack(policy, env, cfg)
}

/// Trajectory UAP: consumes only the goal flag of each trajectory.
pub fn trajectory_uap<E, P>(policy: &P, env: &E, cfg: &AttackConfig) -> Result<AttackResult>
where
    E: Environment + Clone + Sync,
    P: DifferentiablePolicy + ?Sized,
{
    if cfg.estimator != Estimator::GoalIndicator {
        return Err(Error::InvalidInput(format!("trajectory_uap cannot use the {} estimator", cfg.estimator)));
    }
    consistent_attack(policy, env, cfg)
}

/// Gradient of `mean_s π(a*(s) | s + δ)` over a fixed observation set.
pub fn baseline_objective_gradient<P>(policy: &P, dataset: &[(Vec<f64>, usize)], delta: &[f64]) -> Result<(f64, Vec<f64>)>
where
    P: DifferentiablePolicy + ?Sized,
{
    if dataset.is_empty() {
        return Err(Error::NoData("baseline dataset is empty".into()));
    }
    let parts: Vec<(f64, Vec<f64>)> = dataset
        .par_iter()
        .map(|(obs, target)| {
            let x: Vec<f64> = obs.iter().zip(delta).map(|(o, d)| o + d).collect();
            let p = policy.probs(&x)?[*target];
            let mut g = policy.grad_logp_input(&x, *target)?;
            g.iter_mut().for_each(|v| *v *= p);
            Ok((p, g))
        })
        .collect::<Result<_>>()?;
    let n = dataset.len() as f64;
    let mut grad = vec![0.0; delta.len()];
    let mut objective = 0.0;
    for (p, g) in &parts {
        objective += p / n;
        axpy(1.0 / n, g, &mut grad);
    }
    Ok((objective, grad))
}

/// Baseline UAP over observations from `m = n·l` clean rollouts.
pub fn baseline_uap<E, P>(policy: &P, env: &E, cfg: &AttackConfig) -> Result<AttackResult>
where
    E: Environment + Clone + Sync,
    P: DifferentiablePolicy + ?Sized,
{
    let started = std::time::Instant::now();
    let dim = check_inputs(env, policy, cfg)?;
    let epsilon = cfg.epsilon(dim);
    let episodes = sampled_episodes(cfg, 0, env.episode_count());
    let clean = rollout_batch(env, policy, None, &episodes, &cfg.rollout_options())?;
    let mut dataset = Vec::new();
    for t in &clean {
        for s in &t.steps {
            let probs = policy.probs(&s.observation.data)?;
            let target = argmax(&probs);
            dataset.push((s.observation.data.clone(), target));
        }
    }
    if dataset.is_empty() {
        return Err(Error::NoData("clean rollouts produced no observations".into()));
    }
    let sampled_steps = dataset.len();
    let mut delta = vec![0.0; dim];
    let mut steps = Vec::with_capacity(cfg.baseline_steps);
    for k in 0..cfg.baseline_steps {
        let (objective, grad) = baseline_objective_gradient(policy, &dataset, &delta)?;
        steps.push(AttackStep {
            k,
            delta: delta.clone(),
            direction: grad.clone(),
            mean_return: objective,
            successes: clean.iter().filter(|t| t.goal_reached).count(),
            trajectories: clean.len(),
            stalled: false,
            rollout_delta_hash: delta_fingerprint(&vec![0.0; dim]),
            gradient_delta_hash: delta_fingerprint(&delta),
        });
        axpy(-cfg.baseline_lr, &grad, &mut delta);
        if cfg.projection_mode == ProjectionMode::PerStepBall {
            delta = project(&delta, epsilon, cfg.norm_order, ProjectionMode::PerStepBall);
        }
    }
    let unprojected = delta.clone();
    let projected = project(&delta, epsilon, cfg.norm_order, cfg.projection_mode);
    Ok(AttackResult {
        estimator: Estimator::BaselineUap,
        delta: Perturbation { delta: projected, epsilon, norm_order: cfg.norm_order },
        eta: cfg.eta,
        unprojected,
        steps,
        warnings: Vec::new(),
        clean_rollouts: clean.len(),
        disturbed_rollouts: 0,
        sampled_steps,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Dispatches on `cfg.estimator`.
pub fn run_attack<E, P>(policy: &P, env: &E, cfg: &AttackConfig) -> Result<AttackResult>
where
    E: Environment + Clone + Sync,
    P: DifferentiablePolicy + ?Sized,
{
    match cfg.estimator {
        Estimator::BaselineUap => baseline_uap(policy, env, cfg),
        Estimator::RewardToGo | Estimator::VictimQ => reward_uap(policy, env, cfg),
        Estimator::GoalIndicator => trajectory_uap(policy, env, cfg),
    }
}

/// On-disk perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationFile {
    pub format: String,
    pub version: u32,
    pub shape: Shape,
    pub delta: Vec<f64>,
    pub epsilon: f64,
    pub eta: f64,
    pub norm_order: NormOrder,
    pub config: serde_json::Value,
    pub config_hash: String,
}

impl PerturbationFile {
    pub fn new<C: Serialize>(delta: &Perturbation, eta: f64, shape: Shape, config: &C) -> Result<Self> {
        if shape.len() != delta.dim() {
            return Err(Error::DimensionMismatch { expected: shape.len(), found: delta.dim() });
        }
        Ok(Self {
            format: PERTURBATION_FORMAT.to_string(),
            version: PERTURBATION_VERSION,
            shape,
            delta: delta.delta.clone(),
            epsilon: delta.epsilon,
            eta,
            norm_order: delta.norm_order,
            config: serde_json::to_value(config)?,
            config_hash: config_hash(config)?,
        })
    }

    pub fn perturbation(&self) -> Perturbation {
        Perturbation { delta: self.delta.clone(), epsilon: self.epsilon, norm_order: self.norm_order }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: Self = serde_json::from_reader(BufReader::new(File::open(path)?))
            .map_err(|e| Error::Schema(e.to_string()))?;
        if file.format != PERTURBATION_FORMAT || file.version != PERTURBATION_VERSION {
            return Err(Error::Schema(format!(
                "expected {PERTURBATION_FORMAT} v{PERTURBATION_VERSION}, found {} v{}",
                file.format, file.version
            )));
        }
        if file.shape.len() != file.delta.len() {
            return Err(Error::Schema("perturbation length disagrees with its shape".into()));
        }
        if file.delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("perturbation has non-finite entries".into()));
        }
        Ok(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{chain3, LinearSoftmaxPolicy, TabularEnv};
    use proptest::prelude::*;

    #[test]
    fn boundary_projection_examples() {
        let d = vec![3.0, 4.0];
        let p = project(&d, 2.5, NormOrder::L2, ProjectionMode::FinalBoundary);
        assert!((l2_norm(&p) - 2.5).abs() < 1e-12);
        assert!((p[0] / p[1] - 0.75).abs() < 1e-12);
        let up = project(&[0.3, 0.4], 1.0, NormOrder::L2, ProjectionMode::FinalBoundary);
        assert!((l2_norm(&up) - 1.0).abs() < 1e-12);
        assert_eq!(project(&[0.0, 0.0], 1.0, NormOrder::L2, ProjectionMode::FinalBoundary), vec![0.0, 0.0]);
    }

    #[test]
    fn ball_projection_examples() {
        let inside = vec![0.3, 0.4];
        assert_eq!(project(&inside, 1.0, NormOrder::L2, ProjectionMode::PerStepBall), inside);
        let clipped = project(&[2.0, -0.5, -3.0], 1.0, NormOrder::Linf, ProjectionMode::PerStepBall);
        assert_eq!(clipped, vec![1.0, -0.5, -1.0]);
    }

    #[test]
    fn goal_weights_example() {
        let w = goal_weights(4, true, 0.9);
        let expected = [0.729, 0.81, 0.9, 1.0];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(goal_weights(3, false, 0.9), vec![0.0; 3]);
    }

    #[test]
    fn estimator_labels_round_trip() {
        for e in Estimator::ALL {
            assert_eq!(e.label().parse::<Estimator>().unwrap(), e);
        }
    }

    fn chain_setup() -> (LinearSoftmaxPolicy, TabularEnv) {
        let m = chain3();
        (m.policy.clone(), TabularEnv::new(&m))
    }

    #[test]
    fn zero_alpha_leaves_zero_delta() {
        let (policy, env) = chain_setup();
        let cfg = AttackConfig { alpha: Some(0.0), n: 3, l: 4, ..AttackConfig::default() };
        let r = reward_uap(&policy, &env, &cfg).unwrap();
        assert!(r.delta.is_zero());
        assert!(r.unprojected.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn trajectories_never_succeed_on_tabular_env_so_trajectory_uap_stalls() {
        let (policy, env) = chain_setup();
        let cfg = AttackConfig { estimator: Estimator::GoalIndicator, n: 3, l: 2, ..AttackConfig::default() };
        let r = trajectory_uap(&policy, &env, &cfg).unwrap();
        assert!(r.steps.iter().all(|s| s.stalled));
        assert!(r.delta.is_zero());
        assert_eq!(r.warnings.len(), 3 + 1);
    }

    #[test]
    fn sampling_uses_current_delta() {
        let (policy, env) = chain_setup();
        let cfg = AttackConfig { alpha: Some(0.5), n: 4, l: 8, ..AttackConfig::default() };
        let r = reward_uap(&policy, &env, &cfg).unwrap();
        for w in r.steps.windows(2) {
            assert_eq!(w[0].rollout_delta_hash, w[0].gradient_delta_hash);
            let mut expected = w[0].delta.clone();
            axpy(-0.5, &w[0].direction, &mut expected);
            assert_eq!(w[1].delta, expected);
        }
        assert!((r.delta.norm() - cfg.epsilon(2)).abs() < 1e-9);
        assert_eq!((r.clean_rollouts, r.disturbed_rollouts), (0, 32));
    }

    #[test]
    fn baseline_never_samples_under_delta() {
        let (policy, env) = chain_setup();
        let cfg = AttackConfig { estimator: Estimator::BaselineUap, n: 2, l: 3, baseline_steps: 5, ..AttackConfig::default() };
        let r = baseline_uap(&policy, &env, &cfg).unwrap();
        assert_eq!((r.clean_rollouts, r.disturbed_rollouts), (6, 0));
        assert!(r.steps.iter().all(|s| s.rollout_delta_hash == delta_fingerprint(&[0.0, 0.0])));
    }

    #[test]
    fn baseline_zero_steps_is_zero() {
        let (policy, env) = chain_setup();
        let cfg = AttackConfig { estimator: Estimator::BaselineUap, baseline_steps: 0, ..AttackConfig::default() };
        assert!(baseline_uap(&policy, &env, &cfg).unwrap().delta.is_zero());
    }

    #[test]
    fn baseline_one_step_follows_closed_form() {
        let policy = LinearSoftmaxPolicy::from_rows(&[vec![1.0, -0.5, 0.2], vec![-0.3, 0.8, 0.1], vec![0.0, 0.4, -0.9]]).unwrap();
        let x = vec![0.6, 0.1, -0.4];
        let probs = policy.probs(&x).unwrap();
        let target = argmax(&probs);
        let (_, g) = baseline_objective_gradient(&policy, &[(x.clone(), target)], &[0.0; 3]).unwrap();
        let closed = policy.grad_prob_input(&x, target);
        let step: Vec<f64> = g.iter().map(|v| -v).collect();
        let projected = project(&step, 1.7, NormOrder::L2, ProjectionMode::FinalBoundary);
        let expected = project(&closed.iter().map(|v| -v).collect::<Vec<_>>(), 1.7, NormOrder::L2, ProjectionMode::FinalBoundary);
        for (a, b) in projected.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn drift_detector_fires_on_tampered_log_prob() {
        let (policy, env) = chain_setup();
        let mut env = env;
        let delta = Perturbation::zeros(2, 1.0, NormOrder::L2);
        let mut t = crate::mdp::rollout(&mut env, &policy, Some(&delta), 0, 5, &RolloutOptions::default()).unwrap();
        t.steps[0].log_prob += 1e-3;
        let w = vec![1.0; t.len()];
        assert!(matches!(trajectory_direction(&policy, &t, &w, &delta, None), Err(Error::SamplingDrift { .. })));
    }

    #[test]
    fn victim_q_needs_value_head() {
        let (policy, env) = chain_setup();
        let cfg = AttackConfig { estimator: Estimator::VictimQ, n: 1, l: 2, ..AttackConfig::default() };
        assert!(reward_uap(&policy, &env, &cfg).is_err());
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(v in proptest::collection::vec(-5.0f64..5.0, 1..20), eps in 0.1f64..4.0, linf in any::<bool>(), ball in any::<bool>()) {
            let norm = if linf { NormOrder::Linf } else { NormOrder::L2 };
            let mode = if ball { ProjectionMode::PerStepBall } else { ProjectionMode::FinalBoundary };
            let once = project(&v, eps, norm, mode);
            let twice = project(&once, eps, norm, mode);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!(norm.norm(&once) <= eps + 1e-9);
            if !ball && norm.norm(&v) > 0.0 {
                prop_assert!((norm.norm(&once) - eps).abs() < 1e-9);
            }
        }
    }
}
