//! Victim training and evaluation.
//!
//! The trainer is REINFORCE with a learned value baseline and an entropy
//! bonus, optimized with Adam. Rollouts within an iteration run in parallel;
//! per-trajectory gradients are summed in episode order so results do not
//! depend on the thread count.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridnav::{generate_episodes, GridNavEnv, Suite};
use crate::mdp::{
    derive_seed, reward_to_go, rollout_batch, DifferentiablePolicy, Environment, Perturbation, RolloutOptions,
    Trajectory, DEFAULT_HORIZON,
};
use crate::policy::{Params, PolicyNet, DEFAULT_HIDDEN};

const TRAIN_STREAM: u64 = 0x0071_241A;
const ROLLOUT_STREAM: u64 = 0x5EED;
const TRAINING_POOL: usize = 4000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub suite: Suite,
    pub seed: u64,
    pub iterations: usize,
    pub batch_episodes: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub hidden: Vec<usize>,
    /// Episode cap during training; evaluation always uses the full horizon.
    pub train_horizon: usize,
    /// Held-out Succ the final policy must reach.
    pub gate: f64,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            suite: Suite::Rooms,
            seed: 7,
            iterations: 400,
            batch_episodes: 48,
            learning_rate: 2e-3,
            gamma: 0.99,
            entropy_coef: 0.01,
            value_coef: 0.5,
            hidden: DEFAULT_HIDDEN.to_vec(),
            train_horizon: 150,
            gate: 0.8,
            eval_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_episodes == 0 {
            return Err(Error::Validation("batch_episodes must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Validation("learning_rate must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Validation("gamma must lie in (0, 1)".into()));
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 || self.train_horizon == 0 {
            return Err(Error::Validation("coefficients must be nonnegative and the horizon positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gate) {
            return Err(Error::Validation("gate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Loss weights for one REINFORCE gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientWeights {
    pub gamma: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Subtract the value head from the return. Does not bias the policy term.
    pub baseline: bool,
}

/// Ascent direction of one trajectory:
/// `Σ_t (G_t − b_t) ∇θ log π(a_t|o_t) + β ∇θ H + c ∇θ(−½(G_t − V_t)²)`.
pub fn trajectory_gradient(policy: &PolicyNet, traj: &Trajectory, w: &GradientWeights) -> Result<Params> {
    let returns = reward_to_go(&traj.rewards(), w.gamma)?;
    let mut grads = policy.params().zeros_like();
    for (step, g) in traj.steps.iter().zip(&returns) {
        let tape = policy.forward(&step.observation.data)?;
        let baseline = if w.baseline { tape.value } else { 0.0 };
        let advantage = g - baseline;
        let mut d_logits = PolicyNet::dlogp_dlogits(&tape.probs, step.action);
        for v in &mut d_logits {
            *v *= advantage;
        }
        if w.entropy_coef > 0.0 {
            let entropy = entropy(&tape.probs);
            for (d, p) in d_logits.iter_mut().zip(&tape.probs) {
                *d -= w.entropy_coef * p * (p.max(f64::MIN_POSITIVE).ln() + entropy);
            }
        }
        let d_value = w.value_coef * (g - tape.value);
        policy.backward(&tape, &d_logits, d_value, 1.0, Some(&mut grads));
    }
    Ok(grads)
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Sum of per-trajectory gradients, reduced in trajectory order.
pub fn batch_gradient(policy: &PolicyNet, trajectories: &[Trajectory], w: &GradientWeights) -> Result<Params> {
    let parts: Vec<Params> =
        trajectories.par_iter().map(|t| trajectory_gradient(policy, t, w)).collect::<Result<_>>()?;
    let mut total = policy.params().zeros_like();
    for p in &parts {
        total.add_scaled(p, 1.0);
    }
    Ok(total)
}

/// Adam in ascent form.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; param_count], v: vec![0.0; param_count], t: 0 }
    }

    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] += self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub mean_return: f64,
    pub succ: f64,
    pub entropy: f64,
}

pub fn write_training_log<W: Write>(rows: &[TrainLogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: PolicyNet,
    pub log: Vec<TrainLogRow>,
    pub heldout: EvalReport,
    pub passed_gate: bool,
}

/// Trains a victim on `config.suite` and evaluates it on the held-out set.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let suite_env = GridNavEnv::heldout(config.suite);
    let pool = generate_episodes(&config.suite.maps(), TRAINING_POOL, derive_seed(config.seed, TRAIN_STREAM))?;
    let train_env = suite_env.with_episodes(pool).with_max_steps(config.train_horizon);
    let mut policy = PolicyNet::new(
        train_env.observation_dim(),
        &config.hidden,
        train_env.action_count(),
        derive_seed(config.seed, 0),
    )?;
    let weights = GradientWeights {
        gamma: config.gamma,
        entropy_coef: config.entropy_coef,
        value_coef: config.value_coef,
        baseline: true,
    };
    let options = RolloutOptions { horizon: config.train_horizon, clamp: false };
    let mut adam = Adam::new(policy.params().param_count(), config.learning_rate);
    let mut picker = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, ROLLOUT_STREAM));
    let mut log = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let batch: Vec<(usize, u64)> = (0..config.batch_episodes)
            .map(|_| (picker.random_range(0..train_env.episode_count()), picker.random()))
            .collect();
        let trajectories = rollout_batch(&train_env, &policy, None, &batch, &options)?;
        let steps: usize = trajectories.iter().map(Trajectory::len).sum();
        let grad = batch_gradient(&policy, &trajectories, &weights)?;
        let mut flat_grad = grad.to_flat();
        for g in &mut flat_grad {
            *g /= steps.max(1) as f64;
        }
        if flat_grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("training gradient at iteration {iteration}")));
        }
        let mut flat = policy.params().to_flat();
        adam.ascend(&mut flat, &flat_grad);
        policy.params_mut().set_flat(&flat)?;
        if !policy.params().is_finite() {
            return Err(Error::NonFinite(format!("parameters after iteration {iteration}")));
        }
        log.push(log_row(iteration, &policy, &trajectories)?);
    }
    let heldout = evaluate(&policy, &suite_env, None, config.eval_seed)?;
    policy.set_metadata(serde_json::json!({ "train_config": config, "heldout": heldout }));
    let passed_gate = heldout.succ >= config.gate;
    Ok(TrainOutcome { policy, log, heldout, passed_gate })
}

fn log_row(iteration: usize, policy: &PolicyNet, trajectories: &[Trajectory]) -> Result<TrainLogRow> {
    let n = trajectories.len() as f64;
    let mut entropy_sum = 0.0;
    let mut steps = 0usize;
    for t in trajectories {
        for s in &t.steps {
            entropy_sum += entropy(&policy.probs(&s.observation.data)?);
            steps += 1;
        }
    }
    Ok(TrainLogRow {
        iteration,
        mean_return: trajectories.iter().map(Trajectory::total_reward).sum::<f64>() / n,
        succ: trajectories.iter().filter(|t| t.goal_reached).count() as f64 / n,
        entropy: entropy_sum / steps.max(1) as f64,
    })
}

/// Reward / Succ / SPL over an episode set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub reward_mean: f64,
    pub reward_stderr: f64,
    pub succ: f64,
    pub spl: f64,
}

impl EvalReport {
    pub fn from_trajectories(trajectories: &[Trajectory]) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::NoData("no episodes to evaluate".into()));
        }
        let n = trajectories.len() as f64;
        let rewards: Vec<f64> = trajectories.iter().map(Trajectory::total_reward).collect();
        let mean = rewards.iter().sum::<f64>() / n;
        let var = if rewards.len() > 1 {
            rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let terms: Vec<(bool, f64, f64)> =
            trajectories.iter().map(|t| (t.goal_reached, t.geodesic_start_distance, t.path_length)).collect();
        let spl = if terms.iter().all(|t| t.1 > 0.0) { crate::gridnav::spl(&terms)? } else { 0.0 };
        Ok(Self {
            episodes: trajectories.len(),
            reward_mean: mean,
            reward_stderr: (var / n).sqrt(),
            succ: trajectories.iter().filter(|t| t.goal_reached).count() as f64 / n,
            spl,
        })
    }
}

/// Plays every episode of `env` once with per-episode seeds derived from `seed`.
pub fn evaluation_trajectories<E, P>(
    policy: &P,
    env: &E,
    delta: Option<&Perturbation>,
    seed: u64,
) -> Result<Vec<Trajectory>>
where
    E: Environment + Clone + Sync,
    P: DifferentiablePolicy + ?Sized,
{
    if env.episode_count() == 0 {
        return Err(Error::NoData("empty episode set".into()));
    }
    if policy.input_dim() != env.observation_dim() {
        return Err(Error::DimensionMismatch { expected: env.observation_dim(), found: policy.input_dim() });
    }
    let episodes: Vec<(usize, u64)> = (0..env.episode_count()).map(|i| (i, derive_seed(seed, i as u64))).collect();
    rollout_batch(env, policy, delta, &episodes, &RolloutOptions { horizon: DEFAULT_HORIZON, clamp: false })
}

pub fn evaluate<E, P>(policy: &P, env: &E, delta: Option<&Perturbation>, seed: u64) -> Result<EvalReport>
where
    E: Environment + Clone + Sync,
    P: DifferentiablePolicy + ?Sized,
{
    EvalReport::from_trajectories(&evaluation_trajectories(policy, env, delta, seed)?)
}
