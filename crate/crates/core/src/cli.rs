//! Command-line front end.
//!
//! Every subcommand resolves its settings as flags, then environment
//! variables (`UAPLAB_SEED`, `UAPLAB_JOBS`), then the `--config` TOML file,
//! then built-in defaults, and writes the effective settings into its
//! artifacts. Exit codes: 0 success, 1 usage error, 2 any failure after
//! argument parsing (validation, failed gates, I/O).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, sampled_episodes, AttackConfig, Estimator, PerturbationFile, ProjectionMode};
use crate::error::{Error, Result};
use crate::gridnav::{GridNavEnv, Suite};
use crate::mdp::{derive_seed, rollout, rollout_batch, Environment, NormOrder, Observation, Perturbation, RolloutOptions, Shape, TrajectoryBatch};
use crate::oracle::{gradcheck, write_gradcheck_csv, DEFAULT_FD_STEP};
use crate::policy::PolicyNet;
use crate::report::{attack_env, config_hash, render_trajectory, table1_run, table2_run, ComparisonRow, ComparisonTable, CLEAN_LABEL};
use crate::train::{evaluation_trajectories, train, write_training_log, EvalReport, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "uaplab", version, about = "Universal adversarial perturbations against navigation policies")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Worker threads; 1 runs everything serially.
    #[arg(long, global = true, env = "UAPLAB_JOBS")]
    pub jobs: Option<usize>,
    /// TOML file with `[train]`, `[attack]` and `[gradcheck]` tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a victim policy on a map suite.
    Train(TrainArgs),
    /// Optimize a universal perturbation against a victim.
    Attack(AttackArgs),
    /// Evaluate a victim, optionally under a saved perturbation.
    Eval(EvalArgs),
    /// Check the tabular identities on random fixtures.
    Gradcheck(GradcheckArgs),
    /// Every adversary against one victim per suite.
    Table1(Table1Args),
    /// Attack budget ablation over m.
    Table2(Table2Args),
    /// Draw one held-out episode as ASCII and PPM.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub suite: Option<Suite>,
    #[arg(long, env = "UAPLAB_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_episodes: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub gate: Option<f64>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

/// Attack flags shared by `attack`, `table1` and `table2`.
#[derive(Debug, Args, Clone, Default)]
pub struct AttackFlags {
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub outer_steps: Option<usize>,
    #[arg(long)]
    pub traj_per_step: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// `l2` or `linf`.
    #[arg(long)]
    pub norm: Option<NormOrder>,
    /// `final` (rescale once onto the boundary) or `ball` (project every step).
    #[arg(long)]
    pub projection: Option<String>,
    #[arg(long, env = "UAPLAB_SEED")]
    pub seed: Option<u64>,
    /// Clamp disturbed observations into the valid range.
    #[arg(long)]
    pub clamp: bool,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub method: Estimator,
    #[arg(long)]
    pub victim: PathBuf,
    #[arg(long)]
    pub suite: Suite,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the sampled trajectories of every outer step.
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    #[command(flatten)]
    pub attack: AttackFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub victim: PathBuf,
    #[arg(long)]
    pub suite: Suite,
    /// Perturbation file, or `none`.
    #[arg(long, default_value = "none")]
    pub perturbation: String,
    #[arg(long, env = "UAPLAB_SEED")]
    pub seed: Option<u64>,
    /// Report CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Trajectory batch JSON.
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    /// Embed observations in the trajectory batch.
    #[arg(long)]
    pub with_observations: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub fixtures: Option<usize>,
    #[arg(long, env = "UAPLAB_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Table1Args {
    /// Directory holding `<suite>.json` checkpoints.
    #[arg(long)]
    pub victims: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "rooms,maze,corridors")]
    pub suites: Vec<Suite>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Aligned-text copy of the table.
    #[arg(long)]
    pub text: Option<PathBuf>,
    #[command(flatten)]
    pub attack: AttackFlags,
}

#[derive(Debug, Args)]
pub struct Table2Args {
    #[arg(long)]
    pub victim: PathBuf,
    #[arg(long)]
    pub suite: Suite,
    #[arg(long, value_delimiter = ',', default_value = "5,10,15")]
    pub m: Vec<usize>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub text: Option<PathBuf>,
    #[command(flatten)]
    pub attack: AttackFlags,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub victim: PathBuf,
    #[arg(long)]
    pub suite: Suite,
    #[arg(long, default_value_t = 0)]
    pub episode: usize,
    #[arg(long, default_value = "none")]
    pub perturbation: String,
    #[arg(long, env = "UAPLAB_SEED")]
    pub seed: Option<u64>,
    /// ASCII output; printed to stdout when absent.
    #[arg(long)]
    pub ascii: Option<PathBuf>,
    #[arg(long)]
    pub ppm: Option<PathBuf>,
}

/// Contents of the `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub train: Option<TrainConfig>,
    pub attack: Option<AttackConfig>,
    pub gradcheck: Option<GradcheckConfig>,
    pub eval_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub fixtures: usize,
    pub seed: u64,
    pub tol: f64,
    pub h: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { fixtures: 20, seed: 0, tol: 1e-4, h: DEFAULT_FD_STEP }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        toml::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }
}

impl AttackFlags {
    /// Flags over `base`.
    pub fn apply(&self, base: &AttackConfig) -> Result<AttackConfig> {
        let mut cfg = base.clone();
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
        if self.alpha.is_some() {
            cfg.alpha = self.alpha;
        }
        if let Some(v) = self.outer_steps {
            cfg.n = v;
        }
        if let Some(v) = self.traj_per_step {
            cfg.l = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.norm {
            cfg.norm_order = v;
        }
        if let Some(p) = &self.projection {
            cfg.projection_mode = match p.as_str() {
                "final" | "final_boundary" => ProjectionMode::FinalBoundary,
                "ball" | "per_step_ball" => ProjectionMode::PerStepBall,
                other => return Err(Error::Validation(format!("unknown projection mode `{other}`"))),
            };
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.clamp |= self.clamp;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` and runs the selected subcommand, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    EXIT_OK
                }
                _ => {
                    eprint!("{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(j) = cli.jobs {
            if j == 0 {
                return Err(Error::Validation("--jobs must be at least 1".into()));
            }
            b = b.num_threads(j);
        }
        b.build().map_err(|e| Error::Validation(e.to_string()))?
    };
    pool.install(|| match &cli.command {
        Command::Train(a) => cmd_train(a, &file),
        Command::Attack(a) => cmd_attack(a, &file),
        Command::Eval(a) => cmd_eval(a, &file),
        Command::Gradcheck(a) => cmd_gradcheck(a, &file),
        Command::Table1(a) => cmd_table1(a, &file),
        Command::Table2(a) => cmd_table2(a, &file),
        Command::Render(a) => cmd_render(a, &file),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn cmd_train(a: &TrainArgs, file: &FileConfig) -> Result<i32> {
    let mut cfg = file.train.clone().unwrap_or_default();
    if let Some(v) = a.suite {
        cfg.suite = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.batch_episodes {
        cfg.batch_episodes = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.gate {
        cfg.gate = v;
    }
    let outcome = train(&cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    outcome.policy.save(&a.out)?;
    if let Some(path) = &a.log {
        let mut buf = Vec::new();
        write_training_log(&outcome.log, &mut buf)?;
        writeln!(buf, "# {}", serde_json::json!({ "config_hash": config_hash(&cfg)?, "config": cfg }))?;
        write_file(path, &buf)?;
    }
    let h = &outcome.heldout;
    println!(
        "held-out {}: reward {:.3} succ {:.2} spl {:.3} (gate {:.2})",
        cfg.suite, h.reward_mean, h.succ, h.spl, cfg.gate
    );
    if outcome.passed_gate {
        Ok(EXIT_OK)
    } else {
        eprintln!("training did not reach the success gate");
        Ok(EXIT_FAILURE)
    }
}

fn load_victim(path: &Path, env: &GridNavEnv) -> Result<PolicyNet> {
    let victim = PolicyNet::load(path)?;
    victim.ensure_input_dim(env.observation_dim())?;
    Ok(victim)
}

fn crop_shape(env: &GridNavEnv) -> Result<Shape> {
    let mut probe = env.clone();
    let obs: Observation = probe.reset(0, 0)?;
    Ok(obs.shape)
}

#[derive(Serialize)]
struct AttackRun<'a> {
    suite: Suite,
    victim: String,
    attack: &'a AttackConfig,
}

fn cmd_attack(a: &AttackArgs, file: &FileConfig) -> Result<i32> {
    let base = AttackConfig { estimator: a.method, ..file.attack.clone().unwrap_or_default() };
    let cfg = a.attack.apply(&base)?;
    let heldout = GridNavEnv::heldout(a.suite);
    let victim = load_victim(&a.victim, &heldout)?;
    let pool = attack_env(&heldout, a.suite);
    let result = run_attack(&victim, &pool, &cfg)?;
    let run = AttackRun { suite: a.suite, victim: a.victim.display().to_string(), attack: &cfg };
    let out = PerturbationFile::new(&result.delta, cfg.eta, crop_shape(&heldout)?, &run)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    out.save(&a.out)?;
    if let Some(path) = &a.trajectories {
        // replaying the sampling reproduces exactly what the attack saw
        let mut all = Vec::new();
        if cfg.estimator == Estimator::BaselineUap {
            let eps = sampled_episodes(&cfg, 0, pool.episode_count());
            all = rollout_batch(&pool, &victim, None, &eps, &cfg.rollout_options())?;
        } else {
            for step in &result.steps {
                let delta = Perturbation { delta: step.delta.clone(), ..result.delta.clone() };
                let eps = sampled_episodes(&cfg, step.k, pool.episode_count());
                all.extend(rollout_batch(&pool, &victim, Some(&delta), &eps, &cfg.rollout_options())?);
            }
        }
        TrajectoryBatch::new(&all, false).save(path)?;
    }
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{} on {}: ‖δ‖ = {:.6} (ε = {:.6}), {} disturbed / {} clean rollouts",
        cfg.estimator,
        a.suite,
        result.delta.norm(),
        result.delta.epsilon,
        result.disturbed_rollouts,
        result.clean_rollouts
    );
    Ok(EXIT_OK)
}

fn load_perturbation(arg: &str, dim: usize) -> Result<Option<Perturbation>> {
    if arg == "none" {
        return Ok(None);
    }
    let file = PerturbationFile::load(Path::new(arg))?;
    if file.delta.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: file.delta.len() });
    }
    Ok(Some(file.perturbation()))
}

#[derive(Serialize)]
struct EvalRun<'a> {
    suite: Suite,
    victim: String,
    perturbation: &'a str,
    seed: u64,
}

fn cmd_eval(a: &EvalArgs, file: &FileConfig) -> Result<i32> {
    let heldout = GridNavEnv::heldout(a.suite);
    let victim = load_victim(&a.victim, &heldout)?;
    let delta = load_perturbation(&a.perturbation, heldout.observation_dim())?;
    let seed = a.seed.or(file.eval_seed).unwrap_or(0);
    let trajectories = evaluation_trajectories(&victim, &heldout, delta.as_ref(), seed)?;
    let report = EvalReport::from_trajectories(&trajectories)?;
    println!("{}", serde_json::to_string(&report)?);
    if let Some(path) = &a.out {
        let run = EvalRun { suite: a.suite, victim: a.victim.display().to_string(), perturbation: &a.perturbation, seed };
        let hash = config_hash(&run)?;
        let eta = match &delta {
            Some(d) => d.epsilon / (d.dim() as f64).sqrt(),
            None => 0.0,
        };
        let adversary = if delta.is_some() { "replay" } else { CLEAN_LABEL };
        let row = ComparisonRow {
            suite: a.suite.name().into(),
            adversary: adversary.into(),
            eta,
            m: 0,
            reward_mean: report.reward_mean,
            succ: report.succ,
            spl: report.spl,
            seed,
            config_hash: hash,
        };
        write_file(path, ComparisonTable::new(vec![row], seed, &run)?.to_csv()?.as_bytes())?;
    }
    if let Some(path) = &a.trajectories {
        TrajectoryBatch::new(&trajectories, a.with_observations).save(path)?;
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: &GradcheckArgs, file: &FileConfig) -> Result<i32> {
    let mut cfg = file.gradcheck.clone().unwrap_or_default();
    if let Some(v) = a.fixtures {
        cfg.fixtures = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.tol {
        cfg.tol = v;
    }
    if let Some(v) = a.h {
        cfg.h = v;
    }
    let rows = gradcheck(cfg.fixtures, cfg.seed, cfg.h)?;
    let mut buf = Vec::new();
    write_gradcheck_csv(&rows, &mut buf)?;
    writeln!(buf, "# {}", serde_json::json!({ "config_hash": config_hash(&cfg)?, "config": cfg }))?;
    match &a.out {
        Some(path) => write_file(path, &buf)?,
        None => std::io::stdout().write_all(&buf)?,
    }
    let failed: Vec<usize> = rows.iter().filter(|r| !r.passes(cfg.tol)).map(|r| r.fixture).collect();
    if failed.is_empty() {
        eprintln!("gradcheck: {} fixtures within tolerance", rows.len());
        Ok(EXIT_OK)
    } else {
        eprintln!("gradcheck: fixtures {failed:?} exceed tolerance {}", cfg.tol);
        Ok(EXIT_FAILURE)
    }
}

fn emit_table(table: &ComparisonTable, out: &Path, text: Option<&Path>) -> Result<()> {
    write_file(out, table.to_csv()?.as_bytes())?;
    let rendered = table.to_text();
    if let Some(path) = text {
        write_file(path, rendered.as_bytes())?;
    }
    print!("{rendered}");
    Ok(())
}

fn cmd_table1(a: &Table1Args, file: &FileConfig) -> Result<i32> {
    let cfg = a.attack.apply(&file.attack.clone().unwrap_or_default())?;
    let mut victims = Vec::new();
    for &suite in &a.suites {
        let path = a.victims.join(format!("{}.json", suite.name()));
        if !path.exists() {
            return Err(Error::NoData(format!("missing victim checkpoint for suite {suite}: {}", path.display())));
        }
        victims.push((suite, load_victim(&path, &GridNavEnv::heldout(suite))?));
    }
    let eval_seed = a.eval_seed.or(file.eval_seed).unwrap_or(0);
    let table = table1_run(&victims, &Estimator::ALL, &cfg, eval_seed)?;
    emit_table(&table, &a.out, a.text.as_deref())?;
    Ok(EXIT_OK)
}

fn cmd_table2(a: &Table2Args, file: &FileConfig) -> Result<i32> {
    let cfg = a.attack.apply(&file.attack.clone().unwrap_or_default())?;
    let heldout = GridNavEnv::heldout(a.suite);
    let victim = load_victim(&a.victim, &heldout)?;
    let eval_seed = a.eval_seed.or(file.eval_seed).unwrap_or(0);
    let table = table2_run(&victim, a.suite, &a.m, &cfg, eval_seed)?;
    emit_table(&table, &a.out, a.text.as_deref())?;
    Ok(EXIT_OK)
}

fn cmd_render(a: &RenderArgs, file: &FileConfig) -> Result<i32> {
    let heldout = GridNavEnv::heldout(a.suite);
    let victim = load_victim(&a.victim, &heldout)?;
    let delta = load_perturbation(&a.perturbation, heldout.observation_dim())?;
    let episode = heldout
        .episodes()
        .get(a.episode)
        .cloned()
        .ok_or_else(|| Error::Validation(format!("episode {} out of range", a.episode)))?;
    let seed = a.seed.or(file.eval_seed).unwrap_or(0);
    let mut env = heldout.clone();
    let episode_seed = derive_seed(seed, a.episode as u64);
    let traj = rollout(&mut env, &victim, delta.as_ref(), a.episode, episode_seed, &RolloutOptions::default())?;
    let render = render_trajectory(&traj, &episode, heldout.map(&episode.map)?)?;
    match &a.ascii {
        Some(path) => write_file(path, render.ascii.as_bytes())?,
        None => print!("{}", render.ascii),
    }
    if let Some(path) = &a.ppm {
        write_file(path, &render.ppm)?;
    }
    Ok(EXIT_OK)
}
