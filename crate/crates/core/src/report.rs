//! Comparison tables and trajectory renders.
//!
//! Tables are emitted as CSV (with a `#` footer carrying the seed, config
//! hash and effective config) and as aligned text with per-group minima
//! flagged. Renders overlay a trajectory on its map as ASCII and as a binary
//! PPM image.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{run_attack, AttackConfig, Estimator};
use crate::error::{Error, Result};
use crate::gridnav::{Episode, GridNavEnv, NavMap, Suite};
use crate::mdp::{Environment, StateHandle, Trajectory};
use crate::policy::PolicyNet;
use crate::train::{evaluate, EvalReport};

/// Episodes in the pool the attacker samples from.
pub const ATTACK_POOL: usize = 200;
pub const CLEAN_LABEL: &str = "none";

/// First 16 hex digits of SHA-256 over the canonical (key-sorted) JSON form.
pub fn config_hash<T: Serialize + ?Sized>(config: &T) -> Result<String> {
    let canonical = serde_json::to_string(&serde_json::to_value(config)?)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub suite: String,
    pub adversary: String,
    pub eta: f64,
    pub m: usize,
    pub reward_mean: f64,
    pub succ: f64,
    pub spl: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl ComparisonRow {
    fn new(suite: Suite, adversary: &str, eta: f64, m: usize, report: &EvalReport, seed: u64, hash: &str) -> Self {
        Self {
            suite: suite.name().to_string(),
            adversary: adversary.to_string(),
            eta,
            m,
            reward_mean: report.reward_mean,
            succ: report.succ,
            spl: report.spl,
            seed,
            config_hash: hash.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub seed: u64,
    pub config_hash: String,
    /// Effective configuration that produced the table.
    pub config: serde_json::Value,
}

const FOOTER_PREFIX: &str = "# ";

impl ComparisonTable {
    pub fn new<C: Serialize>(rows: Vec<ComparisonRow>, seed: u64, config: &C) -> Result<Self> {
        Ok(Self { rows, seed, config_hash: config_hash(config)?, config: serde_json::to_value(config)? })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        if self.rows.is_empty() {
            w.write_record(["suite", "adversary", "eta", "m", "reward_mean", "succ", "spl", "seed", "config_hash"])?;
        }
        let mut out = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
            .map_err(|e| Error::Schema(e.to_string()))?;
        let footer = serde_json::json!({ "seed": self.seed, "config_hash": self.config_hash, "config": self.config });
        writeln!(out, "{FOOTER_PREFIX}{}", serde_json::to_string(&footer)?).expect("writing to a String");
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let rows = reader.deserialize().collect::<std::result::Result<Vec<ComparisonRow>, _>>()?;
        let footer = text
            .lines()
            .rev()
            .find_map(|l| l.strip_prefix(FOOTER_PREFIX))
            .ok_or_else(|| Error::Schema("table has no provenance footer".into()))?;
        let footer: serde_json::Value = serde_json::from_str(footer).map_err(|e| Error::Schema(e.to_string()))?;
        let field = |k: &str| footer.get(k).cloned().ok_or_else(|| Error::Schema(format!("footer lacks `{k}`")));
        Ok(Self {
            rows,
            seed: field("seed")?.as_u64().ok_or_else(|| Error::Schema("footer seed".into()))?,
            config_hash: field("config_hash")?.as_str().unwrap_or_default().to_string(),
            config: field("config")?,
        })
    }

    /// Per `(suite, η, m)` group, which attacked rows hold the minimum of each metric.
    pub fn minima_flags(&self) -> Vec<[bool; 3]> {
        let key = |r: &ComparisonRow| (r.suite.clone(), r.eta.to_bits(), r.m);
        self.rows
            .iter()
            .map(|r| {
                if r.adversary == CLEAN_LABEL {
                    return [false; 3];
                }
                let group: Vec<&ComparisonRow> =
                    self.rows.iter().filter(|o| o.adversary != CLEAN_LABEL && key(o) == key(r)).collect();
                let min = |f: fn(&ComparisonRow) -> f64| group.iter().map(|o| f(o)).fold(f64::INFINITY, f64::min);
                [
                    r.reward_mean == min(|o| o.reward_mean),
                    r.succ == min(|o| o.succ),
                    r.spl == min(|o| o.spl),
                ]
            })
            .collect()
    }

    /// Aligned text; `*` marks the per-group minimum among attacked rows.
    pub fn to_text(&self) -> String {
        let flags = self.minima_flags();
        let mut out = String::new();
        writeln!(out, "{:<10} {:<11} {:>5} {:>3} {:>9} {:>7} {:>7}", "suite", "adversary", "eta", "m", "reward", "succ", "spl")
            .expect("writing to a String");
        for (r, f) in self.rows.iter().zip(flags) {
            let mark = |b: bool| if b { "*" } else { " " };
            writeln!(
                out,
                "{:<10} {:<11} {:>5} {:>3} {:>8.3}{} {:>6.2}{} {:>6.3}{}",
                r.suite,
                r.adversary,
                r.eta,
                r.m,
                r.reward_mean,
                mark(f[0]),
                r.succ,
                mark(f[1]),
                r.spl,
                mark(f[2])
            )
            .expect("writing to a String");
        }
        writeln!(out, "seed {}  config {}", self.seed, self.config_hash).expect("writing to a String");
        out
    }

    pub fn row(&self, adversary: &str, m: Option<usize>) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.adversary == adversary && m.is_none_or(|m| r.m == m))
    }
}

/// The attacker's episode pool for a suite, sharing the held-out environment's maps.
pub fn attack_env(heldout: &GridNavEnv, suite: Suite) -> GridNavEnv {
    heldout.with_episodes(suite.attack_episodes(ATTACK_POOL))
}

/// Clean row plus one row per adversary, all evaluated on the held-out set.
pub fn attack_and_evaluate(
    victim: &PolicyNet,
    suite: Suite,
    adversaries: &[Estimator],
    base: &AttackConfig,
    eval_seed: u64,
    config_hash: &str,
) -> Result<Vec<ComparisonRow>> {
    let heldout = GridNavEnv::heldout(suite);
    victim.ensure_input_dim(heldout.observation_dim())?;
    let attack_pool = attack_env(&heldout, suite);
    let clean = evaluate(victim, &heldout, None, eval_seed)?;
    let mut rows = vec![ComparisonRow::new(suite, CLEAN_LABEL, base.eta, 0, &clean, base.seed, config_hash)];
    for &estimator in adversaries {
        let cfg = AttackConfig { estimator, ..base.clone() };
        let result = run_attack(victim, &attack_pool, &cfg)?;
        let report = evaluate(victim, &heldout, Some(&result.delta), eval_seed)?;
        rows.push(ComparisonRow::new(suite, estimator.label(), base.eta, cfg.m(), &report, base.seed, config_hash));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1Config<'a> {
    pub suites: Vec<Suite>,
    pub adversaries: Vec<Estimator>,
    pub attack: &'a AttackConfig,
    pub eval_seed: u64,
}

/// One victim per suite, every adversary at one η.
pub fn table1_run(
    victims: &[(Suite, PolicyNet)],
    adversaries: &[Estimator],
    base: &AttackConfig,
    eval_seed: u64,
) -> Result<ComparisonTable> {
    let config = Table1Config {
        suites: victims.iter().map(|(s, _)| *s).collect(),
        adversaries: adversaries.to_vec(),
        attack: base,
        eval_seed,
    };
    let hash = config_hash(&config)?;
    let mut rows = Vec::new();
    for (suite, victim) in victims {
        rows.extend(attack_and_evaluate(victim, *suite, adversaries, base, eval_seed, &hash)?);
    }
    ComparisonTable::new(rows, base.seed, &config)
}

pub const TABLE2_METHODS: [Estimator; 3] = [Estimator::BaselineUap, Estimator::RewardToGo, Estimator::GoalIndicator];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table2Config<'a> {
    pub suite: Suite,
    pub m: Vec<usize>,
    pub attack: &'a AttackConfig,
    pub eval_seed: u64,
}

/// m-ablation: every method at each budget `m = n·l` with `l` fixed by `base`.
pub fn table2_run(
    victim: &PolicyNet,
    suite: Suite,
    ms: &[usize],
    base: &AttackConfig,
    eval_seed: u64,
) -> Result<ComparisonTable> {
    let distinct: BTreeSet<usize> = ms.iter().copied().collect();
    if distinct.len() != ms.len() {
        return Err(Error::Validation(format!("duplicate m values in {ms:?}")));
    }
    if ms.is_empty() {
        return Err(Error::Validation("no m values given".into()));
    }
    for &m in ms {
        if m == 0 || m % base.l != 0 {
            return Err(Error::Validation(format!("m = {m} is not a positive multiple of l = {}", base.l)));
        }
    }
    let config = Table2Config { suite, m: ms.to_vec(), attack: base, eval_seed };
    let hash = config_hash(&config)?;
    let heldout = GridNavEnv::heldout(suite);
    victim.ensure_input_dim(heldout.observation_dim())?;
    let pool = attack_env(&heldout, suite);
    let clean = evaluate(victim, &heldout, None, eval_seed)?;
    let mut rows = vec![ComparisonRow::new(suite, CLEAN_LABEL, base.eta, 0, &clean, base.seed, &hash)];
    for &m in ms {
        for estimator in TABLE2_METHODS {
            let cfg = AttackConfig { estimator, n: m / base.l, ..base.clone() };
            let result = run_attack(victim, &pool, &cfg)?;
            let report = evaluate(victim, &heldout, Some(&result.delta), eval_seed)?;
            rows.push(ComparisonRow::new(suite, estimator.label(), base.eta, m, &report, base.seed, &hash));
        }
    }
    ComparisonTable::new(rows, base.seed, &config)
}

/// `true` when `adversary`'s Succ never rises as m grows.
pub fn succ_non_increasing_in_m(table: &ComparisonTable, adversary: &str) -> bool {
    let mut rows: Vec<&ComparisonRow> = table.rows.iter().filter(|r| r.adversary == adversary).collect();
    rows.sort_by_key(|r| r.m);
    rows.windows(2).all(|w| w[1].succ <= w[0].succ)
}

// ---------------------------------------------------------------------------
// Trajectory renders

#[derive(Debug, Clone, PartialEq)]
pub struct Render {
    pub ascii: String,
    pub ppm: Vec<u8>,
}

const CELL_PX: usize = 8;

fn pose_cell(state: &StateHandle, map: &NavMap) -> Result<(usize, usize)> {
    match *state {
        StateHandle::Pose { row, col, .. } if row < map.rows() && col < map.cols() && !map.is_blocked(row, col) => {
            Ok((row, col))
        }
        StateHandle::Pose { row, col, .. } => {
            Err(Error::InvalidInput(format!("pose ({row}, {col}) is off the free cells of `{}`", map.name)))
        }
        StateHandle::Index(_) => Err(Error::InvalidInput("trajectory does not carry grid poses".into())),
    }
}

/// Distinct consecutive cells the agent occupied, start first.
pub fn visited_cells(traj: &Trajectory, episode: &Episode, map: &NavMap) -> Result<Vec<(usize, usize)>> {
    let mut cells = vec![episode.start.cell()];
    if !map.is_free(cells[0]) {
        return Err(Error::InvalidInput("episode start is not a free cell".into()));
    }
    if traj.is_empty() {
        return Ok(cells);
    }
    for state in traj.steps.iter().map(|s| &s.state).chain([&traj.final_state]) {
        let c = pose_cell(state, map)?;
        if cells.last() != Some(&c) {
            cells.push(c);
        }
    }
    Ok(cells)
}

/// ASCII and PPM overlay of `traj` on `map`.
///
/// ASCII legend: `#` obstacle, `.` free, `o` path, `S` start, `G` goal.
pub fn render_trajectory(traj: &Trajectory, episode: &Episode, map: &NavMap) -> Result<Render> {
    if episode.map != map.name {
        return Err(Error::InvalidInput(format!("episode is on `{}`, not `{}`", episode.map, map.name)));
    }
    let cells = visited_cells(traj, episode, map)?;
    let succ = u8::from(traj.goal_reached);
    let spl = if traj.goal_reached { episode.geodesic / traj.path_length.max(episode.geodesic) } else { 0.0 };
    let header = format!(
        "episode {} map {} succ {} spl {:.3} reward {:.3}",
        traj.episode_id,
        map.name,
        succ,
        spl,
        traj.total_reward()
    );
    let mut grid: Vec<Vec<char>> = (0..map.rows())
        .map(|r| (0..map.cols()).map(|c| if map.is_blocked(r, c) { '#' } else { '.' }).collect())
        .collect();
    for &(r, c) in &cells {
        grid[r][c] = 'o';
    }
    grid[episode.goal.0][episode.goal.1] = 'G';
    grid[episode.start.row][episode.start.col] = 'S';
    let mut ascii = format!("# {header}\n");
    for row in &grid {
        ascii.extend(row.iter());
        ascii.push('\n');
    }

    let (w, h) = (map.cols() * CELL_PX, map.rows() * CELL_PX);
    let mut ppm = format!("P6\n# {header}\n{w} {h}\n255\n").into_bytes();
    let mut pixels = vec![0u8; w * h * 3];
    for r in 0..map.rows() {
        for c in 0..map.cols() {
            let colour = match grid[r][c] {
                '#' => [60, 60, 60],
                'o' => [70, 110, 220],
                'S' => [220, 40, 40],
                'G' => [30, 170, 60],
                _ => [245, 245, 245],
            };
            for y in r * CELL_PX..(r + 1) * CELL_PX {
                for x in c * CELL_PX..(c + 1) * CELL_PX {
                    let border = y % CELL_PX == 0 || x % CELL_PX == 0;
                    let px = if border { colour.map(|v: u8| v / 2 + 60) } else { colour };
                    pixels[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&px);
                }
            }
        }
    }
    ppm.extend_from_slice(&pixels);
    Ok(Render { ascii, ppm })
}
