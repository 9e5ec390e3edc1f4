//! PointGoal navigation on 2-D occupancy grids.
//!
//! The agent lives on free cells with one of four headings and chooses among
//! `forward`, `turn_left`, `turn_right` and `stop`. Observations are a
//! `k × k` egocentric crop rotated to the heading, with three planes stored
//! channel-major (`index = c·k² + i·k + j`):
//!
//! 0. occupancy, 1 for obstacles and for cells outside the map;
//! 1. goal direction: `(1 + u·v̂) / 2` where `u` is the unit vector to the goal
//!    in the agent frame and `v̂` the unit direction of crop cell `(i, j)`
//!    from the centre (the centre cell, and every cell when standing on the
//!    goal, reads 0.5);
//! 2. goal distance `r / (r + 4)` with `r` the Euclidean cell distance,
//!    broadcast over the plane.
//!
//! Rewards follow the shaped PointGoal form: geodesic progress, a per-step
//! slack, a success bonus on a correct `stop` and a collision penalty.

use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{derive_seed, Environment, Observation, Shape, StateHandle, Transition, DEFAULT_HORIZON};

pub const ACTION_COUNT: usize = 4;
pub const DEFAULT_CROP: usize = 7;
pub const EPISODES_PER_SUITE: usize = 100;
pub const MIN_EPISODE_GEODESIC: f64 = 4.0;
const DISTANCE_HALF_SCALE: f64 = 4.0;

const HELDOUT_STREAM: u64 = 0x04E1_D0D7;
const ATTACK_STREAM: u64 = 0x00A7_7AC4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Forward = 0,
    TurnLeft = 1,
    TurnRight = 2,
    Stop = 3,
}

impl Action {
    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Action::Forward),
            1 => Ok(Action::TurnLeft),
            2 => Ok(Action::TurnRight),
            3 => Ok(Action::Stop),
            _ => Err(Error::InvalidInput(format!("action {i} out of range"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: u8) -> Self {
        Self::ALL[(i % 4) as usize]
    }

    pub fn left(self) -> Self {
        Self::from_index(self.index() + 3)
    }

    pub fn right(self) -> Self {
        Self::from_index(self.index() + 1)
    }

    /// Unit step `(drow, dcol)` straight ahead.
    pub fn forward_offset(self) -> (i64, i64) {
        match self {
            Heading::N => (-1, 0),
            Heading::E => (0, 1),
            Heading::S => (1, 0),
            Heading::W => (0, -1),
        }
    }

    /// Unit step `(drow, dcol)` to the agent's right.
    pub fn right_offset(self) -> (i64, i64) {
        self.right().forward_offset()
    }
}

/// Occupancy grid; `true` marks an obstacle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NavMap {
    pub name: String,
    rows: usize,
    cols: usize,
    blocked: Vec<bool>,
}

impl NavMap {
    /// Parses the ASCII format: `#` obstacle, `.` free, one row per line.
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        let rows = lines.len();
        let cols = lines.first().map_or(0, |l| l.chars().count());
        if rows < 3 || cols < 3 {
            return Err(Error::InvalidInput(format!("map `{name}` is smaller than 3x3")));
        }
        let mut blocked = Vec::with_capacity(rows * cols);
        for (r, line) in lines.iter().enumerate() {
            if line.chars().count() != cols {
                return Err(Error::InvalidInput(format!("map `{name}` row {r} has the wrong width")));
            }
            for ch in line.chars() {
                blocked.push(match ch {
                    '#' => true,
                    '.' => false,
                    other => return Err(Error::InvalidInput(format!("map `{name}`: unexpected `{other}`"))),
                });
            }
        }
        let map = Self { name: name.to_string(), rows, cols, blocked };
        let border_open = (0..rows).any(|r| !map.is_blocked(r, 0) || !map.is_blocked(r, cols - 1))
            || (0..cols).any(|c| !map.is_blocked(0, c) || !map.is_blocked(rows - 1, c));
        if border_open {
            return Err(Error::InvalidInput(format!("map `{name}` has a free border cell")));
        }
        if map.free_cells().is_empty() {
            return Err(Error::InvalidInput(format!("map `{name}` has no free cell")));
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("map").to_string();
        Self::parse(&name, &std::fs::read_to_string(path)?)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_blocked(&self, row: usize, col: usize) -> bool {
        self.blocked[row * self.cols + col]
    }

    /// Out-of-map coordinates count as blocked.
    pub fn is_blocked_at(&self, row: i64, col: i64) -> bool {
        if row < 0 || col < 0 || row >= self.rows as i64 || col >= self.cols as i64 {
            true
        } else {
            self.is_blocked(row as usize, col as usize)
        }
    }

    pub fn is_free(&self, cell: (usize, usize)) -> bool {
        cell.0 < self.rows && cell.1 < self.cols && !self.is_blocked(cell.0, cell.1)
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| !self.is_blocked(r, c))
            .collect()
    }

    pub fn to_ascii(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols + 1));
        for r in 0..self.rows {
            for c in 0..self.cols {
                s.push(if self.is_blocked(r, c) { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }

    fn neighbours(&self, (r, c): (usize, usize)) -> impl Iterator<Item = (usize, usize)> + '_ {
        [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].into_iter().filter_map(move |(dr, dc)| {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            (!self.is_blocked_at(nr, nc)).then_some((nr as usize, nc as usize))
        })
    }

    /// 4-connected BFS distances from `source`; `None` for unreachable or blocked cells.
    pub fn distance_field(&self, source: (usize, usize)) -> Vec<Option<u32>> {
        let mut dist = vec![None; self.rows * self.cols];
        if !self.is_free(source) {
            return dist;
        }
        let mut queue = VecDeque::from([source]);
        dist[source.0 * self.cols + source.1] = Some(0);
        while let Some(cell) = queue.pop_front() {
            let d = dist[cell.0 * self.cols + cell.1].expect("queued cells have a distance");
            for n in self.neighbours(cell) {
                let slot = &mut dist[n.0 * self.cols + n.1];
                if slot.is_none() {
                    *slot = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }
}

/// Shortest 4-connected path length between two free cells.
pub fn geodesic(map: &NavMap, from: (usize, usize), to: (usize, usize)) -> Result<f64> {
    if !map.is_free(from) || !map.is_free(to) {
        return Err(Error::InvalidInput(format!("{from:?} or {to:?} is not a free cell of `{}`", map.name)));
    }
    map.distance_field(to)[from.0 * map.cols + from.1]
        .map(f64::from)
        .ok_or(Error::Unreachable { from, to })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentPose {
    pub row: usize,
    pub col: usize,
    pub heading: Heading,
}

impl AgentPose {
    pub fn cell(&self) -> (usize, usize) {
        (self.row, self.col)
    }

    pub fn handle(&self) -> StateHandle {
        StateHandle::Pose { row: self.row, col: self.col, heading: self.heading.index() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub map: String,
    pub start: AgentPose,
    pub goal: (usize, usize),
    pub geodesic: f64,
}

impl Episode {
    pub fn new(map: &NavMap, start: AgentPose, goal: (usize, usize)) -> Result<Self> {
        if start.cell() == goal {
            return Err(Error::InvalidInput("episode goal equals its start".into()));
        }
        let geodesic = geodesic(map, start.cell(), goal)?;
        Ok(Self { map: map.name.clone(), start, goal, geodesic })
    }
}

pub fn save_episodes(episodes: &[Episode], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, episodes)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn load_episodes(path: &Path) -> Result<Vec<Episode>> {
    serde_json::from_reader(BufReader::new(File::open(path)?)).map_err(|e| Error::Schema(e.to_string()))
}

/// Reward shaping constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub slack: f64,
    pub success_bonus: f64,
    pub collision_penalty: f64,
    /// Geodesic distance (cells) within which `stop` counts as success.
    pub success_radius: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { slack: 0.01, success_bonus: 2.5, collision_penalty: 0.1, success_radius: 0.0 }
    }
}

/// `(prev − new) − slack + bonus·[success] − penalty·[collision]`
pub fn reward_fn(cfg: &RewardConfig, prev_geodesic: f64, new_geodesic: f64, collided: bool, success: bool) -> f64 {
    let mut r = (prev_geodesic - new_geodesic) - cfg.slack;
    if success {
        r += cfg.success_bonus;
    }
    if collided {
        r -= cfg.collision_penalty;
    }
    r
}

/// Success weighted by path length over `(success, geodesic, path_length)` triples.
pub fn spl(episodes: &[(bool, f64, f64)]) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::NoData("SPL of an empty episode list".into()));
    }
    let mut total = 0.0;
    for &(success, geo, path) in episodes {
        if !(geo > 0.0) || !(path >= 0.0) {
            return Err(Error::InvalidInput(format!("geodesic {geo} / path {path} out of range")));
        }
        if success {
            total += geo / path.max(geo);
        }
    }
    Ok(total / episodes.len() as f64)
}

/// Renders the egocentric observation for `pose`.
pub fn render_observation(map: &NavMap, pose: &AgentPose, goal: (usize, usize), crop: usize) -> Observation {
    let plane = crop * crop;
    let centre = (crop / 2) as i64;
    let mut data = vec![0.0; 3 * plane];
    let (fr, fc) = pose.heading.forward_offset();
    let (rr, rc) = pose.heading.right_offset();
    let goal_dr = goal.0 as f64 - pose.row as f64;
    let goal_dc = goal.1 as f64 - pose.col as f64;
    let goal_fwd = goal_dr * fr as f64 + goal_dc * fc as f64;
    let goal_right = goal_dr * rr as f64 + goal_dc * rc as f64;
    let goal_dist = (goal_dr * goal_dr + goal_dc * goal_dc).sqrt();
    let (ux, uy) = if goal_dist > 0.0 { (goal_fwd / goal_dist, goal_right / goal_dist) } else { (0.0, 0.0) };
    let dist_feature = goal_dist / (goal_dist + DISTANCE_HALF_SCALE);
    for i in 0..crop {
        for j in 0..crop {
            let ahead = centre - i as i64;
            let right = j as i64 - centre;
            let world_r = pose.row as i64 + ahead * fr + right * rr;
            let world_c = pose.col as i64 + ahead * fc + right * rc;
            let idx = i * crop + j;
            data[idx] = if map.is_blocked_at(world_r, world_c) { 1.0 } else { 0.0 };
            let norm = ((ahead * ahead + right * right) as f64).sqrt();
            let cos = if norm > 0.0 { (ux * ahead as f64 + uy * right as f64) / norm } else { 0.0 };
            data[plane + idx] = 0.5 * (1.0 + cos);
            data[2 * plane + idx] = dist_feature;
        }
    }
    Observation { data, shape: Shape { rows: crop, cols: crop, channels: 3 } }
}

/// Named map collections with their episode datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Rooms,
    Maze,
    Corridors,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Rooms, Suite::Maze, Suite::Corridors];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Rooms => "rooms",
            Suite::Maze => "maze",
            Suite::Corridors => "corridors",
        }
    }

    fn sources(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Suite::Rooms => &[
                ("room9x9", include_str!("../data/maps/room9x9.txt")),
                ("pillars11", include_str!("../data/maps/pillars11.txt")),
                ("tworoom", include_str!("../data/maps/tworoom.txt")),
            ],
            Suite::Maze => &[
                ("maze", include_str!("../data/maps/maze.txt")),
                ("maze2", include_str!("../data/maps/maze2.txt")),
            ],
            Suite::Corridors => &[
                ("corridor_l", include_str!("../data/maps/corridor_l.txt")),
                ("corridor_u", include_str!("../data/maps/corridor_u.txt")),
            ],
        }
    }

    pub fn maps(self) -> Vec<NavMap> {
        self.sources()
            .iter()
            .map(|(name, text)| NavMap::parse(name, text).expect("bundled maps are valid"))
            .collect()
    }

    /// The fixed 100-episode evaluation set.
    pub fn heldout_episodes(self) -> Vec<Episode> {
        generate_episodes(&self.maps(), EPISODES_PER_SUITE, derive_seed(HELDOUT_STREAM, self as u64))
            .expect("bundled maps admit episodes")
    }

    /// Episodes the attacker samples from; disjoint stream from the held-out set.
    pub fn attack_episodes(self, count: usize) -> Vec<Episode> {
        generate_episodes(&self.maps(), count, derive_seed(ATTACK_STREAM, self as u64))
            .expect("bundled maps admit episodes")
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rooms" => Ok(Suite::Rooms),
            "maze" => Ok(Suite::Maze),
            "corridors" => Ok(Suite::Corridors),
            other => Err(Error::InvalidInput(format!("unknown suite `{other}`"))),
        }
    }
}

impl std::fmt::Display for Suite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Seeded rejection sampling of episodes with geodesic ≥ 4.
pub fn generate_episodes(maps: &[NavMap], count: usize, seed: u64) -> Result<Vec<Episode>> {
    if maps.is_empty() {
        return Err(Error::NoData("no maps to sample episodes from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let free: Vec<Vec<(usize, usize)>> = maps.iter().map(NavMap::free_cells).collect();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 1000 * (count + 1) {
            return Err(Error::NoData("episode sampling keeps getting rejected".into()));
        }
        let m = rng.random_range(0..maps.len());
        let start_cell = free[m][rng.random_range(0..free[m].len())];
        let goal = free[m][rng.random_range(0..free[m].len())];
        let heading = Heading::ALL[rng.random_range(0..4)];
        if start_cell == goal {
            continue;
        }
        let start = AgentPose { row: start_cell.0, col: start_cell.1, heading };
        match Episode::new(&maps[m], start, goal) {
            Ok(ep) if ep.geodesic >= MIN_EPISODE_GEODESIC => out.push(ep),
            Ok(_) | Err(Error::Unreachable { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct ActiveEpisode {
    episode: usize,
    map: usize,
    pose: AgentPose,
    goal_field: Arc<Vec<Option<u32>>>,
    steps: usize,
    path_length: f64,
    done: bool,
}

/// PointGoal environment over a fixed episode list.
#[derive(Debug, Clone)]
pub struct GridNavEnv {
    maps: Arc<Vec<NavMap>>,
    map_index: Arc<HashMap<String, usize>>,
    episodes: Arc<Vec<Episode>>,
    crop: usize,
    max_steps: usize,
    reward: RewardConfig,
    active: Option<ActiveEpisode>,
}

impl GridNavEnv {
    pub fn new(maps: Vec<NavMap>, episodes: Vec<Episode>) -> Self {
        let map_index = maps.iter().enumerate().map(|(i, m)| (m.name.clone(), i)).collect();
        Self {
            maps: Arc::new(maps),
            map_index: Arc::new(map_index),
            episodes: Arc::new(episodes),
            crop: DEFAULT_CROP,
            max_steps: DEFAULT_HORIZON,
            reward: RewardConfig::default(),
            active: None,
        }
    }

    /// Environment over a suite's held-out episodes.
    pub fn heldout(suite: Suite) -> Self {
        Self::new(suite.maps(), suite.heldout_episodes())
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn with_crop(mut self, crop: usize) -> Self {
        self.crop = crop;
        self
    }

    pub fn with_reward(mut self, reward: RewardConfig) -> Self {
        self.reward = reward;
        self
    }

    /// Same maps and settings, different episodes.
    pub fn with_episodes(&self, episodes: Vec<Episode>) -> Self {
        Self { episodes: Arc::new(episodes), active: None, ..self.clone() }
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn map(&self, name: &str) -> Result<&NavMap> {
        self.map_index.get(name).map(|&i| &self.maps[i]).ok_or_else(|| Error::UnknownMap(name.to_string()))
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn pose(&self) -> Option<AgentPose> {
        self.active.as_ref().map(|a| a.pose)
    }

    fn goal_distance(active: &ActiveEpisode, map: &NavMap) -> f64 {
        active.goal_field[active.pose.row * map.cols() + active.pose.col].map_or(f64::INFINITY, f64::from)
    }

    fn observe(&self, active: &ActiveEpisode) -> Observation {
        let ep = &self.episodes[active.episode];
        render_observation(&self.maps[active.map], &active.pose, ep.goal, self.crop)
    }
}

impl Environment for GridNavEnv {
    fn observation_dim(&self) -> usize {
        3 * self.crop * self.crop
    }

    fn action_count(&self) -> usize {
        ACTION_COUNT
    }

    fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    fn observation_range(&self) -> Option<(f64, f64)> {
        Some((0.0, 1.0))
    }

    fn reset(&mut self, episode_id: usize, _seed: u64) -> Result<Observation> {
        let ep = self
            .episodes
            .get(episode_id)
            .ok_or_else(|| Error::InvalidInput(format!("episode {episode_id} out of range")))?;
        let map_idx = *self.map_index.get(&ep.map).ok_or_else(|| Error::UnknownMap(ep.map.clone()))?;
        let map = &self.maps[map_idx];
        if !map.is_free(ep.start.cell()) || !map.is_free(ep.goal) || ep.start.cell() == ep.goal {
            return Err(Error::InvalidInput(format!("episode {episode_id} is not valid on `{}`", map.name)));
        }
        let active = ActiveEpisode {
            episode: episode_id,
            map: map_idx,
            pose: ep.start,
            goal_field: Arc::new(map.distance_field(ep.goal)),
            steps: 0,
            path_length: 0.0,
            done: false,
        };
        let obs = self.observe(&active);
        self.active = Some(active);
        Ok(obs)
    }

    fn step(&mut self, action: usize) -> Result<Transition> {
        let action = Action::from_index(action)?;
        let mut active = self.active.take().ok_or(Error::EpisodeFinished)?;
        if active.done {
            self.active = Some(active);
            return Err(Error::EpisodeFinished);
        }
        let map = &self.maps[active.map];
        let prev = Self::goal_distance(&active, map);
        let mut collided = false;
        let mut success = false;
        match action {
            Action::Forward => {
                let (dr, dc) = active.pose.heading.forward_offset();
                let (nr, nc) = (active.pose.row as i64 + dr, active.pose.col as i64 + dc);
                if map.is_blocked_at(nr, nc) {
                    collided = true;
                } else {
                    active.pose.row = nr as usize;
                    active.pose.col = nc as usize;
                    active.path_length += 1.0;
                }
            }
            Action::TurnLeft => active.pose.heading = active.pose.heading.left(),
            Action::TurnRight => active.pose.heading = active.pose.heading.right(),
            Action::Stop => {
                active.done = true;
                success = prev <= self.reward.success_radius;
            }
        }
        let new = Self::goal_distance(&active, map);
        let reward = reward_fn(&self.reward, prev, new, collided, success);
        active.steps += 1;
        if active.steps >= self.max_steps {
            active.done = true;
        }
        let obs = self.observe(&active);
        let done = active.done;
        self.active = Some(active);
        Ok(Transition { observation: obs, reward, done, goal_reached: success })
    }

    fn state(&self) -> StateHandle {
        self.active.as_ref().map_or(StateHandle::Index(usize::MAX), |a| a.pose.handle())
    }

    fn geodesic_start_distance(&self) -> f64 {
        self.active.as_ref().map_or(0.0, |a| self.episodes[a.episode].geodesic)
    }

    fn path_length(&self) -> f64 {
        self.active.as_ref().map_or(0.0, |a| a.path_length)
    }
}
