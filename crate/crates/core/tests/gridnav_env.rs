//! Grid navigation environment: observation rendering, scripted episodes and
//! the held-out datasets.
//!
//! The golden observation under `tests/golden/` was written by the reference
//! renderer in this file (`UAPLAB_BLESS=1 cargo test --test gridnav_env`).

use std::path::PathBuf;

use proptest::prelude::*;
use uaplab::gridnav::{
    geodesic, render_observation, spl, Action, AgentPose, Episode, GridNavEnv, Heading, NavMap, Suite,
    EPISODES_PER_SUITE, MIN_EPISODE_GEODESIC,
};
use uaplab::mdp::Environment;

const ROOM: &str = include_str!("../data/maps/room9x9.txt");

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Rotates `(drow, dcol)` into the agent frame by composing quarter turns.
fn to_agent_frame(heading: Heading, drow: i64, dcol: i64) -> (i64, i64) {
    // agent frame for heading N: ahead = −drow, right = dcol
    let turns = heading.index();
    let (mut r, mut c) = (drow, dcol);
    for _ in 0..turns {
        // undo one clockwise quarter turn
        (r, c) = (-c, r);
    }
    (-r, c)
}

/// Straightforward renderer written against the observation contract.
fn reference_observation(map: &NavMap, pose: &AgentPose, goal: (usize, usize), crop: usize) -> Vec<f64> {
    let half = (crop / 2) as i64;
    let plane = crop * crop;
    let mut out = vec![0.0; 3 * plane];
    out[..plane].fill(1.0);
    let rows = map.rows() as i64;
    let cols = map.cols() as i64;
    let reach = half + 1;
    for wr in pose.row as i64 - 2 * reach..=pose.row as i64 + 2 * reach {
        for wc in pose.col as i64 - 2 * reach..=pose.col as i64 + 2 * reach {
            let (ahead, right) = to_agent_frame(pose.heading, wr - pose.row as i64, wc - pose.col as i64);
            if ahead.abs() > half || right.abs() > half {
                continue;
            }
            let i = (half - ahead) as usize;
            let j = (half + right) as usize;
            let inside = wr >= 0 && wc >= 0 && wr < rows && wc < cols;
            let blocked = !inside || map.is_blocked(wr as usize, wc as usize);
            out[i * crop + j] = if blocked { 1.0 } else { 0.0 };
        }
    }
    let (gr, gc) = (goal.0 as i64 - pose.row as i64, goal.1 as i64 - pose.col as i64);
    let (g_ahead, g_right) = to_agent_frame(pose.heading, gr, gc);
    let dist = ((gr * gr + gc * gc) as f64).sqrt();
    for i in 0..crop {
        for j in 0..crop {
            let (a, r) = (half - i as i64, j as i64 - half);
            let len = ((a * a + r * r) as f64).sqrt();
            let cos = if len == 0.0 || dist == 0.0 {
                0.0
            } else {
                (a as f64 * g_ahead as f64 + r as f64 * g_right as f64) / (len * dist)
            };
            out[plane + i * crop + j] = (1.0 + cos) / 2.0;
            out[2 * plane + i * crop + j] = dist / (dist + 4.0);
        }
    }
    out
}

fn format_golden(values: &[f64], crop: usize) -> String {
    values
        .chunks(crop)
        .map(|row| row.iter().map(|v| format!("{v:.15}")).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

fn parse_golden(text: &str) -> Vec<f64> {
    text.split_whitespace().map(|t| t.parse().unwrap()).collect()
}

#[test]
fn room_start_observation_matches_golden() {
    let map = NavMap::parse("room9x9", ROOM).unwrap();
    let pose = AgentPose { row: 1, col: 1, heading: Heading::E };
    let goal = (7, 7);
    let path = golden_path("room9x9_r1c1_east_goal7_7.txt");
    let reference = reference_observation(&map, &pose, goal, 7);
    if std::env::var_os("UAPLAB_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, format_golden(&reference, 7)).unwrap();
    }
    let golden = parse_golden(&std::fs::read_to_string(&path).unwrap());
    let obs = render_observation(&map, &pose, goal, 7);
    assert_eq!(obs.data.len(), golden.len());
    for (k, (a, b)) in obs.data.iter().zip(&golden).enumerate() {
        assert!((a - b).abs() < 1e-12, "element {k}: {a} vs {b}");
    }
    // facing east from the north-west corner: wall to the left and behind, floor ahead
    assert_eq!(obs.data[2 * 7 + 3], 0.0);
    assert_eq!(obs.data[3 * 7 + 2], 1.0);
    assert_eq!(obs.data[4 * 7 + 3], 1.0);
}

#[test]
fn reference_and_product_agree_on_every_pose() {
    for suite in Suite::ALL {
        for map in suite.maps() {
            let free = map.free_cells();
            let goal = free[free.len() / 2];
            for &(r, c) in free.iter().step_by(3) {
                for h in 0..4u8 {
                    let pose = AgentPose { row: r, col: c, heading: Heading::from_index(h) };
                    let obs = render_observation(&map, &pose, goal, 7);
                    let reference = reference_observation(&map, &pose, goal, 7);
                    let gap = obs.data.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    assert!(gap < 1e-12, "{} {pose:?}", map.name);
                }
            }
        }
    }
}

#[test]
fn scripted_episode_reaches_goal() {
    let map = NavMap::parse("room9x9", ROOM).unwrap();
    let start = AgentPose { row: 1, col: 1, heading: Heading::E };
    let episode = Episode::new(&map, start, (1, 4)).unwrap();
    assert_eq!(episode.geodesic, 3.0);
    let mut env = GridNavEnv::new(vec![map], vec![episode]);
    env.reset(0, 0).unwrap();
    let mut total = 0.0;
    for _ in 0..3 {
        let t = env.step(Action::Forward as usize).unwrap();
        assert!(!t.done);
        total += t.reward;
    }
    let t = env.step(Action::Stop as usize).unwrap();
    assert!(t.done && t.goal_reached);
    total += t.reward;
    assert!((total - (3.0 - 4.0 * 0.01 + 2.5)).abs() < 1e-12);
    assert!(env.step(Action::Forward as usize).is_err());
}

#[test]
fn walking_into_a_wall_is_penalised_and_stopping_early_fails() {
    let map = NavMap::parse("room9x9", ROOM).unwrap();
    let start = AgentPose { row: 1, col: 1, heading: Heading::N };
    let mut env = GridNavEnv::new(vec![map.clone()], vec![Episode::new(&map, start, (4, 4)).unwrap()]);
    env.reset(0, 0).unwrap();
    let t = env.step(Action::Forward as usize).unwrap();
    assert!((t.reward - (-0.01 - 0.1)).abs() < 1e-12);
    assert_eq!(env.pose().unwrap(), start);
    let t = env.step(Action::Stop as usize).unwrap();
    assert!(t.done && !t.goal_reached);
}

#[test]
fn horizon_cap_ends_the_episode() {
    let map = NavMap::parse("room9x9", ROOM).unwrap();
    let start = AgentPose { row: 1, col: 1, heading: Heading::N };
    let mut env =
        GridNavEnv::new(vec![map.clone()], vec![Episode::new(&map, start, (4, 4)).unwrap()]).with_max_steps(5);
    env.reset(0, 0).unwrap();
    let dones: Vec<bool> = (0..5).map(|_| env.step(Action::TurnLeft as usize).unwrap().done).collect();
    assert_eq!(dones, vec![false, false, false, false, true]);
}

#[test]
fn heldout_datasets_are_fixed_and_valid() {
    for suite in Suite::ALL {
        let a = suite.heldout_episodes();
        assert_eq!(a, suite.heldout_episodes());
        assert_eq!(a.len(), EPISODES_PER_SUITE);
        let maps = suite.maps();
        for ep in &a {
            let map = maps.iter().find(|m| m.name == ep.map).unwrap();
            assert!(ep.geodesic >= MIN_EPISODE_GEODESIC);
            assert_eq!(geodesic(map, ep.start.cell(), ep.goal).unwrap(), ep.geodesic);
        }
        assert_ne!(suite.attack_episodes(20)[..5], a[..5]);
    }
}

#[test]
fn spl_matches_hand_computation() {
    let v = spl(&[(true, 4.0, 4.0), (true, 4.0, 8.0), (false, 5.0, 5.0), (true, 6.0, 3.0)]).unwrap();
    assert!((v - (1.0 + 0.5 + 0.0 + 1.0) / 4.0).abs() < 1e-15);
}

fn rotate_text(text: &str) -> String {
    let grid: Vec<Vec<char>> = text.lines().filter(|l| !l.is_empty()).map(|l| l.chars().collect()).collect();
    let (rows, cols) = (grid.len(), grid[0].len());
    // clockwise: new[r][c] = old[rows − 1 − c][r]
    (0..cols)
        .map(|r| (0..rows).map(|c| grid[rows - 1 - c][r]).collect::<String>())
        .collect::<Vec<_>>()
        .join("\n")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn observation_is_invariant_to_rotating_the_world(cell in 0usize..1000, goal in 0usize..1000, h in 0u8..4) {
        let text = include_str!("../data/maps/tworoom.txt");
        let map = NavMap::parse("a", text).unwrap();
        let rotated = NavMap::parse("b", &rotate_text(text)).unwrap();
        let free = map.free_cells();
        let (r, c) = free[cell % free.len()];
        let g = free[goal % free.len()];
        let rows = map.rows();
        let pose = AgentPose { row: r, col: c, heading: Heading::from_index(h) };
        let turned = AgentPose { row: c, col: rows - 1 - r, heading: Heading::from_index(h).right() };
        let a = render_observation(&map, &pose, g, 7);
        let b = render_observation(&rotated, &turned, (g.1, rows - 1 - g.0), 7);
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
