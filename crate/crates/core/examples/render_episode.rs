//! Plays one held-out episode with a victim, clean and under a perturbation,
//! and writes both as ASCII and PPM.
//!
//! `cargo run --release --example render_episode -- victim.json [episode] [out_dir]`

use std::path::{Path, PathBuf};

use uaplab::attacks::{run_attack, AttackConfig, Estimator};
use uaplab::gridnav::{GridNavEnv, Suite};
use uaplab::mdp::{derive_seed, rollout, RolloutOptions};
use uaplab::policy::PolicyNet;
use uaplab::report::{attack_env, render_trajectory};

fn main() -> uaplab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let victim = PolicyNet::load(Path::new(args.first().expect("usage: render_episode victim.json [episode] [out_dir]")))?;
    let episode_id: usize = args.get(1).map_or(0, |s| s.parse().expect("episode index"));
    let out_dir = PathBuf::from(args.get(2).map_or("renders", String::as_str));
    std::fs::create_dir_all(&out_dir)?;

    let heldout = GridNavEnv::heldout(Suite::Rooms);
    let episode = heldout.episodes()[episode_id].clone();
    let map = heldout.map(&episode.map)?.clone();
    let cfg = AttackConfig { estimator: Estimator::GoalIndicator, seed: 1, ..AttackConfig::default() };
    let attacked = run_attack(&victim, &attack_env(&heldout, Suite::Rooms), &cfg)?;

    for (tag, delta) in [("clean", None), ("attacked", Some(&attacked.delta))] {
        let mut env = heldout.clone();
        let traj = rollout(&mut env, &victim, delta, episode_id, derive_seed(0, episode_id as u64), &RolloutOptions::default())?;
        let render = render_trajectory(&traj, &episode, &map)?;
        print!("{tag}:\n{}\n", render.ascii);
        std::fs::write(out_dir.join(format!("{tag}.txt")), &render.ascii)?;
        std::fs::write(out_dir.join(format!("{tag}.ppm")), &render.ppm)?;
    }
    Ok(())
}
