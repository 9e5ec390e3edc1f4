//! Attack success as the trajectory budget m grows, for several attack seeds.
//!
//! `cargo run --release --example budget_ablation -- victim.json [eta] [seeds]`

use std::path::Path;

use uaplab::attacks::AttackConfig;
use uaplab::gridnav::Suite;
use uaplab::policy::PolicyNet;
use uaplab::report::{succ_non_increasing_in_m, table2_run};

fn main() -> uaplab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let victim = PolicyNet::load(Path::new(args.first().expect("usage: budget_ablation victim.json [eta] [seeds]")))?;
    let eta: f64 = args.get(1).map_or(0.5, |s| s.parse().expect("eta"));
    let seeds: u64 = args.get(2).map_or(3, |s| s.parse().expect("seed count"));
    for seed in 0..seeds {
        let base = AttackConfig { eta, n: 1, l: 5, seed, ..AttackConfig::default() };
        let table = table2_run(&victim, Suite::Rooms, &[5, 10, 15], &base, 0)?;
        println!("seed {seed} (reward-rtg monotone: {})", succ_non_increasing_in_m(&table, "reward-rtg"));
        print!("{}", table.to_text());
    }
    Ok(())
}
