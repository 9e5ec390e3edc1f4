//! Runs every adversary against one victim and prints the comparison table.
//!
//! `cargo run --release --example compare_attacks -- victim.json [eta] [n] [l] [seed]`
//!
//! Without a checkpoint path a victim is trained first.

use std::path::Path;

use uaplab::attacks::{AttackConfig, Estimator};
use uaplab::gridnav::Suite;
use uaplab::policy::PolicyNet;
use uaplab::report::table1_run;
use uaplab::train::{train, TrainConfig};

fn main() -> uaplab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let victim = match args.first() {
        Some(path) => PolicyNet::load(Path::new(path))?,
        None => train(&TrainConfig::default())?.policy,
    };
    let arg = |i: usize, default: f64| args.get(i).map_or(default, |s| s.parse().expect("numeric argument"));
    let base = AttackConfig {
        eta: arg(1, 0.5),
        n: arg(2, 1.0) as usize,
        l: arg(3, 5.0) as usize,
        seed: arg(4, 1.0) as u64,
        ..AttackConfig::default()
    };
    let table = table1_run(&[(Suite::Rooms, victim)], &Estimator::ALL, &base, 0)?;
    print!("{}", table.to_text());
    Ok(())
}
