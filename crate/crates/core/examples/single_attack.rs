//! One attack against a victim, with its per-step trace and the effect on
//! held-out performance.
//!
//! `cargo run --release --example single_attack -- victim.json [uap|reward-rtg|reward-q|trajectory] [eta]`

use std::path::Path;

use uaplab::attacks::{run_attack, AttackConfig, Estimator};
use uaplab::gridnav::{GridNavEnv, Suite};
use uaplab::policy::PolicyNet;
use uaplab::report::attack_env;
use uaplab::train::evaluate;

fn main() -> uaplab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let victim = PolicyNet::load(Path::new(args.first().expect("usage: single_attack victim.json [method] [eta]")))?;
    let estimator: Estimator = args.get(1).map_or("reward-rtg", String::as_str).parse()?;
    let eta: f64 = args.get(2).map_or(0.5, |s| s.parse().expect("eta"));
    let cfg = AttackConfig { estimator, eta, n: 3, l: 5, seed: 1, ..AttackConfig::default() };

    let heldout = GridNavEnv::heldout(Suite::Rooms);
    let result = run_attack(&victim, &attack_env(&heldout, Suite::Rooms), &cfg)?;
    for step in &result.steps {
        println!(
            "k {:>2}  |δ| {:>8.4}  return {:>8.3}  successes {}/{}{}",
            step.k,
            uaplab::vector::l2_norm(&step.delta),
            step.mean_return,
            step.successes,
            step.trajectories,
            if step.stalled { "  (stalled)" } else { "" }
        );
    }
    for w in &result.warnings {
        println!("warning: {w}");
    }
    let clean = evaluate(&victim, &heldout, None, 0)?;
    let attacked = evaluate(&victim, &heldout, Some(&result.delta), 0)?;
    println!("‖δ‖ = {:.4} (ε = {:.4})", result.delta.norm(), result.delta.epsilon);
    println!("clean    succ {:.2} spl {:.3} reward {:.3}", clean.succ, clean.spl, clean.reward_mean);
    println!("attacked succ {:.2} spl {:.3} reward {:.3}", attacked.succ, attacked.spl, attacked.reward_mean);
    Ok(())
}
