//! Trains a victim on the `rooms` suite and reports held-out performance.
//!
//! `cargo run --release --example train_victim [iterations] [out.json]`

use std::path::PathBuf;

use uaplab::train::{train, TrainConfig};

fn main() -> uaplab::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut config = TrainConfig::default();
    if let Some(iters) = args.next() {
        config.iterations = iters.parse().expect("iterations must be an integer");
    }
    let out = args.next().map(PathBuf::from);

    let start = std::time::Instant::now();
    let outcome = train(&config)?;
    for row in outcome.log.iter().step_by(25) {
        println!(
            "iter {:>4}  return {:>7.3}  succ {:.2}  entropy {:.3}",
            row.iteration, row.mean_return, row.succ, row.entropy
        );
    }
    let h = &outcome.heldout;
    println!(
        "held-out: reward {:.3} ± {:.3}  succ {:.2}  spl {:.3}  ({:.1?})",
        h.reward_mean,
        h.reward_stderr,
        h.succ,
        h.spl,
        start.elapsed()
    );
    println!("gate {:.2}: {}", config.gate, if outcome.passed_gate { "passed" } else { "failed" });
    if let Some(path) = out {
        outcome.policy.save(&path)?;
        println!("saved {}", path.display());
    }
    Ok(())
}
