//! Exact quantities of a small disturbed MDP and the gradient check over a
//! seeded fixture suite.
//!
//! `cargo run --example tabular_oracle [fixtures] [seed]`

use uaplab::oracle::{analyze, chain3, gradcheck, write_gradcheck_csv, DEFAULT_FD_STEP};

fn main() -> uaplab::Result<()> {
    let mut args = std::env::args().skip(1);
    let count: usize = args.next().map_or(20, |s| s.parse().expect("fixture count"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let m = chain3().with_delta(vec![0.3, -0.2]);
    let report = analyze(&m, DEFAULT_FD_STEP)?;
    println!("chain3 with δ = {:?}", m.delta);
    println!("  J_δ        {:.6}", report.j_delta);
    println!("  V_δ        {:?}", report.v_delta.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());
    println!("  d_δ        {:?}", report.d_delta.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());
    println!("  ∇J exact   {:?}", report.grad_j_analytic);
    println!("  ∇J central {:?}", report.grad_j_fd);
    println!("  Bellman residual {:.2e}", report.bellman_residual);
    println!();

    let rows = gradcheck(count, seed, DEFAULT_FD_STEP)?;
    write_gradcheck_csv(&rows, std::io::stdout())?;
    Ok(())
}
