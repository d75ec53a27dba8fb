//! Run the theory checks that finish in seconds and print their reports.
//!
//! cargo run --release --example verify_theory -- [check ...]

use dyco::theory::run_check;

fn main() -> dyco::Result<()> {
    let mut names: Vec<String> = std::env::args().skip(1).collect();
    if names.is_empty() {
        names = ["mc_orthogonality", "norm_concentration", "cosine_euclid", "spectral_norm", "vaa_vs_hessian", "window_vs_global_lipschitz", "sc_spectral_regularizer"]
            .map(String::from)
            .to_vec();
    }
    for name in names {
        for r in run_check(&name, 0, None)? {
            println!("{:<5} {:<40} {:>14.6e}  bound {:.6e}", if r.pass { "pass" } else { "FAIL" }, r.name, r.statistic, r.bound);
            for (k, v) in &r.details {
                println!("        {k} = {v}");
            }
        }
    }
    Ok(())
}
