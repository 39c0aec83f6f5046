//! Tabulate the special functions the Dirichlet machinery rests on, next to
//! a couple of closed-form anchors.
//!
//!     cargo run --example special_functions

use vrm::numerics::{
    digamma, inv_reg_incomplete_gamma, log_gamma, reg_incomplete_gamma, trigamma_fd,
};

fn main() -> vrm::Result<()> {
    // ln Γ(1/2) = ln √π, ψ(1) = −γ.
    println!(
        "ln gamma(0.5) = {:.15}  (ln sqrt(pi) = {:.15})",
        log_gamma(0.5)?,
        std::f64::consts::PI.sqrt().ln()
    );
    println!(
        "digamma(1)    = {:.15}  (-euler gamma = -0.577215664901533)",
        digamma(1.0)?
    );
    println!();
    println!(
        "{:>8} {:>18} {:>18} {:>18}",
        "x", "ln_gamma", "digamma", "trigamma"
    );
    for x in [1e-3, 0.1, 0.5, 1.0, 2.5, 10.0, 1e3] {
        println!(
            "{x:>8} {:>18.12} {:>18.12} {:>18.10}",
            log_gamma(x)?,
            digamma(x)?,
            trigamma_fd(x)?
        );
    }
    println!();
    println!(
        "{:>6} {:>6} {:>14} {:>14}",
        "a", "p", "x = P^-1(a,p)", "P(a, x)"
    );
    for a in [0.05, 0.5, 2.0, 30.0] {
        for p in [0.01, 0.5, 0.99] {
            let x = inv_reg_incomplete_gamma(a, p)?;
            println!(
                "{a:>6} {p:>6} {x:>14.6e} {:>14.10}",
                reg_incomplete_gamma(a, x)?
            );
        }
    }
    Ok(())
}
