//! Differentiate a small expression on the tape, compare it to central
//! differences by hand, then run the full gradient suite with and without
//! an injected sign flip.
//!
//!     cargo run --release --example gradcheck -- [primitive]

use vrm::diffcore::{Primitive, Tape, Tensor};
use vrm::gradcheck;

// f(a) = sum(softplus(a) * exp(-a)) + ln Γ(a₀)
fn f(tape: &mut Tape, a: &[f64]) -> vrm::Result<(f64, Vec<f64>)> {
    let x = tape.leaf(Tensor::vector(a.to_vec()));
    let sp = tape.softplus(x);
    let neg = tape.neg(x);
    let e = tape.exp(neg);
    let prod = tape.mul(sp, e)?;
    let s = tape.sum(prod);
    let first = tape.index(x, 0)?;
    let lg = tape.log_gamma(first)?;
    let out = tape.add(s, lg)?;
    tape.backward(out)?;
    Ok((tape.scalar(out), tape.grad(x).data.clone()))
}

fn main() -> vrm::Result<()> {
    let a = [0.7, -1.2, 2.0];
    let (value, grad) = f(&mut Tape::new(), &a)?;
    println!("f(a) = {value:.12}");
    let h = 1e-5;
    for i in 0..a.len() {
        let shifted = |d: f64| {
            let mut b = a;
            b[i] += d;
            f(&mut Tape::new(), &b).map(|(v, _)| v)
        };
        let fd = (shifted(h)? - shifted(-h)?) / (2.0 * h);
        println!("  df/da{i}: tape {:+.10}  fd {fd:+.10}", grad[i]);
    }

    let report = gradcheck::run(None)?;
    println!(
        "\nclean suite: {} components, passed = {}",
        report.components.len(),
        report.passed()
    );
    let fault = std::env::args().nth(1).unwrap_or_else(|| "exp".into());
    let prim = Primitive::from_name(&fault).expect("unknown primitive name");
    let report = gradcheck::run(Some(prim))?;
    if let Some(c) = report.worst_offender() {
        println!(
            "with '{fault}' sign-flipped: passed = {}, worst offender {} (rel err {:.2e}, parameter {})",
            report.passed(),
            c.component,
            c.max_rel_error,
            c.worst_param
        );
    }
    Ok(())
}
