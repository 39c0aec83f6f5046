//! Reparameterized Dirichlet draws: sample moments against the closed form,
//! and the implicit gradient of E[w₁] against its analytic value.
//!
//!     cargo run --release --example dirichlet_reparam -- [alpha1] [alpha2] ...

use vrm::diffcore::{Tape, Tensor};
use vrm::distributions::{dirichlet_draw_var, dirichlet_kl, DirichletParams};
use vrm::rng::{self, streams};

fn main() -> vrm::Result<()> {
    let mut alpha: Vec<f64> = std::env::args()
        .skip(1)
        .map(|s| s.parse().expect("alpha"))
        .collect();
    if alpha.is_empty() {
        alpha = vec![2.0, 1.0];
    }
    let a0: f64 = alpha.iter().sum();
    let k = alpha.len();
    let draws = 100_000;
    let mut r = rng::stream(0, streams::LATENT);
    let mut mean = vec![0.0; k];
    let mut grad = vec![0.0; k];
    for _ in 0..draws {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(alpha.clone()));
        let (w, _) = dirichlet_draw_var(&mut t, a, &mut r)?;
        let first = t.index(w, 0)?;
        for (m, v) in mean.iter_mut().zip(&t.value(w).data) {
            *m += v / draws as f64;
        }
        t.backward(first)?;
        for (g, v) in grad.iter_mut().zip(&t.grad(a).data) {
            *g += v / draws as f64;
        }
    }
    println!("alpha = {alpha:?}");
    for i in 0..k {
        println!("  E[w{i}]: mc {:.5}  exact {:.5}", mean[i], alpha[i] / a0);
    }
    // ∂E[w₁]/∂αⱼ = (δ₁ⱼ a₀ − α₁) / a₀²
    for (j, g) in grad.iter().enumerate() {
        let exact = (if j == 0 { a0 } else { 0.0 } - alpha[0]) / (a0 * a0);
        println!("  dE[w0]/da{j}: implicit {g:+.5}  exact {exact:+.5}");
    }
    let q = DirichletParams::new(alpha)?;
    let p = DirichletParams::symmetric(k, 1.0)?;
    println!("KL(q || uniform) = {:.6}", dirichlet_kl(&q, &p)?);
    Ok(())
}
