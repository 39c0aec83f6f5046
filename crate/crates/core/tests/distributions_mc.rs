use vrm::diffcore::{Tape, Tensor};
use vrm::distributions::{
    dirichlet_draw_var, dirichlet_kl, gaussian_kl, gaussian_sample_var, sample_dirichlet,
    sample_gaussian, standard_normals, DirichletParams, GaussianParams,
};
use vrm::rng::{self, streams};

// Mean and standard error of a sample.
fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn dirichlet_kl_matches_log_ratio_estimator() {
    let p = DirichletParams::symmetric(2, 1.0).unwrap();
    for alpha in [vec![5.0, 5.0], vec![2.0, 1.0], vec![0.7, 3.0]] {
        let q = DirichletParams::new(alpha).unwrap();
        let mut r = rng::stream(3, streams::LATENT);
        let ratios: Vec<f64> = (0..200_000)
            .map(|_| {
                let (w, _) = sample_dirichlet(&q, &mut r);
                q.log_pdf(&w) - p.log_pdf(&w)
            })
            .collect();
        let (m, se) = mean_se(&ratios);
        let kl = dirichlet_kl(&q, &p).unwrap();
        assert!(
            (m - kl).abs() < 3.0 * se,
            "{:?}: mc {m} ± {se} vs {kl}",
            q.alpha()
        );
    }
}

#[test]
fn gaussian_kl_matches_log_ratio_estimator() {
    let q = GaussianParams::new(vec![0.3, -0.7], vec![0.5, 2.0]).unwrap();
    let p = GaussianParams::standard(2);
    let mut r = rng::stream(4, streams::LATENT);
    let ratios: Vec<f64> = (0..200_000)
        .map(|_| {
            let (z, _) = sample_gaussian(&q, &mut r);
            q.log_pdf(&z) - p.log_pdf(&z)
        })
        .collect();
    let (m, se) = mean_se(&ratios);
    let kl = gaussian_kl(&q);
    assert!((m - kl).abs() < 3.0 * se, "mc {m} ± {se} vs {kl}");
}

#[test]
fn gaussian_sample_mean() {
    let q = GaussianParams::new(vec![1.0, -1.0], vec![1.0, 1.0]).unwrap();
    let mut r = rng::stream(5, streams::LATENT);
    let n = 100_000;
    let mut sum = [0.0; 2];
    for _ in 0..n {
        let (z, _) = sample_gaussian(&q, &mut r);
        sum[0] += z[0];
        sum[1] += z[1];
    }
    let tol = 3.0 / (n as f64).sqrt();
    assert!((sum[0] / n as f64 - 1.0).abs() < tol);
    assert!((sum[1] / n as f64 + 1.0).abs() < tol);
}

#[test]
fn gaussian_pathwise_gradient_is_identity() {
    let mut r = rng::stream(6, streams::LATENT);
    let mut grads = Vec::new();
    for _ in 0..10_000 {
        let mut t = Tape::new();
        let mu = t.leaf(Tensor::vector(vec![0.2, -0.4]));
        let ls = t.leaf(Tensor::vector(vec![0.1, 0.3]));
        let eps = standard_normals(2, &mut r);
        let z = gaussian_sample_var(&mut t, mu, ls, &eps).unwrap();
        let z1 = t.index(z, 0).unwrap();
        t.backward(z1).unwrap();
        grads.push(t.grad(mu).data[0]);
    }
    let (m, _) = mean_se(&grads);
    assert!((m - 1.0).abs() < 1e-12);
}

#[test]
fn implicit_dirichlet_mean_gradient() {
    // d/dα₁ E[w₁] at α = (2, 1) is α₂/(α₁ + α₂)² = 1/9.
    let mut r = rng::stream(7, streams::LATENT);
    let mut grads = Vec::with_capacity(100_000);
    let mut w1 = Vec::with_capacity(100_000);
    for _ in 0..100_000 {
        let mut t = Tape::new();
        let alpha = t.leaf(Tensor::vector(vec![2.0, 1.0]));
        let (w, _) = dirichlet_draw_var(&mut t, alpha, &mut r).unwrap();
        let first = t.index(w, 0).unwrap();
        w1.push(t.scalar(first));
        t.backward(first).unwrap();
        grads.push(t.grad(alpha).data[0]);
    }
    let (g, se) = mean_se(&grads);
    assert!((g - 1.0 / 9.0).abs() < 3.0 * se, "{g} ± {se}");
    let (m, se) = mean_se(&w1);
    assert!((m - 2.0 / 3.0).abs() < 3.0 * se, "{m} ± {se}");
}
