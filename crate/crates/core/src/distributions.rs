//! Dirichlet and diagonal-Gaussian variational families.
//!
//! Gaussian draws use the location-scale transform `z = μ + σ ⊙ ε`. Dirichlet
//! draws normalize independent Gamma(α_k, 1) variates; their gradient with
//! respect to α uses implicit reparameterization,
//!
//! ```text
//! ∂g/∂α = −(∂F(g; α)/∂α) / f(g; α)
//! ```
//!
//! where `F` is the Gamma CDF and `f` its density. `∂F/∂α` is a central
//! difference of the regularized incomplete gamma function.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::numerics::{self, gamma_log_pdf, log_gamma_unchecked, reg_incomplete_gamma_unchecked};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    alpha: Vec<f64>,
}

impl DirichletParams {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::InvalidParam(format!(
                "Dirichlet needs at least 2 components, got {}",
                alpha.len()
            )));
        }
        if let Some(bad) = alpha.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(Error::InvalidParam(format!(
                "Dirichlet concentration {bad} is not positive"
            )));
        }
        Ok(DirichletParams { alpha })
    }

    /// Dir(c, …, c) over `k` components.
    pub fn symmetric(k: usize, c: f64) -> Result<Self> {
        Self::new(vec![c; k])
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    /// α / Σα.
    pub fn mean(&self) -> Vec<f64> {
        let total: f64 = self.alpha.iter().sum();
        self.alpha.iter().map(|a| a / total).collect()
    }

    pub fn log_pdf(&self, w: &[f64]) -> f64 {
        let total: f64 = self.alpha.iter().sum();
        let mut lp = log_gamma_unchecked(total);
        for (&a, &wk) in self.alpha.iter().zip(w) {
            lp += (a - 1.0) * wk.ln() - log_gamma_unchecked(a);
        }
        lp
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::Dimension {
                what: "gaussian sigma",
                expected: mu.len(),
                got: sigma.len(),
            });
        }
        if let Some(bad) = sigma.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParam(format!(
                "Gaussian scale {bad} is not positive"
            )));
        }
        Ok(GaussianParams { mu, sigma })
    }

    pub fn standard(j: usize) -> Self {
        GaussianParams {
            mu: vec![0.0; j],
            sigma: vec![1.0; j],
        }
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn j(&self) -> usize {
        self.mu.len()
    }

    pub fn log_pdf(&self, z: &[f64]) -> f64 {
        const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
        self.mu
            .iter()
            .zip(&self.sigma)
            .zip(z)
            .map(|((m, s), x)| {
                let u = (x - m) / s;
                -0.5 * u * u - s.ln() - HALF_LN_2PI
            })
            .sum()
    }
}

/// Replayable record of one Gamma draw.
///
/// `Transform` keeps the accepted normal variate of the squeeze sampler and
/// the shape-boost uniform (for α < 1), so replay at the same α is bitwise
/// exact without rerunning the rejection loop. `Quantile` freezes the CDF
/// level instead: replaying it at a perturbed α moves the draw exactly along
/// the implicit-reparameterization path, which is what finite-difference
/// checks need.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GammaNoise {
    Transform { normal: f64, boost: Option<f64> },
    Quantile(f64),
}

impl GammaNoise {
    pub fn to_quantile(self, alpha: f64) -> Result<GammaNoise> {
        let g = replay_gamma(alpha, &self)?;
        Ok(GammaNoise::Quantile(reg_incomplete_gamma_unchecked(
            alpha, g,
        )))
    }
}

/// Noise behind one (w, z⁺, z⁻) draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentNoise {
    pub gamma: Vec<GammaNoise>,
    pub eps_pos: Vec<f64>,
    pub eps_neg: Vec<f64>,
}

impl LatentNoise {
    /// Same draw with every Gamma component frozen at its CDF level.
    pub fn to_quantiles(&self, alpha: &[f64]) -> Result<LatentNoise> {
        let gamma = self
            .gamma
            .iter()
            .zip(alpha)
            .map(|(n, &a)| n.to_quantile(a))
            .collect::<Result<_>>()?;
        Ok(LatentNoise {
            gamma,
            eps_pos: self.eps_pos.clone(),
            eps_neg: self.eps_neg.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub w: Vec<f64>,
    pub z_pos: Vec<f64>,
    pub z_neg: Vec<f64>,
    pub noise: LatentNoise,
}

fn squeeze_params(alpha: f64) -> (f64, f64) {
    let a = if alpha < 1.0 { alpha + 1.0 } else { alpha };
    let d = a - 1.0 / 3.0;
    (d, 1.0 / (9.0 * d).sqrt())
}

fn gamma_transform(alpha: f64, normal: f64, boost: Option<f64>) -> f64 {
    let (d, c) = squeeze_params(alpha);
    let v = 1.0 + c * normal;
    let mut g = d * v * v * v;
    if let Some(u) = boost {
        g *= u.powf(1.0 / alpha);
    }
    g.max(f64::MIN_POSITIVE)
}

/// Gamma(α, 1) by the Marsaglia–Tsang squeeze method, boosting α < 1 via
/// `G(α) = G(α + 1) · U^{1/α}`.
pub fn sample_gamma(alpha: f64, rng: &mut Rng) -> (f64, GammaNoise) {
    let (d, c) = squeeze_params(alpha);
    let normal = loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.random();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            break x;
        }
    };
    let boost = (alpha < 1.0).then(|| 1.0 - rng.random::<f64>());
    (
        gamma_transform(alpha, normal, boost),
        GammaNoise::Transform { normal, boost },
    )
}

pub fn replay_gamma(alpha: f64, noise: &GammaNoise) -> Result<f64> {
    match *noise {
        GammaNoise::Transform { normal, boost } => Ok(gamma_transform(alpha, normal, boost)),
        GammaNoise::Quantile(u) => {
            Ok(numerics::inv_reg_incomplete_gamma(alpha, u)?.max(f64::MIN_POSITIVE))
        }
    }
}

/// Implicit reparameterization gradient ∂g/∂α of a Gamma(α, 1) draw `g`.
pub fn gamma_implicit_grad(alpha: f64, g: f64) -> f64 {
    let log_density = gamma_log_pdf(alpha, g);
    if !log_density.is_finite() || g <= f64::MIN_POSITIVE {
        return 0.0;
    }
    let h = 1e-4 * alpha.max(1.0);
    // In the upper tail differentiate Q = 1 − P, which is computed directly
    // and keeps full relative precision there.
    let dcdf_dalpha = if g > alpha + 1.0 {
        -(upper_tail(alpha + h, g) - upper_tail(alpha - h, g)) / (2.0 * h)
    } else {
        (reg_incomplete_gamma_unchecked(alpha + h, g)
            - reg_incomplete_gamma_unchecked(alpha - h, g))
            / (2.0 * h)
    };
    -dcdf_dalpha / log_density.exp()
}

fn upper_tail(a: f64, x: f64) -> f64 {
    if x < a + 1.0 {
        1.0 - reg_incomplete_gamma_unchecked(a, x)
    } else {
        numerics::reg_upper_incomplete_gamma_cf(a, x)
    }
}

fn normalize(g: &[f64]) -> Vec<f64> {
    let total: f64 = g.iter().sum();
    g.iter().map(|x| x / total).collect()
}

pub fn sample_dirichlet(q: &DirichletParams, rng: &mut Rng) -> (Vec<f64>, Vec<GammaNoise>) {
    let (g, noise): (Vec<f64>, Vec<GammaNoise>) =
        q.alpha.iter().map(|&a| sample_gamma(a, rng)).unzip();
    (normalize(&g), noise)
}

pub fn replay_dirichlet(q: &DirichletParams, noise: &[GammaNoise]) -> Result<Vec<f64>> {
    check_noise_len(q.k(), noise.len())?;
    let g = q
        .alpha
        .iter()
        .zip(noise)
        .map(|(&a, n)| replay_gamma(a, n))
        .collect::<Result<Vec<_>>>()?;
    Ok(normalize(&g))
}

fn check_noise_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            what: "latent noise",
            expected,
            got,
        });
    }
    Ok(())
}

/// `z = μ + σ ⊙ ε`; returns `(z, ε)`.
pub fn sample_gaussian(q: &GaussianParams, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let eps: Vec<f64> = (0..q.j()).map(|_| rng.sample(StandardNormal)).collect();
    let z =
        q.mu.iter()
            .zip(&q.sigma)
            .zip(&eps)
            .map(|((m, s), e)| m + s * e)
            .collect();
    (z, eps)
}

pub fn standard_normals(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Closed-form KL(Dir(q) ‖ Dir(p)).
pub fn dirichlet_kl(q: &DirichletParams, p: &DirichletParams) -> Result<f64> {
    if q.k() != p.k() {
        return Err(Error::Dimension {
            what: "dirichlet_kl prior",
            expected: q.k(),
            got: p.k(),
        });
    }
    let sq: f64 = q.alpha.iter().sum();
    let sp: f64 = p.alpha.iter().sum();
    let psi_sq = numerics::digamma_unchecked(sq);
    let mut kl = log_gamma_unchecked(sq) - log_gamma_unchecked(sp);
    for (&a, &a0) in q.alpha.iter().zip(&p.alpha) {
        kl += -log_gamma_unchecked(a)
            + log_gamma_unchecked(a0)
            + (a - a0) * (numerics::digamma_unchecked(a) - psi_sq);
    }
    Ok(kl.max(0.0))
}

/// Closed-form KL(N(μ, diag σ²) ‖ N(0, I)).
pub fn gaussian_kl(q: &GaussianParams) -> f64 {
    0.5 * q
        .mu
        .iter()
        .zip(&q.sigma)
        .map(|(m, s)| m * m + s * s - 2.0 * s.ln() - 1.0)
        .sum::<f64>()
}

/// Differentiable [`dirichlet_kl`] with the posterior concentration on the tape.
pub fn dirichlet_kl_var(tape: &mut Tape, alpha: Var, prior: &DirichletParams) -> Result<Var> {
    let k = tape.shape(alpha).len();
    if k != prior.k() {
        return Err(Error::Dimension {
            what: "dirichlet_kl prior",
            expected: k,
            got: prior.k(),
        });
    }
    let sp: f64 = prior.alpha.iter().sum();
    let prior_const = -log_gamma_unchecked(sp)
        + prior
            .alpha
            .iter()
            .map(|&a| log_gamma_unchecked(a))
            .sum::<f64>();

    let total = tape.sum(alpha);
    let lg_total = tape.log_gamma(total)?;
    let lg_each = tape.log_gamma(alpha)?;
    let lg_sum = tape.sum(lg_each);
    let psi = tape.digamma(alpha)?;
    let psi_total = tape.digamma(total)?;
    let neg_psi_total = tape.neg(psi_total);
    let psi_diff = tape.add_scalar(psi, neg_psi_total)?;
    let prior_alpha = tape.constant_vector(&prior.alpha);
    let delta = tape.sub(alpha, prior_alpha)?;
    let cross = tape.dot(delta, psi_diff)?;

    let c = tape.constant_scalar(prior_const);
    let head = tape.sub(lg_total, lg_sum)?;
    let head = tape.add(head, c)?;
    tape.add(head, cross)
}

/// Differentiable [`gaussian_kl`] in terms of (μ, ln σ).
pub fn gaussian_kl_var(tape: &mut Tape, mu: Var, log_sigma: Var) -> Result<Var> {
    let mu2 = tape.mul(mu, mu)?;
    let two_ls = tape.scale(log_sigma, 2.0);
    let var = tape.exp(two_ls);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, two_ls)?;
    let s = tape.sum(b);
    let j = tape.shape(mu).len() as f64;
    let minus_j = tape.constant_scalar(-j);
    let s = tape.add(s, minus_j)?;
    Ok(tape.scale(s, 0.5))
}

/// `μ + exp(ln σ) ⊙ ε` on the tape.
pub fn gaussian_sample_var(tape: &mut Tape, mu: Var, log_sigma: Var, eps: &[f64]) -> Result<Var> {
    check_noise_len(tape.shape(mu).len(), eps.len())?;
    let sigma = tape.exp(log_sigma);
    let e = tape.constant_vector(eps);
    let scaled = tape.mul(sigma, e)?;
    tape.add(mu, scaled)
}

/// Dirichlet draw on the tape with implicit gradients into `alpha`.
pub fn dirichlet_sample_var(tape: &mut Tape, alpha: Var, noise: &[GammaNoise]) -> Result<Var> {
    let alpha_vals = tape.data(alpha).to_vec();
    check_noise_len(alpha_vals.len(), noise.len())?;
    let mut g = Vec::with_capacity(noise.len());
    let mut dg = Vec::with_capacity(noise.len());
    for (&a, n) in alpha_vals.iter().zip(noise) {
        let gk = replay_gamma(a, n)?;
        dg.push(gamma_implicit_grad(a, gk));
        g.push(gk);
    }
    let gv = tape.implicit(alpha, g, dg)?;
    let total = tape.sum(gv);
    tape.div_scalar(gv, total)
}

/// Draw fresh Gamma noise for concentration values already on the tape and
/// return the simplex sample together with its record.
pub fn dirichlet_draw_var(
    tape: &mut Tape,
    alpha: Var,
    rng: &mut Rng,
) -> Result<(Var, Vec<GammaNoise>)> {
    let noise: Vec<GammaNoise> = tape
        .data(alpha)
        .to_vec()
        .into_iter()
        .map(|a| sample_gamma(a, rng).1)
        .collect();
    let w = dirichlet_sample_var(tape, alpha, &noise)?;
    Ok((w, noise))
}
