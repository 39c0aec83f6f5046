//! PAC-Bayes generalization bound for the latent reward model.
//!
//! ```text
//! R ≤ R̂ + sqrt( (D(Q‖P) + ln(1/δ) + 2.5 ln N + 8) / (2N − 1) )
//! ```
//!
//! `D(Q‖P)` is the KL of all per-example posteriors against the priors,
//! summed over the training set; `R̂` is the Monte Carlo 0-1 risk with ties
//! counted as losses. When `ln(1/δ) > 2N` or `D > 2N` the bound is set to 1.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate, GeneratorConfig, PreferenceExample, SplitDataset};
use crate::distributions::{
    dirichlet_kl, gaussian_kl, sample_dirichlet, sample_gaussian, DirichletParams,
};
use crate::model::{ModelKind, VrmModel};
use crate::rng::{self, streams, Rng};
use crate::training::{train, AnyModel, ModelConfig, TrainConfig};
use crate::{Error, Result};

pub const DEFAULT_MC_SAMPLES: usize = 16;
pub const MIN_TRIALS: usize = 20;
const RISK_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub n: usize,
    pub delta: f64,
    pub empirical_risk: f64,
    pub kl_total: f64,
    pub complexity: f64,
    pub bound: f64,
    /// The non-trivial regime's preconditions fail; `bound` is 1.
    pub trivial: bool,
    /// `bound > 1`: valid but uninformative.
    pub vacuous: bool,
    pub mc_samples: usize,
}

/// Evaluate the bound formula. `mc_samples` is left at 0 for the caller to
/// fill in when the risk came from a Monte Carlo estimate.
pub fn compute_bound(
    empirical_risk: f64,
    kl_total: f64,
    n: usize,
    delta: f64,
) -> Result<BoundReport> {
    if n == 0 {
        return Err(Error::InvalidParam("the bound needs N >= 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParam(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    if !(0.0..=1.0).contains(&empirical_risk) {
        return Err(Error::InvalidParam(format!(
            "empirical risk {empirical_risk} outside [0, 1]"
        )));
    }
    if !(kl_total >= 0.0 && kl_total.is_finite()) {
        return Err(Error::InvalidParam(format!(
            "kl_total must be finite and >= 0, got {kl_total}"
        )));
    }
    let nf = n as f64;
    let log_inv_delta = (1.0 / delta).ln();
    let complexity = ((kl_total + log_inv_delta + 2.5 * nf.ln() + 8.0) / (2.0 * nf - 1.0)).sqrt();
    let trivial = log_inv_delta > 2.0 * nf || kl_total > 2.0 * nf;
    let bound = if trivial {
        1.0
    } else {
        empirical_risk + complexity
    };
    Ok(BoundReport {
        n,
        delta,
        empirical_risk,
        kl_total,
        complexity,
        bound,
        trivial,
        vacuous: bound > 1.0,
        mc_samples: 0,
    })
}

/// Monte Carlo 0-1 risk of an arbitrary stochastic scorer. `draw` returns
/// one (r⁺, r⁻) sample for example `i`; every example uses its own stream
/// keyed by `seed`. `init` builds per-worker scratch state.
pub fn mc_risk<S, I, F>(
    examples: &[PreferenceExample],
    mc_samples: usize,
    seed: u64,
    init: I,
    draw: F,
) -> Result<f64>
where
    I: Fn() -> S + Sync,
    F: Fn(&mut S, usize, &PreferenceExample, &mut Rng) -> Result<(f64, f64)> + Sync,
{
    if mc_samples == 0 {
        return Err(Error::InvalidParam("mc_samples must be at least 1".into()));
    }
    if examples.is_empty() {
        return Err(Error::InvalidParam(
            "empirical risk of an empty split".into(),
        ));
    }
    let per_chunk: Vec<Result<f64>> = examples
        .par_chunks(RISK_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut state = init();
            let mut acc = 0.0;
            for (j, ex) in chunk.iter().enumerate() {
                let i = c * RISK_CHUNK + j;
                let mut r = rng::stream(seed, streams::RISK_BASE + i as u64);
                let mut losses = 0usize;
                for _ in 0..mc_samples {
                    let (rp, rn) = draw(&mut state, i, ex, &mut r)?;
                    if rp <= rn {
                        losses += 1;
                    }
                }
                acc += losses as f64 / mc_samples as f64;
            }
            Ok(acc)
        })
        .collect();
    let mut total = 0.0;
    for c in per_chunk {
        total += c?;
    }
    Ok(total / examples.len() as f64)
}

/// Mean over examples of P̂[r(w, z⁺) ≤ r(w, z⁻)] under the posterior, with
/// one shared w per draw.
pub fn empirical_risk(
    model: &VrmModel,
    examples: &[PreferenceExample],
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    // Posterior parameters do not depend on the draw: compute them once.
    let posteriors: Vec<_> = examples
        .par_chunks(RISK_CHUNK)
        .map(|chunk| {
            let mut s = model.session();
            chunk
                .iter()
                .map(|ex| {
                    Ok((
                        s.encode_weights(&ex.x)?,
                        s.encode_features(&ex.x, &ex.y_pos)?,
                        s.encode_features(&ex.x, &ex.y_neg)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    mc_risk(
        examples,
        mc_samples,
        seed,
        || model.session(),
        |s, i, _, r| {
            let (qw, qp, qn) = &posteriors[i];
            let (w, _) = sample_dirichlet(qw, r);
            let (zp, _) = sample_gaussian(qp, r);
            let (zn, _) = sample_gaussian(qn, r);
            Ok((s.decode_reward(&w, &zp)?, s.decode_reward(&w, &zn)?))
        },
    )
}

/// Σ_i KL_w(i) + KL_z⁺(i) + KL_z⁻(i) against Dir(α₀·1) and N(0, I).
pub fn kl_total(
    model: &VrmModel,
    examples: &[PreferenceExample],
    prior_alpha0: f64,
) -> Result<f64> {
    let prior = DirichletParams::symmetric(model.hyper().k, prior_alpha0)?;
    let parts: Vec<Result<f64>> = examples
        .par_chunks(RISK_CHUNK)
        .map(|chunk| {
            let mut s = model.session();
            let mut acc = 0.0;
            for ex in chunk {
                acc += dirichlet_kl(&s.encode_weights(&ex.x)?, &prior)?;
                acc += gaussian_kl(&s.encode_features(&ex.x, &ex.y_pos)?);
                acc += gaussian_kl(&s.encode_features(&ex.x, &ex.y_neg)?);
            }
            Ok(acc)
        })
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total)
}

/// Risk, KL and bound of `model` on a training sample.
pub fn evaluate_bound(
    model: &VrmModel,
    train: &[PreferenceExample],
    delta: f64,
    mc_samples: usize,
    prior_alpha0: f64,
    seed: u64,
) -> Result<BoundReport> {
    let risk = empirical_risk(model, train, mc_samples, seed)?;
    let kl = kl_total(model, train, prior_alpha0)?;
    let mut report = compute_bound(risk, kl, train.len(), delta)?;
    report.mc_samples = mc_samples;
    Ok(report)
}

/// Repeated-sampling check of the bound's coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidityConfig {
    /// `n` is the training-sample size of each trial.
    pub generator: GeneratorConfig,
    /// Held-out pool size as a multiple of `n`.
    pub pool_factor: usize,
    pub trials: usize,
    pub delta: f64,
    pub mc_samples: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ValidityConfig {
    fn default() -> Self {
        ValidityConfig {
            generator: GeneratorConfig {
                n: 200,
                ..GeneratorConfig::default()
            },
            pool_factor: 20,
            trials: 100,
            delta: 0.05,
            mc_samples: DEFAULT_MC_SAMPLES,
            model: ModelConfig {
                k: None,
                j: 4,
                hidden: 16,
            },
            train: TrainConfig {
                epochs: 3,
                batch_size: 32,
                learning_rate: 1e-2,
                eval_interval: 1_000_000,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub population_risk: f64,
    pub report: BoundReport,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub trials: usize,
    pub delta: f64,
    pub pass_rate: f64,
    pub outcomes: Vec<TrialOutcome>,
}

/// Draw a fresh train sample and a `pool_factor`× held-out pool.
pub fn trial_dataset(cfg: &ValidityConfig, seed: u64) -> Result<SplitDataset> {
    let n = cfg.generator.n;
    let total = n * (1 + cfg.pool_factor);
    generate(&GeneratorConfig {
        seed,
        n: total,
        train_fraction: n as f64 / total as f64,
        ..cfg.generator.clone()
    })
}

pub fn run_trial(cfg: &ValidityConfig, seed: u64) -> Result<TrialOutcome> {
    let ds = trial_dataset(cfg, seed)?;
    let hyper = cfg.model.resolve(&ds.schema)?;
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let model = match train(ModelKind::Vrm, &ds, hyper, &tc)?.model {
        AnyModel::Vrm(m) => m,
        AnyModel::Baseline(_) => unreachable!("trained a VRM"),
    };
    let report = evaluate_bound(
        &model,
        &ds.train,
        cfg.delta,
        cfg.mc_samples,
        tc.prior_alpha0,
        seed,
    )?;
    let population_risk = empirical_risk(
        &model,
        &ds.eval,
        cfg.mc_samples,
        seed ^ 0x9e37_79b9_7f4a_7c15,
    )?;
    Ok(TrialOutcome {
        seed,
        population_risk,
        covered: population_risk <= report.bound,
        report,
    })
}

/// Fraction of independent trials whose population risk is within the bound.
pub fn validity_trial(cfg: &ValidityConfig) -> Result<ValidityReport> {
    if cfg.trials < MIN_TRIALS {
        return Err(Error::InvalidParam(format!(
            "validity trials need at least {MIN_TRIALS} trials, got {}",
            cfg.trials
        )));
    }
    if cfg.pool_factor < 20 {
        return Err(Error::InvalidParam(format!(
            "held-out pool must be at least 20x the sample, got {}x",
            cfg.pool_factor
        )));
    }
    let base = cfg.generator.seed;
    let outcomes = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|t| run_trial(cfg, base.wrapping_add(t)))
        .collect::<Result<Vec<_>>>()?;
    let pass_rate = outcomes.iter().filter(|o| o.covered).count() as f64 / outcomes.len() as f64;
    Ok(ValidityReport {
        trials: cfg.trials,
        delta: cfg.delta,
        pass_rate,
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelHyper;

    #[test]
    fn reference_bound() {
        let r = compute_bound(0.2, 0.0, 100, 0.05).unwrap();
        assert!(
            (r.complexity - 0.336_316_566_432_44).abs() < 1e-12,
            "{}",
            r.complexity
        );
        assert!((r.bound - (0.2 + 0.336_316_566_432_44)).abs() < 1e-12);
        assert!(!r.trivial && !r.vacuous);
    }

    #[test]
    fn single_example_is_vacuous_not_clipped() {
        let r = compute_bound(0.0, 0.0, 1, 0.9).unwrap();
        let want = ((1.0f64 / 0.9).ln() + 8.0).sqrt();
        assert!((r.complexity - want).abs() < 1e-12);
        assert!(!r.trivial && r.vacuous && r.bound > 2.8);
    }

    #[test]
    fn trivial_regime() {
        let r = compute_bound(0.3, 201.0, 100, 0.5).unwrap();
        assert!(r.trivial && r.bound == 1.0);
        let r = compute_bound(0.3, 200.0, 100, 0.5).unwrap();
        assert!(!r.trivial);
        // ln(1/δ) > 2N needs δ < e^{-2}
        let r = compute_bound(0.3, 0.0, 1, 0.1).unwrap();
        assert!(r.trivial);
        let r = compute_bound(0.3, 0.0, 1, 0.14).unwrap();
        assert!(!r.trivial);
    }

    #[test]
    fn invalid_arguments() {
        assert!(compute_bound(0.1, 0.0, 0, 0.05).is_err());
        assert!(compute_bound(0.1, 0.0, 10, 0.0).is_err());
        assert!(compute_bound(0.1, 0.0, 10, 1.0).is_err());
        assert!(compute_bound(1.1, 0.0, 10, 0.5).is_err());
        assert!(compute_bound(0.1, -1.0, 10, 0.5).is_err());
    }

    fn hyper() -> ModelHyper {
        ModelHyper {
            k: 4,
            j: 3,
            hidden: 6,
            d_x: 8,
            d_y: 8,
        }
    }

    fn data(n: usize) -> Vec<PreferenceExample> {
        generate(&GeneratorConfig {
            n,
            train_fraction: 1.0,
            ..GeneratorConfig::default()
        })
        .unwrap()
        .train
    }

    #[test]
    fn constant_decoder_loses_every_tie() {
        let model = VrmModel::new(hyper(), 0).unwrap().zero_heads();
        assert_eq!(empirical_risk(&model, &data(20), 4, 0).unwrap(), 1.0);
    }

    #[test]
    fn kl_total_is_additive() {
        let model = VrmModel::new(hyper(), 1).unwrap();
        let ex = data(30);
        let a = kl_total(&model, &ex[..10], 1.0).unwrap();
        let b = kl_total(&model, &ex[10..], 1.0).unwrap();
        let all = kl_total(&model, &ex, 1.0).unwrap();
        assert!((a + b - all).abs() < 1e-9 * all.max(1.0));
        let dup: Vec<PreferenceExample> = ex[..10]
            .iter()
            .chain(&ex[..10])
            .chain(&ex[..10])
            .cloned()
            .collect();
        assert!((kl_total(&model, &dup, 1.0).unwrap() - 3.0 * a).abs() < 1e-9 * a.max(1.0));
    }

    #[test]
    fn risk_is_deterministic_and_bounded() {
        let model = VrmModel::new(hyper(), 2).unwrap();
        let ex = data(25);
        let r1 = empirical_risk(&model, &ex, 3, 7).unwrap();
        assert_eq!(r1, empirical_risk(&model, &ex, 3, 7).unwrap());
        assert!((0.0..=1.0).contains(&r1));
        assert!(empirical_risk(&model, &ex, 0, 7).is_err());
    }

    #[test]
    fn too_few_trials_rejected() {
        let cfg = ValidityConfig {
            trials: 5,
            ..ValidityConfig::default()
        };
        assert!(validity_trial(&cfg).is_err());
    }
}
