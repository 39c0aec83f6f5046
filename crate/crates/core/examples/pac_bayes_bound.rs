//! Evaluate the PAC-Bayes bound for a trained VRM, then check its coverage
//! over repeated small trials.
//!
//!     cargo run --release --example pac_bayes_bound -- [trials]

use vrm::data::{generate, GeneratorConfig};
use vrm::model::ModelKind;
use vrm::pacbayes::{
    compute_bound, evaluate_bound, validity_trial, ValidityConfig, DEFAULT_MC_SAMPLES,
};
use vrm::training::{train, AnyModel, ModelConfig, TrainConfig};

fn main() -> vrm::Result<()> {
    let trials: usize = std::env::args()
        .nth(1)
        .map_or(20, |s| s.parse().expect("trials"));

    let b = compute_bound(0.2, 0.0, 100, 0.05)?;
    println!(
        "N = 100, delta = 0.05, KL = 0, risk 0.2: complexity {:.6}, bound {:.6}",
        b.complexity, b.bound
    );

    let ds = generate(&GeneratorConfig {
        n: 1000,
        ..GeneratorConfig::default()
    })?;
    let hyper = ModelConfig {
        k: None,
        j: 4,
        hidden: 16,
    }
    .resolve(&ds.schema)?;
    let cfg = TrainConfig {
        epochs: 5,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    if let AnyModel::Vrm(m) = train(ModelKind::Vrm, &ds, hyper, &cfg)?.model {
        let r = evaluate_bound(&m, &ds.train, 0.05, DEFAULT_MC_SAMPLES, cfg.prior_alpha0, 0)?;
        println!(
            "trained VRM on {} pairs: risk {:.4}, KL {:.2}, bound {:.4} (vacuous: {})",
            r.n, r.empirical_risk, r.kl_total, r.bound, r.vacuous
        );
    }

    let v = validity_trial(&ValidityConfig {
        trials,
        ..ValidityConfig::default()
    })?;
    let covered = v.outcomes.iter().filter(|o| o.covered).count();
    println!(
        "coverage: {covered}/{} trials have population risk <= bound (pass rate {:.2})",
        v.trials, v.pass_rate
    );
    Ok(())
}
