//! Generate a synthetic preference set, report label calibration against the
//! true reward gap and the leak strength of an injected spurious feature.
//!
//!     cargo run --release --example synthetic_data -- [n] [rho]

use vrm::data::{feature_label_correlation, generate, GeneratorConfig};

fn main() -> vrm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).map_or(5000, |s| s.parse().expect("n"));
    let rho: f64 = args.get(2).map_or(0.9, |s| s.parse().expect("rho"));

    let cfg = GeneratorConfig {
        n,
        spurious: Some(rho),
        ..GeneratorConfig::default()
    };
    let ds = generate(&cfg)?;
    println!(
        "{} train / {} eval, schema {:?}",
        ds.train.len(),
        ds.eval.len(),
        ds.schema
    );

    // Fraction of pairs whose chosen response also has the larger true reward.
    let agree = ds
        .train
        .iter()
        .filter_map(|e| e.truth.as_ref())
        .filter(|t| t.reward_gap > 0.0)
        .count() as f64
        / ds.train.len() as f64;
    println!(
        "labels agree with the true reward on {:.1}% of train pairs (tau = {})",
        100.0 * agree,
        cfg.temperature
    );

    let dim = ds.schema.spurious_dim.expect("spurious feature requested");
    println!(
        "spurious feature y[{dim}]: corr with label {:.3} on train, {:.3} on eval",
        feature_label_correlation(&ds.train, dim),
        feature_label_correlation(&ds.eval, dim)
    );
    Ok(())
}
