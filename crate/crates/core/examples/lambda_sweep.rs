//! Sweep the supervision weight λ and the supervision variant; report final
//! sup_kl, accuracy and weight recovery for each run.
//!
//!     cargo run --release --example lambda_sweep -- [epochs]

use vrm::data::{generate, GeneratorConfig};
use vrm::losses::SupVariant;
use vrm::model::ModelKind;
use vrm::training::{train, weight_recovery, AnyModel, ModelConfig, TrainConfig};

fn main() -> vrm::Result<()> {
    let epochs: usize = std::env::args()
        .nth(1)
        .map_or(10, |s| s.parse().expect("epochs"));
    let ds = generate(&GeneratorConfig {
        n: 3000,
        ..GeneratorConfig::default()
    })?;
    let hyper = ModelConfig {
        k: None,
        j: 8,
        hidden: 32,
    }
    .resolve(&ds.schema)?;
    println!("variant  lambda   sup_kl   train_acc  eval_acc  recovery");
    for variant in SupVariant::ALL {
        for lambda in [0.0, 1e-4, 1e-2, 1.0] {
            let cfg = TrainConfig {
                epochs,
                batch_size: 64,
                learning_rate: 3e-3,
                lambda,
                sup_variant: variant,
                eval_interval: 1_000_000,
                ..TrainConfig::default()
            };
            let out = train(ModelKind::Vrm, &ds, hyper, &cfg)?;
            let row = out.final_row();
            let recovery = match &out.model {
                AnyModel::Vrm(m) => weight_recovery(m, &ds.eval)?,
                AnyModel::Baseline(_) => f64::NAN,
            };
            println!(
                "{:<8} {lambda:<7} {:>7.4}  {:>9.4}  {:>8.4}  {recovery:>8.4}",
                variant.to_string(),
                row.sup_kl.unwrap_or(f64::NAN),
                row.train_acc,
                row.eval_acc.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}
