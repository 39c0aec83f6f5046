//! Learning curves of VRM and the Bradley–Terry baseline on clean synthetic
//! data, written as CSV next to a short summary.
//!
//!     cargo run --release --example train_compare -- [epochs] [lr] [lambda]

use vrm::data::{generate, GeneratorConfig};
use vrm::model::ModelKind;
use vrm::training::{train, ModelConfig, TrainConfig, CSV_HEADER};

fn main() -> vrm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map_or(10, |s| s.parse().expect("epochs"));
    let lr: f64 = args.get(2).map_or(3e-3, |s| s.parse().expect("lr"));
    let lambda: f64 = args.get(3).map_or(0.1, |s| s.parse().expect("lambda"));

    let ds = generate(&GeneratorConfig {
        n: 5000,
        ..GeneratorConfig::default()
    })?;
    let hyper = ModelConfig {
        k: None,
        j: 8,
        hidden: 32,
    }
    .resolve(&ds.schema)?;
    let cfg = TrainConfig {
        epochs,
        batch_size: 64,
        learning_rate: lr,
        lambda,
        eval_interval: 100,
        ..TrainConfig::default()
    };
    for kind in [ModelKind::Vrm, ModelKind::Baseline] {
        let out = train(kind, &ds, hyper, &cfg)?;
        println!("# {kind}\n{CSV_HEADER}");
        for row in &out.metrics {
            println!("{}", row.csv_line());
        }
    }
    Ok(())
}
