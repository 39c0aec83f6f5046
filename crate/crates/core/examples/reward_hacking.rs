//! Train VRM and the baseline on data whose responses carry a feature that
//! leaks the label on the train split only, and compare eval accuracy.
//!
//!     cargo run --release --example reward_hacking -- [rho] [n] [seeds]

use std::time::Instant;

use vrm::data::{generate, GeneratorConfig};
use vrm::model::ModelKind;
use vrm::training::{train, ModelConfig, TrainConfig};

fn main() -> vrm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let rho: f64 = args.get(1).map_or(0.9, |s| s.parse().expect("rho"));
    let n: usize = args.get(2).map_or(5000, |s| s.parse().expect("n"));
    let seeds: u64 = args.get(3).map_or(5, |s| s.parse().expect("seeds"));

    let model = ModelConfig {
        k: None,
        j: 8,
        hidden: 32,
    };
    println!("seed  vrm_train  vrm_eval  base_train  base_eval  secs");
    for seed in 0..seeds {
        let ds = generate(&GeneratorConfig {
            seed,
            n,
            spurious: Some(rho),
            ..GeneratorConfig::default()
        })?;
        let hyper = model.resolve(&ds.schema)?;
        let cfg = TrainConfig {
            seed,
            epochs: 5,
            batch_size: 64,
            learning_rate: 3e-3,
            eval_interval: 10_000,
            ..TrainConfig::default()
        };
        let t = Instant::now();
        let v = train(ModelKind::Vrm, &ds, hyper, &cfg)?;
        let b = train(ModelKind::Baseline, &ds, hyper, &cfg)?;
        let (vr, br) = (v.final_row(), b.final_row());
        println!(
            "{seed:>4}  {:>9.4}  {:>8.4}  {:>10.4}  {:>9.4}  {:>4.1}",
            vr.train_acc,
            vr.eval_acc.unwrap_or(f64::NAN),
            br.train_acc,
            br.eval_acc.unwrap_or(f64::NAN),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
