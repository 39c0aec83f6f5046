use vrm::data::{generate, GeneratorConfig, SplitDataset};
use vrm::model::{ModelHyper, ModelKind};
use vrm::training::{
    accuracy_of, categorical_kl, pairwise_accuracy, permuted_weight_recovery, train,
    weight_recovery, AnyModel, Checkpoint, ModelConfig, TrainConfig,
};

fn data(n: usize, seed: u64) -> SplitDataset {
    generate(&GeneratorConfig {
        seed,
        n,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

fn small_hyper(ds: &SplitDataset) -> ModelHyper {
    ModelConfig {
        k: None,
        j: 8,
        hidden: 32,
    }
    .resolve(&ds.schema)
    .unwrap()
}

#[test]
fn same_seed_same_metrics_and_checkpoint() {
    let ds = data(300, 1);
    let cfg = TrainConfig {
        epochs: 2,
        eval_interval: 3,
        ..TrainConfig::default()
    };
    for kind in [ModelKind::Vrm, ModelKind::Baseline] {
        let a = train(kind, &ds, small_hyper(&ds), &cfg).unwrap();
        let b = train(kind, &ds, small_hyper(&ds), &cfg).unwrap();
        let lines = |o: &vrm::training::TrainOutcome| {
            o.metrics.iter().map(|r| r.csv_line()).collect::<Vec<_>>()
        };
        assert_eq!(lines(&a), lines(&b));
        let ser = |o: &vrm::training::TrainOutcome| serde_json::to_string(&o.checkpoint()).unwrap();
        assert_eq!(ser(&a), ser(&b));
        let c = train(
            kind,
            &ds,
            small_hyper(&ds),
            &TrainConfig {
                seed: 1,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_ne!(lines(&a), lines(&c));
    }
}

#[test]
fn singleton_is_overfit() {
    let ds = data(50, 2);
    let one = SplitDataset::from_splits(ds.train[..1].to_vec(), Vec::new()).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 1,
        learning_rate: 1e-2,
        eval_interval: 1000,
        ..TrainConfig::default()
    };
    for kind in [ModelKind::Vrm, ModelKind::Baseline] {
        let out = train(kind, &one, small_hyper(&one), &cfg).unwrap();
        assert_eq!(out.final_row().train_acc, 1.0, "{kind:?}");
        // Survives a checkpoint round trip.
        let back = Checkpoint::from_model(&out.model).to_model().unwrap();
        assert_eq!(pairwise_accuracy(&back, &one.train).unwrap(), 1.0);
    }
}

#[test]
fn untrained_models_are_at_chance() {
    // Balanced data: at huge temperature the labels are coin flips, independent
    // of the features, so any fixed scorer is Binomial(n, 1/2) / n.
    let ds = generate(&GeneratorConfig {
        seed: 3,
        n: 2000,
        temperature: 1e6,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let se = (0.25f64 / ds.train.len() as f64).sqrt();
    for (kind, seed) in [
        (ModelKind::Baseline, 0),
        (ModelKind::Baseline, 1),
        (ModelKind::Vrm, 0),
    ] {
        let m = AnyModel::new(kind, small_hyper(&ds), seed).unwrap();
        let acc = pairwise_accuracy(&m, &ds.train).unwrap();
        assert!((acc - 0.5).abs() < 3.0 * se, "{kind:?}/{seed}: {acc}");
    }
}

#[test]
fn oracle_and_tie_conventions() {
    let ds = generate(&GeneratorConfig {
        n: 500,
        temperature: 1e-6,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let oracle: Vec<(f64, f64)> = ds
        .train
        .iter()
        .map(|e| {
            let t = e.truth.as_ref().unwrap();
            let r = |q: &[f64]| t.w_star.iter().zip(q).map(|(w, v)| w * v).sum::<f64>();
            (r(&t.quality_pos), r(&t.quality_neg))
        })
        .collect();
    assert_eq!(accuracy_of(&oracle), 1.0);
    let ties = vec![(0.3, 0.3); 10];
    assert_eq!(accuracy_of(&ties), 0.0);
}

#[test]
fn lambda_zero_logs_zero_supervision() {
    let ds = data(200, 4);
    let cfg = TrainConfig {
        epochs: 2,
        lambda: 0.0,
        eval_interval: 2,
        ..TrainConfig::default()
    };
    let out = train(ModelKind::Vrm, &ds, small_hyper(&ds), &cfg).unwrap();
    assert!(out.metrics.iter().all(|r| r.loss.sup == 0.0));
    assert!(out
        .metrics
        .iter()
        .all(|r| (r.loss.total + r.loss.elbo()).abs() < 1e-12));
}

#[test]
fn weight_recovery_oracles() {
    let w_star = [0.85, 0.05, 0.05, 0.05];
    assert_eq!(categorical_kl(&w_star, &w_star).unwrap(), 0.0);
    assert!(categorical_kl(&w_star, &[0.25; 4]).unwrap() > 0.0);
    assert!(categorical_kl(&w_star, &[0.05, 0.85, 0.05, 0.05]).unwrap() > 0.0);

    // Two λ values on one seed: stronger supervision recovers w* better, and
    // the trained weights are aligned (a dimension shuffle hurts).
    let ds = data(2000, 0);
    let mut recovery = Vec::new();
    for lambda in [1e-4, 1.0] {
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 3e-3,
            lambda,
            eval_interval: 100_000,
            ..TrainConfig::default()
        };
        let out = train(ModelKind::Vrm, &ds, small_hyper(&ds), &cfg).unwrap();
        let AnyModel::Vrm(m) = out.model else {
            unreachable!()
        };
        let aligned = weight_recovery(&m, &ds.eval).unwrap();
        assert!(aligned > 0.0);
        recovery.push((
            aligned,
            permuted_weight_recovery(&m, &ds.eval, &[1, 2, 3, 0]).unwrap(),
        ));
    }
    assert!(recovery[1].0 < recovery[0].0, "{recovery:?}");
    assert!(recovery[1].1 > recovery[1].0, "{recovery:?}");
}
