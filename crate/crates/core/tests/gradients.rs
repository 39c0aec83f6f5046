use vrm::data::{generate, GeneratorConfig, PreferenceExample};
use vrm::diffcore::grad_check;
use vrm::losses::{
    frozen_noise, supervision_targets, total_loss_var, NoiseSource, Objective, SupVariant,
};
use vrm::model::{ModelHyper, VrmModel};
use vrm::rng::{self, streams};

fn setup(seed: u64) -> (VrmModel, Vec<PreferenceExample>) {
    let ds = generate(&GeneratorConfig {
        seed,
        n: 6,
        d_x: 3,
        d_y: 2,
        train_fraction: 1.0,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let hyper = ModelHyper {
        k: 4,
        j: 3,
        hidden: 4,
        d_x: 3,
        d_y: 2,
    };
    (VrmModel::new(hyper, seed).unwrap(), ds.train)
}

#[test]
fn full_loss_matches_finite_differences_under_frozen_noise() {
    for variant in SupVariant::ALL {
        let (model, examples) = setup(11);
        let batch: Vec<&PreferenceExample> = examples.iter().collect();
        let (_, targets) = supervision_targets(&examples).unwrap();
        let targets: Vec<Option<&[f64]>> = targets.iter().map(|t| t.as_deref()).collect();
        let noise = frozen_noise(&model, &batch, &mut rng::stream(5, streams::LATENT)).unwrap();
        let obj = Objective::new(4, 1.0, 0.7, variant).unwrap();
        let report = grad_check(
            |t, b, _| {
                total_loss_var(
                    &model,
                    t,
                    b,
                    &batch,
                    &targets,
                    &obj,
                    NoiseSource::Replay(&noise),
                )
                .map(|r| r.0)
            },
            model.params(),
            1e-5,
            None,
        )
        .unwrap();
        let worst = report.worst().unwrap();
        println!(
            "{variant}: worst {} {:.3e} ({} vs {})",
            worst.name, worst.max_rel_error, worst.analytic, worst.numeric
        );
        assert!(report.max_rel_error() < 1e-4, "{variant}: {worst:?}");
    }
}
