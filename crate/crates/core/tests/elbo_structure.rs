use vrm::data::{generate, GeneratorConfig, PreferenceExample};
use vrm::distributions::{dirichlet_kl, sample_dirichlet, sample_gaussian, DirichletParams};
use vrm::losses::{elbo_preference, supervision_targets, total_loss, Objective, SupVariant};
use vrm::model::{ModelHyper, VrmModel};
use vrm::numerics::stable_sigmoid;
use vrm::rng::{self, streams};

fn fixture() -> (VrmModel, Vec<PreferenceExample>) {
    let ds = generate(&GeneratorConfig {
        seed: 9,
        n: 40,
        d_x: 4,
        d_y: 4,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let hyper = ModelHyper {
        k: 4,
        j: 3,
        hidden: 8,
        d_x: 4,
        d_y: 4,
    };
    (VrmModel::new(hyper, 9).unwrap(), ds.train)
}

#[test]
fn zero_heads_breakdown_matches_closed_forms() {
    let (m, examples) = fixture();
    let m = m.zero_heads();
    let bd = elbo_preference(&m, &examples[0], &mut rng::stream(1, streams::LATENT), 1.0).unwrap();
    let q = DirichletParams::symmetric(4, 2f64.ln()).unwrap();
    let p = DirichletParams::symmetric(4, 1.0).unwrap();
    assert!((bd.kl_w - dirichlet_kl(&q, &p).unwrap()).abs() < 1e-12);
    assert_eq!(bd.kl_z_pos, 0.0);
    assert_eq!(bd.kl_z_neg, 0.0);
    assert!((bd.bt_loglik - 0.5f64.ln()).abs() < 1e-15);
}

#[test]
fn prior_matched_elbo_is_the_likelihood() {
    let (m, examples) = fixture();
    let m = m.zero_heads();
    // α = softplus(0) everywhere; use exactly that as the prior.
    let alpha0 = m.encode_weights(&examples[0].x).unwrap().alpha()[0];
    let mut r = rng::stream(2, streams::LATENT);
    for ex in &examples {
        let bd = elbo_preference(&m, ex, &mut r, alpha0).unwrap();
        assert_eq!(bd.kl_w + bd.kl_z_pos + bd.kl_z_neg, 0.0);
        assert_eq!(bd.elbo(), bd.bt_loglik);
    }
}

#[test]
fn breakdown_recomposes_on_every_batch() {
    let (m, examples) = fixture();
    let (_, targets) = supervision_targets(&examples).unwrap();
    let mut r = rng::stream(3, streams::LATENT);
    for variant in SupVariant::ALL {
        for lambda in [0.0, 0.3, 2.0] {
            let obj = Objective::new(4, 1.0, lambda, variant).unwrap();
            for (chunk, tchunk) in examples.chunks(7).zip(targets.chunks(7)) {
                let batch: Vec<&PreferenceExample> = chunk.iter().collect();
                let t: Vec<Option<&[f64]>> = tchunk.iter().map(|t| t.as_deref()).collect();
                let bd = total_loss(&m, &batch, &t, &obj, &mut r).unwrap();
                assert!((bd.recompose(lambda) - bd.total).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn jensen_gap_is_nonnegative() {
    let (m, examples) = fixture();
    let mut r = rng::stream(4, streams::LATENT);
    let mut s = m.session();
    for ex in examples.iter().take(10) {
        let qw = s.encode_weights(&ex.x).unwrap();
        let qp = s.encode_features(&ex.x, &ex.y_pos).unwrap();
        let qn = s.encode_features(&ex.x, &ex.y_neg).unwrap();
        let draws = 10_000;
        let (mut mean_p, mut mean_log) = (0.0, 0.0);
        for _ in 0..draws {
            let (w, _) = sample_dirichlet(&qw, &mut r);
            let (zp, _) = sample_gaussian(&qp, &mut r);
            let (zn, _) = sample_gaussian(&qn, &mut r);
            let p = stable_sigmoid(
                s.decode_reward(&w, &zp).unwrap() - s.decode_reward(&w, &zn).unwrap(),
            );
            mean_p += p / draws as f64;
            mean_log += p.ln() / draws as f64;
        }
        // Latents move the reward, so the gap is strict.
        assert!(mean_p.ln() - mean_log > 0.0);
    }
}
