use vrm::data::{generate, GeneratorConfig};
use vrm::diffcore::grad_check;
use vrm::model::{BaselineRm, ModelHyper, ModelKind, VrmModel};
use vrm::rng::{self, streams};
use vrm::training::AnyModel;

use rand::Rng as _;

fn hyper() -> ModelHyper {
    ModelHyper {
        k: 3,
        j: 4,
        hidden: 5,
        d_x: 4,
        d_y: 3,
    }
}

const X: [f64; 4] = [0.5, -1.2, 0.3, 2.0];
const Y: [f64; 3] = [-0.4, 0.9, 0.1];

#[test]
fn sum_alpha_gradient_matches_finite_differences() {
    let m = VrmModel::new(hyper(), 3).unwrap();
    let report = grad_check(
        |t, b, _| {
            let a = m.alpha_var(t, b, &X)?;
            Ok(t.sum(a))
        },
        m.params(),
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-5, "{:?}", report.worst());
}

#[test]
fn feature_head_gradient_matches_finite_differences() {
    let m = VrmModel::new(hyper(), 4).unwrap();
    let report = grad_check(
        |t, b, _| {
            let (mu, ls) = m.feature_vars(t, b, &X, &Y)?;
            let sigma = t.exp(ls);
            let a = t.sum(mu);
            let s = t.sum(sigma);
            t.add(a, s)
        },
        m.params(),
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-5, "{:?}", report.worst());
}

#[test]
fn decoder_and_baseline_gradients_match_finite_differences() {
    let m = VrmModel::new(hyper(), 5).unwrap();
    let report = grad_check(
        |t, b, _| {
            let w = t.constant_vector(&[0.2, 0.5, 0.3]);
            let z = t.constant_vector(&[0.1, -0.3, 0.8, 0.4]);
            m.reward_var(t, b, w, z)
        },
        m.params(),
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-5, "{:?}", report.worst());

    let base = BaselineRm::new(hyper(), 5).unwrap();
    let report = grad_check(
        |t, b, _| base.reward_var(t, b, &X, &Y),
        base.params(),
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-5, "{:?}", report.worst());
}

#[test]
fn decoder_is_linear_in_weights() {
    let m = VrmModel::new(hyper(), 6).unwrap();
    let mut r = rng::stream(6, streams::LATENT);
    let z = [0.3, -0.2, 1.1, 0.0];
    let heads: Vec<f64> = (0..3)
        .map(|k| {
            let mut e = [0.0; 3];
            e[k] = 1.0;
            m.decode_reward(&e, &z).unwrap()
        })
        .collect();
    for _ in 0..20 {
        let g: Vec<f64> = (0..3).map(|_| r.random::<f64>() + 1e-3).collect();
        let s: f64 = g.iter().sum();
        let w: Vec<f64> = g.iter().map(|v| v / s).collect();
        let mix: f64 = w.iter().zip(&heads).map(|(a, b)| a * b).sum();
        assert!((m.decode_reward(&w, &z).unwrap() - mix).abs() < 1e-10);
    }
}

#[test]
fn scoring_is_per_example() {
    let ds = generate(&GeneratorConfig {
        n: 120,
        d_x: 4,
        d_y: 3,
        k: 3,
        ..GeneratorConfig::default()
    })
    .unwrap();
    for kind in [ModelKind::Vrm, ModelKind::Baseline] {
        let m = AnyModel::new(kind, hyper(), 7).unwrap();
        let scores = m.score_pairs(&ds.train).unwrap();
        let mut reversed = ds.train.clone();
        reversed.reverse();
        let mut back = m.score_pairs(&reversed).unwrap();
        back.reverse();
        assert_eq!(scores, back);
        // First example alone gives the same numbers as inside the batch.
        assert_eq!(m.score_pairs(&ds.train[..1]).unwrap()[0], scores[0]);
    }
}
