use vrm::data::{
    feature_label_correlation, generate, inject_spurious, load_jsonl, read_generated, save_jsonl,
    write_generated, GeneratorConfig,
};
use vrm::model::EmbedderConfig;
use vrm::numerics::stable_sigmoid;

#[test]
fn noiseless_labels_follow_the_true_reward() {
    let ds = generate(&GeneratorConfig {
        n: 1000,
        temperature: 1e-6,
        train_fraction: 1.0,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let agree = ds
        .train
        .iter()
        .filter(|e| e.truth.as_ref().unwrap().reward_gap > 0.0)
        .count();
    assert_eq!(agree, 1000);
}

#[test]
fn preference_rate_is_calibrated_per_gap_bin() {
    let ds = generate(&GeneratorConfig {
        seed: 1,
        n: 10_000,
        temperature: 1.0,
        train_fraction: 1.0,
        ..GeneratorConfig::default()
    })
    .unwrap();
    // Gap of the (a, b) draw order: a wins iff the label was not swapped.
    let pairs: Vec<(f64, bool)> = ds
        .train
        .iter()
        .map(|e| {
            let t = e.truth.as_ref().unwrap();
            if t.swapped {
                (-t.reward_gap, false)
            } else {
                (t.reward_gap, true)
            }
        })
        .collect();
    let edges = [
        -f64::INFINITY,
        -2.0,
        -1.0,
        -0.5,
        0.0,
        0.5,
        1.0,
        2.0,
        f64::INFINITY,
    ];
    for w in edges.windows(2) {
        let bin: Vec<&(f64, bool)> = pairs
            .iter()
            .filter(|(g, _)| *g >= w[0] && *g < w[1])
            .collect();
        if bin.len() < 100 {
            continue;
        }
        let n = bin.len() as f64;
        let rate = bin.iter().filter(|(_, won)| *won).count() as f64 / n;
        let expected = bin.iter().map(|(g, _)| stable_sigmoid(*g)).sum::<f64>() / n;
        let se = (expected * (1.0 - expected) / n).sqrt();
        assert!(
            (rate - expected).abs() < 3.0 * se,
            "bin {w:?}: {rate} vs {expected} ± {se}"
        );
    }
}

#[test]
fn confound_strength_is_counted() {
    let ds = generate(&GeneratorConfig {
        seed: 2,
        n: 5000,
        train_fraction: 1.0,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let conf = inject_spurious(&ds, 0.9, 2).unwrap();
    let dim = conf.schema.spurious_dim.unwrap();
    let hits = conf
        .train
        .iter()
        .map(|e| (e.y_pos[dim] == 1.0) as usize + (e.y_neg[dim] == 0.0) as usize)
        .sum::<usize>() as f64;
    let n = 2.0 * conf.train.len() as f64;
    let se = (0.9 * 0.1 / n).sqrt();
    assert!((hits / n - 0.9).abs() < 3.0 * se, "{}", hits / n);
}

#[test]
fn unconfounded_feature_is_uncorrelated() {
    let ds = generate(&GeneratorConfig {
        seed: 3,
        n: 4000,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let conf = inject_spurious(&ds, 0.0, 3).unwrap();
    let dim = conf.schema.spurious_dim.unwrap();
    for split in [&conf.train, &conf.eval] {
        // SE of a correlation near 0 is 1/√n with n responses.
        let se = 1.0 / ((2 * split.len()) as f64).sqrt();
        assert!(feature_label_correlation(split, dim).abs() < 3.0 * se);
    }
    let full = inject_spurious(&ds, 1.0, 3).unwrap();
    assert_eq!(feature_label_correlation(&full.train, dim), 1.0);
    let se = 1.0 / ((2 * full.eval.len()) as f64).sqrt();
    assert!(feature_label_correlation(&full.eval, dim).abs() < 3.0 * se);
}

#[test]
fn generated_directory_round_trips() {
    let cfg = GeneratorConfig {
        seed: 4,
        n: 100,
        spurious: Some(0.5),
        ..GeneratorConfig::default()
    };
    let ds = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_generated(dir.path(), &ds, &cfg).unwrap();
    assert_eq!(read_generated(dir.path()).unwrap(), ds);

    let path = dir.path().join("again.jsonl");
    save_jsonl(&path, &ds.train).unwrap();
    let emb = EmbedderConfig { d_x: 1, d_y: 1 };
    assert_eq!(load_jsonl(&path, &emb).unwrap(), ds.train);
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(dir.path().join("train.jsonl")).unwrap()
    );
}
