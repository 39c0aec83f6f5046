//! Preference datasets: a synthetic generator with known ground truth, a
//! spurious-feature injector, and JSONL ingestion.
//!
//! The generator runs the causal story forward. For each example:
//!
//! ```text
//! x ~ N(0, I)                 w* = softmax(A x)
//! y_a, y_b ~ N(0, I)          q(y) = U tanh(B [x; y])       r*(y) = w* · q(y)
//! a ≻ b with probability σ((r*(y_a) − r*(y_b)) / τ)
//! scores s(y) = q(y) + N(0, 0.1²)
//! ```
//!
//! `A`, `B`, `U` are fixed random maps drawn from the seed. The winner is
//! stored as the preferred response; the truth record keeps whether the
//! roles were swapped relative to the draw order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::distributions::standard_normals;
use crate::model::EmbedderConfig;
use crate::numerics::{softmax_unchecked, stable_sigmoid};
use crate::rng::{self, streams};
use crate::{Error, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Standard deviation of the observation noise on raw scores.
pub const SCORE_NOISE_STD: f64 = 0.1;

/// Ground truth for one synthetic comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Truth {
    pub w_star: Vec<f64>,
    pub quality_pos: Vec<f64>,
    pub quality_neg: Vec<f64>,
    /// Σ_k w*_k (q_k⁺ − q_k⁻).
    pub reward_gap: f64,
    /// True when the second drawn response won and the roles were swapped.
    pub swapped: bool,
}

/// One (x, y⁺, y⁻) comparison; the preferred response is always `y_pos`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceExample {
    pub x: Vec<f64>,
    pub y_pos: Vec<f64>,
    pub y_neg: Vec<f64>,
    pub scores_pos: Option<Vec<f64>>,
    pub scores_neg: Option<Vec<f64>>,
    pub truth: Option<Truth>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub d_x: usize,
    pub d_y: usize,
    /// Score dimension, when scores are present.
    pub k: Option<usize>,
    /// Index of the injected spurious feature within `y`, if any.
    pub spurious_dim: Option<usize>,
}

impl FeatureSchema {
    /// Infer the schema of a non-empty set of examples, checking consistency.
    pub fn infer(examples: &[PreferenceExample]) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::Schema("cannot infer a schema from an empty dataset".into()))?;
        let schema = FeatureSchema {
            d_x: first.x.len(),
            d_y: first.y_pos.len(),
            k: first.scores_pos.as_ref().map(Vec::len),
            spurious_dim: None,
        };
        for (i, ex) in examples.iter().enumerate() {
            schema
                .check(ex)
                .map_err(|e| Error::Schema(format!("example {i}: {e}")))?;
        }
        Ok(schema)
    }

    fn check(&self, ex: &PreferenceExample) -> std::result::Result<(), String> {
        if ex.x.len() != self.d_x {
            return Err(format!(
                "prompt features have {} dims, expected {}",
                ex.x.len(),
                self.d_x
            ));
        }
        if ex.y_pos.len() != self.d_y || ex.y_neg.len() != self.d_y {
            return Err(format!(
                "response features have {}/{} dims, expected {}",
                ex.y_pos.len(),
                ex.y_neg.len(),
                self.d_y
            ));
        }
        for s in [&ex.scores_pos, &ex.scores_neg].into_iter().flatten() {
            if Some(s.len()) != self.k && self.k.is_some() {
                return Err(format!(
                    "score vector has {} dims, expected {:?}",
                    s.len(),
                    self.k
                ));
            }
        }
        Ok(())
    }
}

fn default_seed() -> u64 {
    0
}
fn default_n() -> usize {
    1000
}
fn default_dim() -> usize {
    8
}
fn default_k() -> usize {
    4
}
fn default_latent() -> usize {
    4
}
fn default_temperature() -> f64 {
    0.1
}
fn default_train_fraction() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_dim")]
    pub d_x: usize,
    #[serde(default = "default_dim")]
    pub d_y: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Dimension of the true semantic state behind the qualities.
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    /// Bradley–Terry temperature τ of the labeling step.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Confound strength ρ; `None` means no spurious feature is appended.
    #[serde(default)]
    pub spurious: Option<f64>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: default_seed(),
            n: default_n(),
            d_x: default_dim(),
            d_y: default_dim(),
            k: default_k(),
            latent_dim: default_latent(),
            temperature: default_temperature(),
            spurious: None,
            train_fraction: default_train_fraction(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("generator n must be positive".into()));
        }
        if self.d_x == 0 || self.d_y == 0 || self.latent_dim == 0 {
            return Err(Error::Config(
                "generator dimensions must be positive".into(),
            ));
        }
        if self.k < 2 {
            return Err(Error::Config(format!(
                "generator k must be at least 2, got {}",
                self.k
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let Some(rho) = self.spurious {
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::Config(format!(
                    "spurious strength must be in [0, 1], got {rho}"
                )));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1], got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Train/eval splits plus the bookkeeping written to the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<PreferenceExample>,
    pub eval: Vec<PreferenceExample>,
    pub schema: FeatureSchema,
    pub train_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
}

impl SplitDataset {
    /// Wrap externally loaded splits.
    pub fn from_splits(
        train: Vec<PreferenceExample>,
        eval: Vec<PreferenceExample>,
    ) -> Result<Self> {
        let schema = FeatureSchema::infer(if train.is_empty() { &eval } else { &train })?;
        for (i, ex) in eval.iter().enumerate() {
            schema
                .check(ex)
                .map_err(|e| Error::Schema(format!("eval example {i}: {e}")))?;
        }
        let n_train = train.len();
        Ok(SplitDataset {
            train_indices: (0..n_train).collect(),
            eval_indices: (n_train..n_train + eval.len()).collect(),
            train,
            eval,
            schema,
        })
    }
}

struct GroundTruthMaps {
    weight_map: Vec<f64>,
    feature_map: Vec<f64>,
    quality_map: Vec<f64>,
}

fn matvec(m: &[f64], cols: usize, v: &[f64]) -> Vec<f64> {
    m.chunks_exact(cols)
        .map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

impl GroundTruthMaps {
    fn qualities(&self, cfg: &GeneratorConfig, x: &[f64], y: &[f64]) -> Vec<f64> {
        let xy: Vec<f64> = x.iter().chain(y).copied().collect();
        let h: Vec<f64> = matvec(&self.feature_map, xy.len(), &xy)
            .into_iter()
            .map(f64::tanh)
            .collect();
        matvec(&self.quality_map, cfg.latent_dim, &h)
    }
}

/// Generate a synthetic dataset; deterministic in every config field.
pub fn generate(cfg: &GeneratorConfig) -> Result<SplitDataset> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, streams::GENERATOR);
    let d_in = cfg.d_x + cfg.d_y;
    let feature_gain = 2.0 / (d_in as f64).sqrt();
    let maps = GroundTruthMaps {
        weight_map: standard_normals(cfg.k * cfg.d_x, &mut rng),
        feature_map: standard_normals(cfg.latent_dim * d_in, &mut rng)
            .into_iter()
            .map(|v| v * feature_gain)
            .collect(),
        quality_map: standard_normals(cfg.k * cfg.latent_dim, &mut rng),
    };

    let mut all = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let x = standard_normals(cfg.d_x, &mut rng);
        let w_star = softmax_unchecked(&matvec(&maps.weight_map, cfg.d_x, &x));
        let y_a = standard_normals(cfg.d_y, &mut rng);
        let y_b = standard_normals(cfg.d_y, &mut rng);
        let q_a = maps.qualities(cfg, &x, &y_a);
        let q_b = maps.qualities(cfg, &x, &y_b);
        let gap_ab: f64 = w_star
            .iter()
            .zip(q_a.iter().zip(&q_b))
            .map(|(w, (a, b))| w * (a - b))
            .sum();
        let a_wins = rng.random::<f64>() < stable_sigmoid(gap_ab / cfg.temperature);
        let noisy = |q: &[f64], rng: &mut rng::Rng| -> Vec<f64> {
            q.iter()
                .zip(standard_normals(q.len(), rng))
                .map(|(v, e)| v + SCORE_NOISE_STD * e)
                .collect()
        };
        let s_a = noisy(&q_a, &mut rng);
        let s_b = noisy(&q_b, &mut rng);
        let ((y_pos, q_pos, s_pos), (y_neg, q_neg, s_neg)) = if a_wins {
            ((y_a, q_a, s_a), (y_b, q_b, s_b))
        } else {
            ((y_b, q_b, s_b), (y_a, q_a, s_a))
        };
        let reward_gap = w_star
            .iter()
            .zip(q_pos.iter().zip(&q_neg))
            .map(|(w, (p, n))| w * (p - n))
            .sum();
        all.push(PreferenceExample {
            x,
            y_pos,
            y_neg,
            scores_pos: Some(s_pos),
            scores_neg: Some(s_neg),
            truth: Some(Truth {
                w_star,
                quality_pos: q_pos,
                quality_neg: q_neg,
                reward_gap,
                swapped: !a_wins,
            }),
        });
    }

    let mut order: Vec<usize> = (0..cfg.n).collect();
    order.shuffle(&mut rng::stream(cfg.seed, streams::SPLIT));
    let n_train = ((cfg.n as f64) * cfg.train_fraction).round() as usize;
    let mut train_indices = order[..n_train].to_vec();
    let mut eval_indices = order[n_train..].to_vec();
    train_indices.sort_unstable();
    eval_indices.sort_unstable();

    let ds = SplitDataset {
        train: train_indices.iter().map(|&i| all[i].clone()).collect(),
        eval: eval_indices.iter().map(|&i| all[i].clone()).collect(),
        schema: FeatureSchema {
            d_x: cfg.d_x,
            d_y: cfg.d_y,
            k: Some(cfg.k),
            spurious_dim: None,
        },
        train_indices,
        eval_indices,
    };
    match cfg.spurious {
        Some(rho) => inject_spurious(&ds, rho, cfg.seed),
        None => Ok(ds),
    }
}

/// Append one response feature that is confounded with the label on the
/// train split and independent noise on the eval split.
///
/// On train, each response's feature equals its label (1 for preferred,
/// 0 for dispreferred) with probability ρ and is Uniform(0, 1) otherwise.
pub fn inject_spurious(ds: &SplitDataset, rho: f64, seed: u64) -> Result<SplitDataset> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!(
            "spurious strength must be in [0, 1], got {rho}"
        )));
    }
    let mut rng = rng::stream(seed, streams::SPURIOUS);
    let mut out = ds.clone();
    for ex in &mut out.train {
        for (y, label) in [(&mut ex.y_pos, 1.0), (&mut ex.y_neg, 0.0)] {
            let v = if rng.random::<f64>() < rho {
                label
            } else {
                rng.random::<f64>()
            };
            y.push(v);
        }
    }
    for ex in &mut out.eval {
        ex.y_pos.push(rng.random::<f64>());
        ex.y_neg.push(rng.random::<f64>());
    }
    out.schema.spurious_dim = Some(ds.schema.d_y);
    out.schema.d_y += 1;
    Ok(out)
}

/// Pearson correlation between a response feature and the preference label
/// (1 preferred, 0 dispreferred), pooled over both responses of every pair.
pub fn feature_label_correlation(examples: &[PreferenceExample], dim: usize) -> f64 {
    let pairs: Vec<(f64, f64)> = examples
        .iter()
        .flat_map(|ex| [(ex.y_pos[dim], 1.0), (ex.y_neg[dim], 0.0)])
        .collect();
    let n = pairs.len() as f64;
    let (mf, ml) = pairs
        .iter()
        .fold((0.0, 0.0), |(a, b), (f, l)| (a + f / n, b + l / n));
    let (mut cov, mut vf, mut vl) = (0.0, 0.0, 0.0);
    for (f, l) in &pairs {
        cov += (f - mf) * (l - ml);
        vf += (f - mf).powi(2);
        vl += (l - ml).powi(2);
    }
    if vf == 0.0 || vl == 0.0 {
        return 0.0;
    }
    cov / (vf * vl).sqrt()
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x_feat: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response_pos: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response_neg: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y_pos_feat: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y_neg_feat: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores_pos: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores_neg: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RecordKind {
    Text,
    Numeric,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    truth: Truth,
}

impl Record {
    fn kind(&self) -> std::result::Result<RecordKind, String> {
        let text = [
            self.prompt.is_some(),
            self.response_pos.is_some(),
            self.response_neg.is_some(),
        ];
        let numeric = [
            self.x_feat.is_some(),
            self.y_pos_feat.is_some(),
            self.y_neg_feat.is_some(),
        ];
        let any_text = text.iter().any(|&b| b);
        let any_numeric = numeric.iter().any(|&b| b);
        match (any_text, any_numeric) {
            (true, true) => Err("record mixes text and numeric fields".into()),
            (false, false) => Err("missing mandatory field: prompt or x_feat".into()),
            (true, false) => {
                let missing: Vec<&str> = ["prompt", "response_pos", "response_neg"]
                    .iter()
                    .zip(text)
                    .filter(|(_, present)| !present)
                    .map(|(n, _)| *n)
                    .collect();
                if missing.is_empty() {
                    Ok(RecordKind::Text)
                } else {
                    Err(format!(
                        "missing mandatory field(s): {}",
                        missing.join(", ")
                    ))
                }
            }
            (false, true) => {
                let missing: Vec<&str> = ["x_feat", "y_pos_feat", "y_neg_feat"]
                    .iter()
                    .zip(numeric)
                    .filter(|(_, present)| !present)
                    .map(|(n, _)| *n)
                    .collect();
                if missing.is_empty() {
                    Ok(RecordKind::Numeric)
                } else {
                    Err(format!(
                        "missing mandatory field(s): {}",
                        missing.join(", ")
                    ))
                }
            }
        }
    }

    fn into_example(self, kind: RecordKind, embedder: &EmbedderConfig) -> PreferenceExample {
        let truth = self
            .meta
            .and_then(|m| serde_json::from_value::<Meta>(m).ok())
            .map(|m| m.truth);
        let (x, y_pos, y_neg) = match kind {
            RecordKind::Text => (
                embedder
                    .prompt()
                    .embed(self.prompt.as_deref().unwrap_or_default()),
                embedder
                    .response()
                    .embed(self.response_pos.as_deref().unwrap_or_default()),
                embedder
                    .response()
                    .embed(self.response_neg.as_deref().unwrap_or_default()),
            ),
            RecordKind::Numeric => (
                self.x_feat.unwrap_or_default(),
                self.y_pos_feat.unwrap_or_default(),
                self.y_neg_feat.unwrap_or_default(),
            ),
        };
        PreferenceExample {
            x,
            y_pos,
            y_neg,
            scores_pos: self.scores_pos,
            scores_neg: self.scores_neg,
            truth,
        }
    }
}

/// Read a JSONL preference file. Text fields are embedded with `embedder`;
/// numeric records pass through unchanged.
pub fn load_jsonl(path: &Path, embedder: &EmbedderConfig) -> Result<Vec<PreferenceExample>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    let mut file_kind: Option<RecordKind> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let schema_err =
            |msg: String| Error::Schema(format!("{}:{line_no}: {msg}", path.display()));
        let record: Record =
            serde_json::from_value(value).map_err(|e| schema_err(e.to_string()))?;
        let kind = record.kind().map_err(schema_err)?;
        match file_kind {
            None => file_kind = Some(kind),
            Some(k) if k != kind => {
                return Err(schema_err("file mixes text and numeric records".into()));
            }
            _ => {}
        }
        out.push(record.into_example(kind, embedder));
    }
    if !out.is_empty() {
        FeatureSchema::infer(&out)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    }
    Ok(out)
}

/// Write examples as numeric JSONL records (truth goes under `meta`).
pub fn save_jsonl(path: &Path, examples: &[PreferenceExample]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        let record = Record {
            x_feat: Some(ex.x.clone()),
            y_pos_feat: Some(ex.y_pos.clone()),
            y_neg_feat: Some(ex.y_neg.clone()),
            scores_pos: ex.scores_pos.clone(),
            scores_neg: ex.scores_neg.clone(),
            meta: ex
                .truth
                .as_ref()
                .map(|t| serde_json::to_value(Meta { truth: t.clone() }))
                .transpose()?,
            ..Record::default()
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Sidecar written next to generated splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub generator: GeneratorConfig,
    pub schema: FeatureSchema,
    pub train_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Write `train.jsonl`, `eval.jsonl` and `manifest.json` into `dir`.
pub fn write_generated(dir: &Path, ds: &SplitDataset, cfg: &GeneratorConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_jsonl(&dir.join(TRAIN_FILE), &ds.train)?;
    save_jsonl(&dir.join(EVAL_FILE), &ds.eval)?;
    let manifest = Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        generator: cfg.clone(),
        schema: ds.schema,
        train_indices: ds.train_indices.clone(),
        eval_indices: ds.eval_indices.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

/// Load a directory produced by [`write_generated`].
pub fn read_generated(dir: &Path) -> Result<SplitDataset> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != MANIFEST_FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "manifest format version {}",
            manifest.format_version
        )));
    }
    let embedder = EmbedderConfig {
        d_x: manifest.schema.d_x,
        d_y: manifest.schema.d_y,
    };
    Ok(SplitDataset {
        train: load_jsonl(&dir.join(TRAIN_FILE), &embedder)?,
        eval: load_jsonl(&dir.join(EVAL_FILE), &embedder)?,
        schema: manifest.schema,
        train_indices: manifest.train_indices,
        eval_indices: manifest.eval_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            seed,
            n: 200,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let a = generate(&small(3)).unwrap();
        let b = generate(&small(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 180);
        assert_eq!(a.eval.len(), 20);
        let mut all: Vec<usize> = a
            .train_indices
            .iter()
            .chain(&a.eval_indices)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert_ne!(a, generate(&small(4)).unwrap());
    }

    #[test]
    fn truth_is_consistent() {
        let ds = generate(&small(5)).unwrap();
        for ex in ds.train.iter().chain(&ds.eval) {
            let t = ex.truth.as_ref().unwrap();
            assert!((t.w_star.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let gap: f64 = t
                .w_star
                .iter()
                .zip(t.quality_pos.iter().zip(&t.quality_neg))
                .map(|(w, (p, n))| w * (p - n))
                .sum();
            assert!((gap - t.reward_gap).abs() < 1e-10);
        }
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            GeneratorConfig {
                temperature: 0.0,
                ..small(0)
            },
            GeneratorConfig {
                train_fraction: 1.5,
                ..small(0)
            },
            GeneratorConfig {
                spurious: Some(1.2),
                ..small(0)
            },
            GeneratorConfig { k: 1, ..small(0) },
            GeneratorConfig { n: 0, ..small(0) },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn spurious_leaves_other_fields_alone() {
        let ds = generate(&small(6)).unwrap();
        let conf = inject_spurious(&ds, 0.7, 6).unwrap();
        assert_eq!(conf.schema.d_y, ds.schema.d_y + 1);
        assert_eq!(conf.schema.spurious_dim, Some(ds.schema.d_y));
        for (a, b) in ds
            .train
            .iter()
            .chain(&ds.eval)
            .zip(conf.train.iter().chain(&conf.eval))
        {
            assert_eq!(a.x, b.x);
            assert_eq!(a.scores_pos, b.scores_pos);
            assert_eq!(a.scores_neg, b.scores_neg);
            assert_eq!(a.truth, b.truth);
            assert_eq!(&b.y_pos[..a.y_pos.len()], &a.y_pos[..]);
        }
    }

    #[test]
    fn full_confound_is_perfectly_correlated() {
        let ds = generate(&small(7)).unwrap();
        let conf = inject_spurious(&ds, 1.0, 7).unwrap();
        let dim = conf.schema.spurious_dim.unwrap();
        assert_eq!(feature_label_correlation(&conf.train, dim), 1.0);
    }

    #[test]
    fn jsonl_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        fs::write(
            &p,
            "{\"x_feat\":[1],\"y_pos_feat\":[1],\"y_neg_feat\":[0]}\n{not json\n",
        )
        .unwrap();
        let err = load_jsonl(&p, &EmbedderConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

        fs::write(&p, "{\"x_feat\":[1],\"y_pos_feat\":[1]}\n").unwrap();
        let err = load_jsonl(&p, &EmbedderConfig::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("y_neg_feat") && err.contains(":1:"), "{err}");

        fs::write(
            &p,
            "{\"x_feat\":[1],\"y_pos_feat\":[1],\"y_neg_feat\":[0]}\n{\"prompt\":\"a\",\"response_pos\":\"b\",\"response_neg\":\"c\"}\n",
        )
        .unwrap();
        let err = load_jsonl(&p, &EmbedderConfig::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("mixes"), "{err}");
    }

    #[test]
    fn text_records_are_embedded() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("text.jsonl");
        fs::write(
            &p,
            "{\"prompt\":\"how do I sort a list\",\"response_pos\":\"use sorted\",\"response_neg\":\"no idea\"}\n\n",
        )
        .unwrap();
        let emb = EmbedderConfig { d_x: 12, d_y: 7 };
        let ex = load_jsonl(&p, &emb).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].x.len(), 12);
        assert_eq!(ex[0].y_pos.len(), 7);
        assert!(ex[0].scores_pos.is_none() && ex[0].truth.is_none());
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load_jsonl(&p, &EmbedderConfig::default())
            .unwrap()
            .is_empty());
    }
}
