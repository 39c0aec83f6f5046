//! Optimization loop, evaluation metrics and metric tables.
//!
//! Gradients of a mini-batch are computed in fixed-size chunks on the rayon
//! pool and summed in chunk order; each example draws its latent noise from
//! a stream keyed by (seed, step, slot). Results are therefore identical
//! for any thread count.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureSchema, PreferenceExample, SplitDataset};
use crate::diffcore::{ParamFile, ParamStore, Tape, Tensor};
use crate::losses::{
    baseline_breakdown, baseline_bt_loss_var, supervision_loss, supervision_targets,
    total_loss_var, LossBreakdown, NoiseSource, Objective, SupVariant,
};
use crate::model::{BaselineRm, EmbedderConfig, ModelHyper, ModelKind, VrmModel};
use crate::rng::{self, streams};
use crate::{Error, Result};

/// Examples per gradient work unit. Fixed so that the summation order does
/// not depend on the number of threads.
const GRAD_CHUNK: usize = 8;
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub sup_variant: SupVariant,
    /// Symmetric Dirichlet prior concentration α₀.
    pub prior_alpha0: f64,
    /// Steps between metric rows; a final row is always written.
    pub eval_interval: usize,
    pub optim: OptimConfig,
    /// Record wall-clock milliseconds in metric rows. Off by default so
    /// that metric tables are byte-reproducible.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            lambda: 0.1,
            sup_variant: SupVariant::Kl,
            prior_alpha0: 1.0,
            eval_interval: 50,
            optim: OptimConfig::default(),
            record_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Config(
                "epochs, batch_size and eval_interval must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.prior_alpha0 > 0.0 && self.prior_alpha0.is_finite()) {
            return Err(Error::Config(format!(
                "prior_alpha0 must be positive, got {}",
                self.prior_alpha0
            )));
        }
        let o = &self.optim;
        if !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || !(o.eps > 0.0)
            || !(o.clip_norm > 0.0)
        {
            return Err(Error::Config(format!("invalid optimizer constants {o:?}")));
        }
        Ok(())
    }
}

/// Model size knobs; input dimensions come from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of objectives; defaults to the score dimension of the data.
    pub k: Option<usize>,
    pub j: usize,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: None,
            j: 8,
            hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn resolve(&self, schema: &FeatureSchema) -> Result<ModelHyper> {
        let k = match (self.k, schema.k) {
            (Some(k), Some(sk)) if k != sk => {
                return Err(Error::Schema(format!(
                    "model k = {k} but the data carries {sk} scores"
                )));
            }
            (Some(k), _) => k,
            (None, Some(sk)) => sk,
            (None, None) => 4,
        };
        let hyper = ModelHyper {
            k,
            j: self.j,
            hidden: self.hidden,
            d_x: schema.d_x,
            d_y: schema.d_y,
        };
        hyper.validate()?;
        Ok(hyper)
    }
}

/// Either trained model.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Vrm(VrmModel),
    Baseline(BaselineRm),
}

impl AnyModel {
    pub fn new(kind: ModelKind, hyper: ModelHyper, seed: u64) -> Result<Self> {
        Ok(match kind {
            ModelKind::Vrm => AnyModel::Vrm(VrmModel::new(hyper, seed)?),
            ModelKind::Baseline => AnyModel::Baseline(BaselineRm::new(hyper, seed)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Vrm(_) => ModelKind::Vrm,
            AnyModel::Baseline(_) => ModelKind::Baseline,
        }
    }

    pub fn hyper(&self) -> &ModelHyper {
        match self {
            AnyModel::Vrm(m) => m.hyper(),
            AnyModel::Baseline(m) => m.hyper(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            AnyModel::Vrm(m) => m.params(),
            AnyModel::Baseline(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            AnyModel::Vrm(m) => m.params_mut(),
            AnyModel::Baseline(m) => m.params_mut(),
        }
    }

    /// Scores of (y⁺, y⁻) for every example; VRM uses posterior means.
    pub fn score_pairs(&self, examples: &[PreferenceExample]) -> Result<Vec<(f64, f64)>> {
        let chunks: Vec<Result<Vec<(f64, f64)>>> = examples
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| match self {
                AnyModel::Vrm(m) => {
                    let mut s = m.session();
                    chunk
                        .iter()
                        .map(|ex| s.posterior_mean_rewards(&ex.x, &ex.y_pos, &ex.y_neg))
                        .collect()
                }
                AnyModel::Baseline(m) => {
                    let mut s = m.session();
                    chunk
                        .iter()
                        .map(|ex| Ok((s.reward(&ex.x, &ex.y_pos)?, s.reward(&ex.x, &ex.y_neg)?)))
                        .collect()
                }
            })
            .collect();
        let mut out = Vec::with_capacity(examples.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }
}

/// Fraction of pairs scored strictly in favour of the preferred response.
pub fn pairwise_accuracy(model: &AnyModel, examples: &[PreferenceExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidParam(
            "pairwise accuracy of an empty split".into(),
        ));
    }
    Ok(accuracy_of(&model.score_pairs(examples)?))
}

/// Accuracy of precomputed (r⁺, r⁻) pairs; ties count as incorrect.
pub fn accuracy_of(pairs: &[(f64, f64)]) -> f64 {
    pairs.iter().filter(|(p, n)| p > n).count() as f64 / pairs.len() as f64
}

/// Mean Σ_k w*_k ln(w*_k / w̄_k) over examples with ground truth.
pub fn weight_recovery(model: &VrmModel, examples: &[PreferenceExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidParam(
            "weight recovery of an empty split".into(),
        ));
    }
    let mut session = model.session();
    let mut total = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let truth = ex
            .truth
            .as_ref()
            .ok_or_else(|| Error::InvalidParam(format!("example {i} has no ground truth")))?;
        let w_bar = session.encode_weights(&ex.x)?.mean();
        total += categorical_kl(&truth.w_star, &w_bar)?;
    }
    Ok(total / examples.len() as f64)
}

/// Σ p ln(p/q) with the 0 ln 0 = 0 convention.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension {
            what: "categorical distribution",
            expected: p.len(),
            got: q.len(),
        });
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum())
}

/// [`weight_recovery`] with the dimensions of w̄ reordered by `perm`.
pub fn permuted_weight_recovery(
    model: &VrmModel,
    examples: &[PreferenceExample],
    perm: &[usize],
) -> Result<f64> {
    let mut session = model.session();
    let mut total = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let truth = ex
            .truth
            .as_ref()
            .ok_or_else(|| Error::InvalidParam(format!("example {i} has no ground truth")))?;
        let w_bar = session.encode_weights(&ex.x)?.mean();
        let permuted: Vec<f64> = perm.iter().map(|&p| w_bar[p]).collect();
        total += categorical_kl(&truth.w_star, &permuted)?;
    }
    Ok(total / examples.len() as f64)
}

/// Mean KL-variant supervision divergence at the posterior mean, over the
/// examples that carry a target.
pub fn supervision_divergence(
    model: &VrmModel,
    examples: &[PreferenceExample],
    targets: &[Option<Vec<f64>>],
) -> Result<Option<f64>> {
    let mut session = model.session();
    let (mut total, mut n) = (0.0, 0usize);
    for (ex, t) in examples.iter().zip(targets) {
        if let Some(t) = t {
            let q = session.encode_weights(&ex.x)?;
            total += supervision_loss(&q, t, SupVariant::Kl)?;
            n += 1;
        }
    }
    Ok((n > 0).then(|| total / n as f64))
}

/// Bias-corrected moment-based optimizer with global-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: OptimConfig,
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, cfg: OptimConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .iter()
            .map(|(_, _, t)| vec![0.0; t.data.len()])
            .collect();
        Adam {
            cfg,
            lr,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Clip `grads` in place and apply one update; returns the pre-clip norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &mut [Tensor]) -> f64 {
        let norm = grads
            .iter()
            .flat_map(|g| &g.data)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > self.cfg.clip_norm {
            let s = self.cfg.clip_norm / norm;
            grads
                .iter_mut()
                .for_each(|g| g.data.iter_mut().for_each(|v| *v *= s));
        }
        self.t += 1;
        let OptimConfig {
            beta1, beta2, eps, ..
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let lr = self.lr;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.update(grads, |i, p, g| {
            for (((p, g), m), v) in p
                .iter_mut()
                .zip(g)
                .zip(ms[i].iter_mut())
                .zip(vs[i].iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        });
        norm
    }
}

/// One logged row of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub sup_kl: Option<f64>,
    pub wall_ms: u64,
    /// Mean KL from w* to w̄ on the eval split (train split when eval is
    /// empty); only for VRM on data with ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_kl: Option<f64>,
}

pub const CSV_HEADER: &str =
    "step,train_acc,eval_acc,bt_loglik,kl_w,kl_z_pos,kl_z_neg,sup,total,sup_kl,wall_ms";

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricRow {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.train_acc,
            opt(self.eval_acc),
            l.bt_loglik,
            l.kl_w,
            l.kl_z_pos,
            l.kl_z_neg,
            l.sup,
            l.total,
            opt(self.sup_kl),
            self.wall_ms
        )
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_jsonl(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub const CHECKPOINT_FORMAT: &str = "vrm-checkpoint";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// A trained model on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub format_version: u32,
    pub kind: ModelKind,
    pub hyper: ModelHyper,
    /// Embedding dimensions used for text data, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder: Option<EmbedderConfig>,
    pub params: ParamFile,
}

impl Checkpoint {
    pub fn from_model(model: &AnyModel) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: model.kind(),
            hyper: *model.hyper(),
            embedder: None,
            params: model.params().clone().into(),
        }
    }

    pub fn to_model(&self) -> Result<AnyModel> {
        if self.format != CHECKPOINT_FORMAT || self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint format {} v{}",
                self.format, self.format_version
            )));
        }
        let params = ParamStore::try_from(self.params.clone())?;
        Ok(match self.kind {
            ModelKind::Vrm => AnyModel::Vrm(VrmModel::from_params(self.hyper, &params)?),
            ModelKind::Baseline => {
                AnyModel::Baseline(BaselineRm::from_params(self.hyper, &params)?)
            }
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Fail unless `schema` matches the dimensions this model was built for.
    pub fn check_schema(&self, schema: &FeatureSchema) -> Result<()> {
        if schema.d_x != self.hyper.d_x || schema.d_y != self.hyper.d_y {
            return Err(Error::Schema(format!(
                "checkpoint expects d_x = {}, d_y = {} but the dataset has d_x = {}, d_y = {}",
                self.hyper.d_x, self.hyper.d_y, schema.d_x, schema.d_y
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AnyModel,
    pub metrics: Vec<MetricRow>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model)
    }

    pub fn final_row(&self) -> &MetricRow {
        self.metrics.last().expect("a run always logs a final row")
    }
}

/// Gradient and breakdown sum of one chunk, each example weighted by `scale`.
fn chunk_gradient(
    model: &AnyModel,
    chunk: &[(usize, &PreferenceExample, Option<&[f64]>)],
    objective: &Objective,
    seed: u64,
    step: u64,
    scale: f64,
) -> Result<(Vec<Tensor>, LossBreakdown)> {
    let params = model.params();
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let mark = tape.len();
    let mut sum = LossBreakdown::default();
    for &(slot, ex, target) in chunk {
        let (loss, bd) = match model {
            AnyModel::Vrm(m) => {
                let mut r = rng::keyed(seed, streams::LATENT, step, slot as u64);
                let (l, bd, _) = total_loss_var(
                    m,
                    &mut tape,
                    &binding,
                    &[ex],
                    &[target],
                    objective,
                    NoiseSource::Draw(&mut r),
                )?;
                (l, bd)
            }
            AnyModel::Baseline(m) => {
                let l = baseline_bt_loss_var(m, &mut tape, &binding, &[ex])?;
                (l, baseline_breakdown(tape.scalar(l)))
            }
        };
        if !bd.is_finite() {
            return Err(Error::NonFinite {
                batch: 0,
                step,
                breakdown: format!("{bd:?} (batch slot {slot})"),
            });
        }
        let scaled = tape.scale(loss, scale);
        tape.backward(scaled)?;
        tape.truncate(mark);
        for (acc, v) in [
            (&mut sum.bt_loglik, bd.bt_loglik),
            (&mut sum.kl_w, bd.kl_w),
            (&mut sum.kl_z_pos, bd.kl_z_pos),
            (&mut sum.kl_z_neg, bd.kl_z_neg),
            (&mut sum.sup, bd.sup),
            (&mut sum.total, bd.total),
        ] {
            *acc += scale * v;
        }
    }
    Ok((params.gradients(&tape, &binding), sum))
}

fn add_breakdown(a: &mut LossBreakdown, b: &LossBreakdown, w: f64) {
    a.bt_loglik += w * b.bt_loglik;
    a.kl_w += w * b.kl_w;
    a.kl_z_pos += w * b.kl_z_pos;
    a.kl_z_neg += w * b.kl_z_neg;
    a.sup += w * b.sup;
    a.total += w * b.total;
}

/// Train `kind` on `ds.train`, logging every `eval_interval` steps.
pub fn train(
    kind: ModelKind,
    ds: &SplitDataset,
    hyper: ModelHyper,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = AnyModel::new(kind, hyper, cfg.seed)?;
    train_model(model, ds, cfg)
}

/// Continue training an existing model.
pub fn train_model(
    mut model: AnyModel,
    ds: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(Error::InvalidParam("training split is empty".into()));
    }
    let hyper = *model.hyper();
    let objective = Objective::new(hyper.k, cfg.prior_alpha0, cfg.lambda, cfg.sup_variant)?;
    let (_, targets) = supervision_targets(&ds.train)?;
    let has_truth = ds.train.iter().chain(&ds.eval).all(|e| e.truth.is_some());
    let mut adam = Adam::new(model.params(), cfg.learning_rate, cfg.optim);
    let mut shuffle = rng::stream(cfg.seed, streams::SHUFFLE);
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    let start = Instant::now();

    let mut rows: Vec<MetricRow> = Vec::new();
    let mut window = LossBreakdown::default();
    let mut window_batches = 0usize;
    let mut step: u64 = 0;
    let steps_per_epoch = ds.train.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<(usize, &PreferenceExample, Option<&[f64]>)> = batch
                .iter()
                .enumerate()
                .map(|(slot, &i)| (slot, &ds.train[i], targets[i].as_deref()))
                .collect();
            let scale = 1.0 / items.len() as f64;
            let parts: Vec<Result<(Vec<Tensor>, LossBreakdown)>> = items
                .par_chunks(GRAD_CHUNK)
                .map(|c| chunk_gradient(&model, c, &objective, cfg.seed, step, scale))
                .collect();
            let mut grads: Option<Vec<Tensor>> = None;
            let mut bd = LossBreakdown::default();
            for p in parts {
                let (g, b) = p.map_err(|e| match e {
                    Error::NonFinite {
                        step, breakdown, ..
                    } => Error::NonFinite {
                        batch: batch_idx,
                        step,
                        breakdown,
                    },
                    other => other,
                })?;
                add_breakdown(&mut bd, &b, 1.0);
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&g) {
                            a.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            if grads.iter().any(|g| g.data.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite {
                    batch: batch_idx,
                    step,
                    breakdown: format!("{bd:?} (non-finite gradient)"),
                });
            }
            adam.step(model.params_mut(), &mut grads);
            step += 1;
            add_breakdown(&mut window, &bd, 1.0);
            window_batches += 1;

            if step.is_multiple_of(cfg.eval_interval as u64) || step == total_steps {
                let mut loss = window;
                let w = 1.0 / window_batches as f64;
                loss = LossBreakdown {
                    bt_loglik: loss.bt_loglik * w,
                    kl_w: loss.kl_w * w,
                    kl_z_pos: loss.kl_z_pos * w,
                    kl_z_neg: loss.kl_z_neg * w,
                    sup: loss.sup * w,
                    total: loss.total * w,
                };
                window = LossBreakdown::default();
                window_batches = 0;
                rows.push(metric_row(
                    &model, ds, &targets, has_truth, step, loss, cfg, start,
                )?);
                log::info!(
                    "{}",
                    rows.last().map(MetricRow::csv_line).unwrap_or_default()
                );
            }
        }
    }
    Ok(TrainOutcome {
        model,
        metrics: rows,
    })
}

#[allow(clippy::too_many_arguments)]
fn metric_row(
    model: &AnyModel,
    ds: &SplitDataset,
    targets: &[Option<Vec<f64>>],
    has_truth: bool,
    step: u64,
    loss: LossBreakdown,
    cfg: &TrainConfig,
    start: Instant,
) -> Result<MetricRow> {
    let train_acc = pairwise_accuracy(model, &ds.train)?;
    let eval_acc = if ds.eval.is_empty() {
        None
    } else {
        Some(pairwise_accuracy(model, &ds.eval)?)
    };
    let (sup_kl, weight_kl) = match model {
        AnyModel::Vrm(m) => {
            let sup_kl = supervision_divergence(m, &ds.train, targets)?;
            let split = if ds.eval.is_empty() {
                &ds.train
            } else {
                &ds.eval
            };
            let weight_kl = if has_truth {
                Some(weight_recovery(m, split)?)
            } else {
                None
            };
            (sup_kl, weight_kl)
        }
        AnyModel::Baseline(_) => (None, None),
    };
    Ok(MetricRow {
        step,
        train_acc,
        eval_acc,
        loss,
        sup_kl,
        wall_ms: if cfg.record_wall_clock {
            start.elapsed().as_millis() as u64
        } else {
            0
        },
        weight_kl,
    })
}
