//! Training objectives.
//!
//! Per example, one latent draw `w ~ q(w|x)` is shared by both responses and
//! `z± ~ q(z|x, y±)`:
//!
//! ```text
//! elbo  = ln σ(r(w, z⁺) − r(w, z⁻)) − KL_w − KL_z⁺ − KL_z⁻
//! total = −mean(elbo) + λ · mean(sup)
//! ```
//!
//! The supervision term compares the Dirichlet mean `w̄ = α / Σα` with the
//! normalized annotator scores of the preferred response.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::PreferenceExample;
use crate::diffcore::{Binding, Tape, Var};
use crate::distributions::{
    dirichlet_draw_var, dirichlet_kl_var, dirichlet_sample_var, gaussian_kl_var,
    gaussian_sample_var, standard_normals, DirichletParams, LatentNoise,
};
use crate::model::{BaselineRm, VrmModel};
use crate::numerics::{log_sigmoid, softmax_unchecked, stable_sigmoid};
use crate::rng::Rng;
use crate::{Error, Result};

/// Hinge margin of the RANK supervision variant.
pub const RANK_MARGIN: f64 = 0.05;

/// P(y⁺ ≻ y⁻) under Bradley–Terry.
pub fn bt_preference_prob(r_pos: f64, r_neg: f64) -> f64 {
    stable_sigmoid(r_pos - r_neg)
}

pub fn bt_log_preference_prob(r_pos: f64, r_neg: f64) -> f64 {
    log_sigmoid(r_pos - r_neg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupVariant {
    Kl,
    Mae,
    Rank,
}

impl SupVariant {
    pub const ALL: [SupVariant; 3] = [SupVariant::Kl, SupVariant::Mae, SupVariant::Rank];
}

impl fmt::Display for SupVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SupVariant::Kl => "kl",
            SupVariant::Mae => "mae",
            SupVariant::Rank => "rank",
        })
    }
}

impl FromStr for SupVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(SupVariant::Kl),
            "mae" => Ok(SupVariant::Mae),
            "rank" => Ok(SupVariant::Rank),
            other => Err(Error::Config(format!(
                "unknown supervision variant {other:?} (expected kl, mae or rank)"
            ))),
        }
    }
}

/// Batch-mean loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bt_loglik: f64,
    pub kl_w: f64,
    pub kl_z_pos: f64,
    pub kl_z_neg: f64,
    pub sup: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn elbo(&self) -> f64 {
        self.bt_loglik - self.kl_w - self.kl_z_pos - self.kl_z_neg
    }

    /// `total` rebuilt from the parts.
    pub fn recompose(&self, lambda: f64) -> f64 {
        -self.elbo() + lambda * self.sup
    }

    pub fn is_finite(&self) -> bool {
        [
            self.bt_loglik,
            self.kl_w,
            self.kl_z_pos,
            self.kl_z_neg,
            self.sup,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Per-dimension population z-scoring fitted on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNormalizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl ScoreNormalizer {
    pub fn fit<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidParam("cannot normalize an empty score matrix".into()))?;
        let k = first.as_ref().len();
        if k == 0 {
            return Err(Error::InvalidParam("score vectors are empty".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; k];
        for r in rows {
            let r = r.as_ref();
            if r.len() != k {
                return Err(Error::Dimension {
                    what: "score vector",
                    expected: k,
                    got: r.len(),
                });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParam(format!("non-finite score in {r:?}")));
            }
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; k];
        for r in rows {
            for ((s, v), m) in std.iter_mut().zip(r.as_ref()).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        for (i, s) in std.iter_mut().enumerate() {
            *s = (*s / n).sqrt();
            if *s == 0.0 && rows.len() > 1 {
                log::warn!("score dimension {i} has zero variance; its z-scores are set to 0");
            }
        }
        Ok(ScoreNormalizer { mean, std })
    }

    pub fn k(&self) -> usize {
        self.mean.len()
    }

    pub fn z_scores(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| if *s > 0.0 { (v - m) / s } else { 0.0 })
            .collect()
    }

    /// softmax of the z-scored row: a point on the simplex.
    pub fn target(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.k() {
            return Err(Error::Dimension {
                what: "score vector",
                expected: self.k(),
                got: row.len(),
            });
        }
        Ok(softmax_unchecked(&self.z_scores(row)))
    }
}

/// z-score each column across the rows, then softmax each row.
pub fn normalize_scores<R: AsRef<[f64]>>(rows: &[R]) -> Result<Vec<Vec<f64>>> {
    let norm = ScoreNormalizer::fit(rows)?;
    rows.iter().map(|r| norm.target(r.as_ref())).collect()
}

/// Supervision targets s̃⁺ for every example carrying preferred-response
/// scores, fitted on `examples` themselves.
pub fn supervision_targets(
    examples: &[PreferenceExample],
) -> Result<(Option<ScoreNormalizer>, Vec<Option<Vec<f64>>>)> {
    let rows: Vec<&[f64]> = examples
        .iter()
        .filter_map(|e| e.scores_pos.as_deref())
        .collect();
    if rows.is_empty() {
        return Ok((None, vec![None; examples.len()]));
    }
    let norm = ScoreNormalizer::fit(&rows)?;
    let targets = examples
        .iter()
        .map(|e| e.scores_pos.as_deref().map(|s| norm.target(s)).transpose())
        .collect::<Result<_>>()?;
    Ok((Some(norm), targets))
}

fn check_target(k: usize, s: &[f64], variant: SupVariant) -> Result<()> {
    if s.len() != k {
        return Err(Error::Dimension {
            what: "supervision target",
            expected: k,
            got: s.len(),
        });
    }
    if s.iter().any(|v| !v.is_finite() || *v < 0.0) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParam(format!(
            "supervision target {s:?} is not on the simplex"
        )));
    }
    if variant == SupVariant::Kl && s.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidParam(format!(
            "KL supervision needs strictly positive targets, got {s:?}"
        )));
    }
    Ok(())
}

fn rank_pairs(s: &[f64]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for a in 0..s.len() {
        for b in 0..s.len() {
            if s[a] > s[b] {
                pairs.push((a, b));
            }
        }
    }
    pairs
}

/// Supervision divergence between the Dirichlet mean of `q` and `s_tilde`.
pub fn supervision_loss(q: &DirichletParams, s_tilde: &[f64], variant: SupVariant) -> Result<f64> {
    check_target(q.k(), s_tilde, variant)?;
    let w = q.mean();
    Ok(match variant {
        SupVariant::Kl => w
            .iter()
            .zip(s_tilde)
            .map(|(a, b)| a * (a / b).ln())
            .sum::<f64>(),
        SupVariant::Mae => {
            w.iter()
                .zip(s_tilde)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / w.len() as f64
        }
        SupVariant::Rank => {
            let pairs = rank_pairs(s_tilde);
            if pairs.is_empty() {
                return Ok(0.0);
            }
            pairs
                .iter()
                .map(|&(a, b)| (RANK_MARGIN - (w[a] - w[b])).max(0.0))
                .sum::<f64>()
                / pairs.len() as f64
        }
    })
}

/// Differentiable [`supervision_loss`] with α on the tape.
pub fn supervision_loss_var(
    tape: &mut Tape,
    alpha: Var,
    s_tilde: &[f64],
    variant: SupVariant,
) -> Result<Var> {
    check_target(tape.shape(alpha).len(), s_tilde, variant)?;
    let total = tape.sum(alpha);
    let w = tape.div_scalar(alpha, total)?;
    match variant {
        SupVariant::Kl => {
            let ln_w = tape.ln(w)?;
            let ln_s: Vec<f64> = s_tilde.iter().map(|v| v.ln()).collect();
            let ln_s = tape.constant_vector(&ln_s);
            let ratio = tape.sub(ln_w, ln_s)?;
            tape.dot(w, ratio)
        }
        SupVariant::Mae => {
            let s = tape.constant_vector(s_tilde);
            let d = tape.sub(w, s)?;
            let d = tape.abs(d);
            Ok(tape.mean(d))
        }
        SupVariant::Rank => {
            let pairs = rank_pairs(s_tilde);
            if pairs.is_empty() {
                return Ok(tape.constant_scalar(0.0));
            }
            let mut hinges = Vec::with_capacity(pairs.len());
            for (a, b) in pairs {
                let wa = tape.index(w, a)?;
                let wb = tape.index(w, b)?;
                let gap = tape.sub(wb, wa)?;
                let m = tape.constant_scalar(RANK_MARGIN);
                let h = tape.add(gap, m)?;
                hinges.push(tape.relu(h));
            }
            let v = tape.concat(&hinges)?;
            Ok(tape.mean(v))
        }
    }
}

/// Where the latent noise of a forward pass comes from.
pub enum NoiseSource<'a> {
    Draw(&'a mut Rng),
    Replay(&'a [LatentNoise]),
}

/// Settings shared by every ELBO evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub lambda: f64,
    pub variant: SupVariant,
    pub prior: DirichletParams,
}

impl Objective {
    pub fn new(k: usize, prior_alpha0: f64, lambda: f64, variant: SupVariant) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "lambda must be a finite value >= 0, got {lambda}"
            )));
        }
        Ok(Objective {
            lambda,
            variant,
            prior: DirichletParams::symmetric(k, prior_alpha0)?,
        })
    }
}

/// Tape handles for one example's ELBO terms.
#[derive(Debug, Clone, Copy)]
pub struct ElboVars {
    pub bt_loglik: Var,
    pub kl_w: Var,
    pub kl_z_pos: Var,
    pub kl_z_neg: Var,
    /// α(x), for the supervision term.
    pub alpha: Var,
}

/// Record one example's ELBO terms on the tape.
pub fn elbo_vars(
    model: &VrmModel,
    tape: &mut Tape,
    b: &Binding,
    ex: &PreferenceExample,
    prior: &DirichletParams,
    noise: Option<&LatentNoise>,
    rng: Option<&mut Rng>,
) -> Result<(ElboVars, LatentNoise)> {
    let alpha = model.alpha_var(tape, b, &ex.x)?;
    let (mu_pos, ls_pos) = model.feature_vars(tape, b, &ex.x, &ex.y_pos)?;
    let (mu_neg, ls_neg) = model.feature_vars(tape, b, &ex.x, &ex.y_neg)?;
    let j = model.hyper().j;
    let (w, record) = match (noise, rng) {
        (Some(n), _) => (dirichlet_sample_var(tape, alpha, &n.gamma)?, n.clone()),
        (None, Some(rng)) => {
            let (w, gamma) = dirichlet_draw_var(tape, alpha, rng)?;
            let eps_pos = standard_normals(j, rng);
            let eps_neg = standard_normals(j, rng);
            (
                w,
                LatentNoise {
                    gamma,
                    eps_pos,
                    eps_neg,
                },
            )
        }
        (None, None) => {
            return Err(Error::InvalidParam(
                "elbo needs either replayed noise or an rng".into(),
            ))
        }
    };
    let z_pos = gaussian_sample_var(tape, mu_pos, ls_pos, &record.eps_pos)?;
    let z_neg = gaussian_sample_var(tape, mu_neg, ls_neg, &record.eps_neg)?;
    let r_pos = model.reward_var(tape, b, w, z_pos)?;
    let r_neg = model.reward_var(tape, b, w, z_neg)?;
    let diff = tape.sub(r_pos, r_neg)?;
    let bt_loglik = tape.log_sigmoid(diff);
    let kl_w = dirichlet_kl_var(tape, alpha, prior)?;
    let kl_z_pos = gaussian_kl_var(tape, mu_pos, ls_pos)?;
    let kl_z_neg = gaussian_kl_var(tape, mu_neg, ls_neg)?;
    Ok((
        ElboVars {
            bt_loglik,
            kl_w,
            kl_z_pos,
            kl_z_neg,
            alpha,
        },
        record,
    ))
}

/// Batch objective on the tape: returns the scalar total, its breakdown and
/// the noise used (one record per example).
///
/// `targets[i]` is the supervision target of `batch[i]`, if it has scores.
pub fn total_loss_var(
    model: &VrmModel,
    tape: &mut Tape,
    b: &Binding,
    batch: &[&PreferenceExample],
    targets: &[Option<&[f64]>],
    objective: &Objective,
    mut noise: NoiseSource<'_>,
) -> Result<(Var, LossBreakdown, Vec<LatentNoise>)> {
    if batch.is_empty() {
        return Err(Error::InvalidParam("empty batch".into()));
    }
    if targets.len() != batch.len() {
        return Err(Error::Dimension {
            what: "supervision targets",
            expected: batch.len(),
            got: targets.len(),
        });
    }
    if let NoiseSource::Replay(n) = &noise {
        if n.len() != batch.len() {
            return Err(Error::Dimension {
                what: "latent noise records",
                expected: batch.len(),
                got: n.len(),
            });
        }
    }
    let zero = tape.constant_scalar(0.0);
    let (mut bt, mut kw, mut kp, mut kn, mut sup) = (zero, zero, zero, zero, zero);
    let mut records = Vec::with_capacity(batch.len());
    for (i, (ex, target)) in batch.iter().zip(targets).enumerate() {
        let (v, rec) = match &mut noise {
            NoiseSource::Draw(rng) => {
                elbo_vars(model, tape, b, ex, &objective.prior, None, Some(rng))?
            }
            NoiseSource::Replay(n) => {
                elbo_vars(model, tape, b, ex, &objective.prior, Some(&n[i]), None)?
            }
        };
        bt = tape.add(bt, v.bt_loglik)?;
        kw = tape.add(kw, v.kl_w)?;
        kp = tape.add(kp, v.kl_z_pos)?;
        kn = tape.add(kn, v.kl_z_neg)?;
        // With λ = 0 the term is switched off entirely and reported as 0.
        if let (Some(s), true) = (target, objective.lambda > 0.0) {
            let l = supervision_loss_var(tape, v.alpha, s, objective.variant)?;
            sup = tape.add(sup, l)?;
        }
        records.push(rec);
    }
    let inv_n = 1.0 / batch.len() as f64;
    let [bt, kw, kp, kn, sup] = [bt, kw, kp, kn, sup].map(|v| tape.scale(v, inv_n));
    let kl = tape.add(kw, kp)?;
    let kl = tape.add(kl, kn)?;
    let neg_elbo = tape.sub(kl, bt)?;
    let weighted = tape.scale(sup, objective.lambda);
    let total = tape.add(neg_elbo, weighted)?;
    let breakdown = LossBreakdown {
        bt_loglik: tape.scalar(bt),
        kl_w: tape.scalar(kw),
        kl_z_pos: tape.scalar(kp),
        kl_z_neg: tape.scalar(kn),
        sup: tape.scalar(sup),
        total: tape.scalar(total),
    };
    Ok((total, breakdown, records))
}

/// One-example ELBO breakdown (sup = 0, total = −ELBO) with a fresh draw.
pub fn elbo_preference(
    model: &VrmModel,
    ex: &PreferenceExample,
    rng: &mut Rng,
    prior_alpha0: f64,
) -> Result<LossBreakdown> {
    let objective = Objective::new(model.hyper().k, prior_alpha0, 0.0, SupVariant::Kl)?;
    let mut session = model.session();
    session.run(|m, t, b| {
        total_loss_var(m, t, b, &[ex], &[None], &objective, NoiseSource::Draw(rng))
            .map(|(_, bd, _)| bd)
    })
}

/// Batch breakdown with fresh noise.
pub fn total_loss(
    model: &VrmModel,
    batch: &[&PreferenceExample],
    targets: &[Option<&[f64]>],
    objective: &Objective,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    let mut session = model.session();
    session.run(|m, t, b| {
        total_loss_var(m, t, b, batch, targets, objective, NoiseSource::Draw(rng))
            .map(|(_, bd, _)| bd)
    })
}

/// Draw one noise record per example and freeze the Gamma parts at their
/// CDF levels, so that replays under perturbed parameters follow the
/// implicit-reparameterization path.
pub fn frozen_noise(
    model: &VrmModel,
    batch: &[&PreferenceExample],
    rng: &mut Rng,
) -> Result<Vec<LatentNoise>> {
    let mut session = model.session();
    batch
        .iter()
        .map(|ex| {
            session.run(|m, t, b| {
                let alpha = m.alpha_var(t, b, &ex.x)?;
                let alpha_vals = t.data(alpha).to_vec();
                let (_, gamma) = dirichlet_draw_var(t, alpha, rng)?;
                let j = m.hyper().j;
                let eps_pos = standard_normals(j, rng);
                let eps_neg = standard_normals(j, rng);
                LatentNoise {
                    gamma,
                    eps_pos,
                    eps_neg,
                }
                .to_quantiles(&alpha_vals)
            })
        })
        .collect()
}

/// Mean −ln σ(r(x, y⁺) − r(x, y⁻)) on the tape; also returns the mean
/// log-likelihood.
pub fn baseline_bt_loss_var(
    model: &BaselineRm,
    tape: &mut Tape,
    b: &Binding,
    batch: &[&PreferenceExample],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::InvalidParam("empty batch".into()));
    }
    let mut acc = tape.constant_scalar(0.0);
    for ex in batch {
        let rp = model.reward_var(tape, b, &ex.x, &ex.y_pos)?;
        let rn = model.reward_var(tape, b, &ex.x, &ex.y_neg)?;
        let d = tape.sub(rp, rn)?;
        let l = tape.log_sigmoid(d);
        acc = tape.add(acc, l)?;
    }
    Ok(tape.scale(acc, -1.0 / batch.len() as f64))
}

pub fn baseline_bt_loss(model: &BaselineRm, batch: &[&PreferenceExample]) -> Result<f64> {
    let mut session = model.session();
    session.run(|m, t, b| {
        let l = baseline_bt_loss_var(m, t, b, batch)?;
        Ok(t.scalar(l))
    })
}

/// The baseline's loss expressed in breakdown form (no latent terms).
pub fn baseline_breakdown(loss: f64) -> LossBreakdown {
    LossBreakdown {
        bt_loglik: -loss,
        total: loss,
        ..LossBreakdown::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorConfig};
    use crate::model::ModelHyper;
    use crate::rng::{self, streams};

    fn example(d_x: usize, d_y: usize, seed: u64) -> PreferenceExample {
        let mut r = rng::stream(seed, 99);
        PreferenceExample {
            x: standard_normals(d_x, &mut r),
            y_pos: standard_normals(d_y, &mut r),
            y_neg: standard_normals(d_y, &mut r),
            scores_pos: Some(standard_normals(4, &mut r)),
            scores_neg: None,
            truth: None,
        }
    }

    fn tiny(seed: u64) -> VrmModel {
        let hyper = ModelHyper {
            k: 4,
            j: 3,
            hidden: 5,
            d_x: 3,
            d_y: 2,
        };
        VrmModel::new(hyper, seed).unwrap()
    }

    #[test]
    fn preference_probability() {
        assert_eq!(bt_preference_prob(0.3, 0.3), 0.5);
        assert!((bt_preference_prob(1.0, 0.0) - 0.731_058_578_630_005).abs() < 1e-12);
        assert!((bt_preference_prob(101.0, 100.0) - bt_preference_prob(1.0, 0.0)).abs() < 1e-12);
        for (a, b) in [(0.1, 2.0), (-40.0, 3.0), (7.0, 7.5)] {
            assert!((bt_preference_prob(a, b) + bt_preference_prob(b, a) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_examples() {
        let s = normalize_scores(&[vec![3.0, 3.0, 3.0], vec![3.0, 3.0, 3.0]]).unwrap();
        for row in &s {
            for v in row {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let s = normalize_scores(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        // z-rows are (1, −1) and (−1, 1); softmax(1, −1) = (e²/(1+e²), 1/(1+e²)).
        assert!((s[0][0] - 0.880_797_077_977_882_3).abs() < 1e-12);
        assert!((s[0][1] - 0.119_202_922_022_117_6).abs() < 1e-12);
        assert!((s[1][0] - s[0][1]).abs() < 1e-15);
        let t = softmax_unchecked(&[1.0, 0.0, -1.0]);
        for (a, b) in t.iter().zip([
            0.665_240_955_774_821_2,
            0.244_728_471_054_797_6,
            0.090_030_573_170_380_46,
        ]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn supervision_values() {
        let q = DirichletParams::new(vec![3.0, 3.0]).unwrap();
        let kl = supervision_loss(&q, &[0.9, 0.1], SupVariant::Kl).unwrap();
        assert!((kl - 0.510_825_623_765_990_7).abs() < 1e-12);
        let q = DirichletParams::new(vec![6.0, 3.0, 1.0]).unwrap();
        let s = [0.6, 0.3, 0.1];
        assert!(supervision_loss(&q, &s, SupVariant::Kl).unwrap().abs() < 1e-15);
        assert!(supervision_loss(&q, &s, SupVariant::Mae).unwrap().abs() < 1e-15);
        assert_eq!(supervision_loss(&q, &s, SupVariant::Rank).unwrap(), 0.0);
        assert!(supervision_loss(&q, &[0.0, 0.5, 0.5], SupVariant::Kl).is_err());
        assert!(supervision_loss(&q, &[0.0, 0.5, 0.5], SupVariant::Mae).is_ok());
        assert!(supervision_loss(&q, &[0.5, 0.5], SupVariant::Mae).is_err());
        // reversed ordering: every pair violates by m + |gap|
        let r = supervision_loss(&q, &[0.1, 0.3, 0.6], SupVariant::Rank).unwrap();
        assert!((r - (0.35 + 0.55 + 0.25) / 3.0).abs() < 1e-12, "{r}");
    }

    #[test]
    fn tape_supervision_matches_value() {
        for variant in SupVariant::ALL {
            let alpha = [1.5, 0.4, 2.2, 0.9];
            let s = softmax_unchecked(&[0.3, -1.0, 0.7, 0.05]);
            let mut t = Tape::new();
            let a = t.constant_vector(&alpha);
            let v = supervision_loss_var(&mut t, a, &s, variant).unwrap();
            let want =
                supervision_loss(&DirichletParams::new(alpha.to_vec()).unwrap(), &s, variant)
                    .unwrap();
            assert!((t.scalar(v) - want).abs() < 1e-14, "{variant}");
        }
    }

    #[test]
    fn zero_head_elbo() {
        let model = tiny(1).zero_heads();
        let ex = example(3, 2, 0);
        let mut r = rng::stream(0, streams::LATENT);
        let bd = elbo_preference(&model, &ex, &mut r, 1.0).unwrap();
        assert_eq!(bd.kl_z_pos, 0.0);
        assert_eq!(bd.kl_z_neg, 0.0);
        assert!(
            (bd.kl_w - 0.163_582_703_185_534_84).abs() < 1e-9,
            "{}",
            bd.kl_w
        );
        assert!((bd.bt_loglik - 0.5f64.ln()).abs() < 1e-15);
        assert!((bd.total - bd.recompose(0.0)).abs() < 1e-12);
    }

    #[test]
    fn breakdown_identity_and_lambda_linearity() {
        let model = tiny(2);
        let ds = generate(&GeneratorConfig {
            n: 12,
            d_x: 3,
            d_y: 2,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let batch: Vec<&PreferenceExample> = ds.train.iter().collect();
        let (_, targets) = supervision_targets(&ds.train).unwrap();
        let targets: Vec<Option<&[f64]>> = targets.iter().map(|t| t.as_deref()).collect();
        let noise = frozen_noise(&model, &batch, &mut rng::stream(3, streams::LATENT)).unwrap();
        let eval = |lambda: f64| {
            let obj = Objective::new(4, 1.0, lambda, SupVariant::Kl).unwrap();
            let mut s = model.session();
            s.run(|m, t, b| {
                total_loss_var(m, t, b, &batch, &targets, &obj, NoiseSource::Replay(&noise))
            })
            .unwrap()
            .1
        };
        let (l0, l1, l2) = (eval(0.0), eval(1.0), eval(2.0));
        for (bd, lambda) in [(l0, 0.0), (l1, 1.0), (l2, 2.0)] {
            assert!((bd.total - bd.recompose(lambda)).abs() < 1e-10);
            assert!(bd.kl_w >= 0.0 && bd.kl_z_pos >= 0.0 && bd.kl_z_neg >= 0.0 && bd.sup >= 0.0);
            assert!(bd.elbo() <= bd.bt_loglik);
        }
        assert!((l0.total + l0.elbo()).abs() < 1e-12);
        assert!(((l2.total + l2.elbo()) - 2.0 * (l1.total + l1.elbo())).abs() < 1e-12);
    }

    #[test]
    fn baseline_loss_values() {
        let hyper = ModelHyper {
            k: 4,
            j: 3,
            hidden: 4,
            d_x: 3,
            d_y: 2,
        };
        let m = BaselineRm::new(hyper, 0).unwrap().zeroed();
        let ex = example(3, 2, 1);
        let l = baseline_bt_loss(&m, &[&ex, &ex]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(-bt_log_preference_prob(30.0, 0.0) < 1e-12);
        assert!((-bt_log_preference_prob(1.0, 0.0) - 0.313_261_687_518_222_8).abs() < 1e-12);
        assert!(baseline_bt_loss(&m, &[]).is_err());
    }

    #[test]
    fn variant_parsing() {
        for v in SupVariant::ALL {
            assert_eq!(v.to_string().parse::<SupVariant>().unwrap(), v);
        }
        assert!("ranking".parse::<SupVariant>().is_err());
    }
}
