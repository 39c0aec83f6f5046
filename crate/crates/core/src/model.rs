//! Encoders, reward decoder, and the Bradley–Terry baseline.
//!
//! Both models share one layout for the backbone: a single affine + tanh
//! layer over the concatenated input `[x; y]`. The weight path feeds
//! `[x; 0]`, so the Dirichlet posterior depends on the prompt only:
//!
//! ```text
//! h_x  = tanh(B [x; 0] + c)          α   = max(softplus(head_w(h_x)), 1e-3)
//! h_xy = tanh(B [x; y] + c)          (μ, ln σ) = head_z(h_xy)
//! r(w, z) = Σ_k w_k f_k(z)
//! ```
//!
//! Every head has one hidden tanh layer of width `hidden`.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Binding, ParamId, ParamStore, Shape, Tape, Var};
use crate::distributions::{DirichletParams, GaussianParams};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Lower bound applied to every concentration after the softplus.
pub const ALPHA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHyper {
    /// Number of objectives (Dirichlet dimension).
    pub k: usize,
    /// Semantic feature dimension.
    pub j: usize,
    pub hidden: usize,
    pub d_x: usize,
    pub d_y: usize,
}

impl ModelHyper {
    pub fn new(d_x: usize, d_y: usize) -> Self {
        ModelHyper {
            k: 4,
            j: 8,
            hidden: 64,
            d_x,
            d_y,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!(
                "k must be at least 2, got {}",
                self.k
            )));
        }
        for (name, v) in [
            ("j", self.j),
            ("hidden", self.hidden),
            ("d_x", self.d_x),
            ("d_y", self.d_y),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vrm,
    Baseline,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Vrm => "vrm",
            ModelKind::Baseline => "baseline",
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

impl Affine {
    fn new(
        store: &mut ParamStore,
        name: &str,
        out: usize,
        inp: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Affine {
            w: store.insert_glorot(format!("{name}.w"), out, inp, rng)?,
            b: store.insert_zeros(format!("{name}.b"), Shape::vector(out))?,
        })
    }

    fn apply(&self, tape: &mut Tape, b: &Binding, x: Var) -> Result<Var> {
        tape.affine(b.var(self.w), x, b.var(self.b))
    }

    fn apply_tanh(&self, tape: &mut Tape, b: &Binding, x: Var) -> Result<Var> {
        let a = self.apply(tape, b, x)?;
        Ok(tape.tanh(a))
    }

    fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.w).data.fill(0.0);
        store.get_mut(self.b).data.fill(0.0);
    }
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

fn backbone_input(
    tape: &mut Tape,
    hyper: &ModelHyper,
    x: &[f64],
    y: Option<&[f64]>,
) -> Result<Var> {
    check_dim("prompt features", hyper.d_x, x.len())?;
    let mut input = Vec::with_capacity(hyper.d_x + hyper.d_y);
    input.extend_from_slice(x);
    match y {
        Some(y) => {
            check_dim("response features", hyper.d_y, y.len())?;
            input.extend_from_slice(y);
        }
        None => input.resize(hyper.d_x + hyper.d_y, 0.0),
    }
    Ok(tape.constant_vector(&input))
}

/// Latent-variable reward model.
#[derive(Debug, Clone)]
pub struct VrmModel {
    hyper: ModelHyper,
    params: ParamStore,
    backbone: Affine,
    weight_hidden: Affine,
    weight_out: Affine,
    feature_hidden: Affine,
    feature_out: Affine,
    reward_hidden: Vec<Affine>,
    reward_out: Vec<Affine>,
}

impl VrmModel {
    pub fn new(hyper: ModelHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = rng::stream(seed, rng::streams::INIT);
        let mut p = ParamStore::new(seed);
        let h = hyper.hidden;
        let backbone = Affine::new(&mut p, "backbone", h, hyper.d_x + hyper.d_y, &mut rng)?;
        let weight_hidden = Affine::new(&mut p, "weight_head.hidden", h, h, &mut rng)?;
        let weight_out = Affine::new(&mut p, "weight_head.out", hyper.k, h, &mut rng)?;
        let feature_hidden = Affine::new(&mut p, "feature_head.hidden", h, h, &mut rng)?;
        let feature_out = Affine::new(&mut p, "feature_head.out", 2 * hyper.j, h, &mut rng)?;
        let mut reward_hidden = Vec::with_capacity(hyper.k);
        let mut reward_out = Vec::with_capacity(hyper.k);
        for k in 0..hyper.k {
            reward_hidden.push(Affine::new(
                &mut p,
                &format!("reward_head.{k}.hidden"),
                h,
                hyper.j,
                &mut rng,
            )?);
            reward_out.push(Affine::new(
                &mut p,
                &format!("reward_head.{k}.out"),
                1,
                h,
                &mut rng,
            )?);
        }
        Ok(VrmModel {
            hyper,
            params: p,
            backbone,
            weight_hidden,
            weight_out,
            feature_hidden,
            feature_out,
            reward_hidden,
            reward_out,
        })
    }

    /// Rebuild a model from stored parameters, checking the schema.
    pub fn from_params(hyper: ModelHyper, params: &ParamStore) -> Result<Self> {
        let mut m = Self::new(hyper, params.seed())?;
        m.params.load_from(params)?;
        Ok(m)
    }

    /// Zero every output layer: α = softplus(0) = ln 2, (μ, σ) = (0, 1)
    /// and r ≡ 0 for every input.
    pub fn zero_heads(mut self) -> Self {
        self.weight_out.zero(&mut self.params);
        self.feature_out.zero(&mut self.params);
        for out in &self.reward_out {
            out.zero(&mut self.params);
        }
        self
    }

    /// Zero heads, then shift the concentration bias so that α ≡ α₀: every
    /// posterior coincides with the prior and the total KL vanishes.
    pub fn prior_matched(self, prior_alpha0: f64) -> Result<Self> {
        if !(prior_alpha0 > ALPHA_FLOOR && prior_alpha0.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "prior concentration must exceed {ALPHA_FLOOR}, got {prior_alpha0}"
            )));
        }
        let mut m = self.zero_heads();
        // softplus⁻¹(α₀) = ln(e^α₀ − 1)
        let raw = prior_alpha0.exp_m1().ln();
        m.params.get_mut(m.weight_out.b).data.fill(raw);
        Ok(m)
    }

    pub fn hyper(&self) -> &ModelHyper {
        &self.hyper
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Concentration α(x) on the tape.
    pub fn alpha_var(&self, tape: &mut Tape, b: &Binding, x: &[f64]) -> Result<Var> {
        let input = backbone_input(tape, &self.hyper, x, None)?;
        let h = self.backbone.apply_tanh(tape, b, input)?;
        let h = self.weight_hidden.apply_tanh(tape, b, h)?;
        let raw = self.weight_out.apply(tape, b, h)?;
        let sp = tape.softplus(raw);
        Ok(tape.clamp_min(sp, ALPHA_FLOOR))
    }

    /// (μ, ln σ) of q(z | x, y) on the tape.
    pub fn feature_vars(
        &self,
        tape: &mut Tape,
        b: &Binding,
        x: &[f64],
        y: &[f64],
    ) -> Result<(Var, Var)> {
        let input = backbone_input(tape, &self.hyper, x, Some(y))?;
        let h = self.backbone.apply_tanh(tape, b, input)?;
        let h = self.feature_hidden.apply_tanh(tape, b, h)?;
        let out = self.feature_out.apply(tape, b, h)?;
        let mu = tape.slice(out, 0, self.hyper.j)?;
        let log_sigma = tape.slice(out, self.hyper.j, self.hyper.j)?;
        Ok((mu, log_sigma))
    }

    /// Per-objective head outputs f_k(z), as a K-vector.
    pub fn head_rewards_var(&self, tape: &mut Tape, b: &Binding, z: Var) -> Result<Var> {
        check_dim("semantic features", self.hyper.j, tape.shape(z).len())?;
        let mut heads = Vec::with_capacity(self.hyper.k);
        for (hidden, out) in self.reward_hidden.iter().zip(&self.reward_out) {
            let h = hidden.apply_tanh(tape, b, z)?;
            heads.push(out.apply(tape, b, h)?);
        }
        tape.concat(&heads)
    }

    /// r(w, z) = Σ_k w_k f_k(z) on the tape.
    pub fn reward_var(&self, tape: &mut Tape, b: &Binding, w: Var, z: Var) -> Result<Var> {
        check_dim("objective weights", self.hyper.k, tape.shape(w).len())?;
        let f = self.head_rewards_var(tape, b, z)?;
        tape.dot(w, f)
    }

    /// A reusable tape with the parameters bound once.
    pub fn session(&self) -> Session<'_, Self> {
        Session::new(self, &self.params)
    }

    pub fn encode_weights(&self, x: &[f64]) -> Result<DirichletParams> {
        self.session().encode_weights(x)
    }

    pub fn encode_features(&self, x: &[f64], y: &[f64]) -> Result<GaussianParams> {
        self.session().encode_features(x, y)
    }

    pub fn decode_reward(&self, w: &[f64], z: &[f64]) -> Result<f64> {
        self.session().decode_reward(w, z)
    }
}

/// A tape with a model's parameters bound, reset after every query.
pub struct Session<'m, M> {
    model: &'m M,
    tape: Tape,
    binding: Binding,
    mark: usize,
}

impl<'m, M> Session<'m, M> {
    fn new(model: &'m M, params: &ParamStore) -> Self {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let mark = tape.len();
        Session {
            model,
            tape,
            binding,
            mark,
        }
    }

    /// Run `f` on the bound tape and discard whatever it recorded.
    pub fn run<T>(&mut self, f: impl FnOnce(&M, &mut Tape, &Binding) -> Result<T>) -> Result<T> {
        let out = f(self.model, &mut self.tape, &self.binding);
        self.tape.truncate(self.mark);
        out
    }
}

impl Session<'_, VrmModel> {
    pub fn encode_weights(&mut self, x: &[f64]) -> Result<DirichletParams> {
        self.run(|m, t, b| {
            let a = m.alpha_var(t, b, x)?;
            DirichletParams::new(t.data(a).to_vec())
        })
    }

    pub fn encode_features(&mut self, x: &[f64], y: &[f64]) -> Result<GaussianParams> {
        self.run(|m, t, b| {
            let (mu, ls) = m.feature_vars(t, b, x, y)?;
            let sigma = t.data(ls).iter().map(|v| v.exp()).collect();
            GaussianParams::new(t.data(mu).to_vec(), sigma)
        })
    }

    pub fn decode_reward(&mut self, w: &[f64], z: &[f64]) -> Result<f64> {
        let total: f64 = w.iter().sum();
        if w.iter().any(|&v| v < -1e-6) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParam(format!(
                "weights {w:?} are not on the simplex"
            )));
        }
        self.run(|m, t, b| {
            let wv = t.constant_vector(w);
            let zv = t.constant_vector(z);
            let r = m.reward_var(t, b, wv, zv)?;
            Ok(t.scalar(r))
        })
    }

    /// Rewards of both responses at the posterior means (w̄ = α/Σα, z = μ).
    pub fn posterior_mean_rewards(
        &mut self,
        x: &[f64],
        y_pos: &[f64],
        y_neg: &[f64],
    ) -> Result<(f64, f64)> {
        self.run(|m, t, b| {
            let alpha = m.alpha_var(t, b, x)?;
            let total = t.sum(alpha);
            let w = t.div_scalar(alpha, total)?;
            let (mu_pos, _) = m.feature_vars(t, b, x, y_pos)?;
            let (mu_neg, _) = m.feature_vars(t, b, x, y_neg)?;
            let rp = m.reward_var(t, b, w, mu_pos)?;
            let rn = m.reward_var(t, b, w, mu_neg)?;
            Ok((t.scalar(rp), t.scalar(rn)))
        })
    }
}

/// Deterministic scalar reward model sharing the backbone layout.
#[derive(Debug, Clone)]
pub struct BaselineRm {
    hyper: ModelHyper,
    params: ParamStore,
    backbone: Affine,
    hidden: Affine,
    out: Affine,
}

impl BaselineRm {
    pub fn new(hyper: ModelHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = rng::stream(seed, rng::streams::INIT);
        let mut p = ParamStore::new(seed);
        let h = hyper.hidden;
        let backbone = Affine::new(&mut p, "backbone", h, hyper.d_x + hyper.d_y, &mut rng)?;
        let hidden = Affine::new(&mut p, "reward_head.hidden", h, h, &mut rng)?;
        let out = Affine::new(&mut p, "reward_head.out", 1, h, &mut rng)?;
        Ok(BaselineRm {
            hyper,
            params: p,
            backbone,
            hidden,
            out,
        })
    }

    pub fn from_params(hyper: ModelHyper, params: &ParamStore) -> Result<Self> {
        let mut m = Self::new(hyper, params.seed())?;
        m.params.load_from(params)?;
        Ok(m)
    }

    /// Every parameter set to zero; the reward is then identically 0.
    pub fn zeroed(mut self) -> Self {
        for layer in [self.backbone, self.hidden, self.out] {
            layer.zero(&mut self.params);
        }
        self
    }

    pub fn hyper(&self) -> &ModelHyper {
        &self.hyper
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn reward_var(&self, tape: &mut Tape, b: &Binding, x: &[f64], y: &[f64]) -> Result<Var> {
        let input = backbone_input(tape, &self.hyper, x, Some(y))?;
        let h = self.backbone.apply_tanh(tape, b, input)?;
        let h = self.hidden.apply_tanh(tape, b, h)?;
        let r = self.out.apply(tape, b, h)?;
        tape.index(r, 0)
    }

    pub fn session(&self) -> Session<'_, Self> {
        Session::new(self, &self.params)
    }

    pub fn reward(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.session().reward(x, y)
    }
}

impl Session<'_, BaselineRm> {
    pub fn reward(&mut self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.run(|m, t, b| {
            let r = m.reward_var(t, b, x, y)?;
            Ok(t.scalar(r))
        })
    }
}

/// Whitespace-token hashing embedder for text records.
///
/// Each token is hashed (64-bit FNV-1a) into one of `dim` buckets; the
/// bucket counts are then ℓ2-normalized. An empty string embeds to zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        HashEmbedder { dim }
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for token in text.split_whitespace() {
            v[(fnv1a(token.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Prompt and response embedders used when ingesting text records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    pub d_x: usize,
    pub d_y: usize,
}

impl EmbedderConfig {
    pub fn prompt(&self) -> HashEmbedder {
        HashEmbedder::new(self.d_x)
    }

    pub fn response(&self) -> HashEmbedder {
        HashEmbedder::new(self.d_y)
    }
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig { d_x: 64, d_y: 64 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelHyper {
        ModelHyper {
            k: 3,
            j: 4,
            hidden: 6,
            d_x: 5,
            d_y: 3,
        }
    }

    #[test]
    fn zero_heads_give_prior_like_posteriors() {
        let m = VrmModel::new(tiny(), 1).unwrap().zero_heads();
        let x = [0.3, -1.0, 2.0, 0.0, 0.5];
        let q = m.encode_weights(&x).unwrap();
        assert!(q.alpha().iter().all(|&a| (a - 2f64.ln()).abs() < 1e-15));
        let g = m.encode_features(&x, &[1.0, 2.0, 3.0]).unwrap();
        assert!(g.mu().iter().all(|&v| v == 0.0));
        assert!(g.sigma().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn prior_matched_posterior_has_zero_kl() {
        use crate::distributions::{dirichlet_kl, gaussian_kl, DirichletParams};
        let m = VrmModel::new(tiny(), 1)
            .unwrap()
            .prior_matched(1.0)
            .unwrap();
        let x = [0.3, -1.0, 2.0, 0.0, 0.5];
        let prior = DirichletParams::symmetric(3, 1.0).unwrap();
        assert!(
            dirichlet_kl(&m.encode_weights(&x).unwrap(), &prior)
                .unwrap()
                .abs()
                < 1e-12
        );
        assert_eq!(
            gaussian_kl(&m.encode_features(&x, &[1.0, 2.0, 3.0]).unwrap()),
            0.0
        );
        assert!(VrmModel::new(tiny(), 1)
            .unwrap()
            .prior_matched(0.0)
            .is_err());
    }

    #[test]
    fn encoders_are_deterministic() {
        let m = VrmModel::new(tiny(), 2).unwrap();
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        assert_eq!(m.encode_weights(&x).unwrap(), m.encode_weights(&x).unwrap());
        assert!(m
            .encode_weights(&x)
            .unwrap()
            .alpha()
            .iter()
            .all(|&a| a >= ALPHA_FLOOR));
    }

    #[test]
    fn dimension_errors() {
        let m = VrmModel::new(tiny(), 3).unwrap();
        assert!(matches!(
            m.encode_weights(&[1.0]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            m.encode_features(&[0.0; 5], &[1.0]),
            Err(Error::Dimension { .. })
        ));
        let b = BaselineRm::new(tiny(), 3).unwrap();
        assert!(b.reward(&[0.0; 4], &[0.0; 3]).is_err());
    }

    #[test]
    fn decode_rejects_off_simplex_weights() {
        let m = VrmModel::new(tiny(), 3).unwrap();
        assert!(m.decode_reward(&[0.5, 0.5, 0.5], &[0.0; 4]).is_err());
        assert!(m.decode_reward(&[1.2, -0.2, 0.0], &[0.0; 4]).is_err());
    }

    #[test]
    fn one_hot_weights_select_a_head() {
        let m = VrmModel::new(tiny(), 4).unwrap();
        let z = [0.3, -0.2, 0.9, 1.4];
        let mut s = m.session();
        let heads = s
            .run(|m, t, b| {
                let zv = t.constant_vector(&z);
                let f = m.head_rewards_var(t, b, zv)?;
                Ok(t.data(f).to_vec())
            })
            .unwrap();
        for k in 0..3 {
            let mut w = [0.0; 3];
            w[k] = 1.0;
            assert_eq!(s.decode_reward(&w, &z).unwrap(), heads[k]);
        }
    }

    #[test]
    fn zeroed_baseline_scores_zero() {
        let b = BaselineRm::new(tiny(), 5).unwrap().zeroed();
        assert_eq!(b.reward(&[1.0; 5], &[2.0; 3]).unwrap(), 0.0);
        let b = BaselineRm::new(tiny(), 5).unwrap();
        let r = b.reward(&[1.0; 5], &[2.0; 3]).unwrap();
        assert_eq!(r, b.reward(&[1.0; 5], &[2.0; 3]).unwrap());
    }

    #[test]
    fn embedder_normalizes() {
        let e = HashEmbedder::new(16);
        let v = e.embed("the cat sat on the mat");
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(e.embed(""), vec![0.0; 16]);
        assert_eq!(e.embed("a b"), e.embed("a  b"));
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let a = VrmModel::new(tiny(), 1).unwrap();
        let mut other = tiny();
        other.hidden = 7;
        assert!(VrmModel::from_params(other, a.params()).is_err());
        let back = VrmModel::from_params(tiny(), a.params()).unwrap();
        assert_eq!(back.params(), a.params());
    }
}
