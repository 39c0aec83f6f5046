//! Finite-difference suites over every tape primitive and the full training
//! loss, as run by `vrm gradcheck`.

use rand::Rng as _;
use serde::Serialize;

use crate::data::{generate, GeneratorConfig, PreferenceExample};
use crate::diffcore::{grad_check, Binding, ParamStore, Primitive, Tape, Tensor, Var};
use crate::distributions::{gamma_implicit_grad, replay_gamma, GammaNoise};
use crate::losses::{
    frozen_noise, supervision_targets, total_loss_var, NoiseSource, Objective, SupVariant,
};
use crate::model::{ModelHyper, VrmModel};
use crate::rng::{self, streams};
use crate::Result;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const FULL_LOSS_TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
const SEED: u64 = 2024;

#[derive(Debug, Clone, Serialize)]
pub struct ComponentCheck {
    pub component: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub passed: bool,
    /// Parameter holding the largest error.
    pub worst_param: String,
    /// Distinct primitives the case records; used to localize failures.
    pub breadth: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub components: Vec<ComponentCheck>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }

    /// The failing component that best localizes the fault: a broken local
    /// derivative also breaks every case built on top of it, so the narrowest
    /// failing case wins, then the largest error.
    pub fn worst_offender(&self) -> Option<&ComponentCheck> {
        self.components.iter().filter(|c| !c.passed).min_by(|a, b| {
            a.breadth
                .cmp(&b.breadth)
                .then(b.max_rel_error.total_cmp(&a.max_rel_error))
        })
    }

    pub fn max_rel_error(&self, prefix: &str) -> f64 {
        self.components
            .iter()
            .filter(|c| c.component.starts_with(prefix))
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }
}

type CaseFn = Box<dyn Fn(&mut Tape, &Binding, &ParamStore) -> Result<Var>>;

struct Case {
    primitive: Primitive,
    params: ParamStore,
    f: CaseFn,
}

// Deterministic values in [lo, hi), optionally with random signs.
fn values(rng: &mut rng::Rng, n: usize, lo: f64, hi: f64, signed: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if signed && rng.random::<bool>() {
                -v
            } else {
                v
            }
        })
        .collect()
}

const WEIGHTS: [f64; 6] = [0.7, -1.3, 0.4, 1.1, -0.6, 0.9];

// Collapse a vector output to a scalar with fixed, uneven weights so that
// sign or permutation errors cannot cancel.
fn reduce(t: &mut Tape, v: Var) -> Result<Var> {
    let n = t.shape(v).len();
    if n == 1 {
        return Ok(v);
    }
    let w: Vec<f64> = (0..n)
        .map(|i| WEIGHTS[i % WEIGHTS.len()] * (1.0 + 0.1 * i as f64))
        .collect();
    let c = t.constant_vector(&w);
    t.dot(v, c)
}

fn store(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new(SEED);
    for (name, v) in entries {
        s.insert(*name, v.clone()).expect("distinct names");
    }
    s
}

fn unary(primitive: Primitive, x: Vec<f64>, op: fn(&mut Tape, Var) -> Result<Var>) -> Case {
    let params = store(&[("a", Tensor::vector(x))]);
    let a = params.id("a").unwrap();
    Case {
        primitive,
        params,
        f: Box::new(move |t, b, _| {
            let y = op(t, b.var(a))?;
            reduce(t, y)
        }),
    }
}

fn binary(
    primitive: Primitive,
    x: Vec<f64>,
    y: Vec<f64>,
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Case {
    let params = store(&[("a", Tensor::vector(x)), ("b", Tensor::vector(y))]);
    let (a, bb) = (params.id("a").unwrap(), params.id("b").unwrap());
    Case {
        primitive,
        params,
        f: Box::new(move |t, b, _| {
            let y = op(t, b.var(a), b.var(bb))?;
            reduce(t, y)
        }),
    }
}

fn with_scalar(
    primitive: Primitive,
    x: Vec<f64>,
    s: f64,
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Case {
    let params = store(&[("a", Tensor::vector(x)), ("s", Tensor::scalar(s))]);
    let (a, sid) = (params.id("a").unwrap(), params.id("s").unwrap());
    Case {
        primitive,
        params,
        f: Box::new(move |t, b, _| {
            let y = op(t, b.var(a), b.var(sid))?;
            reduce(t, y)
        }),
    }
}

fn cases() -> Result<Vec<Case>> {
    let mut r = rng::stream(SEED, streams::INIT);
    let n = 10;
    let free = |r: &mut rng::Rng| values(r, n, -2.0, 2.0, false);
    let away = |r: &mut rng::Rng| values(r, n, 0.3, 2.0, true);
    let pos = |r: &mut rng::Rng| values(r, n, 0.5, 3.0, false);

    let mut out = vec![
        binary(Primitive::Add, free(&mut r), free(&mut r), |t, a, b| {
            t.add(a, b)
        }),
        binary(Primitive::Sub, free(&mut r), free(&mut r), |t, a, b| {
            t.sub(a, b)
        }),
        binary(Primitive::Mul, free(&mut r), free(&mut r), |t, a, b| {
            t.mul(a, b)
        }),
        binary(Primitive::Div, free(&mut r), pos(&mut r), |t, a, b| {
            t.div(a, b)
        }),
        unary(Primitive::Scale, free(&mut r), |t, a| Ok(t.scale(a, -1.7))),
        with_scalar(Primitive::AddScalar, free(&mut r), 0.8, |t, a, s| {
            t.add_scalar(a, s)
        }),
        with_scalar(Primitive::MulScalar, free(&mut r), -1.4, |t, a, s| {
            t.mul_scalar(a, s)
        }),
        with_scalar(Primitive::DivScalar, free(&mut r), 1.9, |t, a, s| {
            t.div_scalar(a, s)
        }),
        unary(Primitive::Tanh, free(&mut r), |t, a| Ok(t.tanh(a))),
        unary(Primitive::Softplus, free(&mut r), |t, a| Ok(t.softplus(a))),
        unary(Primitive::Exp, free(&mut r), |t, a| Ok(t.exp(a))),
        unary(Primitive::Log, pos(&mut r), |t, a| t.ln(a)),
        unary(Primitive::Abs, away(&mut r), |t, a| Ok(t.abs(a))),
        unary(Primitive::Relu, away(&mut r), |t, a| Ok(t.relu(a))),
        unary(Primitive::Sum, free(&mut r), |t, a| Ok(t.sum(a))),
        unary(Primitive::Mean, free(&mut r), |t, a| Ok(t.mean(a))),
        binary(Primitive::Dot, free(&mut r), free(&mut r), |t, a, b| {
            t.dot(a, b)
        }),
        binary(Primitive::Concat, free(&mut r), free(&mut r), |t, a, b| {
            t.concat(&[a, b])
        }),
        unary(Primitive::Slice, free(&mut r), |t, a| t.slice(a, 1, 3)),
        unary(Primitive::Sigmoid, free(&mut r), |t, a| Ok(t.sigmoid(a))),
        unary(Primitive::LogSigmoid, free(&mut r), |t, a| {
            Ok(t.log_sigmoid(a))
        }),
        unary(Primitive::Softmax, free(&mut r), |t, a| t.softmax(a)),
        unary(Primitive::LogGamma, pos(&mut r), |t, a| t.log_gamma(a)),
        unary(Primitive::Digamma, pos(&mut r), |t, a| t.digamma(a)),
        // Entries on both sides of the floor, none near it.
        unary(Primitive::ClampMin, away(&mut r), |t, a| {
            Ok(t.clamp_min(a, 0.0))
        }),
    ];

    let (rows, cols) = (3, 4);
    let w = Tensor::matrix(rows, cols, values(&mut r, rows * cols, -1.0, 1.0, false))?;
    let x = Tensor::vector(values(&mut r, cols, -1.0, 1.0, false));
    let bias = Tensor::vector(values(&mut r, rows, -1.0, 1.0, false));
    let params = store(&[("w", w.clone()), ("x", x.clone())]);
    let (wi, xi) = (params.id("w").unwrap(), params.id("x").unwrap());
    out.push(Case {
        primitive: Primitive::MatVec,
        params,
        f: Box::new(move |t, b, _| {
            let y = t.matvec(b.var(wi), b.var(xi))?;
            reduce(t, y)
        }),
    });
    let params = store(&[("w", w), ("x", x), ("b", bias)]);
    let (wi, xi, bi) = (
        params.id("w").unwrap(),
        params.id("x").unwrap(),
        params.id("b").unwrap(),
    );
    out.push(Case {
        primitive: Primitive::Affine,
        params,
        f: Box::new(move |t, b, _| {
            let y = t.affine(b.var(wi), b.var(xi), b.var(bi))?;
            reduce(t, y)
        }),
    });

    // Gamma draws at frozen CDF levels, differentiated implicitly in α.
    let alpha = values(&mut r, n, 0.5, 3.0, false);
    let levels = values(&mut r, n, 0.1, 0.9, false);
    let params = store(&[("alpha", Tensor::vector(alpha))]);
    let ai = params.id("alpha").unwrap();
    out.push(Case {
        primitive: Primitive::Implicit,
        params,
        f: Box::new(move |t, b, _| {
            let a = b.var(ai);
            let mut g = Vec::with_capacity(levels.len());
            let mut dg = Vec::with_capacity(levels.len());
            for (&al, &u) in t.data(a).to_vec().iter().zip(&levels) {
                let gk = replay_gamma(al, &GammaNoise::Quantile(u))?;
                dg.push(gamma_implicit_grad(al, gk));
                g.push(gk);
            }
            let y = t.implicit(a, g, dg)?;
            reduce(t, y)
        }),
    });
    Ok(out)
}

fn breadth<F>(f: &F, params: &ParamStore) -> Result<usize>
where
    F: Fn(&mut Tape, &Binding, &ParamStore) -> Result<Var>,
{
    let mut t = Tape::new();
    let b = params.bind(&mut t);
    f(&mut t, &b, params)?;
    Ok(t.primitives()
        .into_iter()
        .filter(|p| *p != Primitive::Leaf)
        .count())
}

fn check<F>(
    component: String,
    f: F,
    params: &ParamStore,
    threshold: f64,
    fault: Option<Primitive>,
) -> Result<ComponentCheck>
where
    F: Fn(&mut Tape, &Binding, &ParamStore) -> Result<Var>,
{
    let breadth = breadth(&f, params)?;
    let report = grad_check(&f, params, STEP, fault)?;
    let max_rel_error = report.max_rel_error();
    Ok(ComponentCheck {
        component,
        max_rel_error,
        threshold,
        passed: max_rel_error <= threshold,
        worst_param: report.worst().map(|w| w.name.clone()).unwrap_or_default(),
        breadth,
    })
}

/// One check per differentiable primitive (leaves carry no local derivative
/// and are exercised by every case).
pub fn primitive_suite(fault: Option<Primitive>) -> Result<Vec<ComponentCheck>> {
    cases()?
        .into_iter()
        .map(|c| {
            check(
                c.primitive.name().to_owned(),
                c.f,
                &c.params,
                PRIMITIVE_TOLERANCE,
                fault,
            )
        })
        .collect()
}

fn loss_fixture() -> Result<(VrmModel, Vec<PreferenceExample>)> {
    let ds = generate(&GeneratorConfig {
        seed: SEED,
        n: 6,
        d_x: 3,
        d_y: 2,
        train_fraction: 1.0,
        ..GeneratorConfig::default()
    })?;
    let hyper = ModelHyper {
        k: 4,
        j: 3,
        hidden: 4,
        d_x: 3,
        d_y: 2,
    };
    Ok((VrmModel::new(hyper, SEED)?, ds.train))
}

/// The total loss for each supervision variant, latent noise frozen at CDF
/// levels so that finite differences follow the reparameterized draw.
pub fn full_loss_suite(lambda: f64, fault: Option<Primitive>) -> Result<Vec<ComponentCheck>> {
    let (model, examples) = loss_fixture()?;
    let batch: Vec<&PreferenceExample> = examples.iter().collect();
    let (_, targets) = supervision_targets(&examples)?;
    let targets: Vec<Option<&[f64]>> = targets.iter().map(|t| t.as_deref()).collect();
    let noise = frozen_noise(&model, &batch, &mut rng::stream(SEED, streams::LATENT))?;
    SupVariant::ALL
        .into_iter()
        .map(|variant| {
            let obj = Objective::new(model.hyper().k, 1.0, lambda, variant)?;
            check(
                format!("full_loss[{variant}]"),
                |t: &mut Tape, b: &Binding, _: &ParamStore| {
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
                FULL_LOSS_TOLERANCE,
                fault,
            )
        })
        .collect()
}

pub fn run(fault: Option<Primitive>) -> Result<SuiteReport> {
    let mut components = primitive_suite(fault)?;
    components.extend(full_loss_suite(0.7, fault)?);
    Ok(SuiteReport { components })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ALL_PRIMITIVES;

    #[test]
    fn every_differentiable_primitive_has_a_case() {
        let covered: Vec<Primitive> = cases().unwrap().iter().map(|c| c.primitive).collect();
        for p in ALL_PRIMITIVES {
            assert!(*p == Primitive::Leaf || covered.contains(p), "{p} missing");
        }
    }

    #[test]
    fn clean_primitives_pass() {
        let report = primitive_suite(None).unwrap();
        for c in &report {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn injected_fault_is_named() {
        for p in [
            Primitive::Exp,
            Primitive::Dot,
            Primitive::Softmax,
            Primitive::Implicit,
        ] {
            let report = SuiteReport {
                components: primitive_suite(Some(p)).unwrap(),
            };
            assert!(!report.passed());
            assert_eq!(report.worst_offender().unwrap().component, p.name());
        }
    }
}
