//! Variational reward modeling at desk scale.
//!
//! A preference reward model with two latent variables per comparison:
//! objective weights `w ~ Dir(α(x))` that depend on the prompt only, and
//! semantic features `z ~ N(μ(x, y), diag σ²(x, y))` per response. It is
//! trained by maximizing a preference ELBO whose likelihood is
//! Bradley–Terry over the decoded rewards, optionally with a supervision
//! term tying the weight posterior to multi-dimensional annotator scores.
//!
//! The crate also carries a deterministic Bradley–Terry baseline, a
//! synthetic generator with known ground truth (and a spurious-feature
//! injector for reward-hacking probes), and a PAC-Bayes bound evaluator.
//!
//! Everything is built from a small reverse-mode tape ([`diffcore`]) over
//! 64-bit vectors and matrices; there is no external ML framework.
//!
//! Runnable walkthroughs live under `examples/`; the `vrm` binary wraps the
//! same functionality behind subcommands.

pub mod cli;
pub mod data;
pub mod diffcore;
pub mod distributions;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pacbayes;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
