//! The `vrm` command line: config resolution, subcommands, exit codes.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or config error,
//! 3 IO error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate, load_jsonl, read_generated, write_generated, GeneratorConfig, SplitDataset,
};
use crate::diffcore::Primitive;
use crate::gradcheck;
use crate::losses::SupVariant;
use crate::model::{EmbedderConfig, ModelKind};
use crate::pacbayes::{
    compute_bound, evaluate_bound, kl_total, validity_trial, ValidityConfig, DEFAULT_MC_SAMPLES,
};
use crate::training::{
    accuracy_of, train, weight_recovery, write_metrics_csv, write_metrics_jsonl, AnyModel,
    Checkpoint, ModelConfig, TrainConfig,
};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const EVAL_REPORT: &str = "eval.json";
pub const BOUND_REPORT: &str = "bound.json";
pub const VALIDITY_REPORT: &str = "validity.json";
pub const GRADCHECK_REPORT: &str = "gradcheck.json";

/// Where examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Synthesize in memory.
    Generator(GeneratorConfig),
    /// A directory written by `gen-data`.
    Dir(PathBuf),
    /// Arbitrary JSONL files (numeric or text records).
    Jsonl(JsonlSource),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Generator(GeneratorConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonlSource {
    pub train: PathBuf,
    #[serde(default)]
    pub eval: Option<PathBuf>,
    /// Hash-embedding dimensions for text records.
    #[serde(default = "default_embedder")]
    pub embedder: EmbedderConfig,
}

fn default_embedder() -> EmbedderConfig {
    EmbedderConfig { d_x: 32, d_y: 32 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub k: Option<usize>,
    pub j: usize,
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            kind: ModelKind::Vrm,
            k: m.k,
            j: m.j,
            hidden: m.hidden,
        }
    }
}

impl ModelSection {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            k: self.k,
            j: self.j,
            hidden: self.hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundSection {
    pub delta: f64,
    pub mc_samples: usize,
    /// Recipe for `bound --trials`.
    pub validity: ValidityConfig,
}

impl Default for BoundSection {
    fn default() -> Self {
        BoundSection {
            delta: 0.05,
            mc_samples: DEFAULT_MC_SAMPLES,
            validity: ValidityConfig::default(),
        }
    }
}

/// One JSON document driving every subcommand.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSource,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub bound: BoundSection,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| {
            Error::Config("no output directory: pass --out or set \"out\" in the config".into())
        })
    }

    /// Load or synthesize the dataset. `embedder` overrides the configured
    /// text embedder (checkpoints remember the one they were trained with).
    pub fn dataset(&self, embedder: Option<EmbedderConfig>) -> Result<SplitDataset> {
        match &self.data {
            DataSource::Generator(g) => generate(g),
            DataSource::Dir(dir) => read_generated(dir),
            DataSource::Jsonl(src) => {
                let emb = embedder.unwrap_or(src.embedder);
                let train = load_jsonl(&src.train, &emb)?;
                let eval = match &src.eval {
                    Some(p) => load_jsonl(p, &emb)?,
                    None => Vec::new(),
                };
                SplitDataset::from_splits(train, eval)
            }
        }
    }

    fn embedder(&self) -> Option<EmbedderConfig> {
        match &self.data {
            DataSource::Jsonl(src) => Some(src.embedder),
            _ => None,
        }
    }
}

#[derive(Serialize)]
struct RunEcho<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a RunConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_run_echo(dir: &Path, command: &str, seed: u64, config: &RunConfig) -> Result<()> {
    write_json(
        &dir.join(RUN_FILE),
        &RunEcho {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config,
        },
    )
}

#[derive(Debug, Parser)]
#[command(
    name = "vrm",
    version,
    about = "Variational reward modeling: data, training, evaluation, bounds"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Read a `gen-data` directory instead of the configured data source.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if let Some(d) = &self.data {
            cfg.data = DataSource::Dir(d.clone());
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a dataset and write train/eval JSONL plus a manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Generator seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes a checkpoint and metric tables.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_kind)]
        model: Option<ModelKind>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_parser = parse_variant)]
        sup_variant: Option<SupVariant>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pairwise accuracy (and weight recovery when ground truth exists).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// PAC-Bayes bound of a checkpoint, or a coverage study with --trials.
    Bound {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "trials")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_delta)]
        delta: Option<f64>,
        #[arg(long)]
        mc_samples: Option<usize>,
        /// Run this many synthetic train-and-bound trials instead.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Replace the Monte Carlo risk (testing hook).
        #[arg(long, hide = true)]
        risk_override: Option<f64>,
    },
    /// Finite-difference checks of every primitive and the full loss.
    Gradcheck {
        /// Flip the sign of one primitive's local derivative (testing hook).
        #[arg(long, value_parser = parse_primitive)]
        inject_bug: Option<Primitive>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    match s {
        "vrm" => Ok(ModelKind::Vrm),
        "baseline" => Ok(ModelKind::Baseline),
        _ => Err(format!("unknown model '{s}' (expected vrm or baseline)")),
    }
}

fn parse_variant(s: &str) -> std::result::Result<SupVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_delta(s: &str) -> std::result::Result<f64, String> {
    let d: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if d > 0.0 && d < 1.0 {
        Ok(d)
    } else {
        Err(format!("delta must lie in (0, 1), got {d}"))
    }
}

fn parse_primitive(s: &str) -> std::result::Result<Primitive, String> {
    Primitive::from_name(s).ok_or_else(|| format!("unknown primitive '{s}'"))
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::NonFinite { .. } => EXIT_CHECK,
        _ => EXIT_USAGE,
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}

/// Parse `args` (program name first) and execute.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("vrm: error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData { config, out, seed } => gen_data(
            Common {
                config,
                out,
                data: None,
            }
            .resolve()?,
            seed,
        ),
        Command::Train {
            common,
            model,
            lambda,
            sup_variant,
            seed,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(m) = model {
                cfg.model.kind = m;
            }
            if let Some(l) = lambda {
                cfg.train.lambda = l;
            }
            if let Some(v) = sup_variant {
                cfg.train.sup_variant = v;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            train_cmd(cfg)
        }
        Command::Eval { common, checkpoint } => eval_cmd(common.resolve()?, &checkpoint),
        Command::Bound {
            common,
            checkpoint,
            delta,
            mc_samples,
            trials,
            seed,
            risk_override,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(d) = delta {
                cfg.bound.delta = d;
                cfg.bound.validity.delta = d;
            }
            if let Some(m) = mc_samples {
                cfg.bound.mc_samples = m;
                cfg.bound.validity.mc_samples = m;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
                cfg.bound.validity.generator.seed = s;
            }
            match trials {
                Some(t) => {
                    cfg.bound.validity.trials = t;
                    validity_cmd(cfg)
                }
                None => {
                    let ck = checkpoint.expect("clap enforces --checkpoint without --trials");
                    bound_cmd(cfg, &ck, risk_override)
                }
            }
        }
        Command::Gradcheck { inject_bug, out } => gradcheck_cmd(inject_bug, out.as_deref()),
    }
}

fn gen_data(mut cfg: RunConfig, seed: Option<u64>) -> Result<i32> {
    let DataSource::Generator(g) = &mut cfg.data else {
        return Err(Error::Config(
            "gen-data needs a \"generator\" data section".into(),
        ));
    };
    if let Some(s) = seed {
        g.seed = s;
    }
    // Everything is validated and generated before the first file is created.
    let g = g.clone();
    let ds = generate(&g)?;
    let dir = cfg.out_dir()?.to_path_buf();
    write_generated(&dir, &ds, &g)?;
    write_run_echo(&dir, "gen-data", g.seed, &cfg)?;
    println!(
        "wrote {} train / {} eval examples to {}",
        ds.train.len(),
        ds.eval.len(),
        dir.display()
    );
    Ok(EXIT_OK)
}

fn train_cmd(cfg: RunConfig) -> Result<i32> {
    cfg.train.validate()?;
    let dir = cfg.out_dir()?.to_path_buf();
    let ds = cfg.dataset(None)?;
    if ds.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let hyper = cfg.model.config().resolve(&ds.schema)?;
    info!(
        "training {} on {} examples ({} eval), hyper {:?}",
        cfg.model.kind,
        ds.train.len(),
        ds.eval.len(),
        hyper
    );
    let outcome = train(cfg.model.kind, &ds, hyper, &cfg.train)?;
    fs::create_dir_all(&dir)?;
    let mut ck = outcome.checkpoint();
    ck.embedder = cfg.embedder();
    ck.save(&dir.join(CHECKPOINT_FILE))?;
    write_metrics_csv(&dir.join(METRICS_CSV), &outcome.metrics)?;
    write_metrics_jsonl(&dir.join(METRICS_JSONL), &outcome.metrics)?;
    write_run_echo(&dir, "train", cfg.train.seed, &cfg)?;
    let last = outcome.final_row();
    print!("final step {}: train_acc {:.4}", last.step, last.train_acc);
    if let Some(e) = last.eval_acc {
        print!(", eval_acc {e:.4}");
    }
    println!(", total loss {:.4}", last.loss.total);
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecovery {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: ModelKind,
    pub n_train: usize,
    pub n_eval: usize,
    pub train_accuracy: Option<f64>,
    pub eval_accuracy: Option<f64>,
    /// Mean KL(w* ‖ w̄); present only for VRM checkpoints on data with truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_recovery: Option<WeightRecovery>,
}

pub fn evaluate_checkpoint(model: &AnyModel, ds: &SplitDataset) -> Result<EvalReport> {
    let acc = |split: &[_]| -> Result<Option<f64>> {
        if split.is_empty() {
            return Ok(None);
        }
        Ok(Some(accuracy_of(&model.score_pairs(split)?)))
    };
    let recover = |split: &[crate::data::PreferenceExample]| -> Result<Option<f64>> {
        match model {
            AnyModel::Vrm(m) if !split.is_empty() && split.iter().all(|e| e.truth.is_some()) => {
                Ok(Some(weight_recovery(m, split)?))
            }
            _ => Ok(None),
        }
    };
    let (rt, re) = (recover(&ds.train)?, recover(&ds.eval)?);
    Ok(EvalReport {
        model: model.kind(),
        n_train: ds.train.len(),
        n_eval: ds.eval.len(),
        train_accuracy: acc(&ds.train)?,
        eval_accuracy: acc(&ds.eval)?,
        weight_recovery: (rt.is_some() || re.is_some()).then_some(WeightRecovery {
            train: rt,
            eval: re,
        }),
    })
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<(AnyModel, SplitDataset)> {
    let ck = Checkpoint::load(path)?;
    let ds = cfg.dataset(ck.embedder)?;
    ck.check_schema(&ds.schema)?;
    Ok((ck.to_model()?, ds))
}

fn eval_cmd(cfg: RunConfig, checkpoint: &Path) -> Result<i32> {
    let (model, ds) = load_checkpoint(checkpoint, &cfg)?;
    let report = evaluate_checkpoint(&model, &ds)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join(EVAL_REPORT), &report)?;
        write_run_echo(dir, "eval", cfg.train.seed, &cfg)?;
    }
    Ok(EXIT_OK)
}

fn bound_cmd(cfg: RunConfig, checkpoint: &Path, risk_override: Option<f64>) -> Result<i32> {
    let b = &cfg.bound;
    if !(b.delta > 0.0 && b.delta < 1.0) {
        return Err(Error::Config(format!(
            "delta must lie in (0, 1), got {}",
            b.delta
        )));
    }
    let (model, ds) = load_checkpoint(checkpoint, &cfg)?;
    let AnyModel::Vrm(model) = model else {
        return Err(Error::Config(
            "the bound needs a VRM checkpoint (the baseline has no posterior)".into(),
        ));
    };
    let report = match risk_override {
        Some(r) => {
            let kl = kl_total(&model, &ds.train, cfg.train.prior_alpha0)?;
            compute_bound(r, kl, ds.train.len(), b.delta)?
        }
        None => evaluate_bound(
            &model,
            &ds.train,
            b.delta,
            b.mc_samples,
            cfg.train.prior_alpha0,
            cfg.train.seed,
        )?,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join(BOUND_REPORT), &report)?;
        write_run_echo(dir, "bound", cfg.train.seed, &cfg)?;
    }
    Ok(EXIT_OK)
}

fn validity_cmd(cfg: RunConfig) -> Result<i32> {
    let v = &cfg.bound.validity;
    let report = validity_trial(v)?;
    let covered = report.outcomes.iter().filter(|o| o.covered).count();
    println!(
        "pass rate {:.3} ({covered}/{} trials with population risk <= bound, delta = {})",
        report.pass_rate, report.trials, report.delta
    );
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join(VALIDITY_REPORT), &report)?;
        write_run_echo(dir, "bound", v.generator.seed, &cfg)?;
    }
    Ok(if report.pass_rate >= 1.0 - report.delta {
        EXIT_OK
    } else {
        EXIT_CHECK
    })
}

fn gradcheck_cmd(fault: Option<Primitive>, out: Option<&Path>) -> Result<i32> {
    let report = gradcheck::run(fault)?;
    for c in &report.components {
        println!(
            "{:<18} {:>10.3e}  (tol {:.0e})  {}",
            c.component,
            c.max_rel_error,
            c.threshold,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join(GRADCHECK_REPORT), &report)?;
    }
    match report.worst_offender() {
        None => {
            println!("all gradient checks passed");
            Ok(EXIT_OK)
        }
        Some(w) => {
            eprintln!(
                "vrm: gradient check failed; worst offender: {} (max relative error {:.3e}, tolerance {:.0e}, parameter {})",
                w.component, w.max_rel_error, w.threshold, w.worst_param
            );
            Ok(EXIT_CHECK)
        }
    }
}
