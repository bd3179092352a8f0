//! Experiment commands behind the `cascade-rec` binary.

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cascade_rec::adversarial::{EpochRecord, TrainError, Trainer, TrainingMode};
use cascade_rec::data::synthetic::sparse_log;
use cascade_rec::data::{build_dataset, load_interactions, SequenceDataset, Split};
use cascade_rec::evaluation::{
    evaluate, last_k_curve, robustness_eval, write_curve_csv, write_robustness_csv, AttackPosition, AttackSpec, MetricsReport,
};
use cascade_rec::models::{Checkpoint, SeqRecModel};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

pub use config::{ConfigError, ExperimentConfig, Resolved};

#[derive(Parser, Debug)]
#[command(name = "cascade-rec", version, about = "Cascade-guided adversarial training for sequential recommenders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Flat `key = value` file; later `KEY=VALUE` arguments override it.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Overrides such as `mode=adv_cas epsilon=1`.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train base then adversarial phases; writes log, checkpoints, metrics.
    Train(ConfigArgs),
    /// Rank every user's held-out item with a saved model.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Item-replacement attack against a saved model.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        /// first, middle, last, or last_k
        #[arg(long, default_value = "last")]
        position: String,
        /// Largest K for `last_k`.
        #[arg(long, default_value_t = 5)]
        max_k: usize,
        /// Attack step size; defaults to the config's epsilon.
        #[arg(long)]
        attack_epsilon: Option<f64>,
        /// Also refuse replacements already in the history.
        #[arg(long)]
        strict: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Phase 2 once per epsilon from one shared phase-1 checkpoint.
    SweepEpsilon {
        #[arg(long, value_delimiter = ',', default_value = "0.1,1,10,30,50")]
        epsilons: Vec<f64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Users, items, interactions, density and mean length after filtering.
    DatasetStats(ConfigArgs),
}

/// A checkpoint that does not fit the dataset it is applied to.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct VersionMismatch(pub String);

/// Machine-readable failure, printed as one JSON line on stderr.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub problems: Vec<String>,
}

impl ErrorRecord {
    pub fn from_error(e: &anyhow::Error) -> Self {
        if let Some(c) = e.downcast_ref::<ConfigError>() {
            return ErrorRecord {
                error: "config",
                message: c.to_string(),
                problems: c.0.clone(),
            };
        }
        let kind = if e.downcast_ref::<VersionMismatch>().is_some()
            || matches!(
                e.downcast_ref::<cascade_rec::models::CheckpointError>(),
                Some(cascade_rec::models::CheckpointError::Version { .. })
            ) {
            "version"
        } else if e.downcast_ref::<TrainError>().is_some() {
            "training"
        } else if e.downcast_ref::<cascade_rec::models::CheckpointError>().is_some() {
            "checkpoint"
        } else if e.downcast_ref::<cascade_rec::data::DataError>().is_some() {
            "data"
        } else {
            "runtime"
        };
        ErrorRecord {
            error: kind,
            message: format!("{:#}", e),
            problems: Vec::new(),
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let r = resolve(&args)?;
            let out = cmd_train(&r)?;
            println!("{}", serde_json::to_string_pretty(&out.summary())?);
        }
        Command::Eval { checkpoint, split, config } => {
            let r = resolve(&config)?;
            let split = match split.as_str() {
                "test" => Split::Test,
                "valid" | "validation" => Split::Validation,
                other => bail!(ConfigError(vec![format!("split: '{}' is not one of test, valid", other)])),
            };
            let report = cmd_eval(&r, &checkpoint, split)?;
            println!("{}", serde_json::to_string_pretty(&without_ranks(&report))?);
        }
        Command::Attack {
            checkpoint,
            position,
            max_k,
            attack_epsilon,
            strict,
            config,
        } => {
            let r = resolve(&config)?;
            let eps = attack_epsilon.unwrap_or(r.config.epsilon);
            let text = cmd_attack(&r, &checkpoint, &position, max_k, eps, strict)?;
            print!("{}", text);
        }
        Command::SweepEpsilon { epsilons, config } => {
            let r = resolve(&config)?;
            let rows = cmd_sweep_epsilon(&r, &epsilons)?;
            let mut out = Vec::new();
            write_sweep_csv(&rows, &mut out)?;
            print!("{}", String::from_utf8(out)?);
        }
        Command::DatasetStats(args) => {
            let r = resolve(&args)?;
            let ds = load_dataset(&r)?;
            let mut v = serde_json::to_value(ds.summary())?;
            v["fingerprint"] = json!(r.config.fingerprint());
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
    }
    Ok(())
}

fn resolve(args: &ConfigArgs) -> Result<Resolved> {
    Ok(ExperimentConfig::load(args.config.as_deref(), &args.overrides)?)
}

fn without_ranks(report: &MetricsReport) -> Value {
    let mut v = serde_json::to_value(report).expect("report serializes");
    if let Value::Object(m) = &mut v {
        m.remove("ranks");
    }
    v
}

pub fn load_dataset(r: &Resolved) -> Result<SequenceDataset> {
    let c = &r.config;
    let log = if c.dataset == "synthetic" {
        sparse_log(&r.synthetic())
    } else {
        load_interactions(&c.dataset, r.format).with_context(|| format!("reading {}", c.dataset))?
    };
    Ok(build_dataset(&log, c.min_interactions, c.max_len)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

fn save_checkpoint(trainer: &Trainer, r: &Resolved, path: &Path) -> Result<()> {
    let mut ckpt = trainer.checkpoint();
    ckpt.training["fingerprint"] = json!(r.config.fingerprint());
    ckpt.training["config"] = serde_json::to_value(&r.config)?;
    ckpt.save(path)?;
    Ok(())
}

/// Everything a training run leaves behind.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub fingerprint: String,
    pub log: Vec<EpochRecord>,
    pub valid: MetricsReport,
    pub test: MetricsReport,
    pub output_dir: PathBuf,
    pub model: SeqRecModel,
}

impl TrainOutcome {
    pub fn summary(&self) -> Value {
        json!({
            "fingerprint": self.fingerprint,
            "epochs": self.log.len(),
            "valid": without_ranks(&self.valid),
            "test": without_ranks(&self.test),
            "output_dir": self.output_dir,
        })
    }
}

/// Trains per the config. Writes into `output_dir`: `config.json`,
/// `train_log.jsonl`, `base_checkpoint.json` (end of phase 1, when phase 1
/// runs here), `checkpoint.json` and `metrics.json`.
pub fn cmd_train(r: &Resolved) -> Result<TrainOutcome> {
    let ds = load_dataset(r)?;
    train_on(r, &ds, r.mode)
}

pub fn train_on(r: &Resolved, ds: &SequenceDataset, mode: TrainingMode) -> Result<TrainOutcome> {
    let dir = r.config.output_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let fingerprint = r.config.fingerprint();
    write_json(&dir.join("config.json"), &json!({ "fingerprint": fingerprint, "config": r.config }))?;

    let schedule = r.schedule(mode);
    let mut trainer = if r.config.resume_from.is_empty() {
        let model = SeqRecModel::new(r.model_config(ds.num_items()), schedule.seeds.init)?;
        Trainer::new(ds, model, schedule)?
    } else {
        let ckpt = Checkpoint::load(&r.config.resume_from)?;
        Trainer::resume(ds, &ckpt, schedule)?
    };

    let mut log_file = BufWriter::new(File::create(dir.join("train_log.jsonl"))?);
    let mut log = Vec::new();
    while !trainer.is_finished() {
        let rec = match trainer.run_epoch() {
            Ok(rec) => rec,
            Err(TrainError::Diverged {
                epoch,
                step,
                detail,
                snapshot,
            }) => {
                let path = dir.join("diverged_checkpoint.json");
                snapshot.save(&path)?;
                bail!(TrainError::Diverged {
                    epoch,
                    step,
                    detail: format!("{} (snapshot in {})", detail, path.display()),
                    snapshot,
                });
            }
            Err(e) => return Err(e.into()),
        };
        let mut line = serde_json::to_value(&rec)?;
        line["fingerprint"] = json!(fingerprint);
        writeln!(log_file, "{}", line)?;
        log_file.flush()?;
        if rec.epoch == trainer.schedule().base_epochs {
            save_checkpoint(&trainer, r, &dir.join("base_checkpoint.json"))?;
        }
        log.push(rec);
    }
    save_checkpoint(&trainer, r, &dir.join("checkpoint.json"))?;

    let model = trainer.into_model();
    let k = r.config.k;
    let mut valid = evaluate(&model, ds, Split::Validation, k)?;
    let mut test = evaluate(&model, ds, Split::Test, k)?;
    valid.fingerprint = Some(fingerprint.clone());
    test.fingerprint = Some(fingerprint.clone());
    write_json(
        &dir.join("metrics.json"),
        &json!({ "fingerprint": fingerprint, "valid": without_ranks(&valid), "test": without_ranks(&test) }),
    )?;
    Ok(TrainOutcome {
        fingerprint,
        log,
        valid,
        test,
        output_dir: dir,
        model,
    })
}

fn load_model(path: &Path, ds: &SequenceDataset) -> Result<SeqRecModel> {
    let model = Checkpoint::load(path)?.to_model()?;
    let c = model.config();
    if c.num_items != ds.num_items() || c.max_len != ds.max_len() {
        return Err(VersionMismatch(format!(
            "checkpoint expects {} items and T = {}, the dataset has {} items and T = {}",
            c.num_items,
            c.max_len,
            ds.num_items(),
            ds.max_len()
        ))
        .into());
    }
    Ok(model)
}

pub fn cmd_eval(r: &Resolved, checkpoint: &Path, split: Split) -> Result<MetricsReport> {
    let ds = load_dataset(r)?;
    let model = load_model(checkpoint, &ds)?;
    let mut report = evaluate(&model, &ds, split, r.config.k)?;
    report.fingerprint = Some(r.config.fingerprint());
    Ok(report)
}

/// CSV text: one row for a single-position attack, or rows `K = 1..=max_k`
/// for `last_k`.
pub fn cmd_attack(r: &Resolved, checkpoint: &Path, position: &str, max_k: usize, epsilon: f64, strict: bool) -> Result<String> {
    let ds = load_dataset(r)?;
    let model = load_model(checkpoint, &ds)?;
    let k = r.config.k;
    let mut out = Vec::new();
    let single = match position {
        "first" => Some(AttackPosition::First),
        "middle" => Some(AttackPosition::Middle),
        "last" => Some(AttackPosition::Last),
        "last_k" => None,
        other => bail!(ConfigError(vec![format!("position: '{}' is not one of first, middle, last, last_k", other)])),
    };
    match single {
        Some(p) => {
            let mut spec = AttackSpec::new(p, epsilon);
            spec.strict_exclusion = strict;
            let report = robustness_eval(&model, &ds, &spec, k)?;
            write_robustness_csv(&[report], &mut out)?;
        }
        None => {
            if max_k == 0 {
                bail!(ConfigError(vec!["max_k must be positive".into()]));
            }
            let curve = last_k_curve(&model, &ds, max_k, epsilon, k, max_k)?;
            write_curve_csv(&curve[1..], &mut out)?;
        }
    }
    Ok(String::from_utf8(out)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub valid_ndcg: f64,
    pub valid_hit: f64,
    pub test_ndcg: f64,
    pub test_hit: f64,
}

/// Runs phase 1 once (or reuses `resume_from`), then phase 2 per epsilon
/// from that same checkpoint, each in `output_dir/eps_<value>`.
pub fn cmd_sweep_epsilon(r: &Resolved, epsilons: &[f64]) -> Result<Vec<SweepRow>> {
    if r.mode == TrainingMode::Base {
        bail!(ConfigError(vec!["sweep-epsilon needs an adversarial mode".into()]));
    }
    if let Some(bad) = epsilons.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        bail!(ConfigError(vec![format!("epsilon must be non-negative (got {})", bad)]));
    }
    let ds = load_dataset(r)?;
    let root = r.config.output_dir();
    let base_ckpt = if r.config.resume_from.is_empty() {
        let mut base = r.clone();
        base.config.output_dir = root.join("base").to_string_lossy().into_owned();
        train_on(&base, &ds, TrainingMode::Base)?;
        root.join("base").join("base_checkpoint.json")
    } else {
        PathBuf::from(&r.config.resume_from)
    };
    let fingerprint = r.config.fingerprint();
    let mut rows = Vec::new();
    for &eps in epsilons {
        let mut run = r.clone();
        run.config.epsilon = eps;
        run.config.resume_from = base_ckpt.to_string_lossy().into_owned();
        run.config.output_dir = root.join(format!("eps_{}", eps)).to_string_lossy().into_owned();
        let out = train_on(&run, &ds, r.mode)?;
        rows.push(SweepRow {
            epsilon: eps,
            valid_ndcg: out.valid.ndcg,
            valid_hit: out.valid.hit,
            test_ndcg: out.test.ndcg,
            test_hit: out.test.hit,
        });
    }
    let mut f = File::create(root.join("sweep.csv"))?;
    write_sweep_csv(&rows, &mut f)?;
    writeln!(File::create(root.join("sweep.fingerprint"))?, "{}", fingerprint)?;
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epsilon,valid_ndcg,valid_hit,test_ndcg,test_hit")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.epsilon, r.valid_ndcg, r.valid_hit, r.test_ndcg, r.test_hit)?;
    }
    Ok(())
}
