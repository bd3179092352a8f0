//! Flat `key = value` experiment configuration.
//!
//! Values are typed by the defaults: a key whose default is a number must
//! parse as a number, and so on. Files are read first, then command-line
//! overrides, so overrides win. Every problem found along the way is
//! collected and reported together.

use std::path::{Path, PathBuf};

use cascade_rec::adversarial::{AdvConfig, Granularity, Schedule, Seeds, TrainingMode};
use cascade_rec::cascade::Normalization;
use cascade_rec::data::synthetic::SparseLogConfig;
use cascade_rec::data::{InteractionFormat, NegativePolicy};
use cascade_rec::models::{AdamConfig, Architecture, L2Scope, ModelConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Interaction file, or `synthetic` for the built-in sparse generator.
    pub dataset: String,
    pub format: String,
    pub min_interactions: usize,
    pub synthetic_users: usize,
    pub synthetic_items: usize,
    pub synthetic_seed: u64,

    pub model: String,
    pub dim: usize,
    /// 0 picks 200 for MovieLens files and 50 otherwise.
    pub max_len: usize,
    pub blocks: usize,
    pub heads: usize,
    pub dropout: f64,
    pub share_embeddings: bool,

    pub mode: String,
    pub epsilon: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub probe_radius: f64,
    pub granularity: String,
    pub normalization: String,
    pub negatives: String,

    pub base_epochs: usize,
    pub adv_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub l2: f64,
    pub l2_scope: String,
    pub eval_every: usize,
    pub k: usize,

    pub seed: u64,
    pub output_dir: String,
    /// Checkpoint to continue from instead of starting fresh.
    pub resume_from: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: "synthetic".into(),
            format: "tsv".into(),
            min_interactions: 5,
            synthetic_users: 2100,
            synthetic_items: 1200,
            synthetic_seed: 7,
            model: "sasrec".into(),
            dim: 100,
            max_len: 0,
            blocks: 2,
            heads: 1,
            dropout: 0.2,
            share_embeddings: true,
            mode: "adv_cas".into(),
            epsilon: 10.0,
            lambda1: 1.0,
            lambda2: 1.0,
            probe_radius: 1e-3,
            granularity: "sequence".into(),
            normalization: "mean_one".into(),
            negatives: "exclude_target".into(),
            base_epochs: 500,
            adv_epochs: 100,
            batch_size: 128,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            l2: 1e-5,
            l2_scope: "embeddings".into(),
            eval_every: 10,
            k: 10,
            seed: 0,
            output_dir: "runs".into(),
            resume_from: String::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid configuration: {}", .0.join("; "))]
pub struct ConfigError(pub Vec<String>);

/// Parsed enums and numbers, ready for the library.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub format: InteractionFormat,
    pub architecture: Architecture,
    pub mode: TrainingMode,
    pub granularity: Granularity,
    pub normalization: Normalization,
    pub negatives: NegativePolicy,
    pub l2_scope: L2Scope,
}

fn parse_choice<T>(key: &str, value: &str, choices: &[(&str, T)], problems: &mut Vec<String>) -> Option<T>
where
    T: Copy,
{
    match choices.iter().find(|(name, _)| *name == value) {
        Some((_, v)) => Some(*v),
        None => {
            let names: Vec<&str> = choices.iter().map(|(n, _)| *n).collect();
            problems.push(format!("{}: '{}' is not one of {}", key, value, names.join(", ")));
            None
        }
    }
}

impl ExperimentConfig {
    /// Defaults, then `file` (if any), then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Resolved, ConfigError> {
        let mut pairs = Vec::new();
        let mut problems = Vec::new();
        if let Some(path) = file {
            match std::fs::read_to_string(path) {
                Ok(text) => {
                    for (n, line) in text.lines().enumerate() {
                        let line = line.split('#').next().unwrap_or("").trim();
                        if line.is_empty() {
                            continue;
                        }
                        match line.split_once('=') {
                            Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
                            None => problems.push(format!("{}:{}: expected key = value", path.display(), n + 1)),
                        }
                    }
                }
                Err(e) => problems.push(format!("{}: {}", path.display(), e)),
            }
        }
        for o in overrides {
            match o.split_once('=') {
                Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
                None => problems.push(format!("override '{}': expected key=value", o)),
            }
        }
        let config = Self::from_pairs(&pairs, &mut problems);
        let resolved = config.and_then(|c| c.resolve(&mut problems));
        match resolved {
            Some(r) if problems.is_empty() => Ok(r),
            _ => Err(ConfigError(problems)),
        }
    }

    fn from_pairs(pairs: &[(String, String)], problems: &mut Vec<String>) -> Option<Self> {
        let Value::Object(mut map) = serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize") else {
            unreachable!("config serializes to an object")
        };
        for (key, raw) in pairs {
            let Some(slot) = map.get_mut(key) else {
                problems.push(format!("unknown key '{}'", key));
                continue;
            };
            let parsed = match slot {
                Value::Bool(_) => raw.parse::<bool>().ok().map(Value::Bool),
                Value::Number(n) if n.is_f64() => raw.parse::<f64>().ok().and_then(|x| serde_json::Number::from_f64(x).map(Value::Number)),
                Value::Number(_) => raw.parse::<u64>().ok().map(|x| Value::Number(x.into())),
                _ => Some(Value::String(raw.clone())),
            };
            match parsed {
                Some(v) => *slot = v,
                None => problems.push(format!("{}: cannot parse '{}' as {}", key, raw, type_name(slot))),
            }
        }
        match serde_json::from_value(Value::Object(std::mem::take(&mut map))) {
            Ok(c) => Some(c),
            Err(e) => {
                problems.push(e.to_string());
                None
            }
        }
    }

    fn resolve(mut self, problems: &mut Vec<String>) -> Option<Resolved> {
        let format = match self.format.parse::<InteractionFormat>() {
            Ok(f) => Some(f),
            Err(e) => {
                problems.push(format!("format: {}", e));
                None
            }
        };
        if self.max_len == 0 {
            self.max_len = if format == Some(InteractionFormat::MovielensDat) && self.dataset != "synthetic" { 200 } else { 50 };
        }
        let architecture = parse_choice(
            "model",
            &self.model,
            &[
                ("gru4rec", Architecture::Gru4Rec),
                (
                    "sasrec",
                    Architecture::SasRec {
                        blocks: self.blocks,
                        heads: self.heads,
                    },
                ),
            ],
            problems,
        );
        let mode = match self.mode.parse::<TrainingMode>() {
            Ok(m) => Some(m),
            Err(e) => {
                problems.push(format!("mode: {}", e));
                None
            }
        };
        let granularity = parse_choice(
            "granularity",
            &self.granularity,
            &[("sequence", Granularity::Sequence), ("position", Granularity::Position)],
            problems,
        );
        let normalization = parse_choice(
            "normalization",
            &self.normalization,
            &[
                ("mean_one", Normalization::MeanOne),
                ("mean_reciprocal_one", Normalization::MeanReciprocalOne),
                ("none", Normalization::None),
            ],
            problems,
        );
        let negatives = parse_choice(
            "negatives",
            &self.negatives,
            &[("exclude_target", NegativePolicy::ExcludeTarget), ("exclude_history", NegativePolicy::ExcludeHistory)],
            problems,
        );
        let l2_scope = parse_choice("l2_scope", &self.l2_scope, &[("embeddings", L2Scope::Embeddings), ("all", L2Scope::All)], problems);

        let mut check = |ok: bool, msg: String| {
            if !ok {
                problems.push(msg);
            }
        };
        check(self.dim > 0, "dim must be positive".into());
        check(self.max_len >= 2, format!("max_len must be at least 2 (got {})", self.max_len));
        check(self.min_interactions >= 3, format!("min_interactions must be at least 3 (got {})", self.min_interactions));
        check((0.0..1.0).contains(&self.dropout), format!("dropout must lie in [0, 1) (got {})", self.dropout));
        check(self.epsilon >= 0.0 && self.epsilon.is_finite(), format!("epsilon must be non-negative (got {})", self.epsilon));
        check(self.lambda1 >= 0.0, format!("lambda1 must be non-negative (got {})", self.lambda1));
        check(self.lambda2 >= 0.0, format!("lambda2 must be non-negative (got {})", self.lambda2));
        check(self.probe_radius > 0.0, format!("probe_radius must be positive (got {})", self.probe_radius));
        check(self.batch_size > 0, "batch_size must be positive".into());
        check(self.lr > 0.0 && self.lr.is_finite(), format!("lr must be positive (got {})", self.lr));
        check((0.0..1.0).contains(&self.beta1), format!("beta1 must lie in [0, 1) (got {})", self.beta1));
        check((0.0..1.0).contains(&self.beta2), format!("beta2 must lie in [0, 1) (got {})", self.beta2));
        check(self.adam_eps > 0.0, format!("adam_eps must be positive (got {})", self.adam_eps));
        check(self.l2 >= 0.0, format!("l2 must be non-negative (got {})", self.l2));
        check(self.k > 0, "k must be positive".into());
        if self.model == "sasrec" {
            check(self.blocks > 0, "blocks must be positive".into());
            check(self.heads > 0 && self.dim % self.heads.max(1) == 0, format!("heads ({}) must divide dim ({})", self.heads, self.dim));
        }
        if self.dataset == "synthetic" {
            check(self.synthetic_users > 0 && self.synthetic_items > 1, "synthetic_users and synthetic_items must be positive".into());
        }
        Some(Resolved {
            format: format?,
            architecture: architecture?,
            mode: mode?,
            granularity: granularity?,
            normalization: normalization?,
            negatives: negatives?,
            l2_scope: l2_scope?,
            config: self,
        })
    }

    /// SHA-256 over the canonical JSON of every field except `output_dir`
    /// and `resume_from`, which say where things live, not what is computed.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            map.remove("output_dir");
            map.remove("resume_from");
        }
        // serde_json maps are ordered by key, so this text is canonical
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{:02x}", b)).collect()
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.output_dir)
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Bool(_) => "a boolean",
        Value::Number(n) if n.is_f64() => "a number",
        Value::Number(_) => "a non-negative integer",
        _ => "text",
    }
}

impl Resolved {
    pub fn model_config(&self, num_items: usize) -> ModelConfig {
        let c = &self.config;
        let mut m = ModelConfig::new(self.architecture, num_items, c.dim, c.max_len);
        m.dropout = c.dropout;
        m.share_embeddings = c.share_embeddings;
        m
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_master(self.config.seed)
    }

    pub fn schedule(&self, mode: TrainingMode) -> Schedule {
        let c = &self.config;
        Schedule {
            mode,
            base_epochs: c.base_epochs,
            adv_epochs: c.adv_epochs,
            batch_size: c.batch_size,
            adam: AdamConfig {
                lr: c.lr,
                beta1: c.beta1,
                beta2: c.beta2,
                eps: c.adam_eps,
                l2: c.l2,
                l2_scope: self.l2_scope,
            },
            adv: AdvConfig {
                epsilon: c.epsilon,
                lambda1: c.lambda1,
                lambda2: c.lambda2,
                probe_radius: c.probe_radius,
                granularity: self.granularity,
            },
            negative_policy: self.negatives,
            normalization: self.normalization,
            eval_every: c.eval_every,
            trim_batches: true,
            seeds: self.seeds(),
        }
    }

    pub fn synthetic(&self) -> SparseLogConfig {
        SparseLogConfig {
            users: self.config.synthetic_users,
            items: self.config.synthetic_items,
            seed: self.config.synthetic_seed,
            ..Default::default()
        }
    }
}
