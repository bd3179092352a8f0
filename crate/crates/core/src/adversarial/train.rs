use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{build_perturbations, step_gradients, unit_scales, AdvConfig, StepLosses, TrainingMode};
use crate::cascade::{compute_cascade_matrix, CascadeMatrix, Normalization};
use crate::data::{BatchSampler, NegativePolicy, SequenceDataset, Split};
use crate::evaluation::{evaluate, EvalError};
use crate::models::{Adam, AdamConfig, Checkpoint, ForwardCtx, ModelError, SeqRecModel};
use crate::numerics::{NumericsError, Scalar};

/// SplitMix64 over `base` and each part in turn.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Independent named streams, all derived from one master seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub init: u64,
    pub shuffle: u64,
    pub negative: u64,
    pub dropout: u64,
    pub perturb: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        Seeds {
            master,
            init: derive_seed(master, &[1]),
            shuffle: derive_seed(master, &[2]),
            negative: derive_seed(master, &[3]),
            dropout: derive_seed(master, &[4]),
            perturb: derive_seed(master, &[5]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub mode: TrainingMode,
    pub base_epochs: usize,
    pub adv_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub adv: AdvConfig,
    pub negative_policy: NegativePolicy,
    pub normalization: Normalization,
    /// Validate every this many epochs (and at the end of each phase); 0
    /// validates only at phase ends.
    pub eval_every: usize,
    pub trim_batches: bool,
    pub seeds: Seeds,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            mode: TrainingMode::Base,
            base_epochs: 500,
            adv_epochs: 100,
            batch_size: 128,
            adam: AdamConfig::default(),
            adv: AdvConfig::default(),
            negative_policy: NegativePolicy::ExcludeTarget,
            normalization: Normalization::MeanOne,
            eval_every: 10,
            trim_batches: true,
            seeds: Seeds::from_master(0),
        }
    }
}

impl Schedule {
    /// Phase 2 only runs for adversarial modes.
    pub fn total_epochs(&self) -> usize {
        self.base_epochs + if self.mode == TrainingMode::Base { 0 } else { self.adv_epochs }
    }

    pub fn phase_of(&self, epoch: usize) -> u8 {
        if epoch <= self.base_epochs {
            1
        } else {
            2
        }
    }
}

/// One JSON-lines record per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub mode: String,
    #[serde(rename = "L_B")]
    pub l_b: Scalar,
    #[serde(rename = "L_adv1")]
    pub l_adv1: Scalar,
    #[serde(rename = "L_adv2")]
    pub l_adv2: Scalar,
    #[serde(rename = "valid_NDCG@10")]
    pub valid_ndcg: Option<Scalar>,
    #[serde(rename = "valid_HT@10")]
    pub valid_ht: Option<Scalar>,
    pub wall_seconds: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
        /// Parameters and optimizer state just before the failing step.
        snapshot: Box<Checkpoint>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Config(String),
}

/// Two-phase trainer: `base_epochs` of plain BCE, then `adv_epochs` of the
/// mode's adversarial objective. State is fully captured by the model,
/// optimizer and the count of finished epochs, so a run can stop after any
/// epoch and resume bit-for-bit.
pub struct Trainer<'d> {
    dataset: &'d SequenceDataset,
    model: SeqRecModel,
    optimizer: Adam,
    schedule: Schedule,
    epochs_done: usize,
    cascade: Option<CascadeMatrix>,
}

impl<'d> Trainer<'d> {
    pub fn new(dataset: &'d SequenceDataset, model: SeqRecModel, schedule: Schedule) -> Result<Self, TrainError> {
        validate(dataset, &model, &schedule)?;
        Ok(Trainer {
            dataset,
            model,
            optimizer: Adam::new(schedule.adam.clone()),
            schedule,
            epochs_done: 0,
            cascade: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`]. The
    /// schedule may differ (typically a new mode for phase 2).
    pub fn resume(dataset: &'d SequenceDataset, checkpoint: &Checkpoint, schedule: Schedule) -> Result<Self, TrainError> {
        let model = checkpoint.to_model().map_err(|e| TrainError::Config(e.to_string()))?;
        validate(dataset, &model, &schedule)?;
        let epochs_done = checkpoint
            .training
            .get("epochs_done")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| TrainError::Config("checkpoint has no epochs_done".into()))? as usize;
        let optimizer = match &checkpoint.optimizer {
            Some((_, state)) => Adam::with_state(schedule.adam.clone(), state.clone()),
            None => Adam::new(schedule.adam.clone()),
        };
        Ok(Trainer {
            dataset,
            model,
            optimizer,
            schedule,
            epochs_done,
            cascade: None,
        })
    }

    pub fn model(&self) -> &SeqRecModel {
        &self.model
    }

    pub fn into_model(self) -> SeqRecModel {
        self.model
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done >= self.schedule.total_epochs()
    }

    pub fn cascade(&self) -> Option<&CascadeMatrix> {
        self.cascade.as_ref()
    }

    /// Uses `cascade` instead of computing one from the dataset. It is kept
    /// as long as its variant matches the mode's.
    pub fn with_cascade(mut self, cascade: CascadeMatrix) -> Result<Self, TrainError> {
        let want = self.dataset.num_users() * self.dataset.max_len();
        if cascade.scale.len() != want {
            return Err(TrainError::Config(format!(
                "cascade covers {} cells, the dataset needs {}",
                cascade.scale.len(),
                want
            )));
        }
        self.cascade = Some(cascade);
        Ok(self)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            &self.model,
            Some((self.optimizer.config.clone(), self.optimizer.state().clone())),
            serde_json::json!({
                "epochs_done": self.epochs_done,
                "schedule": self.schedule,
            }),
        )
    }

    /// Runs every remaining epoch, handing each record to `on_epoch`.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<Vec<EpochRecord>, TrainError> {
        let mut log = Vec::new();
        while !self.is_finished() {
            let rec = self.run_epoch()?;
            on_epoch(&rec);
            log.push(rec);
        }
        Ok(log)
    }

    /// Runs epochs until `epochs_done == until` (capped at the schedule).
    pub fn run_until(&mut self, until: usize, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<Vec<EpochRecord>, TrainError> {
        let mut log = Vec::new();
        while self.epochs_done < until.min(self.schedule.total_epochs()) {
            let rec = self.run_epoch()?;
            on_epoch(&rec);
            log.push(rec);
        }
        Ok(log)
    }

    fn prepare_cascade(&mut self, mode: TrainingMode) {
        if let Some(variant) = mode.cascade_variant() {
            let stale = self.cascade.as_ref().is_none_or(|c| c.variant != variant);
            if stale {
                self.cascade = Some(compute_cascade_matrix(
                    self.dataset,
                    self.schedule.batch_size,
                    variant,
                    self.schedule.normalization,
                ));
            }
        }
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord, TrainError> {
        let start = Instant::now();
        let epoch = self.epochs_done + 1;
        let phase = self.schedule.phase_of(epoch);
        let mode = if phase == 1 { TrainingMode::Base } else { self.schedule.mode };
        self.prepare_cascade(mode);
        let seeds = self.schedule.seeds.clone();
        let mut sampler = BatchSampler::new(
            self.dataset,
            self.schedule.batch_size,
            derive_seed(seeds.shuffle, &[epoch as u64]),
            derive_seed(seeds.negative, &[epoch as u64]),
        )
        .with_policy(self.schedule.negative_policy)
        .with_trim(self.schedule.trim_batches);
        let batches = sampler.epoch_batches();
        let mut sums = StepLosses::default();
        let mut weight = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let key = [epoch as u64, step as u64];
            let ctx = ForwardCtx::train(derive_seed(seeds.dropout, &key));
            let losses = self
                .train_step(batch, mode, ctx, derive_seed(seeds.perturb, &key))
                .map_err(|e| match e {
                    TrainError::Model(ModelError::Numerics(err @ NumericsError::NonFinite { .. })) => TrainError::Diverged {
                        epoch,
                        step,
                        detail: err.to_string(),
                        snapshot: Box::new(self.checkpoint()),
                    },
                    other => other,
                })?;
            let w = batch.real_positions() as Scalar;
            sums.l_b += losses.l_b * w;
            sums.l_adv1 += losses.l_adv1 * w;
            sums.l_adv2 += losses.l_adv2 * w;
            weight += w;
        }
        self.epochs_done = epoch;
        let every = self.schedule.eval_every;
        let phase_end = epoch == self.schedule.base_epochs || epoch == self.schedule.total_epochs();
        let (valid_ndcg, valid_ht) = if phase_end || (every > 0 && epoch % every == 0) {
            let m = evaluate(&self.model, self.dataset, Split::Validation, 10)?;
            (Some(m.ndcg), Some(m.hit))
        } else {
            (None, None)
        };
        let weight = if weight > 0.0 { weight } else { 1.0 };
        Ok(EpochRecord {
            epoch,
            phase,
            mode: mode.name().to_string(),
            l_b: sums.l_b / weight,
            l_adv1: sums.l_adv1 / weight,
            l_adv2: sums.l_adv2 / weight,
            valid_ndcg,
            valid_ht,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn train_step(
        &mut self,
        batch: &crate::data::TrainingBatch,
        mode: TrainingMode,
        ctx: ForwardCtx,
        probe_seed: u64,
    ) -> Result<StepLosses, TrainError> {
        let adv = &self.schedule.adv;
        let bundle = build_perturbations(&self.model, batch, mode, adv, ctx, probe_seed)?;
        let scales = match (&self.cascade, mode.cascade_variant()) {
            (Some(c), Some(_)) => c.batch_scales(&batch.users, batch.width, batch.offset),
            _ => unit_scales(batch),
        };
        let (losses, grads) = step_gradients(&self.model, batch, mode, adv, &bundle, &scales, ctx)?;
        if !losses.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(ModelError::Numerics(NumericsError::NonFinite { op: "loss" }).into());
        }
        // the optimizer updates in place; keep the pre-step state so a
        // divergence snapshot is the last good point
        let params = self.model.params().clone();
        let state = self.optimizer.state().clone();
        if let Err(e) = self.optimizer.step(self.model.params_mut(), &grads) {
            *self.model.params_mut() = params;
            self.optimizer = Adam::with_state(self.optimizer.config.clone(), state);
            return Err(ModelError::Numerics(e).into());
        }
        Ok(losses)
    }
}

fn validate(dataset: &SequenceDataset, model: &SeqRecModel, s: &Schedule) -> Result<(), TrainError> {
    let mut problems = Vec::new();
    if s.batch_size == 0 {
        problems.push("batch_size must be positive".to_string());
    }
    if s.adv.epsilon < 0.0 {
        problems.push(format!("epsilon must be non-negative (got {})", s.adv.epsilon));
    }
    if s.adam.lr <= 0.0 {
        problems.push(format!("learning rate must be positive (got {})", s.adam.lr));
    }
    if model.config().num_items != dataset.num_items() {
        problems.push(format!(
            "model has {} item rows but the dataset needs {}",
            model.config().num_items,
            dataset.num_items()
        ));
    }
    if model.config().max_len != dataset.max_len() {
        problems.push(format!("model T = {} but dataset T = {}", model.config().max_len, dataset.max_len()));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(TrainError::Config(problems.join("; ")))
    }
}
