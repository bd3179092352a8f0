//! FGSM perturbations at both levels of the model, the adversarial losses,
//! and the per-step objective for every training mode.
//!
//! Level 1 perturbs the embedded input sequence `S` and measures how far the
//! final user embedding moves. Level 2 perturbs the user and item embeddings
//! inside the linear scorer and re-applies BCE.

mod train;

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cascade::CascadeVariant;
use crate::data::TrainingBatch;
use crate::models::{bce_loss, rowdot, Bound, ForwardCtx, ModelError, SeqLayout, SeqRecModel};
use crate::numerics::{l2_normalize, l2_normalize_rows, NumericsError, Scalar, Tape, Tensor, Var, ZERO_NORM_THRESHOLD};

pub use train::{derive_seed, EpochRecord, Schedule, Seeds, TrainError, Trainer};

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    #[default]
    Base,
    AdvLinear,
    AdvSeq,
    AdvGlobal,
    AdvCas,
    AdvCas1,
    AdvCas2,
}

impl TrainingMode {
    pub const ALL: [TrainingMode; 7] = [
        TrainingMode::Base,
        TrainingMode::AdvLinear,
        TrainingMode::AdvSeq,
        TrainingMode::AdvGlobal,
        TrainingMode::AdvCas,
        TrainingMode::AdvCas1,
        TrainingMode::AdvCas2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainingMode::Base => "base",
            TrainingMode::AdvLinear => "adv_linear",
            TrainingMode::AdvSeq => "adv_seq",
            TrainingMode::AdvGlobal => "adv_global",
            TrainingMode::AdvCas => "adv_cas",
            TrainingMode::AdvCas1 => "adv_cas_1",
            TrainingMode::AdvCas2 => "adv_cas_2",
        }
    }

    pub fn uses_level1(self) -> bool {
        !matches!(self, TrainingMode::Base | TrainingMode::AdvLinear)
    }

    pub fn uses_level2(self) -> bool {
        !matches!(self, TrainingMode::Base | TrainingMode::AdvSeq)
    }

    /// Cascade variant that rescales level-1 perturbations, if any.
    pub fn cascade_variant(self) -> Option<CascadeVariant> {
        match self {
            TrainingMode::AdvCas => Some(CascadeVariant::Full),
            TrainingMode::AdvCas1 => Some(CascadeVariant::SameSequenceOnly),
            TrainingMode::AdvCas2 => Some(CascadeVariant::CrossSequenceOnly),
            _ => None,
        }
    }
}

impl FromStr for TrainingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrainingMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode '{}' (expected one of base, adv_linear, adv_seq, adv_global, adv_cas, adv_cas_1, adv_cas_2)", s))
    }
}

/// How level-1 gradients are normalized.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One direction per user sequence, `||A_i|| = eps`.
    #[default]
    Sequence,
    /// Every real position gets its own `eps`-norm vector.
    Position,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvConfig {
    pub epsilon: Scalar,
    pub lambda1: Scalar,
    pub lambda2: Scalar,
    /// Radius of the random probe used to find the level-1 ascent
    /// direction; the level-1 loss is flat at `A = 0`.
    pub probe_radius: Scalar,
    pub granularity: Granularity,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            epsilon: 10.0,
            lambda1: 1.0,
            lambda2: 1.0,
            probe_radius: 1e-3,
            granularity: Granularity::Sequence,
        }
    }
}

impl AdvConfig {
    pub fn level1(&self, mode: TrainingMode) -> bool {
        mode.uses_level1() && self.lambda1 != 0.0
    }

    pub fn level2(&self, mode: TrainingMode) -> bool {
        mode.uses_level2() && self.lambda2 != 0.0
    }
}

/// `eps * g / ||g||` over the whole tensor, zero when `g` vanishes.
pub fn fgsm_l2(grad: &Tensor, epsilon: Scalar) -> Result<Tensor, NumericsError> {
    check_eps(epsilon)?;
    Ok(l2_normalize(grad).scaled(epsilon))
}

/// `eps * g_r / ||g_r||` for every trailing-axis row `g_r`.
pub fn fgsm_l2_rows(grad: &Tensor, epsilon: Scalar) -> Result<Tensor, NumericsError> {
    check_eps(epsilon)?;
    Ok(l2_normalize_rows(grad).scaled(epsilon))
}

/// `eps * sign(g)` with `sign(0) = 0`.
pub fn fgsm_sign(grad: &Tensor, epsilon: Scalar) -> Tensor {
    grad.map(|g| {
        if g > 0.0 {
            epsilon
        } else if g < 0.0 {
            -epsilon
        } else {
            0.0
        }
    })
}

fn check_eps(epsilon: Scalar) -> Result<(), NumericsError> {
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(NumericsError::Contract(format!("epsilon must be finite and non-negative (got {})", epsilon)));
    }
    Ok(())
}

/// Perturbations for one batch, all treated as constants by the update.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationBundle {
    pub epsilon: Scalar,
    /// `[b, width, d]`, before cascade rescaling.
    pub a: Option<Tensor>,
    /// `[b * width, d]` each.
    pub delta_u: Option<Tensor>,
    pub delta_pos: Option<Tensor>,
    pub delta_neg: Option<Tensor>,
}

pub fn batch_layout(batch: &TrainingBatch) -> SeqLayout {
    SeqLayout::from_ids(&batch.input_ids, batch.len(), batch.width, batch.offset)
}

/// Builds the FGSM perturbations for `batch` on a private tape where every
/// parameter is a constant, so nothing here reaches the parameter update.
pub fn build_perturbations(
    model: &SeqRecModel,
    batch: &TrainingBatch,
    mode: TrainingMode,
    cfg: &AdvConfig,
    ctx: ForwardCtx,
    probe_seed: u64,
) -> Result<PerturbationBundle, ModelError> {
    check_eps(cfg.epsilon)?;
    let mut bundle = PerturbationBundle {
        epsilon: cfg.epsilon,
        a: None,
        delta_u: None,
        delta_pos: None,
        delta_neg: None,
    };
    let (l1, l2) = (cfg.level1(mode), cfg.level2(mode));
    if !l1 && !l2 {
        return Ok(bundle);
    }
    let layout = batch_layout(batch);
    let (b, w, d) = (layout.batch, layout.width, model.config().dim);
    let s_val = model.embed_values(&batch.input_ids, &layout);

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let s = tape.constant(s_val.clone())?;
    let clean = model.encode(&mut tape, &bound, s, &layout, ctx)?;

    if l2 {
        let w_leaf = tape.leaf(tape.value(clean).clone().reshape(&[b * w, d])?)?;
        let table = model.output_embeddings();
        let gather = |ids: &[usize]| {
            let mut data = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                data.extend_from_slice(table.row(i));
            }
            Tensor::new(vec![ids.len(), d], data)
        };
        let ep = tape.leaf(gather(&batch.target_ids)?)?;
        let en = tape.leaf(gather(&batch.negative_ids)?)?;
        let pos = rowdot(&mut tape, w_leaf, ep)?;
        let neg = rowdot(&mut tape, w_leaf, en)?;
        let loss = bce_loss(&mut tape, pos, neg, &batch.mask)?;
        let g = tape.backward(loss)?;
        let make = |v: Var| -> Result<Tensor, NumericsError> {
            let mut t = fgsm_l2_rows(g.get(v)?, cfg.epsilon)?;
            zero_rows(&mut t, &batch.mask);
            Ok(t)
        };
        bundle.delta_u = Some(make(w_leaf)?);
        bundle.delta_pos = Some(make(ep)?);
        bundle.delta_neg = Some(make(en)?);
    }

    if l1 {
        let clean_last = tape.select1(clean, w - 1)?;
        let target = tape.constant(tape.value(clean_last).clone())?;
        let mut probe = random_direction(&layout, d, probe_seed);
        for (x, p) in probe.data_mut().iter_mut().zip(s_val.data()) {
            *x = p + cfg.probe_radius * *x;
        }
        let x = tape.leaf(probe)?;
        let moved = model.encode(&mut tape, &bound, x, &layout, ctx)?;
        let moved_last = tape.select1(moved, w - 1)?;
        let diff = tape.sub(moved_last, target)?;
        let norms = tape.row_norm(diff)?;
        let loss = tape.sum(norms)?;
        let g = tape.backward(loss)?;
        let mut a = match cfg.granularity {
            Granularity::Sequence => fgsm_l2_rows(&g.get(x)?.clone().reshape(&[b, w * d])?, cfg.epsilon)?.reshape(&[b, w, d])?,
            Granularity::Position => fgsm_l2_rows(g.get(x)?, cfg.epsilon)?,
        };
        zero_rows(&mut a, &layout.real);
        bundle.a = Some(a);
    }
    Ok(bundle)
}

fn zero_rows(t: &mut Tensor, keep: &[bool]) {
    let d = t.last_dim();
    for (row, &k) in t.data_mut().chunks_mut(d).zip(keep) {
        if !k {
            row.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Gaussian direction with unit norm per sequence, zero at padding.
fn random_direction(layout: &SeqLayout, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::from_fn(&[layout.batch, layout.width, d], |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z as Scalar
    });
    zero_rows(&mut t, &layout.real);
    let per_row = layout.width * d;
    for row in t.data_mut().chunks_mut(per_row) {
        let norm = row.iter().map(|x| x * x).sum::<Scalar>().sqrt();
        if norm > ZERO_NORM_THRESHOLD {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
    t
}

/// `scale (b x width) ⊙ A (b x width x d)`, broadcasting over `d`.
pub fn scale_perturbation(a: &Tensor, scales: &[Scalar]) -> Result<Tensor, NumericsError> {
    let d = a.last_dim();
    if a.rank() != 3 || scales.len() * d != a.len() {
        return Err(NumericsError::Contract(format!(
            "{} scales cannot broadcast over perturbation {:?}",
            scales.len(),
            a.shape()
        )));
    }
    let mut out = a.clone();
    for (row, &s) in out.data_mut().chunks_mut(d).zip(scales) {
        row.iter_mut().for_each(|x| *x *= s);
    }
    Ok(out)
}

/// `||f(S + A) - f(S)||` at the final position, averaged over rows with at
/// least one real position. `clean` is the already-computed `f(S)`.
#[allow(clippy::too_many_arguments)]
pub fn adv1_loss(
    model: &SeqRecModel,
    tape: &mut Tape,
    bound: &Bound,
    seq: Var,
    clean: Var,
    perturbation: &Tensor,
    layout: &SeqLayout,
    ctx: ForwardCtx,
) -> Result<Var, ModelError> {
    if tape.shape(seq) != perturbation.shape() {
        return Err(NumericsError::Contract(format!(
            "perturbation {:?} does not match sequence {:?}",
            perturbation.shape(),
            tape.shape(seq)
        ))
        .into());
    }
    let rows = (0..layout.batch).filter(|&u| layout.real[(u + 1) * layout.width - 1]).count();
    if rows == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0))?);
    }
    let p = tape.constant(perturbation.clone())?;
    let x = tape.add(seq, p)?;
    let moved = model.encode(tape, bound, x, layout, ctx)?;
    let moved_last = tape.select1(moved, layout.width - 1)?;
    let clean_last = tape.select1(clean, layout.width - 1)?;
    let diff = tape.sub(moved_last, clean_last)?;
    let norms = tape.row_norm(diff)?;
    let total = tape.sum(norms)?;
    Ok(tape.scale(total, 1.0 / rows as Scalar)?)
}

/// BCE on `(w + du) . (e + de)` for positive and negative items.
#[allow(clippy::too_many_arguments)]
pub fn adv2_loss(
    tape: &mut Tape,
    w: Var,
    e_pos: Var,
    e_neg: Var,
    delta_u: &Tensor,
    delta_pos: &Tensor,
    delta_neg: &Tensor,
    mask: &[bool],
) -> Result<Var, NumericsError> {
    let du = tape.constant(delta_u.clone())?;
    let dp = tape.constant(delta_pos.clone())?;
    let dn = tape.constant(delta_neg.clone())?;
    let wp = tape.add(w, du)?;
    let ep = tape.add(e_pos, dp)?;
    let en = tape.add(e_neg, dn)?;
    let pos = rowdot(tape, wp, ep)?;
    let neg = rowdot(tape, wp, en)?;
    bce_loss(tape, pos, neg, mask)
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: Scalar,
    pub l_b: Scalar,
    pub l_adv1: Scalar,
    pub l_adv2: Scalar,
}

/// Total objective for one batch and its gradients, in parameter order.
/// `scales` multiplies `A` per position (ones for the unscaled modes).
#[allow(clippy::too_many_arguments)]
pub fn step_gradients(
    model: &SeqRecModel,
    batch: &TrainingBatch,
    mode: TrainingMode,
    cfg: &AdvConfig,
    bundle: &PerturbationBundle,
    scales: &[Scalar],
    ctx: ForwardCtx,
) -> Result<(StepLosses, Vec<Tensor>), ModelError> {
    let layout = batch_layout(batch);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true)?;
    let s = model.embed_sequence(&mut tape, &bound, &batch.input_ids, &layout)?;
    let (l_b, clean, flat) = model.batch_loss(
        &mut tape,
        &bound,
        s,
        &layout,
        &batch.target_ids,
        &batch.negative_ids,
        &batch.mask,
        ctx,
    )?;
    let mut total = l_b;
    let mut losses = StepLosses {
        l_b: tape.value(l_b).item(),
        ..Default::default()
    };
    if cfg.level1(mode) {
        let a = bundle.a.as_ref().ok_or_else(|| NumericsError::Contract("level-1 perturbation missing".into()))?;
        let scaled = scale_perturbation(a, scales)?;
        let l1 = adv1_loss(model, &mut tape, &bound, s, clean, &scaled, &layout, ctx)?;
        losses.l_adv1 = tape.value(l1).item();
        let weighted = tape.scale(l1, cfg.lambda1)?;
        total = tape.add(total, weighted)?;
    }
    if cfg.level2(mode) {
        let missing = || NumericsError::Contract("level-2 perturbation missing".into());
        let table = bound.var(model.output_table_index());
        let ep = tape.gather(table, &batch.target_ids)?;
        let en = tape.gather(table, &batch.negative_ids)?;
        let l2 = adv2_loss(
            &mut tape,
            flat,
            ep,
            en,
            bundle.delta_u.as_ref().ok_or_else(missing)?,
            bundle.delta_pos.as_ref().ok_or_else(missing)?,
            bundle.delta_neg.as_ref().ok_or_else(missing)?,
            &batch.mask,
        )?;
        losses.l_adv2 = tape.value(l2).item();
        let weighted = tape.scale(l2, cfg.lambda2)?;
        total = tape.add(total, weighted)?;
    }
    losses.total = tape.value(total).item();
    let grads = tape.backward(total)?;
    let out = bound.vars().iter().map(|&v| grads.get(v).cloned()).collect::<Result<_, _>>()?;
    Ok((losses, out))
}

/// Ones at real positions, zeros at padding.
pub fn unit_scales(batch: &TrainingBatch) -> Vec<Scalar> {
    batch.input_ids.iter().map(|&i| if i == crate::data::PAD { 0.0 } else { 1.0 }).collect()
}
