use serde::{Deserialize, Serialize};

use super::{ParamKind, ParamStore};
use crate::data::PAD;
use crate::numerics::{NumericsError, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: Scalar,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
    /// Coefficient of `||theta||^2`.
    pub l2: Scalar,
    pub l2_scope: L2Scope,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Scope {
    /// Item and positional embedding tables.
    #[default]
    Embeddings,
    All,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 1e-5,
            l2_scope: L2Scope::Embeddings,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// Adam with an L2 penalty folded into the embedding gradients. Row 0 of the
/// item tables is never updated.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: AdamState::default(),
        }
    }

    pub fn with_state(config: AdamConfig, state: AdamState) -> Self {
        Adam { config, state }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn steps(&self) -> u64 {
        self.state.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<(), NumericsError> {
        if grads.len() != params.len() {
            return Err(NumericsError::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.state.m.is_empty() {
            self.state.m = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.state.v = self.state.m.clone();
        }
        self.state.step += 1;
        let c = &self.config;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (idx, g) in grads.iter().enumerate() {
            let p = params.get_mut(idx);
            if g.shape() != p.value.shape() {
                return Err(NumericsError::Dimension {
                    op: "adam",
                    detail: format!("gradient {:?} for {} {:?}", g.shape(), p.name, p.value.shape()),
                });
            }
            let decay = if p.kind.is_embedding() || c.l2_scope == L2Scope::All { 2.0 * c.l2 } else { 0.0 };
            let frozen = match p.kind {
                ParamKind::ItemEmbedding | ParamKind::OutputEmbedding => p.value.last_dim(),
                _ => 0,
            };
            let (m, v) = (&mut self.state.m[idx], &mut self.state.v[idx]);
            let theta = p.value.data_mut();
            for i in frozen..theta.len() {
                let gi = g.data()[i] + decay * theta[i];
                let mi = &mut m.data_mut()[i];
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                theta[i] -= c.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
            }
            if frozen > 0 {
                p.value.row_mut(PAD).iter_mut().for_each(|x| *x = 0.0);
            }
            if !p.value.is_finite() {
                return Err(NumericsError::NonFinite { op: "adam" });
            }
        }
        Ok(())
    }
}
