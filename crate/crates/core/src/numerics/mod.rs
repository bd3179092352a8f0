//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! The scalar type is chosen once for the whole build: `f64` by default,
//! `f32` with the `f32` cargo feature.

mod kernels;
mod tape;
mod tensor;

pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(not(feature = "f32"))]
pub type Scalar = f64;
#[cfg(feature = "f32")]
pub type Scalar = f32;

/// Norms at or below this are treated as zero: normalization returns the zero
/// tensor and norm gradients vanish.
pub const ZERO_NORM_THRESHOLD: Scalar = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("unknown variable: {0}")]
    UnknownVar(&'static str),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// `v / ||v||`, or zeros when the norm is at most [`ZERO_NORM_THRESHOLD`].
pub fn l2_normalize(v: &Tensor) -> Tensor {
    let norm = v.norm_l2();
    if norm > ZERO_NORM_THRESHOLD {
        v.map(|x| x / norm)
    } else {
        Tensor::zeros(v.shape())
    }
}

/// `a b^T` for `a: [m, k]` and `b: [n, k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(NumericsError::Dimension {
            op: "matmul_nt",
            detail: format!("{:?} x {:?}^T", a.shape(), b.shape()),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, a.data(), kernels::Trans::No, b.data(), kernels::Trans::Yes, &mut out, 0.0);
    Tensor::new(vec![m, n], out)
}

/// Normalizes each trailing-axis row independently.
pub fn l2_normalize_rows(v: &Tensor) -> Tensor {
    let mut out = v.clone();
    let d = v.last_dim();
    for row in out.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<Scalar>().sqrt();
        if norm > ZERO_NORM_THRESHOLD {
            row.iter_mut().for_each(|x| *x /= norm);
        } else {
            row.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    out
}

#[cfg(test)]
mod tests;
