//! Dense-tensor arithmetic with reverse-mode automatic differentiation and
//! optimizers, sized for desk-scale recurrent and convolutional models.

pub mod check;
pub mod checkpoint;
pub mod init;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

use rand::Rng;
use thiserror::Error;

pub use checkpoint::{load_params, save_params, ParamContainer};
pub use optim::{OptKind, Optimizer};
pub use params::{Param, ParamStore, Session};
pub use rng::{indexed_rng, stream_rng};
pub use tape::{NodeId, NumResult, Tape};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGrad(String),
    #[error("{0}")]
    Invalid(String),
}

/// Inverted-dropout mask: entries are `1 / keep` with probability `keep`,
/// else 0. In eval mode (`train == false`) the mask is all ones.
pub fn dropout_mask(rng: &mut impl Rng, shape: &[usize], rate: f64, train: bool) -> Tensor {
    if !train || rate <= 0.0 {
        return Tensor::full(shape, 1.0);
    }
    let keep = 1.0 - rate;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("dropout mask shape")
}
