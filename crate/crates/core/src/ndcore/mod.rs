//! Dense matrices, numerically stable primitives, the Adam update and the
//! seeded random source every other module builds on.

mod matrix;
mod ops;
mod param;
mod rng;

pub use matrix::Matrix;
pub use ops::{
    l2_normalize_rows, l2_normalize_rows_backward, leaky_relu, leaky_relu_backward,
    logsumexp_stable, softmax_in_place, NORM_FLOOR,
};
pub use param::{adam_step, AdamConfig, Param};
pub use rng::Rng;
