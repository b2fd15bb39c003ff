//! Dense tensors, reverse-mode gradients and the linear algebra the rest of
//! the crate builds on.

pub mod gradcheck;
pub mod linalg;
pub mod tape;
pub mod tensor;

pub use gradcheck::{central_difference, finite_difference_check, input_gradient, max_relative_error};
pub use linalg::{extremal_singular_values, gram_extremal_singular_values, singular_values, spectral_norm};
pub use tape::{Tape, Var};
pub use tensor::{cosine_rows, softmax_rows, Precision, Tensor};
