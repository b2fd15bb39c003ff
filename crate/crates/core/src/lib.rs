//! Adversarial attacks on the patch-token features of a small vision
//! transformer, with executable checks of how those perturbations propagate.

// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod analysis;
pub mod attack;
pub mod encoder;
pub mod error;
pub mod numcore;
pub mod robustness;
pub mod toolkit;

pub use alignment::{align, prop1_check, AlignmentWeights, Prop1Record};
pub use attack::{pgd_attack, AttackConfig, AttackTrace, Objective};
pub use encoder::{encode, init_weights, EncoderConfig, EncoderWeights, TokenStates};
pub use error::{Error, Result};
pub use numcore::{Precision, Tape, Tensor, Var};
