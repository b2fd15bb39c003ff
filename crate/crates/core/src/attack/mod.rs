//! The PGD engine and its objectives.

pub mod loss;
pub mod pgd;
pub mod sweep;

pub use loss::{
    evaluate_objective, loss_combined, loss_cos_cls, loss_cos_patch, loss_euclid_patch, loss_kl_patch, loss_l2_cls,
    CleanFeatures, KlDirection, Objective,
};
pub use pgd::{attack_batch, image_seed, parse_budget, pgd_attack, AttackConfig, AttackOutcome, AttackTrace, Init};
pub use sweep::{sweep, SweepAxis, SweepRow};
