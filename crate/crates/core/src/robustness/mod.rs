//! Proxy classification task, adversarial finetuning and transfer attacks.

pub mod eval;
pub mod fare;
pub mod task;
pub mod transfer;

pub use eval::{attack_eval, AttackEval};
pub use fare::{adversarial_feature_distance, fare_finetune, FareConfig, FareLog};
pub use task::{gen_task, pooled_feature, Classifier, Pooling, ProtoTask, Sample, TaskSpec};
pub use transfer::{transfer_matrix, NamedEncoder, TransferMatrix};
