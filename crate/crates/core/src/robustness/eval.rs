//! Accuracy before and after attack on the proxy task.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentWeights;
use crate::attack::pgd::{attack_batch, mean};
use crate::attack::AttackConfig;
use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::error::Result;
use crate::robustness::task::{Classifier, ProtoTask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackEval {
    pub clean_acc: f64,
    pub adv_acc: f64,
    pub drop: f64,
    pub mean_delta_zm: f64,
    pub mean_final_cosine: f64,
}

/// PGD on every eval image, then classification of the result.
pub fn attack_eval(
    task: &ProtoTask,
    classifier: &Classifier,
    weights: &EncoderWeights,
    enc: &EncoderConfig,
    alignment: &AlignmentWeights,
    cfg: &AttackConfig,
) -> Result<AttackEval> {
    let images = task.eval_images();
    let labels = task.eval_labels();
    let clean_acc = classifier.accuracy(&images, &labels, weights, enc, alignment)?;
    let outcomes = attack_batch(&images, weights, enc, alignment, cfg)?;
    let adv: Vec<_> = outcomes.par_iter().map(|o| o.adversarial.clone()).collect();
    let adv_acc = classifier.accuracy(&adv, &labels, weights, enc, alignment)?;
    Ok(AttackEval {
        clean_acc,
        adv_acc,
        drop: clean_acc - adv_acc,
        mean_delta_zm: mean(outcomes.iter().map(|o| o.delta_zm)),
        mean_final_cosine: mean(outcomes.iter().map(|o| o.final_cosine)),
    })
}
