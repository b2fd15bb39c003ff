//! Step-count and budget sweeps.

use serde::{Deserialize, Serialize};

use super::pgd::{attack_batch, mean, AttackConfig};
use crate::alignment::AlignmentWeights;
use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Steps(Vec<usize>),
    Epsilon(#[serde(deserialize_with = "budget_list")] Vec<f64>),
}

fn budget_list<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    struct Wrap(#[serde(deserialize_with = "super::pgd::budget_de")] f64);
    let v: Vec<Wrap> = Vec::deserialize(d)?;
    Ok(v.into_iter().map(|w| w.0).collect())
}

impl SweepAxis {
    fn len(&self) -> usize {
        match self {
            SweepAxis::Steps(v) => v.len(),
            SweepAxis::Epsilon(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub epsilon: f64,
    pub mean_final_cosine: f64,
    pub mean_delta_zv: f64,
    pub mean_delta_zm: f64,
}

/// One row per setting: batch means of the final patch cosine, `‖Δz_v‖_F`
/// and `‖Δz_m‖_F`. When sweeping ε the step size follows `template.alpha`,
/// capped at ε.
pub fn sweep(
    images: &[Tensor],
    weights: &EncoderWeights,
    enc: &EncoderConfig,
    alignment: &AlignmentWeights,
    template: &AttackConfig,
    axis: &SweepAxis,
) -> Result<Vec<SweepRow>> {
    if images.is_empty() {
        return Err(Error::invalid("sweep needs at least one image"));
    }
    if axis.len() == 0 {
        return Err(Error::invalid("sweep needs at least one setting"));
    }
    let settings: Vec<AttackConfig> = match axis {
        SweepAxis::Steps(v) => v
            .iter()
            .map(|&steps| AttackConfig {
                steps,
                ..template.clone()
            })
            .collect(),
        SweepAxis::Epsilon(v) => v
            .iter()
            .map(|&epsilon| AttackConfig {
                epsilon,
                alpha: template.alpha.min(epsilon),
                ..template.clone()
            })
            .collect(),
    };
    settings
        .iter()
        .map(|cfg| {
            let out = attack_batch(images, weights, enc, alignment, cfg)?;
            Ok(SweepRow {
                steps: cfg.steps,
                epsilon: cfg.epsilon,
                mean_final_cosine: mean(out.iter().map(|o| o.final_cosine)),
                mean_delta_zv: mean(out.iter().map(|o| o.delta_zv)),
                mean_delta_zm: mean(out.iter().map(|o| o.delta_zm)),
            })
        })
        .collect()
}
