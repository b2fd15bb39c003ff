//! Per-token feature deviation across attack steps, and the class-token over
//! patch-token aligned-feature ratio.

use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentWeights;
use crate::attack::pgd::{attack_batch, mean};
use crate::attack::{AttackConfig, AttackTrace, Objective};
use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// The `steps x n_v` deviation matrix of a trace, unaggregated.
pub fn deviation_heatmap(trace: &AttackTrace) -> Result<Tensor> {
    let steps = trace.deviations.len();
    let n_v = trace.deviations.first().map(Vec::len).unwrap_or(0);
    if steps == 0 || n_v == 0 {
        return Err(Error::invalid("empty trace"));
    }
    if trace.deviations.iter().any(|r| r.len() != n_v) {
        return Err(Error::invalid("ragged deviation rows"));
    }
    Tensor::new(vec![steps, n_v], trace.deviations.concat())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalRatio {
    pub mean_delta_zm_cls: f64,
    pub mean_delta_zm_patch: f64,
    pub ratio_cls_over_patch: f64,
}

/// Mean `‖Δz_m‖_F` under a class-token cosine attack over the mean under a
/// patch-token cosine attack, both at the budget and step count of `template`.
pub fn empirical_ratio(
    images: &[Tensor],
    weights: &EncoderWeights,
    enc: &EncoderConfig,
    alignment: &AlignmentWeights,
    template: &AttackConfig,
) -> Result<EmpiricalRatio> {
    if template.epsilon <= 0.0 {
        return Err(Error::invalid("ratio is undefined at a zero budget"));
    }
    let run = |objective| -> Result<f64> {
        let out = attack_batch(images, weights, enc, alignment, &template.with_objective(objective))?;
        Ok(mean(out.iter().map(|o| o.delta_zm)))
    };
    let cls = run(Objective::CosCls)?;
    let patch = run(Objective::CosPatch)?;
    if patch <= 0.0 {
        return Err(Error::Numerical("patch-token attack left aligned features unchanged".into()));
    }
    Ok(EmpiricalRatio {
        mean_delta_zm_cls: cls,
        mean_delta_zm_patch: patch,
        ratio_cls_over_patch: cls / patch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::pgd_attack;
    use crate::encoder::init_weights;

    fn small() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            d_v: 6,
            layers: 1,
            ..Default::default()
        }
    }

    #[test]
    fn zero_budget_heatmap_is_zero_with_trace_shape() {
        let enc = small();
        let w = init_weights(&enc, 1, 1.0).unwrap();
        let img = Tensor::filled(&enc.image_shape(), 0.5);
        let cfg = AttackConfig {
            epsilon: 0.0,
            alpha: 0.0,
            steps: 5,
            ..Default::default()
        };
        let (_, trace) = pgd_attack(&img, &w, &enc, &cfg).unwrap();
        let h = deviation_heatmap(&trace).unwrap();
        assert_eq!(h.shape(), [5, 4]);
        assert_eq!(h.max_abs(), 0.0);
    }

    #[test]
    fn empty_trace_rejected() {
        let t = AttackTrace {
            losses: vec![],
            deviations: vec![],
            mean_cosines: vec![],
            linf: vec![],
            final_delta: None,
            final_linf: 0.0,
        };
        assert!(deviation_heatmap(&t).is_err());
    }

    #[test]
    fn zero_budget_ratio_is_an_error() {
        let enc = small();
        let w = init_weights(&enc, 1, 1.0).unwrap();
        let a = AlignmentWeights::init(6, 8, 1).unwrap();
        let img = vec![Tensor::filled(&enc.image_shape(), 0.5)];
        let cfg = AttackConfig {
            epsilon: 0.0,
            alpha: 0.0,
            ..Default::default()
        };
        assert!(empirical_ratio(&img, &w, &enc, &a, &cfg).is_err());
    }

    #[test]
    fn single_token_linear_encoder_ratio_is_one() {
        // one token, no mixing: z_cls is a fixed multiple of z_v so both
        // attacks follow the same sign steps
        let enc = EncoderConfig {
            image_size: 4,
            patch_size: 4,
            channels: 1,
            d_v: 3,
            layers: 1,
            ..Default::default()
        };
        let mut w = init_weights(&enc, 2, 1.0).unwrap();
        w.cls_seed = Tensor::zeros(&[1, 3]);
        w.pos_embed = Tensor::zeros(&[2, 3]);
        w.layers[0].wq = Tensor::zeros(&[3, 3]);
        w.layers[0].wk = Tensor::zeros(&[3, 3]);
        w.layers[0].wv = Tensor::identity(3);
        let a = AlignmentWeights::init(3, 5, 3).unwrap();
        let images: Vec<Tensor> = (0..3)
            .map(|k| Tensor::from_fn(&enc.image_shape(), |i| ((i * 5 + k * 3) % 11) as f64 / 11.0))
            .collect();
        let cfg = AttackConfig {
            steps: 10,
            ..Default::default()
        };
        let r = empirical_ratio(&images, &w, &enc, &a, &cfg).unwrap();
        assert!((r.ratio_cls_over_patch - 1.0).abs() < 1e-9, "{r:?}");
    }
}
