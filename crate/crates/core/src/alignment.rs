//! Linear cross-modal alignment `z_m = z_v · W_a` and the lower-bound check
//! on aligned-feature perturbations.

use serde::{Deserialize, Serialize};

use crate::attack::pgd::{attack_batch, mean};
use crate::attack::{AttackConfig, Objective};
use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::numcore::{linalg, Tape, Tensor, Var};
use crate::toolkit::rng::{gaussian, SeedStreams};

/// Default aligned-space width.
pub const DEFAULT_D_M: usize = 96;

/// Relative threshold below which `σ_min` is treated as rank deficiency.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentWeights {
    wa: Tensor,
    sigma_min: f64,
    sigma_max: f64,
}

impl AlignmentWeights {
    /// Wraps `W_a` (`d_v x d_m`) and caches its extremal singular values.
    pub fn new(wa: Tensor) -> Result<Self> {
        wa.dims2()?;
        if !wa.is_finite() {
            return Err(Error::NonFinite("align.Wa".into()));
        }
        let (sigma_min, sigma_max) = linalg::extremal_singular_values(&wa)?;
        Ok(Self {
            wa,
            sigma_min,
            sigma_max,
        })
    }

    /// Gaussian draw scaled by `1/sqrt(d_v)`, redrawn until full rank.
    pub fn init(d_v: usize, d_m: usize, seed: u64) -> Result<Self> {
        let streams = SeedStreams::new(seed);
        for attempt in 0..16 {
            let mut rng = streams.stream(&format!("align.Wa.{attempt}"));
            let w = Self::new(gaussian(&mut rng, &[d_v, d_m], 1.0 / (d_v as f64).sqrt()))?;
            if w.is_full_rank() {
                return Ok(w);
            }
        }
        Err(Error::Numerical("alignment draw stayed rank deficient".into()))
    }

    pub fn wa(&self) -> &Tensor {
        &self.wa
    }

    pub fn d_v(&self) -> usize {
        self.wa.shape()[0]
    }

    pub fn d_m(&self) -> usize {
        self.wa.shape()[1]
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    /// Rank equals `min(d_v, d_m)`; required for a positive lower bound.
    pub fn is_full_rank(&self) -> bool {
        self.sigma_min > RANK_TOL * self.sigma_max
    }
}

/// `z_v · W_a`.
pub fn align(z_v: &Tensor, w: &AlignmentWeights) -> Result<Tensor> {
    z_v.matmul(&w.wa)
}

pub fn align_on_tape(tape: &Tape, z_v: Var, wa: Var) -> Result<Var> {
    tape.matmul(z_v, wa)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prop1Record {
    /// `‖Δz_m‖_F`
    pub lhs: f64,
    /// `σ_min(W_a) · ‖Δz_v‖_F`
    pub bound: f64,
    pub delta_zv: f64,
    pub holds: bool,
    /// `None` when `Δz_v = 0`.
    pub ratio_in_sandwich: Option<bool>,
}

/// Relative slack on both sides of the singular-value sandwich.
pub const PROP1_SLACK: f64 = 1e-9;

/// Checks `‖Δz_v W_a‖_F ≥ σ_min(W_a) ‖Δz_v‖_F` and the `σ_max` upper side.
pub fn prop1_check(z_v_clean: &Tensor, z_v_adv: &Tensor, w: &AlignmentWeights) -> Result<Prop1Record> {
    let delta = z_v_adv.sub(z_v_clean)?;
    let delta_zv = delta.frobenius_norm();
    let lhs = align(&delta, w)?.frobenius_norm();
    let bound = w.sigma_min * delta_zv;
    let holds = lhs >= bound - PROP1_SLACK * bound;
    let ratio_in_sandwich = (delta_zv > 0.0).then(|| {
        let r = lhs / delta_zv;
        r >= w.sigma_min * (1.0 - PROP1_SLACK) && r <= w.sigma_max * (1.0 + PROP1_SLACK)
    });
    Ok(Prop1Record {
        lhs,
        bound,
        delta_zv,
        holds,
        ratio_in_sandwich,
    })
}

/// Randomized checks over `trials` Gaussian `(W_a, Δz_v)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Summary {
    pub trials: usize,
    pub d_v: usize,
    pub d_m: usize,
    pub n_v: usize,
    pub violations: usize,
    pub sandwich_violations: usize,
    /// Smallest `lhs / bound` observed.
    pub min_margin: f64,
    pub holds: bool,
}

pub fn prop1_random_trials(trials: usize, n_v: usize, d_v: usize, d_m: usize, seed: u64) -> Result<Prop1Summary> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let streams = SeedStreams::new(seed);
    let mut violations = 0;
    let mut sandwich_violations = 0;
    let mut min_margin = f64::INFINITY;
    for t in 0..trials {
        let mut rng = streams.stream(&format!("prop1.trial{t}"));
        let w = AlignmentWeights::new(gaussian(&mut rng, &[d_v, d_m], 1.0 / (d_v as f64).sqrt()))?;
        let clean = gaussian(&mut rng, &[n_v, d_v], 1.0);
        let adv = clean.add(&gaussian(&mut rng, &[n_v, d_v], 0.1))?;
        let r = prop1_check(&clean, &adv, &w)?;
        if !r.holds {
            violations += 1;
        }
        if r.ratio_in_sandwich == Some(false) {
            sandwich_violations += 1;
        }
        if r.bound > 0.0 {
            min_margin = min_margin.min(r.lhs / r.bound);
        }
    }
    Ok(Prop1Summary {
        trials,
        d_v,
        d_m,
        n_v,
        violations,
        sandwich_violations,
        min_margin,
        holds: violations == 0 && sandwich_violations == 0,
    })
}

/// Mean perturbation norms for one (objective, budget) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTrendRow {
    pub objective: Objective,
    pub epsilon: f64,
    pub mean_delta_zv: f64,
    pub mean_delta_zm: f64,
}

/// Batch means of `‖Δz_v‖_F` and `‖Δz_m‖_F` per budget per objective. The step
/// size is `template.alpha` capped at each budget.
pub fn delta_trends(
    images: &[Tensor],
    weights: &EncoderWeights,
    enc: &EncoderConfig,
    alignment: &AlignmentWeights,
    template: &AttackConfig,
    budgets: &[f64],
    objectives: &[Objective],
) -> Result<Vec<DeltaTrendRow>> {
    if budgets.len() < 2 {
        return Err(Error::invalid("delta trends need at least two budgets"));
    }
    let mut rows = Vec::with_capacity(budgets.len() * objectives.len());
    for &objective in objectives {
        for &epsilon in budgets {
            let cfg = AttackConfig {
                epsilon,
                alpha: template.alpha.min(epsilon),
                objective,
                ..template.clone()
            };
            let out = attack_batch(images, weights, enc, alignment, &cfg)?;
            rows.push(DeltaTrendRow {
                objective,
                epsilon,
                mean_delta_zv: mean(out.iter().map(|o| o.delta_zv)),
                mean_delta_zm: mean(out.iter().map(|o| o.delta_zm)),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_alignment_is_noop() {
        let w = AlignmentWeights::new(Tensor::identity(3)).unwrap();
        let z = Tensor::from_fn(&[4, 3], |i| i as f64 - 5.0);
        assert_eq!(align(&z, &w).unwrap(), z);
        assert_eq!(align(&Tensor::zeros(&[4, 3]), &w).unwrap(), Tensor::zeros(&[4, 3]));
        assert!(align(&Tensor::zeros(&[4, 2]), &w).is_err());
    }

    #[test]
    fn zero_delta_holds_trivially() {
        let w = AlignmentWeights::init(8, 12, 1).unwrap();
        let z = Tensor::from_fn(&[4, 8], |i| i as f64);
        let r = prop1_check(&z, &z, &w).unwrap();
        assert_eq!((r.lhs, r.bound, r.holds, r.ratio_in_sandwich), (0.0, 0.0, true, None));
    }

    #[test]
    fn orthogonal_alignment_is_isometry() {
        // rotation by 30 degrees
        let (s, c) = (0.5_f64, 3f64.sqrt() / 2.0);
        let w = AlignmentWeights::new(Tensor::from_rows(&[vec![c, -s], vec![s, c]]).unwrap()).unwrap();
        assert!((w.sigma_min() - 1.0).abs() < 1e-15 && (w.sigma_max() - 1.0).abs() < 1e-15);
        let clean = Tensor::zeros(&[3, 2]);
        let adv = Tensor::from_fn(&[3, 2], |i| i as f64 * 0.3 - 0.4);
        let r = prop1_check(&clean, &adv, &w).unwrap();
        assert!((r.lhs - adv.frobenius_norm()).abs() < 1e-14);
        assert!(r.holds && r.ratio_in_sandwich == Some(true));
    }

    #[test]
    fn rank_deficiency_reported() {
        let w = AlignmentWeights::new(Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap()).unwrap();
        assert!(!w.is_full_rank());
        assert!(AlignmentWeights::init(64, DEFAULT_D_M, 3).unwrap().is_full_rank());
    }

    #[test]
    fn thousand_random_trials_hold() {
        let s = prop1_random_trials(1000, 4, 8, 12, 42).unwrap();
        assert!(s.holds, "{s:?}");
        assert!(s.min_margin >= 1.0 - 1e-9);
    }
}
