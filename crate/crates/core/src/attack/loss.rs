//! Attack objectives. Every objective is a quantity the attacker maximizes.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// `−mean_i cos(z̃_v,i, z_v,i)` over patch tokens.
    CosPatch,
    /// `−cos(z̃_cls, z_cls)`.
    CosCls,
    /// `‖z̃_cls − z_cls‖²`.
    L2Cls,
    /// `‖z̃_v − z_v‖_F² / n_v`.
    EuclidPatch,
    /// Mean per-token KL divergence between feature softmaxes.
    KlPatch,
    /// `cos_patch + cos_cls`, unweighted.
    CosPatchPlusCls,
    /// `−cos(vec(z̃_v), vec(z_v))` over the flattened token matrix.
    CosPatchFlat,
}

impl Objective {
    pub const ALL: [Objective; 7] = [
        Objective::CosPatch,
        Objective::CosCls,
        Objective::L2Cls,
        Objective::EuclidPatch,
        Objective::KlPatch,
        Objective::CosPatchPlusCls,
        Objective::CosPatchFlat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::CosPatch => "cos-patch",
            Objective::CosCls => "cos-cls",
            Objective::L2Cls => "l2-cls",
            Objective::EuclidPatch => "euclid-patch",
            Objective::KlPatch => "kl-patch",
            Objective::CosPatchPlusCls => "cos-patch-plus-cls",
            Objective::CosPatchFlat => "cos-patch-flat",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        if norm == "combined" {
            return Ok(Objective::CosPatchPlusCls);
        }
        Objective::ALL.into_iter().find(|o| o.name() == norm).ok_or_else(|| {
            let names: Vec<_> = Objective::ALL.iter().map(|o| o.name()).collect();
            Error::invalid(format!("unknown objective `{s}`; valid objectives: {}", names.join(", ")))
        })
    }
}

/// Direction of the KL objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(p_clean ‖ p_adv)`
    #[default]
    CleanToAdv,
    /// `KL(p_adv ‖ p_clean)`
    AdvToClean,
}

/// Clean reference features, held constant during an attack.
#[derive(Debug, Clone)]
pub struct CleanFeatures {
    pub z_v: Tensor,
    pub z_cls: Tensor,
}

/// Records `objective` on `tape` given the adversarial features.
pub fn objective_on_tape(
    tape: &Tape,
    objective: Objective,
    kl: KlDirection,
    z_v_adv: Var,
    z_cls_adv: Var,
    clean: &CleanFeatures,
) -> Result<Var> {
    match objective {
        Objective::CosPatch => neg_mean_cosine(tape, z_v_adv, &clean.z_v),
        Objective::CosCls => neg_mean_cosine(tape, z_cls_adv, &clean.z_cls),
        Objective::L2Cls => squared_distance(tape, z_cls_adv, &clean.z_cls, 1.0),
        Objective::EuclidPatch => {
            let n = clean.z_v.shape()[0] as f64;
            squared_distance(tape, z_v_adv, &clean.z_v, 1.0 / n)
        }
        Objective::KlPatch => kl_tokens(tape, z_v_adv, &clean.z_v, kl),
        Objective::CosPatchPlusCls => {
            let a = neg_mean_cosine(tape, z_v_adv, &clean.z_v)?;
            let b = neg_mean_cosine(tape, z_cls_adv, &clean.z_cls)?;
            tape.add(a, b)
        }
        Objective::CosPatchFlat => {
            let (r, c) = clean.z_v.dims2()?;
            let flat_clean = clean.z_v.clone().reshape(vec![1, r * c])?;
            let idx: Rc<[usize]> = (0..r * c).collect();
            let flat_adv = tape.gather(z_v_adv, idx, vec![1, r * c])?;
            neg_mean_cosine(tape, flat_adv, &flat_clean)
        }
    }
}

fn neg_mean_cosine(tape: &Tape, adv: Var, clean: &Tensor) -> Result<Var> {
    let c = tape.constant(clean.clone());
    let cos = tape.cosine_rows(adv, c)?;
    let m = tape.mean(cos)?;
    tape.scale(m, -1.0)
}

fn squared_distance(tape: &Tape, adv: Var, clean: &Tensor, weight: f64) -> Result<Var> {
    let c = tape.constant(clean.clone());
    let d = tape.sub(adv, c)?;
    let s = tape.sum_squares(d)?;
    tape.scale(s, weight)
}

fn kl_tokens(tape: &Tape, adv: Var, clean: &Tensor, dir: KlDirection) -> Result<Var> {
    let n = clean.shape()[0] as f64;
    let log_clean = log_softmax_rows(clean)?;
    let log_adv = tape.log_softmax_rows(adv)?;
    match dir {
        KlDirection::CleanToAdv => {
            // Σ p log p − Σ p log q, with p fixed
            let p = log_clean.map(f64::exp);
            let entropy_term = p.data().iter().zip(log_clean.data()).map(|(a, b)| a * b).sum::<f64>();
            let pv = tape.constant(p);
            let cross = tape.sum(tape.mul(pv, log_adv)?)?;
            let neg = tape.scale(cross, -1.0)?;
            let total = tape.add(neg, tape.constant(Tensor::scalar(entropy_term)))?;
            tape.scale(total, 1.0 / n)
        }
        KlDirection::AdvToClean => {
            let q = tape.softmax_rows(adv, 1.0)?;
            let diff = tape.sub(log_adv, tape.constant(log_clean))?;
            let s = tape.sum(tape.mul(q, diff)?)?;
            tape.scale(s, 1.0 / n)
        }
    }
}

fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let v = tape.constant(x.clone());
    tape.value(tape.log_softmax_rows(v)?)
}

/// Evaluates an objective on plain tensors.
pub fn evaluate_objective(
    objective: Objective,
    kl: KlDirection,
    z_v_adv: &Tensor,
    z_cls_adv: &Tensor,
    clean: &CleanFeatures,
) -> Result<f64> {
    if z_v_adv.shape() != clean.z_v.shape() {
        return Err(Error::shape("objective", z_v_adv.shape(), clean.z_v.shape()));
    }
    if z_cls_adv.shape() != clean.z_cls.shape() {
        return Err(Error::shape("objective", z_cls_adv.shape(), clean.z_cls.shape()));
    }
    let tape = Tape::new();
    let zv = tape.constant(z_v_adv.clone());
    let zc = tape.constant(z_cls_adv.clone());
    let out = objective_on_tape(&tape, objective, kl, zv, zc, clean)?;
    tape.scalar(out)
}

fn patch_only(objective: Objective, kl: KlDirection, adv: &Tensor, clean: &Tensor) -> Result<f64> {
    let dummy = Tensor::ones(&[1, 1]);
    evaluate_objective(
        objective,
        kl,
        adv,
        &dummy,
        &CleanFeatures {
            z_v: clean.clone(),
            z_cls: dummy.clone(),
        },
    )
}

fn cls_only(objective: Objective, adv: &Tensor, clean: &Tensor) -> Result<f64> {
    let dummy = Tensor::ones(&[1, 1]);
    evaluate_objective(
        objective,
        KlDirection::default(),
        &dummy,
        adv,
        &CleanFeatures {
            z_v: dummy.clone(),
            z_cls: clean.clone(),
        },
    )
}

pub fn loss_cos_patch(z_v_adv: &Tensor, z_v_clean: &Tensor) -> Result<f64> {
    patch_only(Objective::CosPatch, KlDirection::default(), z_v_adv, z_v_clean)
}

pub fn loss_cos_cls(z_cls_adv: &Tensor, z_cls_clean: &Tensor) -> Result<f64> {
    cls_only(Objective::CosCls, z_cls_adv, z_cls_clean)
}

pub fn loss_l2_cls(z_cls_adv: &Tensor, z_cls_clean: &Tensor) -> Result<f64> {
    cls_only(Objective::L2Cls, z_cls_adv, z_cls_clean)
}

pub fn loss_euclid_patch(z_v_adv: &Tensor, z_v_clean: &Tensor) -> Result<f64> {
    patch_only(Objective::EuclidPatch, KlDirection::default(), z_v_adv, z_v_clean)
}

pub fn loss_kl_patch(z_v_adv: &Tensor, z_v_clean: &Tensor, dir: KlDirection) -> Result<f64> {
    patch_only(Objective::KlPatch, dir, z_v_adv, z_v_clean)
}

pub fn loss_combined(z_v_adv: &Tensor, z_v_clean: &Tensor, z_cls_adv: &Tensor, z_cls_clean: &Tensor) -> Result<f64> {
    evaluate_objective(
        Objective::CosPatchPlusCls,
        KlDirection::default(),
        z_v_adv,
        z_cls_adv,
        &CleanFeatures {
            z_v: z_v_clean.clone(),
            z_cls: z_cls_clean.clone(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cos_patch_cases() {
        let a = m(&[&[1.0, 2.0], &[0.5, -1.0]]);
        assert!((loss_cos_patch(&a, &a).unwrap() + 1.0).abs() < 1e-15);
        assert!((loss_cos_patch(&a.scale(-1.0), &a).unwrap() - 1.0).abs() < 1e-15);
        let x = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let y = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(loss_cos_patch(&x, &y).unwrap(), 0.0);
    }

    #[test]
    fn cos_cls_cases() {
        let a = m(&[&[3.0, -1.0, 2.0]]);
        assert!((loss_cos_cls(&a, &a).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(loss_cos_cls(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 2.0]])).unwrap(), 0.0);
        let b = m(&[&[1.0, 1.0, -2.0]]);
        assert_eq!(loss_cos_cls(&a, &b).unwrap(), loss_cos_patch(&a, &b).unwrap());
    }

    #[test]
    fn l2_and_euclid() {
        assert_eq!(loss_l2_cls(&m(&[&[3.0, 4.0]]), &m(&[&[0.0, 0.0]])).unwrap(), 25.0);
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0], &[0.0, -1.0]]);
        let b = m(&[&[0.5, 2.5], &[-3.0, 4.0], &[2.0, 1.0]]);
        assert_eq!(loss_euclid_patch(&a, &a).unwrap(), 0.0);
        let oracle: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 3.0;
        assert!((loss_euclid_patch(&a, &b).unwrap() - oracle).abs() < 1e-14);
        let (x, y) = (m(&[&[1.0, -2.0, 0.5]]), m(&[&[0.0, 1.0, 2.0]]));
        assert_eq!(loss_euclid_patch(&x, &y).unwrap(), loss_l2_cls(&x, &y).unwrap());
    }

    #[test]
    fn kl_two_dim_closed_form() {
        let adv = m(&[&[0.3, -0.2]]);
        let clean = m(&[&[1.0, 0.5]]);
        let sm = |r: &[f64]| {
            let z = r[0].exp() + r[1].exp();
            [r[0].exp() / z, r[1].exp() / z]
        };
        let (p, q) = (sm(clean.row(0)), sm(adv.row(0)));
        let want = p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
        let got = loss_kl_patch(&adv, &clean, KlDirection::CleanToAdv).unwrap();
        assert!((got - want).abs() < 1e-15);
        let want_rev = q[0] * (q[0] / p[0]).ln() + q[1] * (q[1] / p[1]).ln();
        let got_rev = loss_kl_patch(&adv, &clean, KlDirection::AdvToClean).unwrap();
        assert!((got_rev - want_rev).abs() < 1e-15);
        assert!(loss_kl_patch(&clean, &clean, KlDirection::CleanToAdv).unwrap().abs() < 1e-15);
    }

    #[test]
    fn combined_is_sum_of_parts() {
        let zv = m(&[&[1.0, 2.0], &[0.5, -1.0]]);
        let zc = m(&[&[0.3, 0.7]]);
        assert!((loss_combined(&zv, &zv, &zc, &zc).unwrap() + 2.0).abs() < 1e-15);
        let zv2 = m(&[&[-1.0, 2.0], &[1.5, 1.0]]);
        let zc2 = m(&[&[0.9, -0.1]]);
        let sum = loss_cos_patch(&zv2, &zv).unwrap() + loss_cos_cls(&zc2, &zc).unwrap();
        assert!((loss_combined(&zv2, &zv, &zc2, &zc).unwrap() - sum).abs() < 1e-15);
    }

    #[test]
    fn objective_names_parse() {
        for o in Objective::ALL {
            assert_eq!(o.name().parse::<Objective>().unwrap(), o);
            assert_eq!(o.name().replace('-', "_").parse::<Objective>().unwrap(), o);
        }
        let err = "cos-everything".parse::<Objective>().unwrap_err().to_string();
        assert!(err.contains("cos-patch") && err.contains("kl-patch"));
    }
}
