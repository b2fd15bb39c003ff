//! Unsupervised adversarial finetuning: pull the features of attacked images
//! back to the frozen original encoder's clean features.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::pgd::{image_seed, pgd_attack};
use crate::attack::{AttackConfig, Init, Objective};
use crate::encoder::{encode, encode_on_tape, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor};
use crate::toolkit::rng::SeedStreams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FareConfig {
    #[serde(deserialize_with = "crate::attack::pgd::budget_de")]
    pub inner_eps: f64,
    #[serde(deserialize_with = "crate::attack::pgd::budget_de")]
    pub inner_alpha: f64,
    pub inner_steps: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for FareConfig {
    fn default() -> Self {
        Self {
            inner_eps: 4.0 / 255.0,
            inner_alpha: 1.0 / 255.0,
            inner_steps: 10,
            lr: 1e-3,
            epochs: 10,
            seed: 0,
        }
    }
}

impl FareConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_eps > 0.0 && self.inner_eps <= 1.0) {
            return Err(Error::invalid(format!("inner_eps must lie in (0, 1], got {}", self.inner_eps)));
        }
        if !(self.inner_alpha > 0.0 && self.inner_alpha <= self.inner_eps) {
            return Err(Error::invalid("inner_alpha must lie in (0, inner_eps]"));
        }
        if self.inner_steps == 0 {
            return Err(Error::invalid("inner_steps must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FareLog {
    /// Mean `‖f_θ(v+δ*) − f_θ0(v)‖_F²` at the start of each epoch.
    pub losses: Vec<f64>,
}

/// Mean squared Frobenius distance between `f_θ` on `adv` and `targets`, and
/// its gradient with respect to every weight tensor.
fn loss_and_grad(
    weights: &EncoderWeights,
    enc: &EncoderConfig,
    adv: &[Tensor],
    targets: &[Tensor],
) -> Result<(f64, Vec<Tensor>)> {
    let per_image = adv
        .par_iter()
        .zip(targets)
        .map(|(x, target)| {
            let tape = Tape::new();
            let wv = weights.to_vars(&tape, true);
            let img = tape.constant(x.clone());
            let tokens = encode_on_tape(&tape, img, &wv, enc)?;
            let diff = tape.sub(tokens.z_v, tape.constant(target.clone()))?;
            let loss = tape.sum_squares(diff)?;
            let grads = tape.gradients(loss, &wv.ordered())?;
            Ok((tape.scalar(loss)?, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_image.len() as f64;
    let mut it = per_image.into_iter();
    let (mut loss, mut grads) = it.next().ok_or_else(|| Error::invalid("no finetuning images"))?;
    for (l, g) in it {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            *acc = acc.add(gi)?;
        }
    }
    Ok((loss / n, grads.into_iter().map(|g| g.scale(1.0 / n)).collect()))
}

fn inner_attack(
    weights: &EncoderWeights,
    enc: &EncoderConfig,
    images: &[Tensor],
    cfg: &FareConfig,
    epoch_seed: u64,
) -> Result<Vec<Tensor>> {
    let attack = AttackConfig {
        epsilon: cfg.inner_eps,
        alpha: cfg.inner_alpha,
        steps: cfg.inner_steps,
        objective: Objective::CosPatch,
        init: Init::Zero,
        seed: epoch_seed,
        ..Default::default()
    };
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let c = AttackConfig {
                seed: image_seed(attack.seed, i),
                ..attack.clone()
            };
            Ok(pgd_attack(img, weights, enc, &c)?.0)
        })
        .collect()
}

/// Adam with the usual moment decay rates and bias correction.
struct Adam {
    lr: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &[Tensor], lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn step(&mut self, params: &[Tensor], grads: &[Tensor]) -> Result<Vec<Tensor>> {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let mut out = Vec::with_capacity(params.len());
        for ((p, g), (m, v)) in params.iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", g.shape(), p.shape()));
            }
            let mut next = p.clone();
            let data = next.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let mi = Self::BETA1 * m.data()[i] + (1.0 - Self::BETA1) * gi;
                let vi = Self::BETA2 * v.data()[i] + (1.0 - Self::BETA2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                data[i] -= self.lr * (mi / c1) / ((vi / c2).sqrt() + Self::EPS);
            }
            out.push(next);
        }
        Ok(out)
    }
}

/// Full-batch Adam on all encoder weights against an inner
/// patch-cosine PGD, with the original weights frozen as the reference.
pub fn fare_finetune(
    weights: &EncoderWeights,
    enc: &EncoderConfig,
    images: &[Tensor],
    cfg: &FareConfig,
) -> Result<(EncoderWeights, FareLog)> {
    cfg.validate()?;
    weights.check(enc)?;
    if images.is_empty() {
        return Err(Error::invalid("finetuning needs at least one image"));
    }
    let targets = images
        .par_iter()
        .map(|img| Ok(encode(img, weights, enc)?.z_v()))
        .collect::<Result<Vec<_>>>()?;
    let streams = SeedStreams::new(cfg.seed);
    let mut current = weights.clone();
    let mut adam = Adam::new(&current.ordered(), cfg.lr);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut initial = None;
    for epoch in 0..cfg.epochs {
        let seed = streams.child(&format!("fare.epoch{epoch}")).seed();
        let adv = inner_attack(&current, enc, images, cfg, seed)?;
        let (loss, grads) = loss_and_grad(&current, enc, &adv, &targets)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("finetuning epoch {epoch}")));
        }
        let first = *initial.get_or_insert(loss);
        if loss > 10.0 * first {
            return Err(Error::Diverged {
                epoch,
                loss,
                initial: first,
            });
        }
        losses.push(loss);
        current = EncoderWeights::from_ordered(adam.step(&current.ordered(), &grads)?)?;
    }
    Ok((current, FareLog { losses }))
}

/// Mean `‖f(v+δ*) − f(v)‖_F` over `images` under a fresh patch-cosine attack.
pub fn adversarial_feature_distance(
    weights: &EncoderWeights,
    enc: &EncoderConfig,
    images: &[Tensor],
    attack: &AttackConfig,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("no images"));
    }
    let d = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let c = AttackConfig {
                seed: image_seed(attack.seed, i),
                ..attack.clone()
            };
            let (adv, _) = pgd_attack(img, weights, enc, &c)?;
            Ok(encode(&adv, weights, enc)?.z_v().sub(&encode(img, weights, enc)?.z_v())?.frobenius_norm())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_weights;
    use crate::toolkit::synth::{synth_images, SynthSpec};

    fn enc() -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            patch_size: 8,
            d_v: 8,
            layers: 2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let e = enc();
        let w = init_weights(&e, 1, 1.0).unwrap();
        let imgs = synth_images(2, 1, &SynthSpec::default(), &e).unwrap();
        let cfg = FareConfig {
            epochs: 0,
            ..Default::default()
        };
        let (out, log) = fare_finetune(&w, &e, &imgs, &cfg).unwrap();
        assert_eq!(out, w);
        assert!(log.losses.is_empty());
    }

    #[test]
    fn zero_budget_rejected() {
        let e = enc();
        let w = init_weights(&e, 1, 1.0).unwrap();
        let imgs = synth_images(1, 1, &SynthSpec::default(), &e).unwrap();
        let cfg = FareConfig {
            inner_eps: 0.0,
            ..Default::default()
        };
        assert!(fare_finetune(&w, &e, &imgs, &cfg).is_err());
    }

    #[test]
    fn huge_learning_rate_diverges_with_epoch() {
        let e = enc();
        let w = init_weights(&e, 1, 1.0).unwrap();
        let imgs = synth_images(2, 1, &SynthSpec::default(), &e).unwrap();
        let cfg = FareConfig {
            lr: 1e4,
            epochs: 6,
            inner_steps: 2,
            ..Default::default()
        };
        match fare_finetune(&w, &e, &imgs, &cfg) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 1),
            Err(Error::NonFinite(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn gradient_matches_finite_difference_on_one_entry() {
        let e = enc();
        let w = init_weights(&e, 2, 1.0).unwrap();
        let imgs = synth_images(2, 2, &SynthSpec::default(), &e).unwrap();
        let targets: Vec<Tensor> = imgs.iter().map(|i| encode(i, &w, &e).unwrap().z_v().scale(0.9)).collect();
        let (_, g) = loss_and_grad(&w, &e, &imgs, &targets).unwrap();
        let h = 1e-6;
        let bump = |s: f64| {
            let mut o = w.ordered();
            o[3].data_mut()[5] += s;
            let w2 = EncoderWeights::from_ordered(o).unwrap();
            loss_and_grad(&w2, &e, &imgs, &targets).unwrap().0
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        assert!((fd - g[3].data()[5]).abs() <= 1e-6 * fd.abs().max(1.0), "{fd} vs {}", g[3].data()[5]);
    }
}
