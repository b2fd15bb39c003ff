//! L∞ projected gradient ascent on the vision encoder's features.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use super::loss::{objective_on_tape, CleanFeatures, KlDirection, Objective};
use crate::alignment::{self, AlignmentWeights, Prop1Record};
use crate::encoder::{check_image, encode, encode_on_tape, EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::numcore::{cosine_rows, Tape, Tensor};
use crate::toolkit::rng::SeedStreams;

/// Slack on the L∞ constraint check.
pub const LINF_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// Start at `δ = 0`.
    #[default]
    Zero,
    /// Start uniformly inside the ε-ball.
    Uniform,
}

/// Parses a budget given as a decimal (`0.0157`) or a ratio (`4/255`).
pub fn parse_budget(s: &str) -> Result<f64> {
    let s = s.trim();
    let value = match s.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num.trim().parse().map_err(|_| Error::invalid(format!("bad budget `{s}`")))?;
            let den: f64 = den.trim().parse().map_err(|_| Error::invalid(format!("bad budget `{s}`")))?;
            if den == 0.0 {
                return Err(Error::invalid(format!("bad budget `{s}`: zero denominator")));
            }
            num / den
        }
        None => s.parse().map_err(|_| Error::invalid(format!("bad budget `{s}`")))?,
    };
    if !value.is_finite() {
        return Err(Error::invalid(format!("bad budget `{s}`")));
    }
    Ok(value)
}

pub(crate) fn budget_de<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Str(s) => parse_budget(&s).map_err(serde::de::Error::custom),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(deserialize_with = "budget_de")]
    pub epsilon: f64,
    #[serde(deserialize_with = "budget_de")]
    pub alpha: f64,
    pub steps: usize,
    pub objective: Objective,
    #[serde(default)]
    pub init: Init,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub kl_direction: KlDirection,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 4.0 / 255.0,
            alpha: 1.0 / 255.0,
            steps: 100,
            objective: Objective::CosPatch,
            init: Init::Zero,
            seed: 0,
            kl_direction: KlDirection::CleanToAdv,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0 && self.alpha <= self.epsilon && self.epsilon <= 1.0;
        if !ok {
            return Err(Error::invalid(format!(
                "attack requires 0 <= alpha <= epsilon <= 1, got alpha={} epsilon={}",
                self.alpha, self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::invalid("attack steps must be at least 1"));
        }
        Ok(())
    }

    pub fn with_objective(&self, objective: Objective) -> Self {
        Self {
            objective,
            ..self.clone()
        }
    }
}

/// Step-resolved record of one attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    /// Objective value after each step.
    pub losses: Vec<f64>,
    /// `deviations[step][token] = ‖z̃_v,token − z_v,token‖₂` after each step.
    pub deviations: Vec<Vec<f64>>,
    /// Mean per-token patch cosine after each step.
    pub mean_cosines: Vec<f64>,
    /// `‖δ‖∞` after each step.
    pub linf: Vec<f64>,
    #[serde(skip)]
    pub final_delta: Option<Tensor>,
    pub final_linf: f64,
}

impl AttackTrace {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct Evaluation {
    loss: f64,
    z_v: Tensor,
    grad: Tensor,
}

fn evaluate(
    adv: &Tensor,
    weights: &EncoderWeights,
    enc: &EncoderConfig,
    cfg: &AttackConfig,
    clean: &CleanFeatures,
) -> Result<Evaluation> {
    let tape = Tape::new();
    let wv = weights.to_vars(&tape, false);
    let x = tape.variable(adv.clone());
    let tokens = encode_on_tape(&tape, x, &wv, enc)?;
    let loss = objective_on_tape(&tape, cfg.objective, cfg.kl_direction, tokens.z_v, tokens.z_cls, clean)?;
    let mut g = tape.gradients(loss, &[x])?;
    Ok(Evaluation {
        loss: tape.scalar(loss)?,
        z_v: tape.value(tokens.z_v)?,
        grad: g.remove(0),
    })
}

fn clamp_to_pixels(image: &Tensor, delta: &Tensor) -> Tensor {
    let data = image
        .data()
        .iter()
        .zip(delta.data())
        .map(|(&v, &d)| (v + d).clamp(0.0, 1.0))
        .collect();
    Tensor::new(image.shape().to_vec(), data).expect("same shape as image")
}

fn record(trace: &mut AttackTrace, loss: f64, z_v: &Tensor, clean: &CleanFeatures) -> Result<()> {
    let diff = z_v.sub(&clean.z_v)?;
    trace.losses.push(loss);
    trace.deviations.push(diff.row_norms()?);
    let cos = cosine_rows(z_v, &clean.z_v)?;
    trace.mean_cosines.push(cos.sum() / cos.len() as f64);
    Ok(())
}

/// Runs PGD and returns the adversarial image with its trace.
///
/// Each step takes `δ ← clip(δ + α·sign(∇L), −ε, ε)`, clamps `v + δ` to
/// `[0, 1]` and re-derives `δ` from the clamped image. Every objective is
/// stationary at `δ = 0`, so zero-init runs take their first gradient at a
/// seeded probe point `v + (α/2)·r` (`r` Rademacher) while the iterate itself
/// still starts at zero.
pub fn pgd_attack(
    image: &Tensor,
    weights: &EncoderWeights,
    enc: &EncoderConfig,
    cfg: &AttackConfig,
) -> Result<(Tensor, AttackTrace)> {
    cfg.validate()?;
    check_image(image, enc)?;
    let states = encode(image, weights, enc)?;
    let clean = CleanFeatures {
        z_v: states.z_v(),
        z_cls: states.z_cls(),
    };
    let streams = SeedStreams::new(cfg.seed);
    let (eps, alpha) = (cfg.epsilon, cfg.alpha);

    let mut delta = match cfg.init {
        Init::Zero => Tensor::zeros(image.shape()),
        Init::Uniform => {
            let mut rng = streams.stream("attack.init");
            let raw = Tensor::from_fn(image.shape(), |_| rng.random_range(-1.0..=1.0) * eps);
            clamp_to_pixels(image, &raw).sub(image)?
        }
    };
    let mut adv = clamp_to_pixels(image, &delta);

    let mut trace = AttackTrace {
        losses: Vec::with_capacity(cfg.steps),
        deviations: Vec::with_capacity(cfg.steps),
        mean_cosines: Vec::with_capacity(cfg.steps),
        linf: Vec::with_capacity(cfg.steps),
        final_delta: None,
        final_linf: 0.0,
    };

    for step in 1..=cfg.steps {
        let eval = if step == 1 && cfg.init == Init::Zero {
            let mut rng = streams.stream("attack.probe");
            let probe = Tensor::from_fn(image.shape(), |_| if rng.random::<bool>() { 0.5 * alpha } else { -0.5 * alpha });
            evaluate(&clamp_to_pixels(image, &probe), weights, enc, cfg, &clean)?
        } else {
            let e = evaluate(&adv, weights, enc, cfg, &clean)?;
            if step > 1 {
                record(&mut trace, e.loss, &e.z_v, &clean)?;
            }
            e
        };
        if !eval.grad.is_finite() {
            return Err(Error::NonFiniteGradient { step });
        }

        let stepped = delta.zip_with(&eval.grad, "pgd step", |d, g| (d + alpha * sign(g)).clamp(-eps, eps))?;
        adv = clamp_to_pixels(image, &stepped);
        delta = adv.sub(image)?;

        let linf = delta.max_abs();
        if linf > eps + LINF_TOL {
            return Err(Error::Constraint {
                step,
                detail: format!("‖δ‖∞ = {linf} exceeds ε = {eps}"),
            });
        }
        if let Some(p) = adv.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Constraint {
                step,
                detail: format!("pixel {p} outside [0, 1]"),
            });
        }
        trace.linf.push(linf);
    }

    let last = evaluate(&adv, weights, enc, cfg, &clean)?;
    record(&mut trace, last.loss, &last.z_v, &clean)?;
    trace.final_linf = delta.max_abs();
    trace.final_delta = Some(delta);
    Ok((adv, trace))
}

/// Per-image attack seed inside a batch.
pub fn image_seed(base: u64, index: usize) -> u64 {
    SeedStreams::new(base).child(&format!("image{index}")).seed()
}

/// Summary of one attack run measured through the alignment layer.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub adversarial: Tensor,
    pub trace: AttackTrace,
    /// Mean per-token patch cosine between final adversarial and clean features.
    pub final_cosine: f64,
    pub delta_zv: f64,
    pub delta_zm: f64,
    pub prop1: Prop1Record,
}

/// Attacks every image (in parallel), seeding image `i` with [`image_seed`].
///
/// The aligned-feature lower bound is checked on every run; a violation is an
/// error, never a statistic.
pub fn attack_batch(
    images: &[Tensor],
    weights: &EncoderWeights,
    enc: &EncoderConfig,
    alignment: &AlignmentWeights,
    cfg: &AttackConfig,
) -> Result<Vec<AttackOutcome>> {
    if images.is_empty() {
        return Err(Error::invalid("image batch is empty"));
    }
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let cfg_i = AttackConfig {
                seed: image_seed(cfg.seed, i),
                ..cfg.clone()
            };
            let (adv, trace) = pgd_attack(img, weights, enc, &cfg_i)?;
            let clean = encode(img, weights, enc)?.z_v();
            let attacked = encode(&adv, weights, enc)?.z_v();
            let prop1 = alignment::prop1_check(&clean, &attacked, alignment)?;
            if !prop1.holds || prop1.ratio_in_sandwich == Some(false) {
                return Err(Error::Numerical(format!(
                    "aligned-feature bound violated on image {i}: {prop1:?}"
                )));
            }
            Ok(AttackOutcome {
                adversarial: adv,
                final_cosine: *trace.mean_cosines.last().expect("at least one step"),
                trace,
                delta_zv: prop1.delta_zv,
                delta_zm: prop1.lhs,
                prop1,
            })
        })
        .collect()
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_weights;

    fn setup() -> (EncoderConfig, EncoderWeights, Tensor) {
        let enc = EncoderConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            d_v: 8,
            layers: 2,
            ..Default::default()
        };
        let w = init_weights(&enc, 1, 1.0).unwrap();
        let img = Tensor::from_fn(&enc.image_shape(), |i| ((i * 13) % 17) as f64 / 16.0);
        (enc, w, img)
    }

    #[test]
    fn budgets_parse() {
        assert_eq!(parse_budget("4/255").unwrap(), 4.0 / 255.0);
        assert_eq!(parse_budget("0.5").unwrap(), 0.5);
        assert!(parse_budget("4/0").is_err());
        assert!(parse_budget("abc").is_err());
        let c: AttackConfig = serde_json::from_str(
            r#"{"epsilon": "8/255", "alpha": 0.001, "steps": 3, "objective": "cos-patch"}"#,
        )
        .unwrap();
        assert_eq!(c.epsilon, 8.0 / 255.0);
    }

    #[test]
    fn config_validation() {
        let bad = AttackConfig {
            alpha: 0.1,
            epsilon: 0.01,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(AttackConfig { steps: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_budget_is_identity() {
        let (enc, w, img) = setup();
        let cfg = AttackConfig {
            epsilon: 0.0,
            alpha: 0.0,
            steps: 5,
            ..Default::default()
        };
        let (adv, trace) = pgd_attack(&img, &w, &enc, &cfg).unwrap();
        assert_eq!(adv, img);
        assert_eq!(trace.steps(), 5);
        for c in &trace.mean_cosines {
            assert!((c - 1.0).abs() < 1e-15);
        }
        for row in &trace.deviations {
            assert!(row.iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn constraints_and_quantization() {
        let (enc, w, img) = setup();
        let cfg = AttackConfig {
            epsilon: 4.0 / 255.0,
            alpha: 1.0 / 255.0,
            steps: 3,
            ..Default::default()
        };
        let (adv, trace) = pgd_attack(&img, &w, &enc, &cfg).unwrap();
        assert!(trace.final_linf <= cfg.epsilon + LINF_TOL);
        assert!(adv.data().iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(trace.deviations.len(), 3);
        assert!(trace.deviations.iter().all(|r| r.len() == enc.n_v()));
        // pixels strictly inside [0,1] are never clamped, so their δ sits on the α lattice
        let delta = trace.final_delta.unwrap();
        for (d, p) in delta.data().iter().zip(img.data()) {
            if *p > 0.05 && *p < 0.95 {
                let k = d / cfg.alpha;
                assert!((k - k.round()).abs() < 1e-9 && k.abs() <= 3.0 + 1e-9);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let (enc, w, img) = setup();
        let cfg = AttackConfig {
            steps: 4,
            init: Init::Uniform,
            seed: 9,
            ..Default::default()
        };
        let a = pgd_attack(&img, &w, &enc, &cfg).unwrap();
        let b = pgd_attack(&img, &w, &enc, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn empty_batch_rejected() {
        let (enc, w, _) = setup();
        let al = AlignmentWeights::init(enc.d_v, 12, 0).unwrap();
        assert!(attack_batch(&[], &w, &enc, &al, &AttackConfig::default()).is_err());
    }
}
