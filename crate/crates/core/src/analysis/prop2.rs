//! Class-token perturbation propagated backward to the input tokens and
//! forward again to the patch tokens, through one attention + residual layer.
//!
//! Row-vector convention throughout: a layer computes `T_1 = A (T_0 W_V) + T_0`
//! and a perturbation `Δ` of the class token is a `1 x d_v` row. With the
//! attention matrix `A` held fixed, the backward step gives
//!
//! ```text
//! ΔT_0[0] = −Δ (A_00 W_V + I)ᵀ,   ΔT_0[j] = −Δ (A_0j W_V)ᵀ
//! ```
//!
//! and the forward step gives `Δz_v^{1,i} = −Δ M_i` with
//!
//! ```text
//! M_i = A_i0 (A_00 W_V + I)ᵀ W_V + Σ_{j≥1} A_ij (A_0j W_V)ᵀ W_V + (A_0i W_V)ᵀ.
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{attention_deviation, attention_deviation_all_rows, attention_weights, encode, init_weights};
use crate::encoder::{EncoderConfig, EncoderWeights, LayerVars};
use crate::error::{Error, Result};
use crate::numcore::{linalg, softmax_rows, Tape, Tensor};
use crate::toolkit::rng::{gaussian, SeedStreams};
use crate::toolkit::synth::{synth_images, SynthSpec};

/// Relative slack on the propagated-ratio bound.
pub const PROP2_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    /// `(n_v + 1) x d_v`
    pub delta_t0: Tensor,
    /// `n_v x d_v`
    pub delta_zv1: Tensor,
    /// `M_1 … M_{n_v}`, each `d_v x d_v`.
    pub m: Vec<Tensor>,
    pub attention: Tensor,
}

fn single_layer(weights: &EncoderWeights, enc: &EncoderConfig) -> Result<()> {
    if weights.layers.len() != 1 || enc.layers != 1 {
        return Err(Error::invalid(format!(
            "propagation verifier needs a single-layer encoder, got {} layers",
            weights.layers.len()
        )));
    }
    if enc.heads != 1 || enc.use_layernorm {
        return Err(Error::invalid("propagation verifier needs one head and no LayerNorm"));
    }
    Ok(())
}

/// Backward–forward propagation with attention held constant (`η = 1`).
pub fn prop2_propagate(
    t0: &Tensor,
    weights: &EncoderWeights,
    enc: &EncoderConfig,
    delta_cls: &Tensor,
) -> Result<Propagation> {
    single_layer(weights, enc)?;
    let (rows, d) = t0.dims2()?;
    if delta_cls.shape() != [1, d] {
        return Err(Error::shape("prop2_propagate", delta_cls.shape(), &[1, d]));
    }
    let n_v = rows - 1;
    let a = attention_weights(t0, weights, enc, 0)?;
    let wv = &weights.layers[0].wv;
    let wvt = wv.transpose()?;
    let eye = Tensor::identity(d);

    // backward: rows of ΔT_0
    let cls_jac = wv.scale(a.get2(0, 0)).add(&eye)?;
    let mut delta_t0 = Vec::with_capacity(rows * d);
    delta_t0.extend(delta_cls.matmul(&cls_jac.transpose()?)?.scale(-1.0).into_data());
    let dw = delta_cls.matmul(&wvt)?;
    for j in 1..rows {
        delta_t0.extend(dw.scale(-a.get2(0, j)).into_data());
    }
    let delta_t0 = Tensor::new(vec![rows, d], delta_t0)?;

    // forward: Δz_v^{1,i} = Σ_j A_ij ΔT_0[j] W_V + ΔT_0[i]
    let mixed = a.matmul(&delta_t0.matmul(wv)?)?.add(&delta_t0)?;
    let delta_zv1 = mixed.rows(1, rows)?;

    let cls_term = cls_jac.transpose()?.matmul(wv)?;
    let wtw = wvt.matmul(wv)?;
    let m = (1..=n_v)
        .map(|i| {
            let mut mi = cls_term.scale(a.get2(i, 0));
            let inner: f64 = (1..rows).map(|j| a.get2(i, j) * a.get2(0, j)).sum();
            mi = mi.add(&wtw.scale(inner))?;
            mi.add(&wvt.scale(a.get2(0, i)))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Propagation {
        delta_t0,
        delta_zv1,
        m,
        attention: a,
    })
}

/// The same backward–forward construction with the full Jacobian, softmax
/// derivative included: backward via the tape, forward as an exact
/// directional derivative of the layer.
pub fn prop2_propagate_full(
    t0: &Tensor,
    weights: &EncoderWeights,
    enc: &EncoderConfig,
    delta_cls: &Tensor,
) -> Result<(Tensor, Tensor)> {
    single_layer(weights, enc)?;
    let (rows, d) = t0.dims2()?;
    if delta_cls.shape() != [1, d] {
        return Err(Error::shape("prop2_propagate_full", delta_cls.shape(), &[1, d]));
    }
    let lw = &weights.layers[0];

    let tape = Tape::new();
    let t = tape.variable(t0.clone());
    let lv = LayerVars {
        wq: tape.constant(lw.wq.clone()),
        wk: tape.constant(lw.wk.clone()),
        wv: tape.constant(lw.wv.clone()),
    };
    let q = tape.matmul(t, lv.wq)?;
    let k = tape.matmul(t, lv.wk)?;
    let v = tape.matmul(t, lv.wv)?;
    let att = tape.softmax_rows(tape.matmul(q, tape.transpose(k)?)?, enc.scale())?;
    let out = tape.add(t, tape.matmul(att, v)?)?;
    let cls = tape.row_slice(out, 0, 1)?;
    let probe = tape.mul(cls, tape.constant(delta_cls.clone()))?;
    let s = tape.sum(probe)?;
    let delta_t0 = tape.gradients(s, &[t])?.remove(0).scale(-1.0);

    let tangent = layer_jvp(t0, &delta_t0, weights, enc)?;
    Ok((delta_t0, tangent.rows(1, rows)?))
}

/// Directional derivative of `T ↦ T + softmax(s·T W_Q (T W_K)ᵀ) T W_V` at `t`
/// along `dt`.
pub fn layer_jvp(t: &Tensor, dt: &Tensor, weights: &EncoderWeights, enc: &EncoderConfig) -> Result<Tensor> {
    let lw = &weights.layers[0];
    let scale = enc.scale();
    let q = t.matmul(&lw.wq)?;
    let k = t.matmul(&lw.wk)?;
    let v = t.matmul(&lw.wv)?;
    let a = softmax_rows(&q.matmul(&k.transpose()?)?, scale)?;
    let dq = dt.matmul(&lw.wq)?;
    let dk = dt.matmul(&lw.wk)?;
    let dv = dt.matmul(&lw.wv)?;
    let ds = dq.matmul(&k.transpose()?)?.add(&q.matmul(&dk.transpose()?)?)?.scale(scale);
    let (n, _) = a.dims2()?;
    let mut da = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let inner: f64 = (0..n).map(|j| a.get2(i, j) * ds.get2(i, j)).sum();
        for j in 0..n {
            da.data_mut()[i * n + j] = a.get2(i, j) * (ds.get2(i, j) - inner);
        }
    }
    dt.add(&da.matmul(&v)?)?.add(&a.matmul(&dv)?)
}

/// `(2(1+δ_A)σ_V + (1+δ_A)²σ_V²) / √n_v`.
pub fn ratio_bound(n_v: usize, delta_a: f64, sigma_v: f64) -> f64 {
    let c = (1.0 + delta_a) * sigma_v;
    (2.0 * c + c * c) / (n_v as f64).sqrt()
}

/// Per-token bound on `‖M_i‖₂`: `(2(1+δ_A)σ_V + (1+δ_A)²σ_V²) / (n_v + 1)`.
pub fn m_norm_bound(n_v: usize, delta_a: f64, sigma_v: f64) -> f64 {
    let c = (1.0 + delta_a) * sigma_v;
    (2.0 * c + c * c) / (n_v as f64 + 1.0)
}

/// `ε_V` such that `(3 + ε_V)/√n_v` equals [`ratio_bound`].
pub fn epsilon_v(delta_a: f64, sigma_v: f64) -> f64 {
    let c = (1.0 + delta_a) * sigma_v;
    2.0 * c + c * c - 3.0
}

pub fn simplified_bound(n_v: usize, delta_a: f64, sigma_v: f64) -> f64 {
    (3.0 + epsilon_v(delta_a, sigma_v)) / (n_v as f64).sqrt()
}

/// How attention is arranged in the verifier's random encoders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Prop2Regime {
    /// `W_Q = W_K = 0`: exactly uniform attention, `δ_A = 0`.
    #[default]
    Uniform,
    /// Gaussian `W_Q`, `W_K` with the given standard deviation; `δ_A` is measured.
    Measured { qk_std: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2Trial {
    pub sigma_v: f64,
    /// Class-row attention deviation.
    pub delta_a: f64,
    /// Attention deviation over all rows; this is what the bound uses.
    pub delta_a_all_rows: f64,
    pub ratio: f64,
    pub full_jacobian_ratio: f64,
    pub bound: f64,
    pub max_m_norm: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2Report {
    pub n_v: usize,
    pub trials: usize,
    pub regime: Prop2Regime,
    pub spectral_cap: f64,
    /// Largest measured class-row `δ_A`.
    pub delta_a: f64,
    pub delta_a_all_rows: f64,
    /// Largest measured `σ_V`.
    pub sigma_v: f64,
    /// `‖M_i‖₂` per patch token for the trial with the largest ratio.
    pub m_norms: Vec<f64>,
    pub m_norm_bound: f64,
    /// Largest `‖Δz_v¹‖_F / ‖Δz_cls¹‖₂`.
    pub ratio: f64,
    pub full_jacobian_ratio: f64,
    /// Bound for the trial with the largest ratio.
    pub bound: f64,
    pub epsilon_v: f64,
    pub simplified_bound: f64,
    /// Smallest `bound − ratio` over all trials.
    pub min_slack: f64,
    pub ratio_below_one: bool,
    pub holds: bool,
    pub per_trial: Vec<Prop2Trial>,
}

/// Random single-layer trials of the propagation bound.
///
/// Each trial draws a single-layer encoder from `config` (layers and heads
/// forced to one), a value projection rescaled to a random spectral norm in
/// `[0.1, 1]·spectral_cap`, a synthetic image, and a random unit class-token
/// perturbation.
pub fn prop2_verify(
    config: &EncoderConfig,
    seed: u64,
    trials: usize,
    spectral_cap: f64,
    regime: Prop2Regime,
) -> Result<Prop2Report> {
    use rand::Rng;

    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let enc = EncoderConfig {
        layers: 1,
        heads: 1,
        use_layernorm: false,
        ..config.clone()
    };
    enc.validate()?;
    let n_v = enc.n_v();
    let d = enc.d_v;
    let streams = SeedStreams::new(seed);

    let run_trial = |t: usize| -> Result<(Prop2Trial, Vec<f64>)> {
        let ts = streams.child(&format!("prop2.trial{t}"));
        let mut rng = ts.stream("draws");
        let sigma_target = spectral_cap * rng.random_range(0.1..=1.0);
        let mut w = init_weights(&enc, ts.child("weights").seed(), sigma_target)?;
        match regime {
            Prop2Regime::Uniform => {
                w.layers[0].wq = Tensor::zeros(&[d, d]);
                w.layers[0].wk = Tensor::zeros(&[d, d]);
            }
            Prop2Regime::Measured { qk_std } => {
                w.layers[0].wq = gaussian(&mut rng, &[d, d], qk_std);
                w.layers[0].wk = gaussian(&mut rng, &[d, d], qk_std);
            }
        }
        let image = synth_images(1, ts.child("image").seed(), &SynthSpec::default(), &enc)?.remove(0);
        let t0 = encode(&image, &w, &enc)?.layers.remove(0);
        let dir = gaussian(&mut rng, &[1, d], 1.0);
        let delta = dir.scale(1.0 / dir.frobenius_norm());

        let p = prop2_propagate(&t0, &w, &enc, &delta)?;
        let (_, full) = prop2_propagate_full(&t0, &w, &enc, &delta)?;
        let sigma_v = linalg::spectral_norm(&w.layers[0].wv)?;
        let delta_a = attention_deviation(&p.attention)?;
        let delta_a_all = attention_deviation_all_rows(&p.attention)?;
        let ratio = p.delta_zv1.frobenius_norm() / delta.frobenius_norm();
        let full_ratio = full.frobenius_norm() / delta.frobenius_norm();
        let bound = ratio_bound(n_v, delta_a_all, sigma_v);
        // uniform attention makes every M_i identical; reuse the last norm
        let mut m_norms: Vec<f64> = Vec::with_capacity(p.m.len());
        for (i, m) in p.m.iter().enumerate() {
            let norm = match m_norms.last() {
                Some(&prev) if p.m[i - 1] == *m => prev,
                _ => linalg::spectral_norm(m)?,
            };
            m_norms.push(norm);
        }
        let max_m = m_norms.iter().cloned().fold(0.0, f64::max);
        let trial = Prop2Trial {
            sigma_v,
            delta_a,
            delta_a_all_rows: delta_a_all,
            ratio,
            full_jacobian_ratio: full_ratio,
            bound,
            max_m_norm: max_m,
            holds: ratio <= bound * (1.0 + PROP2_SLACK),
        };
        Ok((trial, m_norms))
    };
    let outcomes = (0..trials).into_par_iter().map(run_trial).collect::<Result<Vec<_>>>()?;
    let mut per_trial = Vec::with_capacity(trials);
    let mut worst: Option<(f64, Vec<f64>)> = None;
    for (trial, m_norms) in outcomes {
        if worst.as_ref().is_none_or(|(r, _)| trial.ratio > *r) {
            worst = Some((trial.ratio, m_norms));
        }
        per_trial.push(trial);
    }

    let worst_idx = per_trial
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.ratio.total_cmp(&b.1.ratio))
        .map(|(i, _)| i)
        .expect("at least one trial");
    let wt = &per_trial[worst_idx];
    let max_of = |f: fn(&Prop2Trial) -> f64| per_trial.iter().map(f).fold(0.0, f64::max);
    let (delta_a, delta_a_all, sigma_v) = (
        max_of(|t| t.delta_a),
        max_of(|t| t.delta_a_all_rows),
        max_of(|t| t.sigma_v),
    );
    Ok(Prop2Report {
        n_v,
        trials,
        regime,
        spectral_cap,
        delta_a,
        delta_a_all_rows: delta_a_all,
        sigma_v,
        m_norms: worst.map(|w| w.1).unwrap_or_default(),
        m_norm_bound: m_norm_bound(n_v, wt.delta_a_all_rows, wt.sigma_v),
        ratio: wt.ratio,
        full_jacobian_ratio: max_of(|t| t.full_jacobian_ratio),
        bound: wt.bound,
        epsilon_v: epsilon_v(delta_a_all, sigma_v),
        simplified_bound: simplified_bound(n_v, delta_a_all, sigma_v),
        min_slack: per_trial.iter().map(|t| t.bound - t.ratio).fold(f64::INFINITY, f64::min),
        ratio_below_one: per_trial.iter().all(|t| t.ratio < 1.0),
        holds: per_trial.iter().all(|t| t.holds),
        per_trial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_layer(image_size: usize, patch_size: usize, d_v: usize) -> EncoderConfig {
        EncoderConfig {
            image_size,
            patch_size,
            channels: 1,
            d_v,
            layers: 1,
            heads: 1,
            ..Default::default()
        }
    }

    fn rotation(d: usize, seed: u64) -> Tensor {
        // Householder reflection: orthogonal, all singular values 1
        let mut rng = SeedStreams::new(seed).stream("rot");
        let u = gaussian(&mut rng, &[d, 1], 1.0);
        let u = u.scale(1.0 / u.frobenius_norm());
        Tensor::identity(d).sub(&u.matmul(&u.transpose().unwrap()).unwrap().scale(2.0)).unwrap()
    }

    fn t0_for(enc: &EncoderConfig, w: &EncoderWeights) -> Tensor {
        let img = synth_images(1, 4, &SynthSpec::default(), enc).unwrap().remove(0);
        encode(&img, w, enc).unwrap().layers.remove(0)
    }

    #[test]
    fn zero_perturbation_propagates_to_zero() {
        let enc = one_layer(8, 4, 6);
        let w = init_weights(&enc, 1, 1.0).unwrap();
        let p = prop2_propagate(&t0_for(&enc, &w), &w, &enc, &Tensor::zeros(&[1, 6])).unwrap();
        assert_eq!(p.delta_t0.max_abs(), 0.0);
        assert_eq!(p.delta_zv1.max_abs(), 0.0);
    }

    #[test]
    fn multi_layer_rejected() {
        let enc = EncoderConfig {
            layers: 2,
            ..one_layer(8, 4, 6)
        };
        let w = init_weights(&enc, 1, 1.0).unwrap();
        let t0 = t0_for(&enc, &w);
        assert!(prop2_propagate(&t0, &w, &enc, &Tensor::zeros(&[1, 6])).is_err());
    }

    #[test]
    fn uniform_orthogonal_case() {
        let enc = one_layer(8, 4, 6);
        assert_eq!(enc.n_v(), 4);
        let mut w = init_weights(&enc, 2, 1.0).unwrap();
        w.layers[0].wq = Tensor::zeros(&[6, 6]);
        w.layers[0].wk = Tensor::zeros(&[6, 6]);
        w.layers[0].wv = rotation(6, 3);
        assert!((linalg::spectral_norm(&w.layers[0].wv).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ratio_bound(4, 0.0, 1.0), 1.5);
        let t0 = t0_for(&enc, &w);
        let mut rng = SeedStreams::new(5).stream("d");
        for _ in 0..50 {
            let d = gaussian(&mut rng, &[1, 6], 1.0);
            let p = prop2_propagate(&t0, &w, &enc, &d).unwrap();
            let ratio = p.delta_zv1.frobenius_norm() / d.frobenius_norm();
            assert!(ratio <= 1.5, "{ratio}");
        }
    }

    #[test]
    fn linear_in_perturbation_and_consistent_with_m() {
        let enc = one_layer(8, 4, 6);
        let w = init_weights(&enc, 7, 1.1).unwrap();
        let t0 = t0_for(&enc, &w);
        let d = Tensor::from_fn(&[1, 6], |i| i as f64 * 0.3 - 0.7);
        let p1 = prop2_propagate(&t0, &w, &enc, &d).unwrap();
        let p2 = prop2_propagate(&t0, &w, &enc, &d.scale(2.0)).unwrap();
        assert!(p2.delta_zv1.sub(&p1.delta_zv1.scale(2.0)).unwrap().max_abs() < 1e-12);
        assert!(p2.delta_t0.sub(&p1.delta_t0.scale(2.0)).unwrap().max_abs() < 1e-12);
        // Δz_v^{1,i} = −Δ M_i row by row
        let mut sumsq = 0.0;
        for (i, mi) in p1.m.iter().enumerate() {
            let row = d.matmul(mi).unwrap().scale(-1.0);
            for (a, b) in row.data().iter().zip(p1.delta_zv1.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
            sumsq += row.sum_squares();
        }
        assert!((sumsq.sqrt() - p1.delta_zv1.frobenius_norm()).abs() < 1e-12);
    }

    #[test]
    fn backward_step_is_the_fixed_attention_gradient() {
        // with W_Q = W_K = 0 the softmax has no derivative, so the full-Jacobian
        // route must agree with the linearized one
        let enc = one_layer(8, 4, 5);
        let mut w = init_weights(&enc, 8, 0.9).unwrap();
        w.layers[0].wq = Tensor::zeros(&[5, 5]);
        w.layers[0].wk = Tensor::zeros(&[5, 5]);
        let t0 = t0_for(&enc, &w);
        let d = Tensor::from_fn(&[1, 5], |i| 1.0 - i as f64 * 0.4);
        let lin = prop2_propagate(&t0, &w, &enc, &d).unwrap();
        let (dt, dz) = prop2_propagate_full(&t0, &w, &enc, &d).unwrap();
        assert!(dt.sub(&lin.delta_t0).unwrap().max_abs() < 1e-12);
        assert!(dz.sub(&lin.delta_zv1).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn layer_jvp_matches_finite_difference() {
        let enc = one_layer(8, 4, 5);
        let w = init_weights(&enc, 9, 1.0).unwrap();
        let t0 = t0_for(&enc, &w);
        let dt = Tensor::from_fn(t0.shape(), |i| ((i * 7) % 5) as f64 * 0.1 - 0.2);
        let jvp = layer_jvp(&t0, &dt, &w, &enc).unwrap();
        let h = 1e-6;
        let plus = crate::encoder::apply_layer(&t0.add(&dt.scale(h)).unwrap(), &w, &enc, 0).unwrap();
        let minus = crate::encoder::apply_layer(&t0.sub(&dt.scale(h)).unwrap(), &w, &enc, 0).unwrap();
        let fd = plus.sub(&minus).unwrap().scale(0.5 / h);
        assert!(fd.sub(&jvp).unwrap().max_abs() < 1e-7);
    }

    #[test]
    fn documented_bound_values() {
        assert_eq!(simplified_bound(256, 0.0, 1.0), 3.0 / 16.0);
        assert!(simplified_bound(256, 0.0, 1.23) < 1.0);
        assert!((simplified_bound(16, 0.05, 0.8) - ratio_bound(16, 0.05, 0.8)).abs() < 1e-15);
        assert_eq!(epsilon_v(0.0, 1.0), 0.0);
        // the degenerate single-token case exceeds one
        assert!(ratio_bound(1, 0.0, 2.0) > 1.0);
    }

    #[test]
    fn verify_uniform_regime_small() {
        let enc = one_layer(16, 4, 8);
        let r = prop2_verify(&enc, 1, 40, 1.0, Prop2Regime::Uniform).unwrap();
        assert!(r.holds && r.ratio_below_one, "{r:?}");
        assert_eq!(r.delta_a, 0.0);
        assert!(r.sigma_v <= 1.0 + 1e-9);
        assert!((r.full_jacobian_ratio - r.ratio).abs() < 1e-9 || r.full_jacobian_ratio <= r.ratio + 1e-9);
        let capped = prop2_verify(&enc, 2, 20, 1.23, Prop2Regime::Uniform).unwrap();
        assert!(capped.ratio_below_one);
    }

    #[test]
    fn verify_single_token_records_without_asserting() {
        let enc = one_layer(4, 4, 4);
        assert_eq!(enc.n_v(), 1);
        let r = prop2_verify(&enc, 3, 5, 3.0, Prop2Regime::Uniform).unwrap();
        assert!(r.holds);
        assert!(r.bound > 0.0 && r.ratio >= 0.0);
    }

    #[test]
    fn measured_regime_holds() {
        let enc = one_layer(16, 4, 8);
        let r = prop2_verify(&enc, 4, 30, 1.0, Prop2Regime::Measured { qk_std: 0.05 }).unwrap();
        assert!(r.delta_a > 0.0);
        assert!(r.holds, "{r:?}");
    }
}
