//! Property tests for the numeric core, the bounds and the file formats.

use nalgebra::DMatrix;
use proptest::prelude::*;
use veattack_core::alignment::prop1_check;
use veattack_core::analysis::prop2::PROP2_SLACK;
use veattack_core::analysis::{prop2_propagate, ratio_bound};
use veattack_core::encoder::{encode, init_weights, rescale_spectral};
use veattack_core::numcore::gradcheck::{central_difference, input_gradient};
use veattack_core::numcore::linalg::{extremal_singular_values, kron, singular_values, spectral_norm, vec_columns};
use veattack_core::toolkit::io::{tensor_from_bytes, tensor_to_bytes, Bundle};
use veattack_core::{pgd_attack, AlignmentWeights, AttackConfig, EncoderConfig, Objective, Precision, Tape, Tensor, Var};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..6, 1usize..6)
}

fn to_na(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = t.dims2().unwrap();
    DMatrix::from_row_slice(r, c, t.data())
}

/// Normwise agreement of the tape gradient with central differences.
fn grad_agrees<F>(f: F, x: &Tensor) -> Result<(), TestCaseError>
where
    F: Fn(&Tape, Var) -> veattack_core::Result<Var>,
{
    let (_, g) = input_gradient(&f, x).unwrap();
    let n = central_difference(&f, x, 1e-6).unwrap();
    let err = g.sub(&n).unwrap().max_abs();
    let scale = n.max_abs().max(1.0);
    prop_assert!(err <= 1e-6 * scale, "gradient error {err:e} at scale {scale}");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_gradient(a in matrix(3, 4), b in matrix(4, 2)) {
        grad_agrees(|t, x| {
            let y = t.matmul(x, t.constant(b.clone()))?;
            t.sum_squares(y)
        }, &a)?;
    }

    #[test]
    fn softmax_gradient(a in matrix(3, 5), w in matrix(3, 5), scale in 0.1f64..3.0) {
        grad_agrees(|t, x| {
            let s = t.softmax_rows(x, scale)?;
            t.sum(t.mul(s, t.constant(w.clone()))?)
        }, &a)?;
    }

    #[test]
    fn log_softmax_gradient(a in matrix(2, 6), w in matrix(2, 6)) {
        grad_agrees(|t, x| {
            let s = t.log_softmax_rows(x)?;
            t.sum(t.mul(s, t.constant(w.clone()))?)
        }, &a)?;
    }

    #[test]
    fn cosine_gradient(a in matrix(4, 3), b in matrix(4, 3)) {
        prop_assume!(a.row_norms().unwrap().iter().chain(&b.row_norms().unwrap()).all(|&n| n > 0.3));
        grad_agrees(|t, x| t.mean(t.cosine_rows(x, t.constant(b.clone()))?), &a)?;
    }

    #[test]
    fn layer_norm_gradient(a in matrix(3, 5), w in matrix(3, 5)) {
        grad_agrees(|t, x| {
            let y = t.layer_norm_rows(x, 1e-5)?;
            t.sum(t.mul(y, t.constant(w.clone()))?)
        }, &a)?;
    }

    #[test]
    fn slice_and_concat_gradient(a in matrix(4, 4), w in matrix(4, 4)) {
        grad_agrees(|t, x| {
            let top = t.row_slice(x, 0, 1)?;
            let rest = t.row_slice(x, 1, 4)?;
            let left = t.col_slice(rest, 0, 2)?;
            let right = t.col_slice(rest, 2, 4)?;
            let back = t.concat_rows(&[top, t.concat_cols(&[right, left])?])?;
            let y = t.mul(back, t.constant(w.clone()))?;
            t.sum_squares(y)
        }, &a)?;
    }

    #[test]
    fn frobenius_is_submultiplicative(
        (a, b) in (dims(), 1usize..6).prop_flat_map(|((m, k), n)| (matrix(m, k), matrix(k, n)))
    ) {
        let ab = a.matmul(&b).unwrap().frobenius_norm();
        let via_spectral = a.frobenius_norm() * spectral_norm(&b).unwrap();
        prop_assert!(ab <= via_spectral * (1.0 + 1e-12) + 1e-12);
        prop_assert!(via_spectral <= a.frobenius_norm() * b.frobenius_norm() * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn singular_values_match_independent_svd(a in dims().prop_flat_map(|(r, c)| matrix(r, c))) {
        let ours = singular_values(&a).unwrap();
        let mut theirs: Vec<f64> = to_na(&a).singular_values().iter().cloned().collect();
        theirs.sort_by(|x, y| y.partial_cmp(x).unwrap());
        let mut ours_sorted = ours.clone();
        ours_sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
        prop_assert_eq!(ours_sorted.len(), theirs.len());
        for (o, t) in ours_sorted.iter().zip(&theirs) {
            prop_assert!((o - t).abs() <= 1e-10 * theirs[0].max(1.0), "{o} vs {t}");
        }
        let top = spectral_norm(&a).unwrap();
        prop_assert!((top - theirs[0]).abs() <= 1e-12 * theirs[0].max(1.0), "{top} vs {}", theirs[0]);
    }

    #[test]
    fn singular_value_sandwich(w in matrix(4, 6), x in matrix(3, 4)) {
        let (smin, smax) = extremal_singular_values(&w).unwrap();
        let xw = x.matmul(&w).unwrap().frobenius_norm();
        let xn = x.frobenius_norm();
        prop_assert!(xw >= smin * xn * (1.0 - 1e-9) - 1e-12);
        prop_assert!(xw <= smax * xn * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn kronecker_vectorization(a in matrix(2, 3), x in matrix(3, 4), b in matrix(4, 2)) {
        // vec(A X B) = (Bᵀ ⊗ A) vec(X)
        let lhs = vec_columns(&a.matmul(&x).unwrap().matmul(&b).unwrap()).unwrap();
        let rhs = kron(&b.transpose().unwrap(), &a).unwrap().matmul(&vec_columns(&x).unwrap()).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-12 * (1.0 + lhs.max_abs()));
    }

    #[test]
    fn aligned_lower_bound(w in matrix(8, 12), clean in matrix(4, 8), delta in matrix(4, 8), scale in 0.0f64..1.0) {
        let adv = clean.add(&delta.scale(scale)).unwrap();
        let w = AlignmentWeights::new(w).unwrap();
        let r = prop1_check(&clean, &adv, &w).unwrap();
        prop_assert!(r.holds);
        prop_assert!(r.ratio_in_sandwich != Some(false));
    }

    #[test]
    fn tensor_bytes_roundtrip(t in matrix(3, 5), f32_mode in any::<bool>()) {
        let p = if f32_mode { Precision::F32 } else { Precision::F64 };
        let bytes = tensor_to_bytes(&t, p).unwrap();
        let (back, p2) = tensor_from_bytes(&bytes).unwrap();
        prop_assert_eq!(p2, p);
        prop_assert_eq!(tensor_to_bytes(&back, p).unwrap(), bytes);
        if p == Precision::F64 {
            prop_assert_eq!(back, t);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn bundle_bytes_roundtrip(seed in any::<u64>(), f32_mode in any::<bool>()) {
        let enc = EncoderConfig { image_size: 8, patch_size: 4, d_v: 6, layers: 2, ..Default::default() };
        let w = init_weights(&enc, seed, 0.9).unwrap();
        let a = AlignmentWeights::init(6, 5, seed).unwrap();
        let p = if f32_mode { Precision::F32 } else { Precision::F64 };
        let bytes = Bundle::new(&w, Some(&a), p).to_bytes().unwrap();
        let back = Bundle::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        back.encoder_weights().unwrap().check(&enc).unwrap();
    }

    #[test]
    fn attack_respects_budget(seed in any::<u64>(), k in 0u32..9, steps in 1usize..6, obj in 0usize..7) {
        let enc = EncoderConfig { image_size: 8, patch_size: 4, d_v: 8, layers: 2, ..Default::default() };
        let w = init_weights(&enc, seed, 1.0).unwrap();
        let img = Tensor::from_fn(&enc.image_shape(), |i| (((i as u64 * 7919) ^ seed) % 256) as f64 / 255.0);
        let eps = k as f64 / 255.0;
        let cfg = AttackConfig { epsilon: eps, alpha: eps.min(1.0 / 255.0), steps, objective: Objective::ALL[obj], seed, ..Default::default() };
        let (adv, trace) = pgd_attack(&img, &w, &enc, &cfg).unwrap();
        prop_assert!(adv.sub(&img).unwrap().max_abs() <= eps + 1e-12);
        prop_assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(trace.linf.iter().all(|&l| l <= eps + 1e-12));
        prop_assert_eq!(trace.steps(), steps);
    }

    #[test]
    fn propagation_bound_holds(seed in any::<u64>(), cap in 0.05f64..1.0, n_side in 1usize..4) {
        let enc = EncoderConfig { image_size: 4 * n_side, patch_size: 4, d_v: 6, layers: 1, ..Default::default() };
        let mut w = init_weights(&enc, seed, 1.0).unwrap();
        w.layers[0].wq = Tensor::zeros(&[6, 6]);
        w.layers[0].wk = Tensor::zeros(&[6, 6]);
        w.layers[0].wv = rescale_spectral(&w.layers[0].wv, cap).unwrap();
        let img = Tensor::from_fn(&enc.image_shape(), |i| (((i as u64 * 104729) ^ seed) % 97) as f64 / 96.0);
        let t0 = encode(&img, &w, &enc).unwrap().layers[0].clone();
        let delta = Tensor::from_fn(&[1, 6], |i| ((i as u64 + seed) % 5) as f64 - 2.0);
        prop_assume!(delta.frobenius_norm() > 0.0);
        let p = prop2_propagate(&t0, &w, &enc, &delta).unwrap();
        let ratio = p.delta_zv1.frobenius_norm() / delta.frobenius_norm();
        let bound = ratio_bound(enc.n_v(), 0.0, cap);
        prop_assert!(ratio <= bound + PROP2_SLACK, "{ratio} > {bound}");
    }
}
