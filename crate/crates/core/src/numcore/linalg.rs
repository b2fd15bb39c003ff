//! Singular values and related matrix facts.

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// All `min(m, n)` singular values of `a`, sorted in descending order.
///
/// One-sided Jacobi rotations on the columns of `a` (or `aᵀ` when `a` is
/// wide) until every column pair is numerically orthogonal.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    let (m, n) = a.dims2()?;
    let work = if m >= n { a.clone() } else { a.transpose()? };
    let (rows, cols) = work.dims2()?;
    // column-major copy for cache-friendly column rotations
    let mut colsv: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| work.get2(i, j)).collect())
        .collect();

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        // squared column norms, refreshed each sweep and updated per rotation
        let mut norms: Vec<f64> = colsv.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
        for p in 0..cols {
            for q in p + 1..cols {
                let (alpha, beta) = (norms[p], norms[q]);
                let gamma: f64 = colsv[p].iter().zip(&colsv[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = colsv.split_at_mut(q);
                let (cp, cq) = (&mut left[p], &mut right[0]);
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                norms[p] = (alpha - t * gamma).max(0.0);
                norms[q] = beta + t * gamma;
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { sweeps: MAX_SWEEPS });
    }
    let mut sv: Vec<f64> = colsv
        .iter()
        .map(|c| c.iter().fold(0.0, |acc, v| acc + v * v).sqrt())
        .collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv)
}

/// `(σ_min, σ_max)` over the `min(m, n)` singular values.
pub fn extremal_singular_values(a: &Tensor) -> Result<(f64, f64)> {
    let sv = singular_values(a)?;
    Ok((sv[sv.len() - 1], sv[0]))
}

/// Largest singular value (operator 2-norm).
///
/// Computed as the square root of the largest eigenvalue of the smaller Gram
/// matrix (Householder tridiagonalisation, then Sturm-sequence bisection).
/// The top eigenvalue is well conditioned, so this matches the Jacobi value
/// to a few ulps at a fraction of the cost.
pub fn spectral_norm(a: &Tensor) -> Result<f64> {
    let (m, n) = a.dims2()?;
    let gram = if m >= n {
        a.transpose()?.matmul(a)?
    } else {
        a.matmul(&a.transpose()?)?
    };
    let (d, e) = tridiagonalize(&gram)?;
    Ok(largest_tridiagonal_eigenvalue(&d, &e).max(0.0).sqrt())
}

/// Householder reduction of a symmetric matrix to tridiagonal form, returned
/// as `(diagonal, off-diagonal)`.
fn tridiagonalize(s: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, n2) = s.dims2()?;
    if n != n2 {
        return Err(Error::shape("tridiagonalize", s.shape(), &[n2, n]));
    }
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| s.row(i).to_vec()).collect();
    let mut e = vec![0.0; n.saturating_sub(1)];
    for k in 0..n.saturating_sub(2) {
        let x: Vec<f64> = (k + 1..n).map(|i| a[i][k]).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        let vn = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if vn == 0.0 {
            e[k] = alpha;
            continue;
        }
        v.iter_mut().for_each(|t| *t /= vn);
        // B <- H B H on the trailing block, with H = I - 2 v vᵀ
        let off = k + 1;
        let p: Vec<f64> = (0..v.len())
            .map(|i| a[off + i][off..].iter().zip(&v).map(|(b, vj)| b * vj).sum())
            .collect();
        let kk: f64 = v.iter().zip(&p).map(|(a, b)| a * b).sum();
        let q: Vec<f64> = p.iter().zip(&v).map(|(pi, vi)| pi - kk * vi).collect();
        for i in 0..v.len() {
            for j in 0..v.len() {
                a[off + i][off + j] -= 2.0 * (v[i] * q[j] + q[i] * v[j]);
            }
        }
        e[k] = alpha;
        for i in off..n {
            a[i][k] = 0.0;
            a[k][i] = 0.0;
        }
    }
    if n >= 2 {
        e[n - 2] = a[n - 1][n - 2];
    }
    Ok(((0..n).map(|i| a[i][i]).collect(), e))
}

/// Largest eigenvalue of a symmetric tridiagonal matrix by bisection on the
/// Sturm count.
fn largest_tridiagonal_eigenvalue(d: &[f64], e: &[f64]) -> f64 {
    let n = d.len();
    let radius = |i: usize| {
        (if i > 0 { e[i - 1].abs() } else { 0.0 }) + (if i + 1 < n { e[i].abs() } else { 0.0 })
    };
    let mut lo = (0..n).map(|i| d[i] - radius(i)).fold(f64::INFINITY, f64::min);
    let mut hi = (0..n).map(|i| d[i] + radius(i)).fold(f64::NEG_INFINITY, f64::max);
    let scale = lo.abs().max(hi.abs());
    if scale == 0.0 {
        return 0.0;
    }
    // number of eigenvalues strictly below x
    let below = |x: f64| {
        let mut count = 0;
        let mut q = 1.0;
        for i in 0..n {
            let sub = if i > 0 { e[i - 1] * e[i - 1] / q } else { 0.0 };
            q = d[i] - x - sub;
            if q == 0.0 {
                q = -f64::EPSILON * scale;
            }
            if q < 0.0 {
                count += 1;
            }
        }
        count
    };
    while hi - lo > 2.0 * f64::EPSILON * scale {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if below(mid) == n {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Eigenvalues of a symmetric matrix via cyclic two-sided Jacobi, ascending.
pub fn symmetric_eigenvalues(s: &Tensor) -> Result<Vec<f64>> {
    let (n, n2) = s.dims2()?;
    if n != n2 {
        return Err(Error::shape("symmetric_eigenvalues", s.shape(), &[n2, n]));
    }
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| s.row(i).to_vec()).collect();
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - sn * akq;
                    a[k][q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - sn * aqk;
                    a[q][k] = sn * apk + c * aqk;
                }
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence { sweeps: MAX_SWEEPS });
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Extremal singular values from the eigenvalues of the smaller Gram matrix.
/// Independent of [`singular_values`]; used to cross-validate it.
pub fn gram_extremal_singular_values(a: &Tensor) -> Result<(f64, f64)> {
    let (m, n) = a.dims2()?;
    let gram = if m >= n {
        a.transpose()?.matmul(a)?
    } else {
        a.matmul(&a.transpose()?)?
    };
    let ev = symmetric_eigenvalues(&gram)?;
    Ok((ev[0].max(0.0).sqrt(), ev[ev.len() - 1].max(0.0).sqrt()))
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let (r, c) = (ar * br, ac * bc);
    Ok(Tensor::from_fn(&[r, c], |idx| {
        let (i, j) = (idx / c, idx % c);
        a.get2(i / br, j / bc) * b.get2(i % br, j % bc)
    }))
}

/// Column-stacking vectorization `vec(a)`, returned as an `(m·n) x 1` matrix.
pub fn vec_columns(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    Tensor::new(vec![m * n, 1], (0..n).flat_map(|j| (0..m).map(move |i| a.get2(i, j))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn spectral_norm_matches_jacobi() {
        for (seed, shape) in [(1, [5, 3]), (2, [3, 7]), (3, [6, 6]), (4, [64, 64]), (5, [1, 4]), (6, [2, 1])] {
            let a = pseudo(&shape, seed);
            let fast = spectral_norm(&a).unwrap();
            let jacobi = singular_values(&a).unwrap()[0];
            assert!(((fast - jacobi) / jacobi).abs() < 1e-13, "{shape:?}: {fast} vs {jacobi}");
        }
        assert_eq!(spectral_norm(&Tensor::zeros(&[3, 3])).unwrap(), 0.0);
        assert!((spectral_norm(&Tensor::identity(5)).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_and_diagonal() {
        assert_eq!(extremal_singular_values(&Tensor::identity(4)).unwrap(), (1.0, 1.0));
        let d = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(extremal_singular_values(&d).unwrap(), (2.0, 3.0));
    }

    #[test]
    fn zero_matrix() {
        assert_eq!(extremal_singular_values(&Tensor::zeros(&[3, 2])).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn agrees_with_gram_eigenvalues() {
        for (seed, shape) in [(1, [5, 3]), (2, [3, 7]), (3, [6, 6]), (4, [8, 12])] {
            let a = pseudo(&shape, seed);
            let (lo, hi) = extremal_singular_values(&a).unwrap();
            let (glo, ghi) = gram_extremal_singular_values(&a).unwrap();
            assert!(((lo - glo) / glo).abs() < 1e-9, "{lo} {glo}");
            assert!(((hi - ghi) / ghi).abs() < 1e-9, "{hi} {ghi}");
        }
    }

    #[test]
    fn kron_vectorization_identity() {
        // vec(X W) == (Wᵀ ⊗ I) vec(X)
        let x = pseudo(&[3, 2], 9);
        let w = pseudo(&[2, 4], 10);
        let lhs = vec_columns(&x.matmul(&w).unwrap()).unwrap();
        let rhs = kron(&w.transpose().unwrap(), &Tensor::identity(3))
            .unwrap()
            .matmul(&vec_columns(&x).unwrap())
            .unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() < 1e-12);
        }
    }
}
