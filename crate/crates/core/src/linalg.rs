//! Krylov and dense linear algebra shared by the solvers.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

/// Outcome of a conjugate-gradient solve.
#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `||b - A x|| / ||b||` in the solver's inner product.
    pub residual: f64,
}

/// Conjugate gradients for `A x = b`, `A` self-adjoint and positive
/// (semi)definite with respect to `inner`.
///
/// Stops when the relative residual drops below `tol`; returns
/// [`Error::NotConverged`] when `max_iters` is exhausted first.
pub fn conjugate_gradient<A, I>(apply: A, inner: I, b: &[f64], x0: Option<&[f64]>, tol: f64, max_iters: usize) -> Result<CgOutcome>
where
    A: Fn(&[f64]) -> Vec<f64>,
    I: Fn(&[f64], &[f64]) -> f64,
{
    let n = b.len();
    let bnorm = inner(b, b).sqrt();
    if bnorm == 0.0 {
        return Ok(CgOutcome { x: vec![0.0; n], iterations: 0, residual: 0.0 });
    }
    let mut x = x0.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let mut r = if x0.is_some() {
        let ax = apply(&x);
        b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect()
    } else {
        b.to_vec()
    };
    let mut p = r.clone();
    let mut rr = inner(&r, &r);
    let mut iterations = 0;
    while rr.sqrt() > tol * bnorm {
        if iterations == max_iters {
            return Err(Error::NotConverged { iterations, residual: rr.sqrt() / bnorm });
        }
        let ap = apply(&p);
        let pap = inner(&p, &ap);
        if !(pap > 0.0) {
            // breakdown: the residual direction lies in the kernel
            break;
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        iterations += 1;
        // periodic true-residual refresh limits drift on long runs
        if iterations % 50 == 0 {
            let ax = apply(&x);
            for i in 0..n {
                r[i] = b[i] - ax[i];
            }
        }
        let rr_new = inner(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Ok(CgOutcome { x, iterations, residual: rr.sqrt() / bnorm })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest eigenvalue and its eigenvector of a symmetric matrix.
pub fn max_eigenpair(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let eig = m.clone().symmetric_eigen();
    let (values, vectors) = if eig.eigenvectors.iter().chain(eig.eigenvalues.iter()).all(|x| x.is_finite()) {
        (eig.eigenvalues, eig.eigenvectors)
    } else {
        // nalgebra's QR iteration breaks down on some spectra spanning hundreds of decades
        jacobi_eigen(m)
    };
    let (k, val) = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, v)| (k, *v))
        .expect("nonempty matrix");
    (val, vectors.column(k).into_owned())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn jacobi_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let mut a = (m + m.transpose()) * 0.5;
    let mut v = DMatrix::identity(n, n);
    let total = a.norm_squared();
    for _ in 0..100 {
        let off = a.norm_squared() - a.diagonal().norm_squared();
        if off <= 1e-36 * total {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    (a.diagonal(), v)
}

/// Smallest `l >= 0` with `A - l B <= 0` (Loewner order), `B` positive semidefinite.
///
/// Returns [`Error::NonObservable`] when `A` is positive somewhere on the
/// kernel of `B`, i.e. no finite `l` exists.
pub fn min_dominating_weight(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let n = a.nrows();
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let (top, _) = max_eigenpair(a);
    if top <= 1e-14 * scale {
        return Ok(0.0);
    }
    let eig = b.clone().symmetric_eigen();
    let bmax = eig.eigenvalues.amax();
    let cut = 1e-12 * bmax.max(f64::MIN_POSITIVE);
    let range: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > cut).collect();
    let kernel: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] <= cut).collect();
    if range.is_empty() {
        return Err(Error::NonObservable("observation form vanishes identically".into()));
    }
    let ur = DMatrix::from_fn(n, range.len(), |r, c| eig.eigenvectors[(r, range[c])]);
    let uk = DMatrix::from_fn(n, kernel.len(), |r, c| eig.eigenvectors[(r, kernel[c])]);
    if !kernel.is_empty() {
        let akk = uk.transpose() * a * &uk;
        let (kmax, _) = max_eigenpair(&akk);
        if kmax > 1e-10 * scale {
            return Err(Error::NonObservable(format!(
                "quadratic form is positive ({kmax:e}) on the kernel of the observation form"
            )));
        }
    }
    let cross = if kernel.is_empty() { 0.0 } else { (ur.transpose() * a * &uk).amax() };
    if cross <= 1e-12 * scale {
        let w = DMatrix::from_fn(n, range.len(), |r, c| ur[(r, c)] / eig.eigenvalues[range[c]].sqrt());
        let reduced = w.transpose() * a * &w;
        let (l, _) = max_eigenpair(&reduced);
        return Ok(l.max(0.0));
    }
    // general case: bisection on the top eigenvalue of A - l B
    let fails = |l: f64| max_eigenpair(&(a - b * l)).0 > 1e-13 * scale;
    let mut lo = 0.0;
    let mut hi = 1.0;
    while fails(hi) {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::NonObservable("no finite weight dominates the form".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if fails(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(hi)
}

/// `max x^T A x / x^T B x` for `A` and `B` positive semidefinite, restricted to
/// the range of `B`.
pub fn max_generalized_rayleigh_dense(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    min_dominating_weight(a, b)
}

/// Power iteration for `max x^T A x / x^T B x` with `A`, `B` positive semidefinite.
///
/// `solve_b` must return a (minimum-norm) solution of `B x = y`. Runs
/// `restarts` independent random starts and keeps the largest quotient.
pub fn power_generalized<R: Rng>(
    n: usize,
    apply_a: &dyn Fn(&[f64]) -> Vec<f64>,
    apply_b: &dyn Fn(&[f64]) -> Vec<f64>,
    solve_b: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    rng: &mut R,
    restarts: usize,
    tol: f64,
    max_iters: usize,
) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for _ in 0..restarts.max(1) {
        let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut prev = f64::NAN;
        let mut quotient = 0.0;
        for it in 0..max_iters {
            let ax = apply_a(&x);
            let mut next = solve_b(&ax)?;
            let norm = dot(&next, &next).sqrt();
            if norm == 0.0 {
                quotient = 0.0;
                break;
            }
            next.iter_mut().for_each(|v| *v /= norm);
            let num = dot(&next, &apply_a(&next));
            let den = dot(&next, &apply_b(&next));
            if !(den > 0.0) {
                return Err(Error::NonObservable("observation form vanishes on the iterate".into()));
            }
            quotient = num / den;
            x = next;
            if it > 0 && (quotient - prev).abs() <= tol * quotient.abs() {
                break;
            }
            prev = quotient;
        }
        best = best.max(quotient);
    }
    Ok(best)
}

/// Ordinary least squares fit `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Residual sum of squares.
    pub rss: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> LineFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - rss / syy } else { 1.0 };
    LineFit { slope, intercept, r2, rss }
}

/// Least-squares slope through the origin, `y = slope * x`.
pub fn fit_through_origin(x: &[f64], y: &[f64]) -> f64 {
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    if sxx == 0.0 {
        0.0
    } else {
        x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / sxx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &g * g.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn jacobi_matches_nalgebra() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, -2.0, 1.0, 3.0, 0.5, -2.0, 0.5, 1.0]);
        let (vals, vecs) = jacobi_eigen(&m);
        let mut want: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        let mut got: Vec<f64> = vals.iter().copied().collect();
        want.sort_by(f64::total_cmp);
        got.sort_by(f64::total_cmp);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-13, "{g} vs {w}");
        }
        let recon = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert!((recon - m).amax() <= 1e-13);
    }

    #[test]
    fn cg_solves_spd() {
        let a = spd(12, 1);
        let b: Vec<f64> = (0..12).map(|i| i as f64 - 5.0).collect();
        let out = conjugate_gradient(|x| (&a * DVector::from_column_slice(x)).as_slice().to_vec(), dot, &b, None, 1e-12, 500).unwrap();
        let exact = a.clone().lu().solve(&DVector::from_column_slice(&b)).unwrap();
        for (x, e) in out.x.iter().zip(exact.iter()) {
            assert!((x - e).abs() < 1e-9);
        }
        assert!(out.residual <= 1e-12);
        assert!(matches!(
            conjugate_gradient(|x| (&a * DVector::from_column_slice(x)).as_slice().to_vec(), dot, &b, None, 1e-14, 1),
            Err(Error::NotConverged { iterations: 1, .. })
        ));
    }

    #[test]
    fn dominating_weight_full_rank() {
        let a = spd(5, 2);
        let b = spd(5, 3);
        let l = min_dominating_weight(&a, &b).unwrap();
        // at the optimum A - l B is singular and negative semidefinite
        let (top, _) = max_eigenpair(&(&a - &b * l));
        assert!(top.abs() < 1e-10 * a.amax());
        let shifted = &a - DMatrix::identity(5, 5) * 100.0;
        assert_eq!(min_dominating_weight(&shifted, &b).unwrap(), 0.0);
    }

    #[test]
    fn dominating_weight_with_kernel() {
        // B is singular; A - eps I with A sharing the kernel of B
        let v = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.5, 1.0, 0.0, 0.3, 0.2, 0.0]);
        let b = &v * v.transpose();
        let a = &v * DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]) * v.transpose() - DMatrix::identity(4, 4) * 0.01;
        let l = min_dominating_weight(&a, &b).unwrap();
        assert!(max_eigenpair(&(&a - &b * l)).0 < 1e-10);
        assert!(max_eigenpair(&(&a - &b * (0.99 * l))).0 > 0.0);
        // positive on the kernel: no finite weight
        let bad = &a + DMatrix::identity(4, 4) * 0.5;
        assert!(matches!(min_dominating_weight(&bad, &b), Err(Error::NonObservable(_))));
    }

    #[test]
    fn power_iteration_matches_dense() {
        let a = spd(6, 4);
        let b = spd(6, 5);
        let dense = max_generalized_rayleigh_dense(&a, &b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mv = |m: &DMatrix<f64>, x: &[f64]| (m * DVector::from_column_slice(x)).as_slice().to_vec();
        let chol = b.clone().cholesky().unwrap();
        let p = power_generalized(
            6,
            &|x| mv(&a, x),
            &|x| mv(&b, x),
            &|y| Ok(chol.solve(&DVector::from_column_slice(y)).as_slice().to_vec()),
            &mut rng,
            3,
            1e-13,
            5000,
        )
        .unwrap();
        assert!((p - dense).abs() < 1e-8 * dense, "{p} vs {dense}");
    }

    #[test]
    fn line_fits() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [3.0, 5.0, 7.0, 9.0];
        let f = fit_line(&x, &y);
        assert!((f.slope - 2.0).abs() < 1e-14 && (f.intercept - 1.0).abs() < 1e-14);
        assert!((f.r2 - 1.0).abs() < 1e-14 && f.rss < 1e-20);
        assert!((fit_through_origin(&x, &[2.0, 4.0, 6.0, 8.0]) - 2.0).abs() < 1e-15);
    }
}

/// Dense matrix of a linear map between weighted spaces in orthonormal coordinates.
///
/// Inputs carry the inner product `w_in * dot`, outputs `w_out * dot`; entry
/// `(a, b)` is `<phi_a, op(phi_b)>` for the orthonormal unit vectors `phi`.
pub fn assemble(n_in: usize, n_out: usize, w_in: f64, w_out: f64, op: &dyn Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n_out, n_in);
    let scale = (w_out / w_in).sqrt();
    let mut e = vec![0.0; n_in];
    for b in 0..n_in {
        e[b] = 1.0;
        let col = op(&e);
        e[b] = 0.0;
        for a in 0..n_out {
            m[(a, b)] = scale * col[a];
        }
    }
    m
}
