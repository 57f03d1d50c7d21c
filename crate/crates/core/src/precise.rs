//! Extended-precision Gram factorization for the spectral-inequality constants.
//!
//! The smallest eigenvalue of a Gram window decays exponentially with the
//! window size and drops below double precision long before `J = 32`. The
//! Cholesky factor and its inverse are therefore computed in multiprecision;
//! `C(lambda) = ||L_k^{-1}||_2` is well conditioned once `L^{-1}` is known, so
//! the norm itself is taken in `f64`.

use astro_float::{BigFloat, Consts, RoundingMode};
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::spectral::Interval;

const RM: RoundingMode = RoundingMode::ToEven;
const START_BITS: usize = 128;
const MAX_BITS: usize = 16_384;

fn to_f64(x: &BigFloat) -> f64 {
    if x.is_zero() {
        return 0.0;
    }
    x.to_string().parse().unwrap_or(f64::NAN)
}

/// Cholesky factor of the full Gram matrix and its inverse.
pub struct PreciseGram {
    bits: usize,
    dim: usize,
    gram: Vec<Vec<BigFloat>>,
    inv_chol: Vec<Vec<BigFloat>>,
    inv_chol_f64: DMatrix<f64>,
}

/// Spectral constant of one window with its attaining function.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowConstant {
    pub constant: f64,
    /// Unit-norm coefficients (rounded) of the attaining function.
    pub witness: Vec<f64>,
    /// `| ||f|| / ||B* f|| - C | / C`, evaluated in working precision.
    pub attainment_residual: f64,
}

impl PreciseGram {
    /// Factors the `dim x dim` Gram matrix of `sqrt(2) sin(j pi x)` on the intervals,
    /// raising the precision until the factorization resolves the smallest eigenvalue.
    pub fn new(dim: usize, intervals: &[Interval]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidTruncation(0));
        }
        let mut bits = START_BITS;
        loop {
            if let Some(g) = Self::at_precision(dim, intervals, bits) {
                // relative accuracy of L^{-1} is about 2^-bits * C^2 * dim
                let c = g.window_norm(dim).0;
                let needed = 2.0 * c.log2() + (dim as f64).log2() + 64.0;
                if c.is_finite() && needed < bits as f64 {
                    return Ok(g);
                }
                bits = (2 * bits).max(needed.ceil() as usize + 64);
            } else {
                bits *= 2;
            }
            if bits > MAX_BITS {
                return Err(Error::NonObservable(format!(
                    "Gram matrix too ill-conditioned to factor within {MAX_BITS} bits"
                )));
            }
        }
    }

    fn at_precision(dim: usize, intervals: &[Interval], p: usize) -> Option<Self> {
        let mut cc = Consts::new().ok()?;
        let pi = cc.pi(p, RM);
        let zero = BigFloat::from_f64(0.0, p);
        let mut gram = vec![vec![zero.clone(); dim]; dim];
        for iv in intervals {
            for (x, sign) in [(iv.b, 1.0), (iv.a, -1.0)] {
                let bx = BigFloat::from_f64(x, p);
                let theta = pi.mul(&bx, p, RM);
                // sin(n pi x) / (n pi) for n = 1..2 dim
                let s: Vec<BigFloat> = (0..=2 * dim)
                    .map(|n| {
                        if n == 0 {
                            return zero.clone();
                        }
                        let bn = BigFloat::from_f64(n as f64, p);
                        theta.mul(&bn, p, RM).sin(p, RM, &mut cc).div(&pi.mul(&bn, p, RM), p, RM)
                    })
                    .collect();
                let sg = BigFloat::from_f64(sign, p);
                for i in 1..=dim {
                    for j in i..=dim {
                        let first = if i == j { bx.clone() } else { s[j - i].clone() };
                        let v = first.sub(&s[i + j], p, RM).mul(&sg, p, RM);
                        gram[i - 1][j - 1] = gram[i - 1][j - 1].add(&v, p, RM);
                    }
                }
            }
        }
        for i in 0..dim {
            for j in 0..i {
                gram[i][j] = gram[j][i].clone();
            }
        }
        // Cholesky, lower triangular
        let mut l = vec![vec![zero.clone(); dim]; dim];
        for j in 0..dim {
            let mut d = gram[j][j].clone();
            for k in 0..j {
                d = d.sub(&l[j][k].mul(&l[j][k], p, RM), p, RM);
            }
            if !d.is_positive() || d.is_zero() {
                return None;
            }
            let djj = d.sqrt(p, RM);
            for i in j + 1..dim {
                let mut v = gram[i][j].clone();
                for k in 0..j {
                    v = v.sub(&l[i][k].mul(&l[j][k], p, RM), p, RM);
                }
                l[i][j] = v.div(&djj, p, RM);
            }
            l[j][j] = djj;
        }
        // inverse of L by forward substitution, column by column
        let one = BigFloat::from_f64(1.0, p);
        let mut inv = vec![vec![zero.clone(); dim]; dim];
        for c in 0..dim {
            inv[c][c] = one.div(&l[c][c], p, RM);
            for i in c + 1..dim {
                let mut v = zero.clone();
                for k in c..i {
                    v = v.add(&l[i][k].mul(&inv[k][c], p, RM), p, RM);
                }
                inv[i][c] = v.neg().div(&l[i][i], p, RM);
            }
        }
        let inv_f64 = DMatrix::from_fn(dim, dim, |i, j| to_f64(&inv[i][j]));
        Some(Self { bits: p, dim, gram, inv_chol: inv, inv_chol_f64: inv_f64 })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `||L_k^{-1}||_2` and the top left singular vector.
    fn window_norm(&self, k: usize) -> (f64, Vec<f64>) {
        let w = self.inv_chol_f64.view((0, 0), (k, k)).into_owned();
        let svd = w.svd(true, false);
        let (idx, top) = svd.singular_values.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, s)| {
            if *s > acc.1 {
                (i, *s)
            } else {
                acc
            }
        });
        let u = svd.u.expect("requested").column(idx).iter().copied().collect();
        (top, u)
    }

    /// Constant of the leading `k x k` window.
    pub fn window(&self, k: usize) -> Result<WindowConstant> {
        if k == 0 || k > self.dim {
            return Err(Error::InvalidTruncation(k));
        }
        let p = self.bits;
        let (c, u) = self.window_norm(k);
        let zero = BigFloat::from_f64(0.0, p);
        // f = L_k^{-T} u
        let f: Vec<BigFloat> = (0..k)
            .map(|j| {
                (j..k).fold(zero.clone(), |acc, i| acc.add(&self.inv_chol[i][j].mul(&BigFloat::from_f64(u[i], p), p, RM), p, RM))
            })
            .collect();
        let mut ff = zero.clone();
        let mut fmf = zero.clone();
        for i in 0..k {
            ff = ff.add(&f[i].mul(&f[i], p, RM), p, RM);
            let mut row = zero.clone();
            for j in 0..k {
                row = row.add(&self.gram[i][j].mul(&f[j], p, RM), p, RM);
            }
            fmf = fmf.add(&f[i].mul(&row, p, RM), p, RM);
        }
        let ratio = to_f64(&ff.div(&fmf, p, RM).sqrt(p, RM));
        let norm = ff.sqrt(p, RM);
        let mut witness: Vec<f64> = f.iter().map(|x| to_f64(&x.div(&norm, p, RM))).collect();
        witness.resize(self.dim, 0.0);
        Ok(WindowConstant { constant: c, witness, attainment_residual: (ratio - c).abs() / c })
    }
}
