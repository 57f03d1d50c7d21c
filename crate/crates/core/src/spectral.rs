//! Truncated eigenbasis of the Dirichlet Laplacian on (0,1).
//!
//! States are coefficient vectors in the basis `e_j(x) = sqrt(2) sin(j pi x)`,
//! `j = 1..=J`, with `-A e_j = lambda_j e_j` and `lambda_j = (j pi)^2`. The
//! control operator `B = chi_G` is compressed onto the same basis as the Gram
//! matrix `M[i][j] = \int_G e_i e_j dx`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{sig_mat, sig_vec, Sig17};

/// Spatial domain of a [`SpectralModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    /// `-d^2/dx^2` on (0,1) with homogeneous Dirichlet conditions.
    #[serde(rename = "dirichlet-1d", alias = "dirichlet1d")]
    Dirichlet1d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralModel {
    eigenvalues: Vec<f64>,
    domain: Domain,
}

impl SpectralModel {
    /// Builds a model from an arbitrary nondecreasing positive spectrum.
    /// Repeated eigenvalues are allowed.
    pub fn from_eigenvalues(eigenvalues: Vec<f64>, domain: Domain) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::InvalidTruncation(0));
        }
        if eigenvalues.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::InvalidParameter("eigenvalues must be positive and finite".into()));
        }
        if eigenvalues.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter("eigenvalues must be nondecreasing".into()));
        }
        Ok(Self { eigenvalues, domain })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Evaluates the `j`-th eigenfunction (1-based) at `x`.
    pub fn eigenfunction(&self, j: usize, x: f64) -> f64 {
        match self.domain {
            Domain::Dirichlet1d => 2f64.sqrt() * (j as f64 * PI * x).sin(),
        }
    }

    /// Per-mode factors `exp(-lambda_j t)`.
    pub fn decay_factors(&self, t: f64) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| (-l * t).exp()).collect()
    }

    /// Applies `S(t)`: `(exp(-lambda_j t) v_j)_j`.
    pub fn apply_semigroup(&self, t: f64, v: &[f64]) -> Result<Vec<f64>> {
        if t < 0.0 || t.is_nan() {
            return Err(Error::NegativeTime(t));
        }
        self.check_len(v.len())?;
        Ok(self
            .eigenvalues
            .iter()
            .zip(v)
            .map(|(l, x)| (-l * t).exp() * x)
            .collect())
    }

    pub fn projector(&self, cutoff: f64) -> Result<SpectralProjector> {
        if !(cutoff > 0.0) || !cutoff.is_finite() {
            return Err(Error::InvalidCutoff(cutoff));
        }
        // ties are kept in the low window
        let index_set = (0..self.dim()).filter(|&j| self.eigenvalues[j] <= cutoff).collect();
        Ok(SpectralProjector { cutoff, index_set, dim: self.dim() })
    }

    /// Splits `v` into its low-frequency part (`lambda_j <= cutoff`) and the remainder.
    pub fn project(&self, cutoff: f64, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_len(v.len())?;
        let p = self.projector(cutoff)?;
        Ok((p.apply(v), p.apply_complement(v)))
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: n });
        }
        Ok(())
    }
}

/// Truncated spectrum of `-d^2/dx^2` on (0,1): `lambda_j = (j pi)^2`.
pub fn build_dirichlet_laplacian_1d(dim: usize) -> Result<SpectralModel> {
    if dim == 0 {
        return Err(Error::InvalidTruncation(0));
    }
    let eigenvalues = (1..=dim).map(|j| (j as f64 * PI).powi(2)).collect();
    Ok(SpectralModel { eigenvalues, domain: Domain::Dirichlet1d })
}

/// Spectral projector onto `{j : lambda_j <= cutoff}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralProjector {
    pub cutoff: f64,
    /// Zero-based mode indices kept by the projector.
    pub index_set: Vec<usize>,
    dim: usize,
}

impl SpectralProjector {
    pub fn complement_set(&self) -> Vec<usize> {
        (0..self.dim).filter(|j| !self.index_set.contains(j)).collect()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for &j in &self.index_set {
            out[j] = v[j];
        }
        out
    }

    pub fn apply_complement(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        for &j in &self.index_set {
            out[j] = 0.0;
        }
        out
    }
}

/// Closed subinterval `[a, b]` of (0,1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub a: f64,
    pub b: f64,
}

impl Interval {
    pub fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }

    pub fn len(&self) -> f64 {
        self.b - self.a
    }

    pub fn is_empty(&self) -> bool {
        !(self.b > self.a)
    }
}

/// Compressed observation operator `B = B* = chi_G` on the truncated basis.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationGram {
    intervals: Vec<Interval>,
    matrix: DMatrix<f64>,
}

impl ObservationGram {
    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn measure(&self) -> f64 {
        self.intervals.iter().map(Interval::len).sum()
    }

    /// `M v` for a coefficient vector.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, x) in v.iter().enumerate() {
                acc += self.matrix[(i, j)] * x;
            }
            *o = acc;
        }
        out
    }

    /// `M v` written into `out`, both of length J.
    pub fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.matrix[(i, j)] * v[j];
            }
            out[i] = acc;
        }
    }

    /// `v^T M w`.
    pub fn form(&self, v: &[f64], w: &[f64]) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.matrix[(i, j)] * w[j];
            }
            acc += v[i] * row;
        }
        acc
    }

    /// Principal submatrix on the given zero-based mode indices.
    pub fn submatrix(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), idx.len(), |r, c| self.matrix[(idx[r], idx[c])])
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim()).map(|i| self.matrix.row(i).iter().copied().collect()).collect()
    }
}

fn validate_intervals(intervals: &[Interval]) -> Result<Vec<Interval>> {
    if intervals.is_empty() {
        return Err(Error::InvalidRegion("control region has no intervals".into()));
    }
    let mut sorted = intervals.to_vec();
    for iv in &sorted {
        if !(iv.a.is_finite() && iv.b.is_finite()) || iv.a < 0.0 || iv.b > 1.0 {
            return Err(Error::InvalidRegion(format!("[{}, {}] is not contained in (0,1)", iv.a, iv.b)));
        }
        if iv.b < iv.a {
            return Err(Error::InvalidRegion(format!("[{}, {}] has reversed endpoints", iv.a, iv.b)));
        }
    }
    sorted.sort_by(|x, y| x.a.total_cmp(&y.a));
    for w in sorted.windows(2) {
        if w[1].a < w[0].b {
            return Err(Error::InvalidRegion(format!(
                "[{}, {}] overlaps [{}, {}]",
                w[0].a, w[0].b, w[1].a, w[1].b
            )));
        }
    }
    let total: f64 = sorted.iter().map(Interval::len).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidRegion("control region has zero measure".into()));
    }
    Ok(sorted)
}

/// Antiderivative of `2 sin(i pi x) sin(j pi x)` (1-based `i`, `j`).
fn product_primitive(i: usize, j: usize, x: f64) -> f64 {
    let s = (i + j) as f64 * PI;
    if i == j {
        x - (s * x).sin() / s
    } else {
        let d = (i as f64 - j as f64) * PI;
        (d * x).sin() / d - (s * x).sin() / s
    }
}

/// Closed-form Gram matrix of the eigenbasis over a finite union of intervals.
pub fn gram_matrix(model: &SpectralModel, intervals: &[Interval]) -> Result<ObservationGram> {
    let intervals = validate_intervals(intervals)?;
    let n = model.dim();
    let mut matrix = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v: f64 = intervals
                .iter()
                .map(|iv| product_primitive(i + 1, j + 1, iv.b) - product_primitive(i + 1, j + 1, iv.a))
                .sum();
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
    }
    Ok(ObservationGram { intervals, matrix })
}

/// JSON document `{"J", "lambda", "G", "gram"}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    #[serde(rename = "J")]
    pub dim: usize,
    pub lambda: Vec<Sig17>,
    #[serde(rename = "G")]
    pub region: Vec<[Sig17; 2]>,
    pub gram: Vec<Vec<Sig17>>,
}

impl ModelDocument {
    pub fn new(model: &SpectralModel, gram: &ObservationGram) -> Self {
        Self {
            dim: model.dim(),
            lambda: sig_vec(model.eigenvalues()),
            region: gram.intervals().iter().map(|iv| [Sig17(iv.a), Sig17(iv.b)]).collect(),
            gram: sig_mat(&gram.to_rows()),
        }
    }
}

/// Smallest eigenvalue and eigenvector of a symmetric matrix.
pub fn min_eigenpair(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let eig = m.clone().symmetric_eigen();
    let (k, val) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, v)| (k, *v))
        .expect("nonempty matrix");
    (val, eig.eigenvectors.column(k).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Composite Gauss-Legendre (5-point) on many panels; independent of the closed form.
    fn quadrature_entry(model: &SpectralModel, i: usize, j: usize, ivs: &[Interval]) -> f64 {
        const NODES: [f64; 5] = [
            -0.906_179_845_938_664,
            -0.538_469_310_105_683,
            0.0,
            0.538_469_310_105_683,
            0.906_179_845_938_664,
        ];
        const WEIGHTS: [f64; 5] = [
            0.236_926_885_056_189_1,
            0.478_628_670_499_366_5,
            0.568_888_888_888_888_9,
            0.478_628_670_499_366_5,
            0.236_926_885_056_189_1,
        ];
        let mut total = 0.0;
        for iv in ivs {
            let panels = 400;
            let h = iv.len() / panels as f64;
            for p in 0..panels {
                let mid = iv.a + (p as f64 + 0.5) * h;
                for (x, w) in NODES.iter().zip(WEIGHTS) {
                    let t = mid + 0.5 * h * x;
                    total += 0.5 * h * w * model.eigenfunction(i, t) * model.eigenfunction(j, t);
                }
            }
        }
        total
    }

    #[test]
    fn laplacian_eigenvalues() {
        let m = build_dirichlet_laplacian_1d(1).unwrap();
        assert!((m.eigenvalues()[0] - 9.869_604_401_089_358).abs() < 1e-12);
        let m = build_dirichlet_laplacian_1d(3).unwrap();
        let p2 = PI * PI;
        assert_eq!(m.eigenvalues(), &[p2, 4.0 * p2, 9.0 * p2]);
        let m = build_dirichlet_laplacian_1d(32).unwrap();
        assert_eq!(m.eigenvalues()[31], (32.0 * PI).powi(2));
        assert!(m.eigenvalues().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(build_dirichlet_laplacian_1d(0), Err(Error::InvalidTruncation(0)));
    }

    #[test]
    fn gram_full_domain_is_identity() {
        for n in [1, 5, 16] {
            let m = build_dirichlet_laplacian_1d(n).unwrap();
            let g = gram_matrix(&m, &[Interval::new(0.0, 1.0)]).unwrap();
            let id = DMatrix::<f64>::identity(n, n);
            assert!((g.matrix() - id).amax() < 1e-14);
        }
    }

    #[test]
    fn gram_half_interval_matches_quadrature() {
        let m = build_dirichlet_laplacian_1d(2).unwrap();
        let ivs = [Interval::new(0.0, 0.5)];
        let g = gram_matrix(&m, &ivs).unwrap();
        // frozen from the quadrature oracle: 0.5, 0.5, 4/(3 pi)
        let off = 0.424_413_181_578_387_6;
        assert!((quadrature_entry(&m, 1, 2, &ivs) - off).abs() < 1e-13);
        assert!((g.matrix()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((g.matrix()[(1, 1)] - 0.5).abs() < 1e-15);
        assert!((g.matrix()[(0, 1)] - off).abs() < 1e-15);
        assert!((g.matrix()[(1, 0)] - 4.0 / (3.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn gram_matches_quadrature_j4() {
        let m = build_dirichlet_laplacian_1d(4).unwrap();
        let ivs = [Interval::new(0.2, 0.7)];
        let g = gram_matrix(&m, &ivs).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let q = quadrature_entry(&m, i + 1, j + 1, &ivs);
                assert!((g.matrix()[(i, j)] - q).abs() < 1e-12, "({i},{j}) {} vs {q}", g.matrix()[(i, j)]);
            }
        }
    }

    #[test]
    fn gram_rejects_bad_regions() {
        let m = build_dirichlet_laplacian_1d(3).unwrap();
        assert!(matches!(gram_matrix(&m, &[Interval::new(0.1, 0.5), Interval::new(0.4, 0.6)]), Err(Error::InvalidRegion(_))));
        assert!(matches!(gram_matrix(&m, &[Interval::new(-0.1, 0.5)]), Err(Error::InvalidRegion(_))));
        assert!(matches!(gram_matrix(&m, &[Interval::new(0.3, 0.3)]), Err(Error::InvalidRegion(_))));
        assert!(matches!(gram_matrix(&m, &[]), Err(Error::InvalidRegion(_))));
        // touching endpoints are fine
        assert!(gram_matrix(&m, &[Interval::new(0.1, 0.3), Interval::new(0.3, 0.6)]).is_ok());
    }

    #[test]
    fn proper_region_is_strict_contraction() {
        let m = build_dirichlet_laplacian_1d(6).unwrap();
        let g = gram_matrix(&m, &[Interval::new(0.1, 0.4), Interval::new(0.6, 0.8)]).unwrap();
        let eig = g.matrix().clone().symmetric_eigen();
        assert!(eig.eigenvalues.max() < 1.0 - 1e-3);
        assert!(eig.eigenvalues.min() > 0.0);
    }

    #[test]
    fn semigroup_examples() {
        let m = build_dirichlet_laplacian_1d(4).unwrap();
        let v = vec![1.0, -2.0, 0.5, 3.0];
        assert_eq!(m.apply_semigroup(0.0, &v).unwrap(), v);
        let e1 = m.apply_semigroup(1.0, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(e1, vec![(-PI * PI).exp(), 0.0, 0.0, 0.0]);
        assert_eq!(m.apply_semigroup(-1.0, &v), Err(Error::NegativeTime(-1.0)));
    }

    #[test]
    fn projector_examples() {
        let m = build_dirichlet_laplacian_1d(3).unwrap();
        let v = vec![1.0, 2.0, 3.0];
        let (lo, hi) = m.project(1.0, &v).unwrap();
        assert_eq!(lo, vec![0.0; 3]);
        assert_eq!(hi, v);
        let (lo, _) = m.project(m.eigenvalues()[2], &v).unwrap();
        assert_eq!(lo, v);
        let (lo, hi) = m.project(m.eigenvalues()[1], &v).unwrap();
        assert_eq!(lo, vec![1.0, 2.0, 0.0]);
        assert_eq!(hi, vec![0.0, 0.0, 3.0]);
        assert!(matches!(m.project(0.0, &v), Err(Error::InvalidCutoff(_))));
        let p = m.projector(50.0).unwrap();
        assert_eq!(p.index_set, vec![0, 1]);
        assert_eq!(p.complement_set(), vec![2]);
    }

    #[test]
    fn document_shape() {
        let m = build_dirichlet_laplacian_1d(2).unwrap();
        let g = gram_matrix(&m, &[Interval::new(0.0, 0.5)]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&crate::io::to_json(&ModelDocument::new(&m, &g))).unwrap();
        assert_eq!(v["J"], 2);
        assert_eq!(v["lambda"].as_array().unwrap().len(), 2);
        assert_eq!(v["G"][0][1].as_f64().unwrap(), 0.5);
        assert_eq!(v["gram"][0][0].as_f64().unwrap(), g.matrix()[(0, 0)]);
    }

    fn region() -> impl Strategy<Value = Vec<Interval>> {
        proptest::collection::vec(0.0f64..1.0, 2..7).prop_map(|mut pts| {
            pts.sort_by(f64::total_cmp);
            pts.chunks(2)
                .filter(|c| c.len() == 2 && c[1] - c[0] > 1e-3)
                .map(|c| Interval::new(c[0], c[1]))
                .collect::<Vec<_>>()
        })
        .prop_filter("nonempty", |v| !v.is_empty())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gram_matches_quadrature_random(n in 1usize..=16, ivs in region()) {
            let m = build_dirichlet_laplacian_1d(n).unwrap();
            let g = gram_matrix(&m, &ivs).unwrap();
            for i in 0..n {
                for j in i..n {
                    let q = quadrature_entry(&m, i + 1, j + 1, g.intervals());
                    prop_assert!((g.matrix()[(i, j)] - q).abs() < 1e-12);
                }
            }
            // assumption (B) at truncation scale: spectrum in [0,1]
            let eig = g.matrix().clone().symmetric_eigen();
            for e in eig.eigenvalues.iter() {
                prop_assert!(*e > -1e-13 && *e < 1.0 + 1e-13);
            }
        }

        #[test]
        fn projector_is_orthogonal(v in proptest::collection::vec(-10.0f64..10.0, 6), cut in 1.0f64..500.0) {
            let m = build_dirichlet_laplacian_1d(6).unwrap();
            let (lo, hi) = m.project(cut, &v).unwrap();
            let n2 = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>();
            prop_assert!((n2(&v) - n2(&lo) - n2(&hi)).abs() <= 1e-12 * n2(&v).max(1.0));
            for j in 0..6 {
                prop_assert_eq!(lo[j] + hi[j], v[j]);
                prop_assert!(lo[j] == 0.0 || hi[j] == 0.0);
            }
            let (lo2, _) = m.project(cut, &lo).unwrap();
            prop_assert_eq!(lo2, lo);
        }

        #[test]
        fn semigroup_property(v in proptest::collection::vec(-5.0f64..5.0, 8), s in 0.0f64..0.05, r in 0.0f64..0.05) {
            let m = build_dirichlet_laplacian_1d(8).unwrap();
            let once = m.apply_semigroup(s + r, &v).unwrap();
            let twice = m.apply_semigroup(s, &m.apply_semigroup(r, &v).unwrap()).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-14 * v.iter().fold(1.0f64, |m, x| m.max(x.abs())));
            }
            let n2 = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>();
            prop_assert!(n2(&once) <= n2(&v));
        }
    }
}
