//! Finite-dimensional certificates for the auxiliary inequalities: spectral
//! inequality on low modes, decay of high modes, observability from a time set,
//! interpolation, and the weighted observability constant.

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::dynamics::Dynamics;
use crate::error::{Error, Result};
use crate::hum::{dominating_weight_diag, DENSE_LIMIT};
use crate::io::{fmt17, CsvTable, Sig17};
use crate::linalg::{assemble, conjugate_gradient, dot, fit_line, fit_through_origin, min_dominating_weight, power_generalized, LineFit};
use crate::precise::PreciseGram;
use crate::spectral::{ObservationGram, SpectralModel};
use crate::tree::{l2_inner, AdaptedField, NoiseTree};

/// `C(lambda)` with the eigenvector attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralConstant {
    pub cutoff: f64,
    pub constant: f64,
    pub sigma_min: f64,
    /// 0-based indices of the window.
    pub window: Vec<usize>,
    /// Unit vector (full coefficients) with `||f|| = C ||B* f||`.
    pub witness: Vec<f64>,
    /// `| ||f|| - C ||B* f|| | / ||f||` for the witness.
    pub attainment_residual: f64,
}

/// Smallest `C` with `||f|| <= C ||B* f||` on the window `{lambda_j <= cutoff}`.
pub fn spectral_constant(model: &SpectralModel, gram: &ObservationGram, cutoff: f64) -> Result<SpectralConstant> {
    let window = model.projector(cutoff)?.index_set;
    if window.is_empty() {
        return Err(Error::EmptyWindow(cutoff));
    }
    let precise = PreciseGram::new(window.len(), gram.intervals())?;
    window_constant(&precise, cutoff, window)
}

fn window_constant(precise: &PreciseGram, cutoff: f64, window: Vec<usize>) -> Result<SpectralConstant> {
    let w = precise.window(window.len())?;
    let mut witness = w.witness;
    witness.truncate(window.len());
    let mut full = vec![0.0; window.len().max(*window.last().unwrap_or(&0) + 1)];
    for (k, &j) in window.iter().enumerate() {
        full[j] = witness[k];
    }
    Ok(SpectralConstant {
        cutoff,
        constant: w.constant,
        sigma_min: w.constant.powi(-2),
        window,
        witness: full,
        attainment_residual: w.attainment_residual,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralIneqReport {
    pub entries: Vec<SpectralConstant>,
    /// `ln C` against `lambda^{1/2}`.
    pub fit_half: LineFit,
    /// `ln C` against `lambda`.
    pub fit_one: LineFit,
    /// `N` in `C <= exp(N (1 + lambda^{1/2}))`, least squares through the origin.
    pub fitted_n: f64,
}

impl SpectralIneqReport {
    pub fn prefers_half(&self) -> bool {
        self.fit_half.rss < self.fit_one.rss
    }

    pub fn is_monotone(&self) -> bool {
        // equal constants (full observation) may differ in the last bits
        self.entries.windows(2).all(|w| w[1].constant >= w[0].constant * (1.0 - 1e-12))
    }

    pub fn max_attainment_residual(&self) -> f64 {
        self.entries.iter().map(|e| e.attainment_residual).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&["parameter", "constant", "bound", "fitted_exponent"]);
        for e in &self.entries {
            let bound = (self.fitted_n * (1.0 + e.cutoff.sqrt())).exp();
            t.push(vec![fmt17(e.cutoff), fmt17(e.constant), fmt17(bound), fmt17(0.5)]);
        }
        t
    }
}

pub fn spectral_report(model: &SpectralModel, gram: &ObservationGram, cutoffs: &[f64]) -> Result<SpectralIneqReport> {
    let windows = cutoffs.iter().map(|&c| Ok(model.projector(c)?.index_set)).collect::<Result<Vec<_>>>()?;
    let widest = windows.iter().map(Vec::len).max().unwrap_or(0);
    if widest == 0 {
        return Err(Error::InvalidParameter("no cutoffs given".into()));
    }
    let precise = PreciseGram::new(widest, gram.intervals())?;
    let entries = cutoffs
        .iter()
        .zip(windows)
        .map(|(&c, w)| window_constant(&precise, c, w))
        .collect::<Result<Vec<_>>>()?;
    let ln_c: Vec<f64> = entries.iter().map(|e| e.constant.ln()).collect();
    let half: Vec<f64> = cutoffs.iter().map(|c| c.sqrt()).collect();
    let shape: Vec<f64> = half.iter().map(|h| 1.0 + h).collect();
    Ok(SpectralIneqReport {
        fit_half: fit_line(&half, &ln_c),
        fit_one: fit_line(cutoffs, &ln_c),
        fitted_n: fit_through_origin(&shape, &ln_c),
        entries,
    })
}

/// Per-level ratios `E|z_k|^2 / (prod_{m>=k}(1 + F_m^2 dt) e^{-2 lambda (T - t_k)} E|eta|^2)`
/// for `z` driven by the high-mode part of `eta`.
pub fn decay_ratios(model: &SpectralModel, tree: &NoiseTree, cutoff: f64, eta: &AdaptedField) -> Result<Vec<f64>> {
    let projector = model.projector(cutoff)?;
    let total = eta.norm2();
    let mut high = eta.clone();
    for node in high.values_mut().chunks_mut(eta.dim()) {
        let kept = projector.apply_complement(node);
        node.copy_from_slice(&kept);
    }
    let traj = Dynamics::uncontrolled(model, tree).backward(&high)?;
    let depth = tree.depth();
    Ok((0..=depth)
        .map(|k| {
            let z2 = if k == 0 { dot(traj.initial(), traj.initial()) } else { traj.at(k).norm2() };
            let bound = tree.moment_product(k, depth) * (-2.0 * cutoff * (tree.horizon() - tree.time(k))).exp() * total;
            if bound > 0.0 {
                z2 / bound
            } else {
                0.0
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    pub cutoff: Sig17,
    pub trials: usize,
    /// Worst ratio minus one; nonpositive when the bound holds.
    pub max_violation: Sig17,
    pub worst_ratio: Sig17,
}

/// Fuzzes terminal data and returns the worst decay ratio.
pub fn decay_check<R: Rng>(model: &SpectralModel, tree: &NoiseTree, cutoff: f64, trials: usize, rng: &mut R) -> Result<DecayReport> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    let (depth, dim) = (tree.depth(), model.dim());
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let v = (0..dim << depth).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eta = AdaptedField::from_flat(depth, dim, v)?;
        for r in decay_ratios(model, tree, cutoff, &eta)? {
            worst = worst.max(r);
        }
    }
    Ok(DecayReport { cutoff: Sig17(cutoff), trials, max_violation: Sig17(worst - 1.0), worst_ratio: Sig17(worst) })
}

/// Levels listed as inclusive ranges `[a, b]`, merged and sorted.
pub fn time_set(ranges: &[[usize; 2]], depth: usize) -> Result<Vec<usize>> {
    let mut levels: Vec<usize> = Vec::new();
    for &[a, b] in ranges {
        if a > b || b > depth {
            return Err(Error::InvalidParameter(format!("level range [{a}, {b}] outside 0..={depth}")));
        }
        levels.extend(a..=b);
    }
    levels.sort_unstable();
    levels.dedup();
    if levels.is_empty() {
        return Err(Error::InvalidParameter("time set is empty".into()));
    }
    Ok(levels)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservabilityReport {
    pub time_set: Vec<usize>,
    pub constant: Sig17,
    pub method: &'static str,
}

/// Quadratic forms of the observability inequality on terminal data.
struct ObservationForms<'a> {
    dynamics: Dynamics<'a>,
    levels: Vec<usize>,
    dt: f64,
}

impl ObservationForms<'_> {
    /// `Psi* Psi eta` with `Psi eta = z_0`.
    fn left(&self, eta: &AdaptedField) -> Result<AdaptedField> {
        let z0 = self.dynamics.pull_back(eta, 0)?;
        self.dynamics.propagate(&z0)
    }

    /// `sum_{k in E} dt R_k* M R_k eta`.
    fn right(&self, eta: &AdaptedField) -> Result<AdaptedField> {
        let mut z = eta.clone();
        let mut out = AdaptedField::zeros(eta.level(), eta.dim());
        let mut sorted = self.levels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        let mut levels = sorted.iter().rev().peekable();
        for k in (0..=eta.level()).rev() {
            if k < eta.level() {
                z = self.dynamics.step_backward(&z);
            }
            if levels.peek() == Some(&&k) {
                levels.next();
                let observed = self.dynamics.apply_gram(&z)?.scaled(self.dt);
                out.axpy(1.0, &self.dynamics.propagate(&observed)?)?;
            }
        }
        Ok(out)
    }
}

/// Eigen-solver used for the observability constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    /// Dense when `2^K J <= 512`, power iteration otherwise.
    Auto,
    Dense,
    Power,
}

/// Smallest `C` with `E|z_0|^2 <= C sum_{k in E} dt E<z_k, M z_k>`.
pub fn observability_constant<R: Rng>(
    model: &SpectralModel,
    gram: &ObservationGram,
    tree: &NoiseTree,
    levels: &[usize],
    rng: &mut R,
) -> Result<ObservabilityReport> {
    observability_constant_by(model, gram, tree, levels, SolveMethod::Auto, rng)
}

/// `E|z_0|^2 / sum_{k in E} dt E<z_k, M z_k>` for one terminal datum.
pub fn observability_quotient(model: &SpectralModel, gram: &ObservationGram, tree: &NoiseTree, levels: &[usize], eta: &AdaptedField) -> Result<f64> {
    let forms = ObservationForms { dynamics: Dynamics::new(model, gram, tree)?, levels: levels.to_vec(), dt: tree.dt() };
    let num = l2_inner(eta, &forms.left(eta)?, None)?;
    let den = l2_inner(eta, &forms.right(eta)?, None)?;
    Ok(num / den)
}

pub fn observability_constant_by<R: Rng>(
    model: &SpectralModel,
    gram: &ObservationGram,
    tree: &NoiseTree,
    levels: &[usize],
    method: SolveMethod,
    rng: &mut R,
) -> Result<ObservabilityReport> {
    if levels.is_empty() || levels.iter().any(|&k| k > tree.depth()) {
        return Err(Error::InvalidParameter("time set must be a nonempty set of tree levels".into()));
    }
    let mut sorted = levels.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let forms = ObservationForms { dynamics: Dynamics::new(model, gram, tree)?, levels: sorted.clone(), dt: tree.dt() };
    let (depth, dim) = (tree.depth(), model.dim());
    let n = dim << depth;
    let field = |x: &[f64]| AdaptedField::from_flat(depth, dim, x.to_vec()).expect("sized");
    let left = |x: &[f64]| forms.left(&field(x)).expect("consistent").into_values();
    let right = |x: &[f64]| forms.right(&field(x)).expect("consistent").into_values();
    let dense = match method {
        SolveMethod::Auto => n <= DENSE_LIMIT,
        SolveMethod::Dense => true,
        SolveMethod::Power => false,
    };
    if dense {
        let a = assemble(n, n, 1.0, 1.0, &left);
        let b = assemble(n, n, 1.0, 1.0, &right);
        let c = min_dominating_weight(&symmetrize(a), &symmetrize(b))?;
        return Ok(ObservabilityReport { time_set: sorted, constant: Sig17(c), method: "dense" });
    }
    let solve = |y: &[f64]| -> Result<Vec<f64>> { Ok(conjugate_gradient(right, dot, y, None, 1e-12, 50_000)?.x) };
    let c = power_generalized(n, &left, &right, &solve, rng, 3, 1e-10, 500)?;
    Ok(ObservabilityReport { time_set: sorted, constant: Sig17(c), method: "power-iteration" })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterpolationReport {
    pub t_level: usize,
    pub theta: Sig17,
    pub remaining_time: Sig17,
    /// Largest observed ratio over the candidate set.
    pub constant: Sig17,
    pub candidates: usize,
}

/// `E|z_t|^2 / ((E<z_t, M z_t>)^{1-theta} (E|eta|^2)^theta)`.
pub fn interpolation_ratio(dynamics: &Dynamics<'_>, t_level: usize, theta: f64, eta: &AdaptedField) -> Result<f64> {
    let z = dynamics.pull_back(eta, t_level)?;
    let z2 = z.norm2();
    let observed = l2_inner(&z, &z, Some(dynamics.gram()?))?;
    let total = eta.norm2();
    if z2 == 0.0 {
        return Ok(0.0);
    }
    Ok(z2 / (observed.powf(1.0 - theta) * total.powf(theta)))
}

/// Largest interpolation ratio over fuzzed and structured terminal data.
///
/// Structured candidates are the unit modes and the eigenvectors of `M`
/// transported back from `t` to `T` by the inverse semigroup.
pub fn interpolation_check<R: Rng>(
    model: &SpectralModel,
    gram: &ObservationGram,
    tree: &NoiseTree,
    t_level: usize,
    theta: f64,
    trials: usize,
    rng: &mut R,
) -> Result<InterpolationReport> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidParameter(format!("theta = {theta} must lie in (0, 1)")));
    }
    if t_level >= tree.depth() {
        return Err(Error::LevelMismatch { expected: tree.depth() - 1, found: t_level });
    }
    let dynamics = Dynamics::new(model, gram, tree)?;
    let (depth, dim) = (tree.depth(), model.dim());
    let s = tree.horizon() - tree.time(t_level);
    let mut candidates: Vec<AdaptedField> = Vec::new();
    let eig = gram.matrix().clone().symmetric_eigen();
    let top = model.eigenvalues()[dim - 1];
    for j in 0..dim {
        let mut e = vec![0.0; dim];
        e[j] = 1.0;
        candidates.push(AdaptedField::constant(depth, &e));
        let v: Vec<f64> = (0..dim)
            .map(|i| eig.eigenvectors[(i, j)] * ((model.eigenvalues()[i] - top) * s).exp())
            .collect();
        candidates.push(AdaptedField::constant(depth, &v));
    }
    for _ in 0..trials {
        let v = (0..dim << depth).map(|_| rng.gen_range(-1.0..1.0)).collect();
        candidates.push(AdaptedField::from_flat(depth, dim, v)?);
    }
    let mut worst = 0.0f64;
    for eta in &candidates {
        if eta.is_zero() {
            continue;
        }
        worst = worst.max(interpolation_ratio(&dynamics, t_level, theta, eta)?);
    }
    Ok(InterpolationReport {
        t_level,
        theta: Sig17(theta),
        remaining_time: Sig17(s),
        constant: Sig17(worst),
        candidates: candidates.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationSweep {
    pub reports: Vec<InterpolationReport>,
    /// Slope of `ln C` against `1 / (T - t)`.
    pub fitted_exponent: f64,
    pub fit: LineFit,
}

impl InterpolationSweep {
    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&["parameter", "constant", "bound", "fitted_exponent"]);
        for r in &self.reports {
            let s = r.remaining_time.0;
            let bound = (self.fit.intercept + self.fit.slope / s).exp();
            t.push(vec![fmt17(s), fmt17(r.constant.0), fmt17(bound), fmt17(self.fitted_exponent)]);
        }
        t
    }
}

pub fn interpolation_sweep<R: Rng>(
    model: &SpectralModel,
    gram: &ObservationGram,
    tree: &NoiseTree,
    levels: &[usize],
    theta: f64,
    trials: usize,
    rng: &mut R,
) -> Result<InterpolationSweep> {
    let reports = levels
        .iter()
        .map(|&k| interpolation_check(model, gram, tree, k, theta, trials, rng))
        .collect::<Result<Vec<_>>>()?;
    let x: Vec<f64> = reports.iter().map(|r| 1.0 / r.remaining_time.0).collect();
    let y: Vec<f64> = reports.iter().map(|r| r.constant.0.ln()).collect();
    let fit = fit_line(&x, &y);
    Ok(InterpolationSweep { reports, fitted_exponent: fit.slope, fit })
}

/// Smallest `C >= 0` with `E|z_t|^2 <= C E<z_t, M z_t> + eps E|eta|^2` for all `eta`.
///
/// With `R: eta -> z_t`, `R R*` is nodewise `diag(exp(-2 lambda_j (T - t))) pi`,
/// `pi` the second moment of the discrete exponential on `[t, T]`, and the
/// condition reduces to `diag(1 - eps exp(2 lambda_j (T - t)) / pi) <= C M`.
pub fn po1_constant(model: &SpectralModel, gram: &ObservationGram, tree: &NoiseTree, t_level: usize, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon = {epsilon} must be positive")));
    }
    if t_level > tree.depth() {
        return Err(Error::LevelMismatch { expected: tree.depth(), found: t_level });
    }
    let s = tree.horizon() - tree.time(t_level);
    let pi = tree.moment_product(t_level, tree.depth());
    let diag: Vec<f64> = model
        .eigenvalues()
        .iter()
        .map(|lam| {
            let d = 1.0 - epsilon * (2.0 * lam * s).exp() / pi;
            if d.is_finite() {
                d
            } else {
                -f64::MAX.sqrt()
            }
        })
        .collect();
    dominating_weight_diag(&diag, gram.matrix())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Po1Sweep {
    pub t_level: usize,
    pub remaining_time: f64,
    pub epsilons: Vec<f64>,
    pub constants: Vec<f64>,
    /// `ln C` against `(ln(e + 1/eps))^{1/2}` over the points with `C > 0`.
    pub fit: LineFit,
    /// `C3` of `exp(C3 (1 + 1/s)) exp(((C3/s) ln(e + 1/eps))^{1/2})`.
    pub fitted_c3: f64,
}

impl Po1Sweep {
    pub fn is_nonincreasing(&self) -> bool {
        let mut pairs: Vec<(f64, f64)> = self.epsilons.iter().copied().zip(self.constants.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        pairs.windows(2).all(|w| w[1].1 <= w[0].1 * (1.0 + 1e-12))
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&["parameter", "constant", "bound", "fitted_exponent"]);
        for (e, c) in self.epsilons.iter().zip(&self.constants) {
            t.push(vec![fmt17(*e), fmt17(*c), fmt17(po1_shape(self.fitted_c3, self.remaining_time, *e)), fmt17(self.fit.slope)]);
        }
        t
    }
}

/// `exp(c3 (1 + 1/s)) exp(((c3/s) ln(e + 1/eps))^{1/2})`.
pub fn po1_shape(c3: f64, s: f64, epsilon: f64) -> f64 {
    let l = (std::f64::consts::E + 1.0 / epsilon).ln();
    (c3 * (1.0 + 1.0 / s) + (c3 / s * l).sqrt()).exp()
}

pub fn po1_sweep(model: &SpectralModel, gram: &ObservationGram, tree: &NoiseTree, t_level: usize, epsilons: &[f64]) -> Result<Po1Sweep> {
    let constants = epsilons.iter().map(|&e| po1_constant(model, gram, tree, t_level, e)).collect::<Result<Vec<_>>>()?;
    let s = tree.horizon() - tree.time(t_level);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (e, c) in epsilons.iter().zip(&constants) {
        if *c > 0.0 {
            x.push((std::f64::consts::E + 1.0 / e).ln().sqrt());
            y.push(c.ln());
        }
    }
    let fit = fit_line(&x, &y);
    let fitted_c3 = fit_shape_c3(s, epsilons, &constants);
    Ok(Po1Sweep { t_level, remaining_time: s, epsilons: epsilons.to_vec(), constants, fit, fitted_c3 })
}

/// Least-squares `C3` for the log of [`po1_shape`], by golden-section search on `ln C3`.
fn fit_shape_c3(s: f64, epsilons: &[f64], constants: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = epsilons.iter().zip(constants).filter(|(_, c)| **c > 0.0).map(|(e, c)| (*e, c.ln())).collect();
    if pts.is_empty() {
        return 0.0;
    }
    let rss = |lc: f64| -> f64 {
        let c3 = lc.exp();
        pts.iter().map(|(e, y)| (po1_shape(c3, s, *e).ln() - y).powi(2)).sum()
    };
    let (mut a, mut b) = (-30.0f64, 10.0f64);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if rss(c) < rss(d) {
            b = d;
        } else {
            a = c;
        }
    }
    (0.5 * (a + b)).exp()
}

/// Dense `(A, B)` for the weighted observability inequality at `t_level`:
/// `A = R_t* R_t`, `B = R_t* M R_t` in the flat coordinates of level `K`.
pub fn dense_po1_forms(model: &SpectralModel, gram: &ObservationGram, tree: &NoiseTree, t_level: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = Dynamics::new(model, gram, tree)?;
    let (depth, dim) = (tree.depth(), model.dim());
    let n = dim << depth;
    let field = |x: &[f64]| AdaptedField::from_flat(depth, dim, x.to_vec()).expect("sized");
    let a = assemble(n, n, 1.0, 1.0, &|x| {
        let z = d.pull_back(&field(x), t_level).expect("consistent");
        d.propagate(&z).expect("consistent").into_values()
    });
    let b = assemble(n, n, 1.0, 1.0, &|x| {
        let z = d.pull_back(&field(x), t_level).expect("consistent");
        d.propagate(&d.apply_gram(&z).expect("gram")).expect("consistent").into_values()
    });
    Ok((symmetrize(a), symmetrize(b)))
}
