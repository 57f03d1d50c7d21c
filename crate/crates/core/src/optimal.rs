//! Norm-optimal and time-optimal impulse controls.
//!
//! With `L: u -> y(T; 0, u)` and `y_free = y(T; y0, 0)`, the norm-optimal
//! control minimizes `E||u||_U^2` subject to `E||y_free + L u||^2 <= eps E||y0||^2`.
//! For a multiplier `mu >= 0` the Lagrangian minimizer solves
//! `(I + mu L# L) u = -mu L# y_free`, where `L#` is the adjoint of `L` in the
//! control inner product `<u, v>_U = E<u, M v>`. Writing `R` for the backward
//! sweep from `K` to the impulse level, `L# v` is `R v` conditioned on the
//! control level, so every `u(mu)` is a multiple of the pulled-back costate of
//! its own terminal state.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{ControlClass, Convention, Dynamics, Pairing};
use crate::error::{Error, Result};
use crate::io::{fmt17, CsvTable, Sig17};
use crate::linalg::{conjugate_gradient, dot};
use crate::spectral::{ObservationGram, SpectralModel};
use crate::tree::{build_tree, conditional_expectation, l2_inner, AdaptedField, NoiseProfile, NoiseTree};

/// Relative accuracy of the inner conjugate-gradient solves.
const CG_TOL: f64 = 1e-13;
const CG_MAX_ITERS: usize = 20_000;
/// Relative accuracy of the scalar root solves on `ln mu`.
const ROOT_TOL: f64 = 1e-12;

/// The control-to-state map and its adjoint for one tree and control class.
#[derive(Debug, Clone)]
pub struct ControlMap<'a> {
    dynamics: Dynamics<'a>,
    pairing: Pairing,
    y0: Vec<f64>,
    free: AdaptedField,
}

impl<'a> ControlMap<'a> {
    pub fn new(model: &'a SpectralModel, gram: &'a ObservationGram, tree: &'a NoiseTree, y0: &[f64], class: ControlClass) -> Result<Self> {
        if y0.len() != model.dim() {
            return Err(Error::DimensionMismatch { expected: model.dim(), found: y0.len() });
        }
        let dynamics = Dynamics::new(model, gram, tree)?;
        let free = dynamics.propagate(&AdaptedField::constant(0, y0))?;
        Ok(Self { dynamics, pairing: Pairing::new(tree, Convention::Adjoint, class)?, y0: y0.to_vec(), free })
    }

    pub fn dynamics(&self) -> &Dynamics<'a> {
        &self.dynamics
    }

    pub fn control_level(&self) -> usize {
        self.pairing.control_level
    }

    pub fn y0(&self) -> &[f64] {
        &self.y0
    }

    /// `y(T; y0, 0)`.
    pub fn free_terminal(&self) -> &AdaptedField {
        &self.free
    }

    pub fn target(&self, epsilon: f64) -> f64 {
        epsilon * dot(&self.y0, &self.y0)
    }

    /// `L u = y(T; 0, u)`.
    pub fn apply(&self, u: &AdaptedField) -> Result<AdaptedField> {
        let kt = self.dynamics.tree.impulse_level();
        self.dynamics.inject(u, kt)
    }

    /// `L# v`, the adjoint of [`ControlMap::apply`] in the control inner product.
    pub fn adjoint(&self, v: &AdaptedField) -> Result<AdaptedField> {
        let kt = self.dynamics.tree.impulse_level();
        let z = self.dynamics.pull_back(v, kt)?;
        conditional_expectation(&z, self.control_level())
    }

    /// `y(T; y0, u)`.
    pub fn terminal(&self, u: &AdaptedField) -> Result<AdaptedField> {
        let mut y = self.apply(u)?;
        y.axpy(1.0, &self.free)?;
        Ok(y)
    }

    /// `E||u||_U^2 = E<u, M u>`.
    pub fn control_norm(&self, u: &AdaptedField) -> Result<f64> {
        l2_inner(u, u, Some(self.dynamics.gram()?))
    }

    pub fn control_inner(&self, u: &AdaptedField, v: &AdaptedField) -> Result<f64> {
        l2_inner(u, v, Some(self.dynamics.gram()?))
    }

    fn flat_inner(&self) -> impl Fn(&[f64], &[f64]) -> f64 + '_ {
        let gram = self.dynamics.gram().expect("checked at construction");
        let dim = self.dynamics.dim();
        move |a: &[f64], b: &[f64]| a.chunks(dim).zip(b.chunks(dim)).map(|(x, y)| gram.form(x, y)).sum()
    }

    /// `u(mu)`, the minimizer of `E||u||_U^2 + mu E||y(T; y0, u)||^2`.
    pub fn penalized(&self, mu: f64, start: Option<&AdaptedField>) -> Result<AdaptedField> {
        let (level, dim) = (self.control_level(), self.dynamics.dim());
        if mu == 0.0 {
            return Ok(AdaptedField::zeros(level, dim));
        }
        let rhs = self.adjoint(&self.free)?.scaled(-mu);
        let op = |x: &[f64]| {
            let u = AdaptedField::from_flat(level, dim, x.to_vec()).expect("sized");
            let mut out = self.adjoint(&self.apply(&u).expect("level")).expect("level").scaled(mu);
            out.axpy(1.0, &u).expect("same level");
            out.into_values()
        };
        let sol = conjugate_gradient(op, self.flat_inner(), rhs.values(), start.map(AdaptedField::values), CG_TOL, CG_MAX_ITERS)?;
        AdaptedField::from_flat(level, dim, sol.x)
    }

    /// Least-norm exact null control `-M^{-1} y_free(T~)` read at the control level.
    ///
    /// Returns its squared norm, the supremum of `E||u(mu)||^2` as `mu -> infinity`.
    pub fn null_control_norm(&self) -> Result<f64> {
        let (level, dim) = (self.control_level(), self.dynamics.dim());
        let free = self.free_terminal().values().to_vec();
        let rhs = self.adjoint(&AdaptedField::from_flat(self.dynamics.depth(), dim, free)?)?.scaled(-1.0);
        let op = |x: &[f64]| {
            let u = AdaptedField::from_flat(level, dim, x.to_vec()).expect("sized");
            self.adjoint(&self.apply(&u).expect("level")).expect("level").into_values()
        };
        let sol = conjugate_gradient(op, self.flat_inner(), rhs.values(), None, CG_TOL, CG_MAX_ITERS)?;
        self.control_norm(&AdaptedField::from_flat(level, dim, sol.x)?)
    }
}

/// Root of an increasing function of `x = ln mu` by the Illinois variant of regula falsi.
///
/// `g(lo) < 0 < g(hi)` on entry; returns the final point and its value.
fn illinois<F>(mut g: F, mut lo: (f64, f64), mut hi: (f64, f64), max_evals: usize) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut side = 0i8;
    for _ in 0..max_evals {
        let mut x = (lo.0 * hi.1 - hi.0 * lo.1) / (hi.1 - lo.1);
        if !(x > lo.0 && x < hi.0) {
            x = 0.5 * (lo.0 + hi.0);
        }
        let gx = g(x)?;
        if gx.abs() <= ROOT_TOL || (hi.0 - lo.0) <= 1e-15 * hi.0.abs().max(1.0) {
            return Ok((x, gx));
        }
        if gx < 0.0 {
            lo = (x, gx);
            if side == -1 {
                hi.1 *= 0.5;
            }
            side = -1;
        } else {
            hi = (x, gx);
            if side == 1 {
                lo.1 *= 0.5;
            }
            side = 1;
        }
    }
    Err(Error::NotConverged { iterations: max_evals, residual: hi.0 - lo.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormOptResult {
    pub u_star: AdaptedField,
    /// `N(T, y0) = E||u*||_U^2`.
    pub value: f64,
    pub multiplier: f64,
    /// `E||y(T)||^2 - eps E||y0||^2`.
    pub constraint_residual: f64,
    pub active: bool,
    pub terminal_norm: f64,
    pub target: f64,
    pub control_level: usize,
}

impl NormOptResult {
    pub fn to_document(&self) -> NormOptDocument {
        NormOptDocument {
            value: Sig17(self.value),
            multiplier: Sig17(self.multiplier),
            constraint_residual: Sig17(self.constraint_residual),
            active: self.active,
            terminal_norm: Sig17(self.terminal_norm),
            target: Sig17(self.target),
            control_level: self.control_level,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NormOptDocument {
    pub value: Sig17,
    pub multiplier: Sig17,
    pub constraint_residual: Sig17,
    pub active: bool,
    pub terminal_norm: Sig17,
    pub target: Sig17,
    pub control_level: usize,
}

/// Minimal-norm control reaching `E||y(T)||^2 <= eps E||y0||^2`.
pub fn norm_optimal(model: &SpectralModel, gram: &ObservationGram, tree: &NoiseTree, y0: &[f64], epsilon: f64) -> Result<NormOptResult> {
    let map = ControlMap::new(model, gram, tree, y0, ControlClass::AtImpulse)?;
    solve_norm_optimal(&map, epsilon, 1.0)
}

/// Dual solve on an existing control map; `mu_guess` seeds the bracket.
pub fn solve_norm_optimal(map: &ControlMap<'_>, epsilon: f64, mu_guess: f64) -> Result<NormOptResult> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon = {epsilon} must be positive")));
    }
    let target = map.target(epsilon);
    let free_norm = map.free_terminal().norm2();
    let level = map.control_level();
    let dim = map.dynamics().dim();
    if free_norm <= target {
        return Ok(NormOptResult {
            u_star: AdaptedField::zeros(level, dim),
            value: 0.0,
            multiplier: 0.0,
            constraint_residual: free_norm - target,
            active: false,
            terminal_norm: free_norm,
            target,
            control_level: level,
        });
    }
    let mut last: Option<AdaptedField> = None;
    let mut best: Option<(f64, AdaptedField, f64)> = None;
    let mut eval = |x: f64| -> Result<f64> {
        let mu = x.exp();
        let u = map.penalized(mu, last.as_ref())?;
        let phi = map.terminal(&u)?.norm2();
        let g = (phi / target).ln();
        if g <= 0.0 && best.as_ref().is_none_or(|b| mu < b.0) {
            best = Some((mu, u.clone(), phi));
        }
        last = Some(u);
        Ok(g)
    };
    let mut x_lo = mu_guess.max(1e-300).ln();
    let mut g_lo = eval(x_lo)?;
    let mut x_hi = x_lo;
    let mut g_hi = g_lo;
    let mut expansions = 0;
    while g_hi > 0.0 {
        x_lo = x_hi;
        g_lo = g_hi;
        x_hi += 4.0;
        g_hi = eval(x_hi)?;
        expansions += 1;
        if expansions > 200 {
            return Err(Error::NonObservable("terminal ball unreachable for every multiplier".into()));
        }
    }
    while g_lo <= 0.0 {
        x_hi = x_lo;
        g_hi = g_lo;
        x_lo -= 4.0;
        g_lo = eval(x_lo)?;
        if x_lo < -700.0 {
            break;
        }
    }
    // g decreasing in x; flip the sign for the increasing-root solver
    match illinois(|x| eval(x).map(|v| -v), (x_lo, -g_lo), (x_hi, -g_hi), 200) {
        Ok((mut x, mut h)) => {
            // step onto the admissible side of the root
            let mut step = 1e-13 * x.abs().max(1.0);
            while h < 0.0 {
                x += step;
                h = -eval(x)?;
                step *= 2.0;
            }
        }
        Err(Error::NotConverged { .. }) => {}
        Err(e) => return Err(e),
    }
    drop(eval);
    let (mu, u, phi) = best.expect("bracket has an admissible end");
    Ok(NormOptResult {
        value: map.control_norm(&u)?,
        u_star: u,
        multiplier: mu,
        constraint_residual: phi - target,
        active: true,
        terminal_norm: phi,
        target,
        control_level: level,
    })
}

/// Control of norm `bound` minimizing `E||y(T)||^2`; the bang-bang control at a
/// fixed horizon. `None` when even the exact null control has norm at most `bound`.
pub fn boundary_control(map: &ControlMap<'_>, bound: f64) -> Result<Option<(AdaptedField, f64)>> {
    let m2 = bound * bound;
    if map.free_terminal().is_zero() || map.null_control_norm()? <= m2 {
        return Ok(None);
    }
    let mut last: Option<AdaptedField> = None;
    let mut closest: Option<(f64, AdaptedField, f64)> = None;
    let mut eval = |x: f64| -> Result<f64> {
        let mu = x.exp();
        let u = map.penalized(mu, last.as_ref())?;
        let n = map.control_norm(&u)?;
        let g = (n / m2).ln();
        if closest.as_ref().is_none_or(|c| g.abs() < c.2.abs()) {
            closest = Some((mu, u.clone(), g));
        }
        last = Some(u);
        Ok(g)
    };
    let (mut x_lo, mut x_hi) = (0.0, 0.0);
    let mut g_lo = eval(0.0)?;
    let mut g_hi = g_lo;
    while g_hi < 0.0 {
        x_lo = x_hi;
        g_lo = g_hi;
        x_hi += 4.0;
        g_hi = eval(x_hi)?;
        if x_hi > 700.0 {
            return Ok(None);
        }
    }
    while g_lo >= 0.0 {
        x_hi = x_lo;
        g_hi = g_lo;
        x_lo -= 4.0;
        g_lo = eval(x_lo)?;
    }
    let _ = illinois(&mut eval, (x_lo, g_lo), (x_hi, g_hi), 200);
    drop(eval);
    let (mu, u, _) = closest.expect("evaluated");
    // remove the remaining root-finding error in the norm exactly
    let n = map.control_norm(&u)?;
    Ok(Some((u.scaled(bound / n.sqrt()), mu)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniquenessReport {
    /// Largest `||u_i - u*||_U / ||u*||_U` over the re-solves.
    pub max_distance: Sig17,
    /// `E||u-v||^2 - 2(E||u||^2 + E||v||^2) + E||u+v||^2` for `u = v = u*`.
    pub parallelogram_residual: Sig17,
    pub resolves: usize,
    /// Why no second admissible control of equal norm exists.
    pub kernel_note: String,
}

/// Re-solves from perturbed multipliers and checks that the optimum is unique.
pub fn uniqueness_probe<R: Rng>(
    model: &SpectralModel,
    gram: &ObservationGram,
    tree: &NoiseTree,
    y0: &[f64],
    epsilon: f64,
    result: &NormOptResult,
    perturbations: usize,
    rng: &mut R,
) -> Result<UniquenessReport> {
    let map = ControlMap::new(model, gram, tree, y0, ControlClass::AtImpulse)?;
    let reference = map.control_norm(&result.u_star)?.sqrt();
    let mut worst = 0.0f64;
    for _ in 0..perturbations {
        let guess = if result.multiplier > 0.0 { result.multiplier * rng.gen_range(1e-3..1e3f64) } else { rng.gen_range(1e-3..1e3) };
        let other = solve_norm_optimal(&map, epsilon, guess)?;
        let diff = map.control_norm(&other.u_star.sub(&result.u_star)?)?.sqrt();
        worst = worst.max(if reference > 0.0 { diff / reference } else { diff });
    }
    let u = &result.u_star;
    let mut sum = u.clone();
    sum.axpy(1.0, u)?;
    let a = map.control_norm(u)?;
    let parallelogram = map.control_norm(&u.sub(u)?)? - 2.0 * (a + a) + map.control_norm(&sum)?;
    let branch = (0..tree.depth()).map(|k| tree.branch_factors(k).1).fold(f64::INFINITY, f64::min);
    Ok(UniquenessReport {
        max_distance: Sig17(worst),
        parallelogram_residual: Sig17(parallelogram),
        resolves: perturbations,
        kernel_note: format!(
            "L is injective: M is positive definite on G of positive measure and every step factor is at least {}",
            fmt17(branch)
        ),
    })
}

/// Horizons scanned by [`time_optimal`].
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub t_tilde: f64,
    /// Step used for the scan grid; every horizon and `t_tilde` are multiples of it.
    pub dt: f64,
    pub horizons: Vec<f64>,
    /// Deepest tree allowed during refinement.
    pub max_refine_depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanRow {
    #[serde(rename = "T")]
    pub horizon: Sig17,
    #[serde(rename = "N_of_T")]
    pub value: Sig17,
    pub admissible: bool,
    pub depth: usize,
    pub refined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeOptResult {
    pub t_star: f64,
    pub depth: usize,
    pub impulse_level: usize,
    pub dt: f64,
    pub u_star: AdaptedField,
    /// `N(T*)`.
    pub value: f64,
    /// Latest horizon below `T*` that was evaluated, with `N` there.
    pub predecessor: Option<(f64, f64)>,
    /// Whether `u*` saturates the norm bound (bang-bang).
    pub norm_active: bool,
    pub terminal_norm: f64,
    pub target: f64,
    pub bound: f64,
    pub scan: Vec<ScanRow>,
}

impl TimeOptResult {
    pub fn tree(&self, noise: &NoiseProfile) -> Result<NoiseTree> {
        build_tree(self.depth, self.t_star, self.impulse_level as f64 * self.dt, noise.schedule(self.depth, self.dt))
    }

    pub fn scan_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&["T", "N_of_T", "admissible"]);
        for r in &self.scan {
            t.push(vec![fmt17(r.horizon.0), fmt17(r.value.0), r.admissible.to_string()]);
        }
        t
    }

    pub fn to_document(&self) -> TimeOptDocument {
        TimeOptDocument {
            t_star: Sig17(self.t_star),
            depth: self.depth,
            impulse_level: self.impulse_level,
            dt: Sig17(self.dt),
            n_of_t_star: Sig17(self.value),
            predecessor_t: self.predecessor.map(|p| Sig17(p.0)),
            predecessor_n: self.predecessor.map(|p| Sig17(p.1)),
            norm_active: self.norm_active,
            terminal_norm: Sig17(self.terminal_norm),
            target: Sig17(self.target),
            bound: Sig17(self.bound),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TimeOptDocument {
    #[serde(rename = "T_star")]
    pub t_star: Sig17,
    pub depth: usize,
    pub impulse_level: usize,
    pub dt: Sig17,
    #[serde(rename = "N_of_T_star")]
    pub n_of_t_star: Sig17,
    #[serde(rename = "predecessor_T")]
    pub predecessor_t: Option<Sig17>,
    #[serde(rename = "predecessor_N")]
    pub predecessor_n: Option<Sig17>,
    pub norm_active: bool,
    pub terminal_norm: Sig17,
    pub target: Sig17,
    pub bound: Sig17,
}

struct Horizon {
    horizon: f64,
    depth: usize,
    impulse_level: usize,
    dt: f64,
}

fn horizon_tree(h: &Horizon, noise: &NoiseProfile) -> Result<NoiseTree> {
    build_tree(h.depth, h.horizon, h.impulse_level as f64 * h.dt, noise.schedule(h.depth, h.dt))
}

fn evaluate(model: &SpectralModel, gram: &ObservationGram, y0: &[f64], epsilon: f64, noise: &NoiseProfile, h: &Horizon) -> Result<f64> {
    let tree = horizon_tree(h, noise)?;
    Ok(norm_optimal(model, gram, &tree, y0, epsilon)?.value)
}

/// First horizon at which the ball is reachable with `E||u||_U^2 <= bound^2`.
///
/// Scans the whole grid, then bisects between the first admissible horizon
/// and its predecessor over re-meshed horizons `T~ K / k~` with `K` at most
/// `max_refine_depth`.
pub fn time_optimal(
    model: &SpectralModel,
    gram: &ObservationGram,
    y0: &[f64],
    epsilon: f64,
    bound: f64,
    grid: &TimeGrid,
    noise: &NoiseProfile,
) -> Result<TimeOptResult> {
    if !(bound > 0.0) {
        return Err(Error::InvalidParameter(format!("norm bound M = {bound} must be positive")));
    }
    let kt = steps(grid.t_tilde, grid.dt)?;
    let mut horizons = grid.horizons.clone();
    horizons.sort_by(f64::total_cmp);
    let points = horizons
        .iter()
        .map(|&t| Ok(Horizon { horizon: t, depth: steps(t, grid.dt)?, impulse_level: kt, dt: grid.dt }))
        .collect::<Result<Vec<_>>>()?;
    let m2 = bound * bound;
    let values = points.par_iter().map(|h| evaluate(model, gram, y0, epsilon, noise, h)).collect::<Result<Vec<_>>>()?;
    let mut scan: Vec<ScanRow> = points
        .iter()
        .zip(&values)
        .map(|(h, v)| ScanRow { horizon: Sig17(h.horizon), value: Sig17(*v), admissible: *v <= m2, depth: h.depth, refined: false })
        .collect();
    let first = values.iter().position(|v| *v <= m2).ok_or(Error::NoAdmissibleTime)?;
    let mut value = values[first];
    let mut star = Horizon { ..points[first] };
    let mut predecessor = (first > 0).then(|| (points[first - 1].horizon, values[first - 1]));

    if let Some((t_lo, _)) = predecessor {
        let candidates = refinement_horizons(grid.t_tilde, t_lo, points[first].horizon, grid.max_refine_depth);
        let (mut lo, mut hi) = (0usize, candidates.len());
        // invariant: candidates[..lo] sit above an inadmissible point, candidates[hi..] after an admissible one
        while lo < hi {
            let mid = (lo + hi) / 2;
            let h = &candidates[mid];
            let v = evaluate(model, gram, y0, epsilon, noise, h)?;
            scan.push(ScanRow { horizon: Sig17(h.horizon), value: Sig17(v), admissible: v <= m2, depth: h.depth, refined: true });
            if v <= m2 {
                hi = mid;
                value = v;
                star = Horizon { ..candidates[mid] };
            } else {
                lo = mid + 1;
                predecessor = Some((h.horizon, v));
            }
        }
    }
    scan.sort_by(|a, b| a.horizon.0.total_cmp(&b.horizon.0).then(a.refined.cmp(&b.refined)));

    let tree = horizon_tree(&star, noise)?;
    let map = ControlMap::new(model, gram, &tree, y0, ControlClass::AtImpulse)?;
    let (u_star, norm_active) = match boundary_control(&map, bound)? {
        Some((u, _)) => (u, true),
        None => (norm_optimal(model, gram, &tree, y0, epsilon)?.u_star, false),
    };
    let terminal_norm = map.terminal(&u_star)?.norm2();
    Ok(TimeOptResult {
        t_star: star.horizon,
        depth: star.depth,
        impulse_level: star.impulse_level,
        dt: star.dt,
        value,
        u_star,
        predecessor,
        norm_active,
        terminal_norm,
        target: map.target(epsilon),
        bound,
        scan,
    })
}

fn steps(t: f64, dt: f64) -> Result<usize> {
    let k = (t / dt).round();
    if k < 1.0 || (k * dt - t).abs() > 1e-9 * t.max(dt) {
        return Err(Error::GridMisalignment(format!("time {t} is not a multiple of dt = {dt}")));
    }
    Ok(k as usize)
}

/// Horizons `T~ K / k~` strictly inside `(lo, hi)` with `k~ < K <= max_depth`, ascending.
fn refinement_horizons(t_tilde: f64, lo: f64, hi: f64, max_depth: usize) -> Vec<Horizon> {
    let mut out: Vec<Horizon> = Vec::new();
    for depth in 2..=max_depth {
        for kt in 1..depth {
            if gcd(depth, kt) != 1 {
                continue;
            }
            let t = t_tilde * depth as f64 / kt as f64;
            let tol = 1e-12 * hi;
            if t > lo + tol && t < hi - tol {
                out.push(Horizon { horizon: t, depth, impulse_level: kt, dt: t_tilde / kt as f64 });
            }
        }
    }
    out.sort_by(|a, b| a.horizon.total_cmp(&b.horizon));
    out
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BangBangReport {
    /// `|E||u*||^2 - M^2| / M^2`.
    pub norm_check: Sig17,
    pub norm_ok: bool,
    /// Distance of `u*` from the ray of the costate read at the impulse level.
    pub proportionality_adjoint: Sig17,
    /// Same with the costate read at `T - T~`.
    pub proportionality_reversed: Sig17,
    pub proportionality_ok: bool,
    pub maximality_trials: usize,
    pub maximality_violations: usize,
    /// Set when `y(T*) = 0` and the checks are not meaningful.
    pub skipped: Option<String>,
}

impl BangBangReport {
    pub fn passed(&self) -> bool {
        self.skipped.is_none() && self.norm_ok && self.proportionality_ok && self.maximality_violations == 0
    }
}

/// Checks norm saturation, proportionality to the costate of `y(T*)`, and the
/// maximum condition `E<q, u*>_U >= E<q, u>_U` over fuzzed `u` with `||u||_U <= M`.
///
/// Under the adjoint convention the control is a positive multiple of `q = -z`.
pub fn bang_bang_check<R: Rng>(
    model: &SpectralModel,
    gram: &ObservationGram,
    tree: &NoiseTree,
    y0: &[f64],
    u_star: &AdaptedField,
    bound: f64,
    trials: usize,
    rng: &mut R,
) -> Result<BangBangReport> {
    let map = ControlMap::new(model, gram, tree, y0, ControlClass::AtImpulse)?;
    let m2 = bound * bound;
    let n = map.control_norm(u_star)?;
    let norm_check = (n - m2).abs() / m2;
    let eta = map.terminal(u_star)?;
    if eta.is_zero() {
        return Ok(BangBangReport {
            norm_check: Sig17(norm_check),
            norm_ok: norm_check <= 1e-7,
            proportionality_adjoint: Sig17(f64::NAN),
            proportionality_reversed: Sig17(f64::NAN),
            proportionality_ok: false,
            maximality_trials: 0,
            maximality_violations: 0,
            skipped: Some("terminal state is zero; the costate carries no direction".into()),
        });
    }
    let q = map.adjoint(&eta)?.scaled(-1.0);
    let ray = |p: &AdaptedField| -> Result<f64> {
        let c = map.control_inner(u_star, p)? / map.control_norm(p)?;
        let mut r = u_star.clone();
        r.axpy(-c, p)?;
        Ok((map.control_norm(&r)? / n).sqrt())
    };
    let adjoint = ray(&q)?;
    let reversed_pairing = Pairing::new(tree, Convention::PaperReversed, ControlClass::AtImpulse)?;
    let z_rev = map.dynamics().pull_back(&eta, reversed_pairing.pair_level)?;
    let reversed = ray(&reversed_pairing.project(&z_rev)?)?;

    let best = map.control_inner(&q, u_star)?;
    let scale = map.control_norm(&q)?.sqrt() * bound;
    let (level, dim) = (u_star.level(), u_star.dim());
    let mut violations = 0;
    for _ in 0..trials {
        let v: Vec<f64> = (0..dim << level).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut u = AdaptedField::from_flat(level, dim, v)?;
        let radius = bound * rng.gen_range(0.0..=1.0f64).sqrt().max(if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        u = u.scaled(radius / map.control_norm(&u)?.sqrt());
        if map.control_inner(&q, &u)? > best + 1e-12 * scale {
            violations += 1;
        }
    }
    Ok(BangBangReport {
        norm_check: Sig17(norm_check),
        norm_ok: norm_check <= 1e-7,
        proportionality_adjoint: Sig17(adjoint),
        proportionality_reversed: Sig17(reversed),
        proportionality_ok: adjoint.min(reversed) <= 1e-6,
        maximality_trials: trials,
        maximality_violations: violations,
        skipped: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::assemble;
    use crate::spectral::{build_dirichlet_laplacian_1d, gram_matrix, Interval};
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn model_gram(dim: usize, a: f64, b: f64) -> (SpectralModel, ObservationGram) {
        let m = build_dirichlet_laplacian_1d(dim).unwrap();
        let g = gram_matrix(&m, &[Interval::new(a, b)]).unwrap();
        (m, g)
    }

    /// Minimal-norm solve from an SVD of the control-to-state matrix.
    fn dense_kkt(map: &ControlMap<'_>, epsilon: f64) -> f64 {
        let (kt, depth, dim) = (map.control_level(), map.dynamics().depth(), map.dynamics().dim());
        let (nc, nk) = (dim << kt, dim << depth);
        let (wc, wk) = ((-(kt as f64)).exp2(), (-(depth as f64)).exp2());
        let a = assemble(nc, nk, 1.0, 1.0, &|x| map.apply(&AdaptedField::from_flat(kt, dim, x.to_vec()).unwrap()).unwrap().into_values());
        let blocks = (1usize << kt) as usize;
        let mut w = DMatrix::zeros(nc, nc);
        for b in 0..blocks {
            w.view_mut((b * dim, b * dim), (dim, dim)).copy_from(map.dynamics().gram().unwrap().matrix());
        }
        let eig = w.symmetric_eigen();
        let w_inv_half = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|x| x.powf(-0.5))) * eig.eigenvectors.transpose();
        let k = a * w_inv_half * (wk / wc).sqrt();
        let b = DVector::from_vec(map.free_terminal().values().to_vec()) * wk.sqrt();
        let svd = k.svd(true, false);
        let u = svd.u.unwrap();
        let beta = u.transpose() * &b;
        let perp = (b.norm_squared() - beta.norm_squared()).max(0.0);
        let sig = svd.singular_values;
        let target = map.target(epsilon);
        let resid = |mu: f64| -> f64 { (0..sig.len()).map(|i| (beta[i] / (1.0 + mu * sig[i] * sig[i])).powi(2)).sum::<f64>() + perp };
        if resid(0.0) <= target {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        while resid(hi) > target {
            hi *= 2.0;
        }
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if resid(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (0..sig.len()).map(|i| (hi * sig[i] * beta[i] / (1.0 + hi * sig[i] * sig[i])).powi(2)).sum()
    }

    #[test]
    fn free_decay_inside_ball_needs_no_control() {
        let (m, g) = model_gram(3, 0.2, 0.6);
        let t = build_tree(4, 0.2, 0.1, vec![0.0; 4]).unwrap();
        let r = norm_optimal(&m, &g, &t, &[1.0, 0.5, 0.2], 0.5).unwrap();
        assert!(r.u_star.is_zero());
        assert_eq!((r.value, r.multiplier, r.active), (0.0, 0.0, false));
    }

    #[test]
    fn single_mode_closed_form() {
        let (m, g) = model_gram(1, 0.0, 1.0);
        let (horizon, tt, eps, y0) = (0.1, 0.05, 1e-3, 2.0);
        let t = build_tree(4, horizon, tt, vec![0.0; 4]).unwrap();
        let r = norm_optimal(&m, &g, &t, &[y0], eps).unwrap();
        let lam = PI * PI;
        let expected = ((-lam * horizon).exp() * y0 - eps.sqrt() * y0).powi(2) / (-2.0 * lam * (horizon - tt)).exp();
        assert!((r.value - expected).abs() <= 1e-9 * expected, "{} vs {expected}", r.value);
        assert!(r.constraint_residual.abs() <= 1e-9 * r.target);
    }

    #[test]
    fn matches_dense_kkt() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..4 {
            let a = rng.gen_range(0.0..0.5);
            let (m, g) = model_gram(2, a, a + rng.gen_range(0.1..0.4));
            let noise = vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let t = build_tree(2, 0.04, 0.02, noise).unwrap();
            let y0 = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            for eps in [1e-1, 1e-3] {
                let map = ControlMap::new(&m, &g, &t, &y0, ControlClass::AtImpulse).unwrap();
                let dense = dense_kkt(&map, eps);
                let r = solve_norm_optimal(&map, eps, 1.0).unwrap();
                assert!((r.value - dense).abs() <= 1e-8 * dense.max(1e-300), "{} vs {dense}", r.value);
                assert!(r.constraint_residual <= 1e-9 * r.target);
            }
        }
    }

    #[test]
    fn terminal_norm_decreases_in_multiplier_and_value_is_homogeneous() {
        let (m, g) = model_gram(4, 0.1, 0.4);
        let t = build_tree(6, 0.06, 0.03, vec![0.8, -0.4, 1.2, 0.0, 0.5, -1.0]).unwrap();
        let y0 = [1.0, -0.5, 0.25, 0.1];
        let map = ControlMap::new(&m, &g, &t, &y0, ControlClass::AtImpulse).unwrap();
        let mut prev = f64::INFINITY;
        for mu in [0.0, 0.1, 1.0, 10.0, 1e2, 1e3, 1e4, 1e6] {
            let phi = map.terminal(&map.penalized(mu, None).unwrap()).unwrap().norm2();
            assert!(phi <= prev * (1.0 + 1e-12));
            prev = phi;
        }
        let base = norm_optimal(&m, &g, &t, &y0, 1e-3).unwrap().value;
        let scaled: Vec<f64> = y0.iter().map(|v| v * -3.0).collect();
        let other = norm_optimal(&m, &g, &t, &scaled, 1e-3).unwrap().value;
        assert!((other - 9.0 * base).abs() <= 1e-8 * other);
    }

    #[test]
    fn uniqueness_probe_agrees() {
        let (m, g) = model_gram(3, 0.3, 0.7);
        let t = build_tree(4, 0.04, 0.02, vec![1.0, -1.0, 0.5, 0.5]).unwrap();
        let y0 = [1.0, 0.3, -0.6];
        let r = norm_optimal(&m, &g, &t, &y0, 1e-2).unwrap();
        assert!(r.active);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probe = uniqueness_probe(&m, &g, &t, &y0, 1e-2, &r, 3, &mut rng).unwrap();
        assert!(probe.max_distance.0 <= 1e-7, "{}", probe.max_distance.0);
        assert_eq!(probe.parallelogram_residual.0, 0.0);
    }

    fn grid(t_tilde: f64, dt: f64, steps: &[usize]) -> TimeGrid {
        TimeGrid { t_tilde, dt, horizons: steps.iter().map(|k| *k as f64 * dt).collect(), max_refine_depth: 12 }
    }

    #[test]
    fn huge_bound_picks_first_horizon() {
        let (m, g) = model_gram(3, 0.2, 0.5);
        let r = time_optimal(&m, &g, &[1.0, 0.5, -0.5], 1e-3, 1e6, &grid(0.02, 0.01, &[3, 4, 5, 6]), &NoiseProfile::Constant(0.5)).unwrap();
        assert!((r.t_star - 0.03).abs() < 1e-12);
        assert!(r.predecessor.is_none());
    }

    #[test]
    fn two_point_oracle_and_refinement() {
        let (m, g) = model_gram(2, 0.1, 0.5);
        let y0 = [1.0, 1.0];
        let eps = 1e-3;
        let noise = NoiseProfile::Constant(0.0);
        let n_at = |k: usize| {
            let t = build_tree(k, k as f64 * 0.01, 0.02, vec![0.0; k]).unwrap();
            norm_optimal(&m, &g, &t, &y0, eps).unwrap().value
        };
        let (n3, n4) = (n_at(3), n_at(4));
        assert!(n3 > n4, "{n3} {n4}");
        let bound = ((n3 + n4) / 2.0).sqrt();
        let mut coarse = grid(0.02, 0.01, &[3, 4, 5]);
        coarse.max_refine_depth = 2;
        let r = time_optimal(&m, &g, &y0, eps, bound, &coarse, &noise).unwrap();
        assert!((r.t_star - 0.04).abs() < 1e-12);
        let r = time_optimal(&m, &g, &y0, eps, bound, &grid(0.02, 0.01, &[3, 4, 5]), &noise).unwrap();
        assert!(r.t_star > 0.03 && r.t_star <= 0.04);
        let (t_prev, n_prev) = r.predecessor.unwrap();
        assert!(t_prev < r.t_star && n_prev > bound * bound && r.value <= bound * bound);
        assert!(r.scan.iter().any(|row| row.refined));
    }

    #[test]
    fn no_admissible_time() {
        let (m, g) = model_gram(2, 0.1, 0.5);
        let r = time_optimal(&m, &g, &[1.0, 1.0], 1e-3, 1e-9, &grid(0.02, 0.01, &[3, 4]), &NoiseProfile::Constant(0.0));
        assert_eq!(r.unwrap_err(), Error::NoAdmissibleTime);
    }

    #[test]
    fn free_decay_crossing() {
        let (m, g) = model_gram(2, 0.1, 0.5);
        let y0 = [1.0, -1.0];
        let f = 0.7;
        let dt = 0.01;
        let free = |k: usize| -> f64 {
            let t = k as f64 * dt;
            m.eigenvalues().iter().zip(&y0).map(|(l, y)| (-2.0 * l * t).exp() * y * y).sum::<f64>() * (1.0 + f * f * dt).powi(k as i32)
        };
        let eps = free(6) / 2.0 * 1.0000001;
        let crossing = (3..=10).find(|&k| free(k) <= eps * 2.0).unwrap();
        let mut scan_only = grid(0.02, dt, &[3, 4, 5, 6, 7, 8]);
        scan_only.max_refine_depth = 2;
        let r = time_optimal(&m, &g, &y0, eps, 1e-8, &scan_only, &NoiseProfile::Constant(f)).unwrap();
        assert_eq!(crossing, 6);
        assert!((r.t_star - 0.06).abs() < 1e-12);
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn bang_bang_structure() {
        let (m, g) = model_gram(3, 0.2, 0.5);
        let y0 = [1.0, 0.5, -0.5];
        let noise = NoiseProfile::Constant(0.8);
        let r = time_optimal(&m, &g, &y0, 1e-3, 3.0, &grid(0.02, 0.01, &[3, 4, 5, 6]), &noise).unwrap();
        assert!(r.norm_active);
        let tree = r.tree(&noise).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let report = bang_bang_check(&m, &g, &tree, &y0, &r.u_star, 3.0, 100, &mut rng).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(r.terminal_norm <= r.target * (1.0 + 1e-9));
        let shrunk = r.u_star.scaled(0.9);
        let bad = bang_bang_check(&m, &g, &tree, &y0, &shrunk, 3.0, 10, &mut rng).unwrap();
        assert!(!bad.norm_ok);
    }

    #[test]
    fn single_mode_proportionality_is_exact() {
        let (m, g) = model_gram(1, 0.3, 0.6);
        let tree = build_tree(4, 0.04, 0.02, vec![0.6; 4]).unwrap();
        let map = ControlMap::new(&m, &g, &tree, &[1.0], ControlClass::AtImpulse).unwrap();
        let (u, _) = boundary_control(&map, 0.5).unwrap().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = bang_bang_check(&m, &g, &tree, &[1.0], &u, 0.5, 100, &mut rng).unwrap();
        assert!(report.proportionality_adjoint.0 <= 1e-12, "{report:?}");
        assert!(report.passed());
    }
}
