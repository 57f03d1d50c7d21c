//! Control synthesis by minimizing the quadratic functional over terminal data.
//!
//! For terminal data `eta` at level `K` let `z` solve the backward equation and
//! `zhat` be the costate read at the pairing level and projected onto the
//! control class. The functional is
//!
//! ```text
//! J(eta) = l/2 E<zhat, M zhat> + eps/2 E||eta||^2 - <y0, z_0>
//! ```
//!
//! Its minimizer solves `(l G + eps I) eta = y(T; y0, 0)` where `G` is the
//! observation Gramian. Under the adjoint convention the control
//! `u = -l zhat(eta*)` steers the system to `y(T) = eps eta*`.
//!
//! Controls are coefficient vectors `w` of functions `chi_G sum_j w_j e_j`:
//! the impulse adds `M w` to the state and `||u||_U^2 = <w, M w>`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::dynamics::{ControlClass, Convention, Dynamics, Pairing};
use crate::error::{Error, Result};
use crate::io::Sig17;
use crate::linalg::{conjugate_gradient, dot, max_eigenpair};
use crate::spectral::{ObservationGram, SpectralModel};
use crate::tree::{l2_inner, AdaptedField, NoiseTree};

/// Smallest accepted target ratio.
pub const MIN_EPSILON: f64 = 1e-12;
/// Default relative residual for the conjugate-gradient solve.
pub const DEFAULT_CG_TOL: f64 = 1e-10;
/// Largest `2^K J` for which weights are computed from assembled matrices.
pub const DENSE_LIMIT: usize = 512;
/// Smallest relative residual requested from the refined solve.
const CG_TOL_FLOOR: f64 = 1e-14;

/// Penalty weight `l` on the observation term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weight {
    Given(f64),
    /// Use the smallest weight for which the weighted observability inequality holds.
    Auto,
}

#[derive(Debug, Clone)]
pub struct HumProblem<'a> {
    dynamics: Dynamics<'a>,
    y0: Vec<f64>,
    epsilon: f64,
    weight: Weight,
    pairing: Pairing,
    cg_tol: f64,
    max_iters: usize,
}

/// Minimizer of the functional together with solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimizer {
    pub eta: AdaptedField,
    pub iterations: usize,
    pub residual: f64,
}

impl<'a> HumProblem<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &'a SpectralModel,
        gram: &'a ObservationGram,
        tree: &'a NoiseTree,
        y0: Vec<f64>,
        epsilon: f64,
        weight: Weight,
        convention: Convention,
        class: ControlClass,
    ) -> Result<Self> {
        if !(epsilon >= MIN_EPSILON) || !epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!("epsilon = {epsilon} must be at least {MIN_EPSILON}")));
        }
        if let Weight::Given(l) = weight {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidParameter(format!("weight l = {l} must be positive")));
            }
        }
        if y0.len() != model.dim() {
            return Err(Error::DimensionMismatch { expected: model.dim(), found: y0.len() });
        }
        let pairing = Pairing::new(tree, convention, class)?;
        Ok(Self {
            dynamics: Dynamics::new(model, gram, tree)?,
            y0,
            epsilon,
            weight,
            pairing,
            cg_tol: DEFAULT_CG_TOL,
            max_iters: 20_000,
        })
    }

    pub fn with_solver(mut self, cg_tol: f64, max_iters: usize) -> Self {
        self.cg_tol = cg_tol;
        self.max_iters = max_iters;
        self
    }

    pub fn dynamics(&self) -> &Dynamics<'a> {
        &self.dynamics
    }

    pub fn pairing(&self) -> Pairing {
        self.pairing
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn y0(&self) -> &[f64] {
        &self.y0
    }

    pub fn weight(&self) -> Weight {
        self.weight
    }

    fn depth(&self) -> usize {
        self.dynamics.depth()
    }

    fn dim(&self) -> usize {
        self.dynamics.dim()
    }

    /// Number of unknowns, `2^K J`.
    pub fn unknowns(&self) -> usize {
        self.dim() << self.depth()
    }

    /// `(z_0, zhat)` for terminal data `eta`.
    pub fn costate(&self, eta: &AdaptedField) -> Result<(Vec<f64>, AdaptedField)> {
        let d = &self.dynamics;
        let z_pair = d.pull_back(eta, self.pairing.pair_level)?;
        let zhat = self.pairing.project(&z_pair)?;
        let z0 = d.pull_back_from(&z_pair, 0)?;
        Ok((z0.into_values(), zhat))
    }

    /// `zhat(eta)`, the costate seen by the control.
    pub fn pairing_field(&self, eta: &AdaptedField) -> Result<AdaptedField> {
        let z_pair = self.dynamics.pull_back(eta, self.pairing.pair_level)?;
        self.pairing.project(&z_pair)
    }

    /// Observation Gramian `G eta`, with `E<eta', G eta> = E<zhat(eta'), M zhat(eta)>`.
    pub fn gramian_apply(&self, eta: &AdaptedField) -> Result<AdaptedField> {
        let zhat = self.pairing_field(eta)?;
        let observed = self.dynamics.apply_gram(&zhat)?;
        self.dynamics.propagate(&self.pairing.project_adjoint(&observed)?)
    }

    /// `y(T; y0, 0)`, the data term of the normal equations.
    pub fn free_terminal(&self) -> Result<AdaptedField> {
        self.dynamics.propagate(&AdaptedField::constant(0, &self.y0))
    }

    pub fn eval_j(&self, eta: &AdaptedField, l: f64) -> Result<f64> {
        let (z0, zhat) = self.costate(eta)?;
        let observed = l2_inner(&zhat, &zhat, Some(self.dynamics.gram()?))?;
        Ok(0.5 * l * observed + 0.5 * self.epsilon * eta.norm2() - dot(&self.y0, &z0))
    }

    /// `l G eta + eps eta - y(T; y0, 0)`.
    pub fn grad_j(&self, eta: &AdaptedField, l: f64) -> Result<AdaptedField> {
        let mut g = self.gramian_apply(eta)?.scaled(l);
        g.axpy(self.epsilon, eta)?;
        g.axpy(-1.0, &self.free_terminal()?)?;
        Ok(g)
    }

    fn normal_operator(&self, l: f64) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
        let (depth, dim) = (self.depth(), self.dim());
        move |x: &[f64]| {
            let eta = AdaptedField::from_flat(depth, dim, x.to_vec()).expect("sized by caller");
            let mut out = self.gramian_apply(&eta).expect("levels are consistent").scaled(l);
            out.axpy(self.epsilon, &eta).expect("same level");
            out.into_values()
        }
    }

    /// Solves `(l G + eps I) eta = rhs` by conjugate gradients.
    pub fn solve_normal(&self, l: f64, rhs: &AdaptedField, start: Option<&AdaptedField>) -> Result<Minimizer> {
        let op = self.normal_operator(l);
        let out = conjugate_gradient(op, dot, rhs.values(), start.map(AdaptedField::values), self.cg_tol, self.max_iters)?;
        Ok(Minimizer {
            eta: AdaptedField::from_flat(self.depth(), self.dim(), out.x)?,
            iterations: out.iterations,
            residual: out.residual,
        })
    }

    /// Minimizer of the functional for weight `l`.
    pub fn minimize_j(&self, l: f64, start: Option<&AdaptedField>) -> Result<Minimizer> {
        if !(l > 0.0) {
            return Err(Error::InvalidParameter(format!("weight l = {l} must be positive")));
        }
        let rhs = self.free_terminal()?;
        let rhs_norm = rhs.norm2().sqrt();
        let mut sol = self.solve_normal(l, &rhs, start)?;
        // the steering identity is judged against eps*eta, often far below the data scale
        for _ in 0..4 {
            let scale = self.epsilon * sol.eta.norm2().sqrt() / rhs_norm;
            if !(scale < 1.0) || scale == 0.0 || sol.residual <= self.cg_tol * scale {
                break;
            }
            let tol = (self.cg_tol * scale).max(CG_TOL_FLOOR);
            let done = sol.iterations;
            let op = self.normal_operator(l);
            let out = conjugate_gradient(op, dot, rhs.values(), Some(sol.eta.values()), tol, self.max_iters)?;
            sol = Minimizer {
                eta: AdaptedField::from_flat(self.depth(), self.dim(), out.x)?,
                iterations: done + out.iterations,
                residual: out.residual,
            };
            if tol == CG_TOL_FLOOR {
                break;
            }
        }
        Ok(sol)
    }

    /// Smallest `l >= 0` with `E|z_0|^2 <= l E<zhat, M zhat> + eps E|eta|^2` for all `eta`.
    pub fn min_weight(&self) -> Result<f64> {
        if self.pairing.convention == Convention::Adjoint && self.pairing.class == ControlClass::AtImpulse {
            return self.min_weight_reduced();
        }
        if self.unknowns() <= DENSE_LIMIT {
            return self.min_weight_dense();
        }
        self.min_weight_low_rank()
    }

    /// Weight from the `J x J` reduction available when the control reads the
    /// costate at the impulse level.
    ///
    /// With `R: eta -> z_{k~}`, `R R* = diag(exp(-2 lambda_j (T - T~))) * pi_1`
    /// nodewise, and the inequality reduces to
    /// `diag(pi_0 exp(-2 lambda_j T~) - eps exp(2 lambda_j (T - T~)) / pi_1) <= l M`,
    /// where `pi_0`, `pi_1` are the second moments of the discrete exponential
    /// before and after the impulse.
    fn min_weight_reduced(&self) -> Result<f64> {
        let tree = self.dynamics.tree;
        let kt = tree.impulse_level();
        let (pi0, pi1) = (tree.moment_product(0, kt), tree.moment_product(kt, tree.depth()));
        let (t_imp, rest) = (tree.impulse_time(), tree.horizon() - tree.impulse_time());
        let diag: Vec<f64> = self
            .dynamics
            .model
            .eigenvalues()
            .iter()
            .map(|lam| {
                let penalty = self.epsilon * (2.0 * lam * rest).exp() / pi1;
                let d = pi0 * (-2.0 * lam * t_imp).exp() - penalty;
                if d.is_finite() {
                    d
                } else {
                    -f64::MAX.sqrt()
                }
            })
            .collect();
        dominating_weight_diag(&diag, self.dynamics.gram()?.matrix())
    }

    /// Weight from assembled operators: the root of
    /// `lambda_max(Psi (eps I + l G)^{-1} Psi*) = 1`, one factorization per step.
    pub fn min_weight_dense(&self) -> Result<f64> {
        let (psi, g) = self.dense_operators()?;
        let n = g.nrows();
        let eps = self.epsilon;
        let top = |l: f64| {
            let a = &g * l + DMatrix::identity(n, n) * eps;
            let x = match a.clone().cholesky() {
                Some(c) => c.solve(&psi.transpose()),
                None => match a.lu().solve(&psi.transpose()) {
                    Some(x) => x,
                    None => return f64::NAN,
                },
            };
            let r = &psi * x;
            max_eigenpair(&((&r + r.transpose()) * 0.5)).0
        };
        if top(0.0) <= 1.0 {
            return Ok(0.0);
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        while !(top(hi) <= 1.0) {
            lo = hi;
            hi *= 10.0;
            if hi > 1e300 {
                return Err(Error::NonObservable(
                    "the weighted observability inequality fails for every finite weight".into(),
                ));
            }
        }
        for _ in 0..200 {
            let mid = if lo > 0.0 { (lo * hi).sqrt() } else { 0.5 * hi };
            if !(top(mid) <= 1.0) {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-14 * hi {
                break;
            }
        }
        Ok(hi)
    }

    /// Dense `(Psi, G)` for `Psi: eta -> z_0` and the Gramian, in `L^2`-orthonormal coordinates.
    pub fn dense_operators(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (depth, dim, n) = (self.depth(), self.dim(), self.unknowns());
        let w = (-(depth as f64)).exp2();
        let field = |x: &[f64]| AdaptedField::from_flat(depth, dim, x.to_vec()).expect("sized");
        let psi = crate::linalg::assemble(n, dim, w, 1.0, &|x| self.costate(&field(x)).expect("consistent").0);
        let g = crate::linalg::assemble(n, n, w, w, &|x| self.gramian_apply(&field(x)).expect("consistent").into_values());
        Ok((psi, (&g + g.transpose()) * 0.5))
    }

    /// Dense `(A, G)` with `A = Psi* Psi`.
    pub fn dense_forms(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (psi, g) = self.dense_operators()?;
        Ok((psi.transpose() * psi, g))
    }

    /// Root of `lambda_max(Psi (eps I + l G)^{-1} Psi*) = 1`, using that `Psi` has rank at most `J`.
    fn min_weight_low_rank(&self) -> Result<f64> {
        let top = |l: f64| -> Result<f64> { Ok(max_eigenpair(&self.reduced_resolvent(l)?).0) };
        if top(0.0)? <= 1.0 {
            return Ok(0.0);
        }
        let mut lo = 0.0;
        let mut hi = 1.0;
        while top(hi)? > 1.0 {
            lo = hi;
            hi *= 10.0;
            if hi > 1e16 {
                return Err(Error::NonObservable(
                    "the weighted observability inequality fails for every finite weight".into(),
                ));
            }
        }
        for _ in 0..100 {
            let mid = if lo > 0.0 { (lo * hi).sqrt() } else { 0.5 * hi };
            if top(mid)? > 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-12 * hi {
                break;
            }
        }
        Ok(hi)
    }

    /// `Psi (eps I + l G)^{-1} Psi*` as a `J x J` matrix.
    fn reduced_resolvent(&self, l: f64) -> Result<DMatrix<f64>> {
        let dim = self.dim();
        let mut cols = Vec::with_capacity(dim);
        for j in 0..dim {
            let mut e = vec![0.0; dim];
            e[j] = 1.0;
            let rhs = self.dynamics.propagate(&AdaptedField::constant(0, &e))?;
            let sol = if l > 0.0 { self.solve_normal(l, &rhs, None)?.eta } else { rhs.scaled(1.0 / self.epsilon) };
            cols.push(self.costate(&sol)?.0);
        }
        let m = DMatrix::from_fn(dim, dim, |r, c| cols[c][r]);
        Ok((&m + m.transpose()) * 0.5)
    }

    fn resolve_weight(&self) -> Result<(f64, Option<f64>)> {
        match self.weight {
            Weight::Given(l) => Ok((l, None)),
            Weight::Auto => {
                let lmin = self.min_weight()?;
                // any positive weight works when the inequality already holds at l = 0
                let l = if lmin > 0.0 { lmin } else { self.epsilon };
                Ok((l, Some(lmin)))
            }
        }
    }

    /// Minimizes the functional, builds the control and verifies the certificate chain.
    pub fn synthesize(&self) -> Result<HumCertificate> {
        let (l, l_min) = self.resolve_weight()?;
        let gram = self.dynamics.gram()?;
        let sol = self.minimize_j(l, None)?;
        let eta = sol.eta;
        let (z0, zhat) = self.costate(&eta)?;
        let control = zhat.scaled(self.pairing.control_sign() * l);
        let traj = self.dynamics.forward(&self.y0, Some(&control))?;
        let terminal = traj.terminal().clone();

        let y0_norm2 = dot(&self.y0, &self.y0);
        let terminal_norm = terminal.norm2();
        let control_norm = l2_inner(&control, &control, Some(gram))?;
        let eta_norm = eta.norm2();
        let observed = l2_inner(&zhat, &zhat, Some(gram))?;

        let target = eta.scaled(self.epsilon);
        let miss = terminal.sub(&target)?.norm2().sqrt();
        let size = terminal_norm.sqrt().max(target.norm2().sqrt());
        let steering_residual = if size > 0.0 { miss / size } else { 0.0 };

        let left = l * observed + self.epsilon * eta_norm;
        let right = control_norm / l + terminal_norm / self.epsilon;
        let chain_residual = if left + right > 0.0 { (left - right).abs() / (left + right) } else { 0.0 };

        Ok(HumCertificate {
            eta_star: eta,
            control,
            terminal,
            terminal_norm,
            control_norm,
            eta_norm,
            observed_norm: observed,
            initial_pairing: dot(&self.y0, &z0),
            y0_norm2,
            inequality_slack: y0_norm2 - control_norm / l - terminal_norm / self.epsilon,
            steering_residual,
            chain_residual,
            l,
            l_min,
            epsilon: self.epsilon,
            convention: self.pairing.convention,
            class: self.pairing.class,
            iterations: sol.iterations,
            solver_residual: sol.residual,
        })
    }
}

/// Smallest `l >= 0` with `diag(d) <= l M`, by bisection on a Cholesky test.
///
/// Entries of `d` may be hugely negative (modes that are already negligible);
/// the factorization test stays reliable where an eigen-decomposition would not.
pub fn dominating_weight_diag(d: &[f64], m: &DMatrix<f64>) -> Result<f64> {
    let n = d.len();
    if d.iter().all(|x| *x <= 0.0) {
        return Ok(0.0);
    }
    let holds = |l: f64| {
        let mat = DMatrix::from_fn(n, n, |i, j| l * m[(i, j)] - if i == j { d[i] } else { 0.0 });
        mat.cholesky().is_some()
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    while !holds(hi) {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::NonObservable("observation Gram matrix is singular on an unstable mode".into()));
        }
    }
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Result of [`HumProblem::synthesize`].
#[derive(Debug, Clone, PartialEq)]
pub struct HumCertificate {
    pub eta_star: AdaptedField,
    pub control: AdaptedField,
    pub terminal: AdaptedField,
    /// `E||y(T)||^2`.
    pub terminal_norm: f64,
    /// `E||u||_U^2 = E<u, M u>`.
    pub control_norm: f64,
    pub eta_norm: f64,
    /// `E<zhat, M zhat>` at the minimizer.
    pub observed_norm: f64,
    pub initial_pairing: f64,
    pub y0_norm2: f64,
    /// `E||y0||^2 - E||u||^2 / l - E||y(T)||^2 / eps`.
    pub inequality_slack: f64,
    /// `||y(T) - eps eta*|| / max(||y(T)||, ||eps eta*||)`.
    pub steering_residual: f64,
    /// Relative gap between `l E<zhat,M zhat> + eps E||eta*||^2` and `E||u||^2/l + E||y(T)||^2/eps`.
    pub chain_residual: f64,
    pub l: f64,
    pub l_min: Option<f64>,
    pub epsilon: f64,
    pub convention: Convention,
    pub class: ControlClass,
    pub iterations: usize,
    pub solver_residual: f64,
}

impl HumCertificate {
    /// Whether `E||y(T)||^2 <= eps E||y0||^2` up to `abs_tol`.
    pub fn reaches_target(&self, abs_tol: f64) -> bool {
        self.terminal_norm <= self.epsilon * self.y0_norm2 + abs_tol
    }

    pub fn to_document(&self) -> CertificateDocument {
        CertificateDocument {
            eta_star_norm2: Sig17(self.eta_norm),
            u_norm2: Sig17(self.control_norm),
            yt_norm2: Sig17(self.terminal_norm),
            slack: Sig17(self.inequality_slack),
            steering_residual: Sig17(self.steering_residual),
            chain_residual: Sig17(self.chain_residual),
            l: Sig17(self.l),
            l_min: self.l_min.map(Sig17),
            epsilon: Sig17(self.epsilon),
            convention: self.convention,
            class: self.class,
            cg_iterations: self.iterations,
        }
    }
}

/// Certificate JSON.
#[derive(Debug, Clone, Serialize)]
pub struct CertificateDocument {
    pub eta_star_norm2: Sig17,
    pub u_norm2: Sig17,
    #[serde(rename = "yT_norm2")]
    pub yt_norm2: Sig17,
    pub slack: Sig17,
    pub steering_residual: Sig17,
    pub chain_residual: Sig17,
    pub l: Sig17,
    pub l_min: Option<Sig17>,
    pub epsilon: Sig17,
    pub convention: Convention,
    pub class: ControlClass,
    pub cg_iterations: usize,
}

/// Least-squares check of the cost growth `ln E||u||^2 ~ c1 + c2 sqrt(ln(e + 1/eps))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostScalingFit {
    pub c1: f64,
    pub c2: f64,
    pub r2: f64,
    pub rss: f64,
    /// Residual sum of squares of the competing model linear in `ln(1/eps)`.
    pub rss_log_linear: f64,
}

pub fn fit_cost_scaling(epsilons: &[f64], control_norms: &[f64]) -> CostScalingFit {
    let y: Vec<f64> = control_norms.iter().map(|u| u.ln()).collect();
    let x: Vec<f64> = epsilons.iter().map(|e| (std::f64::consts::E + 1.0 / e).ln().sqrt()).collect();
    let xl: Vec<f64> = epsilons.iter().map(|e| (1.0 / e).ln()).collect();
    let f = crate::linalg::fit_line(&x, &y);
    let g = crate::linalg::fit_line(&xl, &y);
    CostScalingFit { c1: f.intercept, c2: f.slope, r2: f.r2, rss: f.rss, rss_log_linear: g.rss }
}

/// Convenience wrapper over [`HumProblem::synthesize`].
#[allow(clippy::too_many_arguments)]
pub fn synthesize(
    model: &SpectralModel,
    gram: &ObservationGram,
    tree: &NoiseTree,
    y0: &[f64],
    epsilon: f64,
    weight: Weight,
    convention: Convention,
    class: ControlClass,
) -> Result<HumCertificate> {
    HumProblem::new(model, gram, tree, y0.to_vec(), epsilon, weight, convention, class)?.synthesize()
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::assemble;
    use crate::spectral::{build_dirichlet_laplacian_1d, gram_matrix, Interval};
    use crate::tree::build_tree;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_field(rng: &mut ChaCha8Rng, level: usize, dim: usize) -> AdaptedField {
        let v = (0..dim << level).map(|_| rng.gen_range(-1.0..1.0)).collect();
        AdaptedField::from_flat(level, dim, v).unwrap()
    }

    struct Setup {
        model: SpectralModel,
        gram: ObservationGram,
        tree: NoiseTree,
    }

    fn setup(dim: usize, depth: usize, horizon: f64, region: &[(f64, f64)], noise: Vec<f64>) -> Setup {
        let model = build_dirichlet_laplacian_1d(dim).unwrap();
        let iv: Vec<Interval> = region.iter().map(|(a, b)| Interval::new(*a, *b)).collect();
        let gram = gram_matrix(&model, &iv).unwrap();
        let tree = build_tree(depth, horizon, horizon * (depth / 2) as f64 / depth as f64, noise).unwrap();
        Setup { model, gram, tree }
    }

    impl Setup {
        fn problem(&self, y0: Vec<f64>, eps: f64, weight: Weight, conv: Convention, class: ControlClass) -> HumProblem<'_> {
            HumProblem::new(&self.model, &self.gram, &self.tree, y0, eps, weight, conv, class).unwrap()
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let s = setup(2, 2, 0.1, &[(0.0, 0.5)], vec![0.0; 2]);
        let mk = |eps, w| HumProblem::new(&s.model, &s.gram, &s.tree, vec![1.0, 0.0], eps, w, Convention::Adjoint, ControlClass::AtImpulse);
        assert!(matches!(mk(1e-13, Weight::Auto), Err(Error::InvalidParameter(_))));
        assert!(matches!(mk(0.1, Weight::Given(0.0)), Err(Error::InvalidParameter(_))));
        assert!(mk(1e-12, Weight::Auto).is_ok());
        let far = build_tree(4, 1.0, 0.25, vec![0.0; 4]).unwrap();
        let r = HumProblem::new(&s.model, &s.gram, &far, vec![1.0, 0.0], 0.1, Weight::Auto, Convention::Adjoint, ControlClass::PaperRestricted);
        assert!(matches!(r, Err(Error::RestrictedClassHorizon { .. })));
    }

    #[test]
    fn functional_trivial_values_and_scaling() {
        let s = setup(3, 4, 0.1, &[(0.1, 0.4)], vec![0.5, -1.0, 0.3, 1.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eta = random_field(&mut rng, 4, 3);
        for conv in [Convention::Adjoint, Convention::PaperReversed] {
            let p = s.problem(vec![0.4, -1.0, 0.2], 0.05, Weight::Given(2.0), conv, ControlClass::AtImpulse);
            assert_eq!(p.eval_j(&AdaptedField::zeros(4, 3), 2.0).unwrap(), 0.0);
            let j1 = p.eval_j(&eta, 2.0).unwrap();
            let j2 = p.eval_j(&eta.scaled(2.0), 2.0).unwrap();
            let j_neg = p.eval_j(&eta.scaled(-1.0), 2.0).unwrap();
            // J(c eta) = c^2 Q - c L with Q = (J(eta) + J(-eta)) / 2, L = (J(-eta) - J(eta)) / 2
            let (q, lin) = (0.5 * (j1 + j_neg), 0.5 * (j_neg - j1));
            assert!((j2 - (4.0 * q - 2.0 * lin)).abs() <= 1e-12 * j2.abs().max(1.0));
            let p0 = s.problem(vec![0.0; 3], 0.05, Weight::Given(2.0), conv, ControlClass::AtImpulse);
            assert!(p0.eval_j(&eta, 2.0).unwrap() >= 0.0);
            assert!(p0.grad_j(&AdaptedField::zeros(4, 3), 2.0).unwrap().is_zero());
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let s = setup(4, 4, 0.1, &[(0.2, 0.6)], vec![1.0, -0.5, 0.7, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (conv, class) in [
            (Convention::Adjoint, ControlClass::AtImpulse),
            (Convention::PaperReversed, ControlClass::PaperRestricted),
        ] {
            let p = s.problem(vec![1.0, 0.3, -0.2, 0.5], 0.01, Weight::Given(3.0), conv, class);
            let eta = random_field(&mut rng, 4, 4);
            let grad = p.grad_j(&eta, 3.0).unwrap();
            let delta = 1e-5;
            for _ in 0..20 {
                let h = random_field(&mut rng, 4, 4);
                let mut plus = eta.clone();
                plus.axpy(delta, &h).unwrap();
                let mut minus = eta.clone();
                minus.axpy(-delta, &h).unwrap();
                let fd = (p.eval_j(&plus, 3.0).unwrap() - p.eval_j(&minus, 3.0).unwrap()) / (2.0 * delta);
                let exact = l2_inner(&grad, &h, None).unwrap();
                assert!((fd - exact).abs() <= 1e-6 * exact.abs().max(1.0), "{fd} vs {exact}");
            }
        }
    }

    #[test]
    fn strict_convexity_margin() {
        let s = setup(3, 4, 0.1, &[(0.5, 0.9)], vec![0.9; 4]);
        let p = s.problem(vec![1.0, -1.0, 0.5], 0.02, Weight::Given(1.5), Convention::Adjoint, ControlClass::AtImpulse);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = random_field(&mut rng, 4, 3);
            let b = random_field(&mut rng, 4, 3);
            let mut mid = a.scaled(0.5);
            mid.axpy(0.5, &b).unwrap();
            let lhs = p.eval_j(&mid, 1.5).unwrap();
            let rhs = 0.5 * (p.eval_j(&a, 1.5).unwrap() + p.eval_j(&b, 1.5).unwrap()) - 0.02 / 8.0 * a.sub(&b).unwrap().norm2();
            assert!(lhs <= rhs + 1e-12 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn zero_initial_state_gives_zero_control() {
        let s = setup(3, 4, 0.1, &[(0.0, 0.5)], vec![1.0; 4]);
        let p = s.problem(vec![0.0; 3], 0.1, Weight::Auto, Convention::Adjoint, ControlClass::AtImpulse);
        assert!(p.minimize_j(1.0, None).unwrap().eta.is_zero());
        let c = p.synthesize().unwrap();
        assert!(c.control.is_zero());
        assert_eq!((c.control_norm, c.terminal_norm, c.eta_norm), (0.0, 0.0, 0.0));
    }

    #[test]
    fn cg_matches_dense_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..4 {
            let a = rng.gen_range(0.0..0.5);
            let b = a + rng.gen_range(0.1..0.5);
            let noise = vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let s = setup(2, 2, 0.1, &[(a, b)], noise);
            let conv = if trial % 2 == 0 { Convention::Adjoint } else { Convention::PaperReversed };
            let p = s.problem(vec![1.0, -0.7], 0.01, Weight::Given(2.5), conv, ControlClass::AtImpulse);
            // dense operator assembled from the gradient: grad(e_b) - grad(0)
            let g0 = p.grad_j(&AdaptedField::zeros(2, 2), 2.5).unwrap();
            let op = assemble(8, 8, 1.0, 1.0, &|x| {
                let f = AdaptedField::from_flat(2, 2, x.to_vec()).unwrap();
                p.grad_j(&f, 2.5).unwrap().sub(&g0).unwrap().into_values()
            });
            let rhs = DVector::from_vec(g0.values().iter().map(|v| -v).collect());
            let dense = op.lu().solve(&rhs).unwrap();
            let cg = p.minimize_j(2.5, None).unwrap().eta;
            for (x, y) in cg.values().iter().zip(dense.iter()) {
                assert!((x - y).abs() <= 1e-10 * dense.amax(), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn cg_start_independence() {
        let s = setup(16, 10, 0.1, &[(0.2, 0.45), (0.6, 0.8)], (0..10).map(|k| (k as f64 * 0.7).sin()).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y0: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = s.problem(y0, 1e-2, Weight::Given(1.0), Convention::Adjoint, ControlClass::AtImpulse);
        let a = p.minimize_j(1.0, None).unwrap().eta;
        let b = p.minimize_j(1.0, Some(&random_field(&mut rng, 10, 16))).unwrap().eta;
        let diff = a.sub(&b).unwrap().norm2().sqrt();
        assert!(diff <= 1e-8 * a.norm2().sqrt().max(1.0), "{diff}");
        let g = p.grad_j(&a, 1.0).unwrap().norm2().sqrt();
        assert!(g <= 1e-9 * p.free_terminal().unwrap().norm2().sqrt());
    }

    #[test]
    fn scalar_mode_synthesis_matches_closed_form() {
        let s = setup(1, 2, 1.0, &[(0.0, 1.0)], vec![0.0; 2]);
        let (eps, y0) = (0.1, 1.3);
        let p = s.problem(vec![y0], eps, Weight::Auto, Convention::Adjoint, ControlClass::AtImpulse);
        let c = p.synthesize().unwrap();
        let lam = PI * PI;
        // e^{-2 lambda T} < eps, so l_min = 0 and the fallback weight eps is used
        assert_eq!(c.l_min, Some(0.0));
        let l = c.l;
        let g = (-2.0 * lam * 0.5).exp();
        let eta = (-lam).exp() * y0 / (l * g + eps);
        let u = -l * (-lam * 0.5).exp() * eta;
        for node in c.control.nodes() {
            assert!((node[0] - u).abs() <= 1e-12 * u.abs());
        }
        assert!(c.inequality_slack >= 0.0);
        assert!(c.steering_residual <= 1e-10);
    }

    #[test]
    fn scalar_min_weight_matches_formula_and_dense() {
        let (t, tt, eps) = (0.1, 0.05, 0.01);
        let s = setup(1, 4, t, &[(0.2, 0.7)], vec![0.0; 4]);
        let m = s.gram.matrix()[(0, 0)];
        let lam = PI * PI;
        let expected = ((-2.0 * lam * t).exp() - eps) / (m * (-2.0 * lam * (t - tt)).exp());
        let p = s.problem(vec![1.0], eps, Weight::Auto, Convention::Adjoint, ControlClass::AtImpulse);
        let reduced = p.min_weight().unwrap();
        let dense = p.min_weight_dense().unwrap();
        assert!((reduced - expected).abs() <= 1e-12 * expected, "{reduced} vs {expected}");
        assert!((dense - expected).abs() <= 1e-8 * expected, "{dense} vs {expected}");
    }

    #[test]
    fn min_weight_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..5 {
            let a = rng.gen_range(0.0..0.6);
            let b = a + rng.gen_range(0.05..0.4);
            let noise = vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let s = setup(2, 2, 0.05, &[(a, b)], noise);
            let p = s.problem(vec![1.0, 1.0], 1e-3, Weight::Auto, Convention::Adjoint, ControlClass::AtImpulse);
            let (r, d) = (p.min_weight().unwrap(), p.min_weight_dense().unwrap());
            assert!((r - d).abs() <= 1e-8 * r.max(1.0), "{r} vs {d}");
            let q = s.problem(vec![1.0, 1.0], 1e-3, Weight::Auto, Convention::PaperReversed, ControlClass::AtImpulse);
            let (lr, d) = (q.min_weight_low_rank().unwrap(), q.min_weight_dense().unwrap());
            assert!((lr - d).abs() <= 1e-8 * d.max(1.0), "{lr} vs {d}");
        }
    }

    #[test]
    fn min_weight_vanishes_for_large_epsilon() {
        let s = setup(3, 4, 0.1, &[(0.3, 0.6)], vec![0.5; 4]);
        let p = s.problem(vec![1.0, 0.0, 0.0], 0.9, Weight::Auto, Convention::Adjoint, ControlClass::AtImpulse);
        let top = max_eigenpair(&p.dense_forms().unwrap().0).0;
        assert!(top <= 0.9);
        assert_eq!(p.min_weight().unwrap(), 0.0);
        assert_eq!(p.min_weight_dense().unwrap(), 0.0);
    }

    #[test]
    fn certificate_identities_hold() {
        let s = setup(6, 6, 0.1, &[(0.1, 0.3)], vec![1.5, -0.5, 0.2, 0.9, -1.1, 0.4]);
        let y0 = vec![1.0, -0.5, 0.3, 0.2, -0.1, 0.05];
        for eps in [1e-1, 1e-3] {
            let p = s.problem(y0.clone(), eps, Weight::Auto, Convention::Adjoint, ControlClass::AtImpulse);
            let c = p.synthesize().unwrap();
            assert!(c.steering_residual <= 1e-8, "{}", c.steering_residual);
            assert!(c.chain_residual <= 1e-10, "{}", c.chain_residual);
            assert!(c.inequality_slack >= -1e-10 * c.y0_norm2);
            assert!(c.reaches_target(1e-10));
            assert!((c.terminal_norm - eps * eps * c.eta_norm).abs() <= 1e-8 * c.terminal_norm);
        }
    }

    #[test]
    fn noise_makes_minimizer_random() {
        let y0 = vec![1.0, 0.5, -0.25];
        let noisy = setup(3, 6, 0.1, &[(0.2, 0.5)], vec![1.0; 6]);
        let c = noisy.problem(y0.clone(), 1e-2, Weight::Auto, Convention::Adjoint, ControlClass::AtImpulse).synthesize().unwrap();
        assert!(c.eta_star.variance() > 0.0);
        let calm = setup(3, 6, 0.1, &[(0.2, 0.5)], vec![0.0; 6]);
        let c = calm.problem(y0, 1e-2, Weight::Auto, Convention::Adjoint, ControlClass::AtImpulse).synthesize().unwrap();
        assert!(c.eta_star.variance() <= 1e-14);
    }

    #[test]
    fn certificate_document_keys() {
        let s = setup(2, 2, 0.1, &[(0.0, 0.5)], vec![0.0; 2]);
        let c = s.problem(vec![1.0, 0.0], 0.1, Weight::Auto, Convention::Adjoint, ControlClass::AtImpulse).synthesize().unwrap();
        let v: serde_json::Value = serde_json::from_str(&crate::io::to_json(&c.to_document())).unwrap();
        for key in ["eta_star_norm2", "u_norm2", "yT_norm2", "slack", "steering_residual", "l", "l_min", "convention", "class"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["convention"], "adjoint");
    }
}
