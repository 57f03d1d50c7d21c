//! Forward impulse-controlled evolution and backward adjoint evolution on the tree.
//!
//! One forward step maps node `i` at level `k` to its children with
//! `y_{k+1} = S(dt) (1 + F_k dW_k) y_k`. One backward step maps the children
//! back with `z_k = S(dt) E[(1 + F_k dW_k) z_{k+1} | node]`. The two steps are
//! exact adjoints in `L^2`, so `E<y_{k+1}, z_{k+1}> = E<y_k, z_k>` holds up to
//! rounding and the impulse `y(T~) = y(T~-) + M u` produces the duality identity
//!
//! ```text
//! E<y(T), eta> - E<y0, z_0> = E<u, M zhat>,   zhat = E[z_{k~} | F_{t_{k_u}}]
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt17, CsvTable, Sig17};
use crate::spectral::{ObservationGram, SpectralModel};
use crate::tree::{conditional_expectation, l2_inner, AdaptedField, NoiseTree};

/// Sign and time-point convention of the duality pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    /// Pairing at the impulse level with a plus sign; exact for the discrete system.
    #[default]
    Adjoint,
    /// Pairing at level `K - k~` with the opposite sign.
    PaperReversed,
}

/// Measurability class of the control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ControlClass {
    /// Measurable at the impulse level `k~`.
    #[default]
    AtImpulse,
    /// Measurable at level `K - k~`; needs `K - k~ <= k~`.
    PaperRestricted,
}

impl std::fmt::Display for Convention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Convention::Adjoint => "adjoint",
            Convention::PaperReversed => "paper-reversed",
        })
    }
}

impl std::fmt::Display for ControlClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ControlClass::AtImpulse => "at-impulse",
            ControlClass::PaperRestricted => "paper-restricted",
        })
    }
}

/// Where the costate is read (`pair_level`) and where the control lives (`control_level`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pairing {
    pub convention: Convention,
    pub class: ControlClass,
    pub pair_level: usize,
    pub control_level: usize,
}

impl Pairing {
    pub fn new(tree: &NoiseTree, convention: Convention, class: ControlClass) -> Result<Self> {
        let (k, kt) = (tree.depth(), tree.impulse_level());
        let control_level = match class {
            ControlClass::AtImpulse => kt,
            ControlClass::PaperRestricted => {
                if k - kt > kt {
                    return Err(Error::RestrictedClassHorizon { restricted: k - kt, impulse: kt });
                }
                k - kt
            }
        };
        let pair_level = match convention {
            Convention::Adjoint => kt,
            Convention::PaperReversed => k - kt,
        };
        Ok(Self { convention, class, pair_level, control_level })
    }

    /// Level at which the costate information reaching the control is measurable.
    pub fn common_level(&self) -> usize {
        self.pair_level.min(self.control_level)
    }

    /// Sign of the synthesized control `u = sign * l * B* zhat`.
    pub fn control_sign(&self) -> f64 {
        match self.convention {
            Convention::Adjoint => -1.0,
            Convention::PaperReversed => 1.0,
        }
    }

    /// `zhat`: the costate at `pair_level` conditioned and lifted to `control_level`.
    pub fn project(&self, z_pair: &AdaptedField) -> Result<AdaptedField> {
        if z_pair.level() != self.pair_level {
            return Err(Error::LevelMismatch { expected: self.pair_level, found: z_pair.level() });
        }
        conditional_expectation(z_pair, self.common_level())?.lift(self.control_level)
    }

    /// Adjoint of [`Pairing::project`]: a control-level field mapped to `pair_level`.
    pub fn project_adjoint(&self, w: &AdaptedField) -> Result<AdaptedField> {
        if w.level() != self.control_level {
            return Err(Error::LevelMismatch { expected: self.control_level, found: w.level() });
        }
        conditional_expectation(w, self.common_level())?.lift(self.pair_level)
    }
}

/// Model, observation operator and tree bundled with the per-step decay factors.
#[derive(Debug, Clone)]
pub struct Dynamics<'a> {
    pub model: &'a SpectralModel,
    pub tree: &'a NoiseTree,
    gram: Option<&'a ObservationGram>,
    step_decay: Vec<f64>,
}

impl<'a> Dynamics<'a> {
    pub fn new(model: &'a SpectralModel, gram: &'a ObservationGram, tree: &'a NoiseTree) -> Result<Self> {
        if gram.dim() != model.dim() {
            return Err(Error::DimensionMismatch { expected: model.dim(), found: gram.dim() });
        }
        Ok(Self { model, tree, gram: Some(gram), step_decay: model.decay_factors(tree.dt()) })
    }

    /// Sweeps without a control operator; impulses are rejected.
    pub fn uncontrolled(model: &'a SpectralModel, tree: &'a NoiseTree) -> Self {
        Self { model, tree, gram: None, step_decay: model.decay_factors(tree.dt()) }
    }

    pub fn gram(&self) -> Result<&'a ObservationGram> {
        self.gram.ok_or_else(|| Error::InvalidParameter("no control operator attached".into()))
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn depth(&self) -> usize {
        self.tree.depth()
    }

    fn check_field(&self, f: &AdaptedField) -> Result<()> {
        if f.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: f.dim() });
        }
        if f.level() > self.depth() {
            return Err(Error::LevelMismatch { expected: self.depth(), found: f.level() });
        }
        Ok(())
    }

    /// One forward step from `y.level()` to `y.level() + 1`.
    pub fn step_forward(&self, y: &AdaptedField) -> AdaptedField {
        let k = y.level();
        let dim = y.dim();
        let (up, down) = self.tree.branch_factors(k);
        let mut next = AdaptedField::zeros(k + 1, dim);
        let out = next.values_mut();
        for (i, node) in y.nodes().enumerate() {
            let base_up = 2 * i * dim;
            let base_down = base_up + dim;
            for j in 0..dim {
                let v = self.step_decay[j] * node[j];
                out[base_up + j] = v * up;
                out[base_down + j] = v * down;
            }
        }
        next
    }

    /// One backward step from `z.level()` to `z.level() - 1`.
    pub fn step_backward(&self, z: &AdaptedField) -> AdaptedField {
        let k = z.level() - 1;
        let dim = z.dim();
        let (up, down) = self.tree.branch_factors(k);
        let (wu, wd) = (0.5 * up, 0.5 * down);
        let mut prev = AdaptedField::zeros(k, dim);
        let out = prev.values_mut();
        for i in 0..(1usize << k) {
            let a = z.node(2 * i);
            let b = z.node(2 * i + 1);
            for j in 0..dim {
                out[i * dim + j] = self.step_decay[j] * (wu * a[j] + wd * b[j]);
            }
        }
        prev
    }

    /// Uncontrolled evolution of `y` from its level to the terminal level.
    pub fn propagate(&self, y: &AdaptedField) -> Result<AdaptedField> {
        self.check_field(y)?;
        let mut cur = y.clone();
        while cur.level() < self.depth() {
            cur = self.step_forward(&cur);
        }
        Ok(cur)
    }

    /// Backward evolution of terminal data `eta` down to `stop` (inclusive).
    pub fn pull_back(&self, eta: &AdaptedField, stop: usize) -> Result<AdaptedField> {
        self.check_terminal(eta)?;
        let mut cur = eta.clone();
        while cur.level() > stop {
            cur = self.step_backward(&cur);
        }
        Ok(cur)
    }

    /// Backward evolution of an intermediate costate down to `stop`.
    pub fn pull_back_from(&self, z: &AdaptedField, stop: usize) -> Result<AdaptedField> {
        self.check_field(z)?;
        if stop > z.level() {
            return Err(Error::LevelMismatch { expected: z.level(), found: stop });
        }
        let mut cur = z.clone();
        while cur.level() > stop {
            cur = self.step_backward(&cur);
        }
        Ok(cur)
    }

    fn check_terminal(&self, eta: &AdaptedField) -> Result<()> {
        self.check_field(eta)?;
        if eta.level() != self.depth() {
            return Err(Error::LevelMismatch { expected: self.depth(), found: eta.level() });
        }
        Ok(())
    }

    /// Full forward trajectory with an optional impulse `u` at level `<= k~`.
    pub fn forward(&self, y0: &[f64], control: Option<&AdaptedField>) -> Result<ForwardTrajectory> {
        if y0.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: y0.len() });
        }
        if y0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("initial state must be finite".into()));
        }
        let kt = self.tree.impulse_level();
        let injection = match control {
            Some(u) => {
                if u.dim() != self.dim() {
                    return Err(Error::DimensionMismatch { expected: self.dim(), found: u.dim() });
                }
                if u.level() > kt {
                    return Err(Error::ControlNotAdapted { level: u.level(), impulse_level: kt });
                }
                Some(self.apply_gram(&u.lift(kt)?)?)
            }
            None => None,
        };
        let mut states = Vec::with_capacity(self.depth() + 1);
        states.push(AdaptedField::constant(0, y0));
        for k in 0..self.depth() {
            let mut next = self.step_forward(&states[k]);
            if k + 1 == kt {
                if let Some(inj) = &injection {
                    next.axpy(1.0, inj)?;
                }
            }
            states.push(next);
        }
        Ok(ForwardTrajectory { states, impulse: control.map(|u| (u.level(), u.clone())) })
    }

    /// Full backward trajectory `z_0..z_K` with `z_K = eta`.
    pub fn backward(&self, eta: &AdaptedField) -> Result<BackwardTrajectory> {
        self.check_terminal(eta)?;
        let mut costates = vec![eta.clone()];
        for _ in 0..self.depth() {
            let prev = self.step_backward(costates.last().expect("nonempty"));
            costates.push(prev);
        }
        costates.reverse();
        Ok(BackwardTrajectory { costates, sqrt_dt: self.tree.sqrt_dt() })
    }

    /// Applies `M` nodewise.
    pub fn apply_gram(&self, f: &AdaptedField) -> Result<AdaptedField> {
        let gram = self.gram()?;
        let dim = f.dim();
        let mut out = AdaptedField::zeros(f.level(), dim);
        for (i, node) in f.nodes().enumerate() {
            gram.apply_into(node, out.node_mut(i));
        }
        Ok(out)
    }

    /// Terminal state of `y(.; 0, u)` for an impulse `M w` injected at `level`.
    pub fn inject(&self, w: &AdaptedField, level: usize) -> Result<AdaptedField> {
        let lifted = w.lift(level)?;
        self.propagate(&self.apply_gram(&lifted)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrajectory {
    /// `y_0..y_K`; the state at the impulse level is the post-jump value.
    pub states: Vec<AdaptedField>,
    pub impulse: Option<(usize, AdaptedField)>,
}

impl ForwardTrajectory {
    pub fn terminal(&self) -> &AdaptedField {
        self.states.last().expect("trajectory has at least one level")
    }

    /// CSV with columns `level, node, coeff, value`.
    pub fn to_csv(&self) -> CsvTable {
        trajectory_csv(&self.states)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardTrajectory {
    /// `z_0..z_K` with `z_K = eta`.
    pub costates: Vec<AdaptedField>,
    sqrt_dt: f64,
}

impl BackwardTrajectory {
    pub fn initial(&self) -> &[f64] {
        self.costates[0].values()
    }

    pub fn at(&self, level: usize) -> &AdaptedField {
        &self.costates[level]
    }

    pub fn terminal(&self) -> &AdaptedField {
        self.costates.last().expect("nonempty")
    }

    /// Diagnostic martingale integrand `Z_k = E[dW_k z_{k+1} | node] / dt`.
    pub fn martingale_integrand(&self, level: usize) -> Result<AdaptedField> {
        if level + 1 >= self.costates.len() {
            return Err(Error::LevelMismatch { expected: self.costates.len() - 2, found: level });
        }
        let next = &self.costates[level + 1];
        let dim = next.dim();
        let mut out = AdaptedField::zeros(level, dim);
        let c = 0.5 / self.sqrt_dt;
        for i in 0..(1usize << level) {
            let (a, b) = (next.node(2 * i), next.node(2 * i + 1));
            for j in 0..dim {
                out.node_mut(i)[j] = c * (a[j] - b[j]);
            }
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> CsvTable {
        trajectory_csv(&self.costates)
    }
}

fn trajectory_csv(levels: &[AdaptedField]) -> CsvTable {
    let mut t = CsvTable::new(&["level", "node", "coeff", "value"]);
    for f in levels {
        for (i, node) in f.nodes().enumerate() {
            for (j, v) in node.iter().enumerate() {
                t.push(vec![f.level().to_string(), i.to_string(), j.to_string(), fmt17(*v)]);
            }
        }
    }
    t
}

pub fn forward_evolve(
    model: &SpectralModel,
    gram: &ObservationGram,
    tree: &NoiseTree,
    y0: &[f64],
    control: Option<&AdaptedField>,
) -> Result<ForwardTrajectory> {
    Dynamics::new(model, gram, tree)?.forward(y0, control)
}

pub fn backward_evolve(model: &SpectralModel, tree: &NoiseTree, eta: &AdaptedField) -> Result<BackwardTrajectory> {
    Dynamics::uncontrolled(model, tree).backward(eta)
}

/// Both sides of the duality identity under one convention.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityReport {
    pub lhs: Sig17,
    pub rhs: Sig17,
    pub residual: Sig17,
    pub convention: Convention,
}

impl DualityReport {
    pub fn residual(&self) -> f64 {
        self.residual.0
    }
}

/// `E<a, M b>` for fields at possibly different levels (both lifted to the finer one).
fn control_pairing(gram: &ObservationGram, a: &AdaptedField, b: &AdaptedField) -> Result<f64> {
    let lvl = a.level().max(b.level());
    l2_inner(&a.lift(lvl)?, &b.lift(lvl)?, Some(gram))
}

/// Relative residual of the duality identity for `(y0, u, eta)`.
///
/// Under [`Convention::Adjoint`] this checks
/// `E<y(T), eta> - E<y0, z_0> = E<u, M E[z_{k~} | F_{k_u}]>`; under
/// [`Convention::PaperReversed`] it evaluates
/// `E<y0, z_0> - E<y(T), eta> = E<u, M z_{K-k~}>`, which is not an identity of
/// the discrete system and is reported for comparison only.
pub fn duality_residual(
    model: &SpectralModel,
    gram: &ObservationGram,
    tree: &NoiseTree,
    y0: &[f64],
    control: &AdaptedField,
    eta: &AdaptedField,
    convention: Convention,
) -> Result<DualityReport> {
    let dynamics = Dynamics::new(model, gram, tree)?;
    let fwd = dynamics.forward(y0, Some(control))?;
    let bwd = dynamics.backward(eta)?;
    let terminal = l2_inner(fwd.terminal(), eta, None)?;
    let initial: f64 = y0.iter().zip(bwd.initial()).map(|(a, b)| a * b).sum();
    let (lhs, rhs) = match convention {
        Convention::Adjoint => {
            let zhat = conditional_expectation(bwd.at(tree.impulse_level()), control.level())?;
            (terminal - initial, control_pairing(gram, control, &zhat)?)
        }
        Convention::PaperReversed => {
            let z = bwd.at(tree.depth() - tree.impulse_level());
            (initial - terminal, control_pairing(gram, control, z)?)
        }
    };
    let scale = terminal.abs() + initial.abs() + rhs.abs();
    let residual = if scale > 0.0 { (lhs - rhs).abs() / scale } else { 0.0 };
    Ok(DualityReport { lhs: Sig17(lhs), rhs: Sig17(rhs), residual: Sig17(residual), convention })
}
