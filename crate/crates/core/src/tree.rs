//! Binary Bernoulli discretization of the Brownian motion and adapted fields.
//!
//! Level `k` of a depth-`K` tree has `2^k` equally likely nodes. Node `i` at
//! level `k` has children `2i` (increment `+sqrt(dt)`) and `2i + 1`
//! (increment `-sqrt(dt)`) at level `k + 1`. An [`AdaptedField`] at level `k`
//! stores one coefficient vector per node, so it is measurable with respect to
//! the information generated by the first `k` increments.
//!
//! All reductions run left to right over node indices, so results do not
//! depend on how work is scheduled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt17, sig_vec, CsvTable, Sig17};

/// Largest supported tree depth.
pub const MAX_DEPTH: usize = 20;

/// Piecewise-constant deterministic noise coefficient `F(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseProfile {
    Constant(f64),
    /// `values[k]` on `[k*step, (k+1)*step)`; the last value extends to infinity.
    Steps { step: f64, values: Vec<f64> },
}

impl NoiseProfile {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            NoiseProfile::Constant(f) => *f,
            NoiseProfile::Steps { step, values } => {
                if values.is_empty() {
                    return 0.0;
                }
                // nudge so that t = k*step lands in slot k despite rounding
                let k = ((t / step) + 1e-9).floor().max(0.0) as usize;
                values[k.min(values.len() - 1)]
            }
        }
    }

    /// Coefficients at the left endpoints `k*dt`, `k = 0..depth`.
    pub fn schedule(&self, depth: usize, dt: f64) -> Vec<f64> {
        (0..depth).map(|k| self.at(k as f64 * dt)).collect()
    }

    pub fn sup_abs(&self) -> f64 {
        match self {
            NoiseProfile::Constant(f) => f.abs(),
            NoiseProfile::Steps { values, .. } => values.iter().fold(0.0, |m, v| m.max(v.abs())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTree {
    depth: usize,
    horizon: f64,
    dt: f64,
    sqrt_dt: f64,
    noise: Vec<f64>,
    impulse_level: usize,
}

/// Builds a depth-`depth` tree on `[0, horizon]` with the impulse at `impulse_time`.
///
/// `impulse_time * depth / horizon` must be an integer strictly between 0 and
/// `depth`, and every `|F_k| sqrt(dt)` must stay below one.
pub fn build_tree(depth: usize, horizon: f64, impulse_time: f64, noise: Vec<f64>) -> Result<NoiseTree> {
    if depth == 0 || depth > MAX_DEPTH {
        return Err(Error::InvalidParameter(format!("tree depth {depth} outside 1..={MAX_DEPTH}")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidParameter(format!("horizon {horizon} must be positive")));
    }
    if !(impulse_time > 0.0 && impulse_time < horizon) {
        return Err(Error::InvalidParameter(format!(
            "impulse time {impulse_time} must lie strictly inside (0, {horizon})"
        )));
    }
    if noise.len() != depth {
        return Err(Error::DimensionMismatch { expected: depth, found: noise.len() });
    }
    let dt = horizon / depth as f64;
    let ratio = impulse_time / dt;
    let level = ratio.round();
    if (ratio - level).abs() > 1e-9 * ratio.max(1.0) || level < 1.0 || level >= depth as f64 {
        return Err(Error::GridMisalignment(format!(
            "impulse time {impulse_time} sits at step {ratio:.6} of a {depth}-step grid with dt = {dt}; \
             it must be an integer multiple of dt strictly between 0 and {depth}"
        )));
    }
    let sqrt_dt = dt.sqrt();
    for (step, f) in noise.iter().enumerate() {
        let value = f.abs() * sqrt_dt;
        if !(value < 1.0) {
            return Err(Error::NoiseTooLarge { step, value });
        }
    }
    Ok(NoiseTree { depth, horizon, dt, sqrt_dt, noise, impulse_level: level as usize })
}

impl NoiseTree {
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    pub fn impulse_level(&self) -> usize {
        self.impulse_level
    }

    pub fn impulse_time(&self) -> f64 {
        self.impulse_level as f64 * self.dt
    }

    pub fn time(&self, level: usize) -> f64 {
        level as f64 * self.dt
    }

    /// `tau = max_k F_k^2`.
    pub fn tau(&self) -> f64 {
        self.noise.iter().fold(0.0, |m, f| m.max(f * f))
    }

    /// `(1 + F_k sqrt(dt), 1 - F_k sqrt(dt))`: branch factors of step `k`.
    pub fn branch_factors(&self, step: usize) -> (f64, f64) {
        let f = self.noise[step] * self.sqrt_dt;
        (1.0 + f, 1.0 - f)
    }

    /// `prod_{m=from}^{to-1} (1 + F_m^2 dt)`, the second moment of the discrete exponential.
    pub fn moment_product(&self, from: usize, to: usize) -> f64 {
        self.noise[from..to].iter().map(|f| 1.0 + f * f * self.dt).product()
    }

    /// Discrete stochastic exponential `prod_{k=a}^{b-1} (1 + F_k dW_k)` as a scalar field at level `b`.
    pub fn doleans(&self, from: usize, to: usize) -> Result<AdaptedField> {
        if from > to || to > self.depth {
            return Err(Error::InvalidParameter(format!("doleans levels {from}..{to} outside 0..={}", self.depth)));
        }
        let mut vals = vec![1.0; 1usize << from];
        for k in from..to {
            let (up, down) = self.branch_factors(k);
            let mut next = Vec::with_capacity(vals.len() * 2);
            for v in &vals {
                next.push(v * up);
                next.push(v * down);
            }
            vals = next;
        }
        AdaptedField::from_flat(to, 1, vals)
    }
}

/// An `F_{t_k}`-measurable `R^J`-valued random variable on the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedField {
    level: usize,
    dim: usize,
    values: Vec<f64>,
}

impl AdaptedField {
    pub fn zeros(level: usize, dim: usize) -> Self {
        Self { level, dim, values: vec![0.0; dim << level] }
    }

    /// The same vector on every node of `level`.
    pub fn constant(level: usize, v: &[f64]) -> Self {
        let mut values = Vec::with_capacity(v.len() << level);
        for _ in 0..(1usize << level) {
            values.extend_from_slice(v);
        }
        Self { level, dim: v.len(), values }
    }

    /// Node-major flat storage: entry `(node, j)` lives at `node * dim + j`.
    pub fn from_flat(level: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if level > MAX_DEPTH {
            return Err(Error::InvalidParameter(format!("level {level} exceeds {MAX_DEPTH}")));
        }
        if values.len() != dim << level {
            return Err(Error::DimensionMismatch { expected: dim << level, found: values.len() });
        }
        Ok(Self { level, dim, values })
    }

    pub fn from_nodes(level: usize, nodes: &[Vec<f64>]) -> Result<Self> {
        if nodes.len() != 1usize << level {
            return Err(Error::DimensionMismatch { expected: 1 << level, found: nodes.len() });
        }
        let dim = nodes.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(dim << level);
        for n in nodes {
            if n.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: n.len() });
            }
            values.extend_from_slice(n);
        }
        Ok(Self { level, dim, values })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node_count(&self) -> usize {
        1usize << self.level
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn node_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim.max(1))
    }

    /// Probability of each node, `2^{-level}`.
    pub fn weight(&self) -> f64 {
        (-(self.level as f64)).exp2()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { level: self.level, dim: self.dim, values: self.values.iter().map(|v| c * v).collect() }
    }

    /// `self + c * other` in place.
    pub fn axpy(&mut self, c: f64, other: &AdaptedField) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &AdaptedField) -> Result<AdaptedField> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    fn check_same(&self, other: &AdaptedField) -> Result<()> {
        if self.level != other.level {
            return Err(Error::LevelMismatch { expected: self.level, found: other.level });
        }
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: other.dim });
        }
        Ok(())
    }

    /// Copies each node value to all of its descendants at `target`.
    pub fn lift(&self, target: usize) -> Result<AdaptedField> {
        if target < self.level {
            return Err(Error::LevelMismatch { expected: self.level, found: target });
        }
        let reps = 1usize << (target - self.level);
        let mut values = Vec::with_capacity(self.values.len() * reps);
        for node in self.nodes() {
            for _ in 0..reps {
                values.extend_from_slice(node);
            }
        }
        Ok(Self { level: target, dim: self.dim, values })
    }

    /// Node variance summed over coefficients: `E||X - E X||^2`.
    pub fn variance(&self) -> f64 {
        let mean = expectation(self);
        let mut acc = 0.0;
        for node in self.nodes() {
            for (x, m) in node.iter().zip(&mean) {
                acc += (x - m) * (x - m);
            }
        }
        acc * self.weight()
    }

    pub fn norm2(&self) -> f64 {
        l2_inner(self, self, None).expect("same field")
    }

    pub fn to_document(&self) -> FieldDocument {
        FieldDocument {
            level: self.level,
            dim: self.dim,
            values: self.nodes().map(sig_vec).collect(),
        }
    }

    /// CSV with columns `node_index, coeff_index, value`.
    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&["node_index", "coeff_index", "value"]);
        for (i, node) in self.nodes().enumerate() {
            for (j, v) in node.iter().enumerate() {
                t.push(vec![i.to_string(), j.to_string(), fmt17(*v)]);
            }
        }
        t
    }
}

/// JSON form `{"level", "J", "values": [[...], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDocument {
    pub level: usize,
    #[serde(rename = "J")]
    pub dim: usize,
    pub values: Vec<Vec<Sig17>>,
}

impl FieldDocument {
    pub fn into_field(self) -> Result<AdaptedField> {
        let nodes: Vec<Vec<f64>> = self.values.into_iter().map(|n| n.into_iter().map(|s| s.0).collect()).collect();
        let f = AdaptedField::from_nodes(self.level, &nodes)?;
        if f.dim != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: f.dim });
        }
        Ok(f)
    }
}

/// Mean over nodes with uniform weights `2^{-k}`.
pub fn expectation(field: &AdaptedField) -> Vec<f64> {
    let mut acc = vec![0.0; field.dim];
    for node in field.nodes() {
        for (a, v) in acc.iter_mut().zip(node) {
            *a += v;
        }
    }
    let w = field.weight();
    acc.iter_mut().for_each(|a| *a *= w);
    acc
}

/// One level of conditioning: each parent receives the average of its two children.
fn condition_once(field: &AdaptedField) -> AdaptedField {
    let dim = field.dim;
    let parents = field.node_count() / 2;
    let mut values = Vec::with_capacity(parents * dim);
    for p in 0..parents {
        let (a, b) = (field.node(2 * p), field.node(2 * p + 1));
        values.extend(a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)));
    }
    AdaptedField { level: field.level - 1, dim, values }
}

/// `E[field | F_{t_target}]` by repeated averaging of sibling pairs.
pub fn conditional_expectation(field: &AdaptedField, target: usize) -> Result<AdaptedField> {
    if target > field.level {
        return Err(Error::LevelMismatch { expected: field.level, found: target });
    }
    let mut out = field.clone();
    while out.level > target {
        out = condition_once(&out);
    }
    Ok(out)
}

/// `E<f, g>` or, with a Gram matrix, the control pairing `E<f, M g>`.
pub fn l2_inner(f: &AdaptedField, g: &AdaptedField, gram: Option<&crate::spectral::ObservationGram>) -> Result<f64> {
    f.check_same(g)?;
    let mut acc = 0.0;
    match gram {
        None => {
            for (a, b) in f.values.iter().zip(&g.values) {
                acc += a * b;
            }
        }
        Some(m) => {
            if m.dim() != f.dim {
                return Err(Error::DimensionMismatch { expected: m.dim(), found: f.dim });
            }
            for (a, b) in f.nodes().zip(g.nodes()) {
                acc += m.form(a, b);
            }
        }
    }
    Ok(acc * f.weight())
}
