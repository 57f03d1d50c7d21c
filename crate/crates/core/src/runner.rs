//! Dispatches a validated [`ExperimentConfig`] and writes its artifacts.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Problem, WeightConfig, SCHEMA_ID};
use crate::dynamics::{duality_residual, ControlClass, Convention, Dynamics, Pairing};
use crate::error::{Error, Result};
use crate::hum::{fit_cost_scaling, HumCertificate, HumProblem, Weight};
use crate::inequalities::{decay_check, interpolation_check, observability_constant, po1_constant, spectral_report, time_set};
use crate::io::{fmt17, sig_vec, to_json, CsvTable, Sig17};
use crate::optimal::{bang_bang_check, solve_norm_optimal, time_optimal, uniqueness_probe, ControlMap, TimeGrid};
use crate::spectral::{ObservationGram, SpectralModel};
use crate::tree::{AdaptedField, NoiseTree};

/// One contract-bearing residual.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Contract {
    pub name: String,
    pub value: Sig17,
    pub tolerance: Sig17,
    pub passed: bool,
}

impl Contract {
    /// Passes when `value <= tolerance`.
    pub fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        Self { name: name.into(), value: Sig17(value), tolerance: Sig17(tolerance), passed: value <= tolerance }
    }

    /// Passes when `value` is true; recorded as `1`/`0` against tolerance `1`.
    pub fn holds(name: &str, value: bool) -> Self {
        Self { name: name.into(), value: Sig17(value as u8 as f64), tolerance: Sig17(1.0), passed: value }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub content: String,
}

impl Artifact {
    fn csv(name: &str, table: CsvTable) -> Self {
        Self { name: name.into(), content: table.render() }
    }
}

/// Outcome of [`run`] before anything is written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub problem: Problem,
    pub contracts: Vec<Contract>,
    pub result: Value,
    pub artifacts: Vec<Artifact>,
}

impl RunOutput {
    pub fn passed(&self) -> bool {
        self.contracts.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&Contract> {
        self.contracts.iter().filter(|c| !c.passed).collect()
    }

    /// `result.json` body.
    pub fn result_document(&self) -> Value {
        json!({
            "problem": self.problem,
            "passed": self.passed(),
            "contracts": self.contracts,
            "result": self.result,
        })
    }

    pub fn contracts_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&["contract", "value", "tolerance", "passed"]);
        for c in &self.contracts {
            t.push(vec![c.name.clone(), fmt17(c.value.0), fmt17(c.tolerance.0), c.passed.to_string()]);
        }
        t
    }
}

struct Setup {
    model: SpectralModel,
    gram: ObservationGram,
    tree: NoiseTree,
    y0: Vec<f64>,
}

impl Setup {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let (model, gram) = cfg.model_and_gram()?;
        Ok(Self { tree: cfg.tree()?, y0: cfg.y0(), model, gram })
    }
}

fn rng(cfg: &ExperimentConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed)
}

fn random_field<R: Rng>(rng: &mut R, level: usize, dim: usize) -> AdaptedField {
    let v = (0..dim << level).map(|_| rng.gen_range(-1.0..1.0)).collect();
    AdaptedField::from_flat(level, dim, v).expect("sizes match")
}

/// Runs the configured problem.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let problem = cfg.problem();
    let (contracts, result, artifacts) = match problem {
        Problem::Simulate => simulate(cfg)?,
        Problem::Hum => hum(cfg)?,
        Problem::NormOpt => norm_opt(cfg)?,
        Problem::TimeOpt => time_opt(cfg)?,
        Problem::Verify => verify_suite(cfg)?,
        Problem::Sweep => sweep(cfg)?,
    };
    Ok(RunOutput { problem, contracts, result, artifacts })
}

type Parts = (Vec<Contract>, Value, Vec<Artifact>);

fn simulate(cfg: &ExperimentConfig) -> Result<Parts> {
    let s = Setup::new(cfg)?;
    let dynamics = Dynamics::new(&s.model, &s.gram, &s.tree)?;
    let control = match &cfg.parameters.control {
        Some(doc) => doc.clone().into_field()?,
        None => AdaptedField::zeros(s.tree.impulse_level(), s.model.dim()),
    };
    let traj = dynamics.forward(&s.y0, Some(&control))?;
    let terminal = traj.terminal();
    let eta = random_field(&mut rng(cfg), s.tree.depth(), s.model.dim());
    let duality = duality_residual(&s.model, &s.gram, &s.tree, &s.y0, &control, &eta, Convention::Adjoint)?;
    let contracts = vec![Contract::at_most("duality_residual", duality.residual(), cfg.parameters.tolerances.duality)];
    let result = json!({
        "terminal_norm2": Sig17(terminal.norm2()),
        "terminal_mean": sig_vec(&crate::tree::expectation(terminal)),
        "y0_norm2": Sig17(s.y0.iter().map(|v| v * v).sum()),
        "control_level": control.level(),
        "duality": duality,
    });
    Ok((contracts, result, vec![Artifact::csv("trajectory.csv", traj.to_csv())]))
}

fn weight(cfg: &ExperimentConfig) -> Weight {
    match cfg.parameters.l {
        WeightConfig::Value(l) => Weight::Given(l),
        WeightConfig::Keyword(_) => Weight::Auto,
    }
}

fn certify(s: &Setup, cfg: &ExperimentConfig, epsilon: f64) -> Result<HumCertificate> {
    let p = &cfg.parameters;
    HumProblem::new(&s.model, &s.gram, &s.tree, s.y0.clone(), epsilon, weight(cfg), p.convention, p.class)?
        .with_solver(p.tolerances.cg, 20_000)
        .synthesize()
}

/// Identities hold for any weight; the inequality and the target only once `l >= l_min`.
fn certificate_contracts(cert: &HumCertificate, cfg: &ExperimentConfig, prefix: &str) -> Vec<Contract> {
    let tol = &cfg.parameters.tolerances;
    let name = |s: &str| format!("{prefix}{s}");
    let mut out = vec![
        Contract::at_most(&name("steering_residual"), cert.steering_residual, tol.steering),
        Contract::at_most(&name("chain_residual"), cert.chain_residual, tol.chain),
    ];
    if cert.l_min.is_some() {
        let deficit = if cert.y0_norm2 > 0.0 { (-cert.inequality_slack).max(0.0) / cert.y0_norm2 } else { 0.0 };
        out.push(Contract::at_most(&name("slack_deficit"), deficit, tol.slack));
        let excess = cert.terminal_norm - cert.epsilon * cert.y0_norm2;
        out.push(Contract::at_most(&name("terminal_excess"), excess, tol.terminal));
    }
    out
}

fn hum(cfg: &ExperimentConfig) -> Result<Parts> {
    let s = Setup::new(cfg)?;
    let cert = certify(&s, cfg, cfg.parameters.epsilon)?;
    let contracts = certificate_contracts(&cert, cfg, "");
    let result = json!({
        "certificate": cert.to_document(),
        "reaches_target": cert.reaches_target(cfg.parameters.tolerances.terminal),
        "y0_norm2": Sig17(cert.y0_norm2),
        "solver_residual": Sig17(cert.solver_residual),
    });
    let artifacts = vec![Artifact::csv("eta_star.csv", cert.eta_star.to_csv()), Artifact::csv("control.csv", cert.control.to_csv())];
    Ok((contracts, result, artifacts))
}

fn require_at_impulse(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.parameters.class != ControlClass::AtImpulse {
        return Err(Error::Config(format!("{} is posed over the at-impulse control class", cfg.problem())));
    }
    Ok(())
}

fn norm_opt(cfg: &ExperimentConfig) -> Result<Parts> {
    require_at_impulse(cfg)?;
    let s = Setup::new(cfg)?;
    let tol = &cfg.parameters.tolerances;
    let eps = cfg.parameters.epsilon;
    let map = ControlMap::new(&s.model, &s.gram, &s.tree, &s.y0, ControlClass::AtImpulse)?;
    let res = solve_norm_optimal(&map, eps, 1.0)?;
    let uniq = uniqueness_probe(&s.model, &s.gram, &s.tree, &s.y0, eps, &res, 4, &mut rng(cfg))?;
    let violation = if res.active {
        res.constraint_residual.abs() / res.target.max(f64::MIN_POSITIVE)
    } else {
        res.constraint_residual.max(0.0)
    };
    let contracts = vec![
        Contract::at_most("constraint_residual", violation, tol.constraint),
        Contract::at_most("uniqueness_distance", uniq.max_distance.0, tol.uniqueness),
        Contract::at_most("parallelogram_residual", uniq.parallelogram_residual.0.abs(), 0.0),
    ];
    let result = json!({ "norm_optimal": res.to_document(), "uniqueness": uniq });
    Ok((contracts, result, vec![Artifact::csv("control.csv", res.u_star.to_csv())]))
}

fn time_opt(cfg: &ExperimentConfig) -> Result<Parts> {
    require_at_impulse(cfg)?;
    let (model, gram) = cfg.model_and_gram()?;
    let p = &cfg.parameters;
    let y0 = cfg.y0();
    let noise = cfg.noise_profile();
    let grid = TimeGrid {
        t_tilde: cfg.time.impulse_time,
        dt: cfg.time.dt(),
        horizons: p.t_grid.clone(),
        max_refine_depth: p.max_refine_depth,
    };
    let res = time_optimal(&model, &gram, &y0, p.epsilon, p.bound, &grid, &noise)?;
    let m2 = p.bound * p.bound;
    let mut contracts = vec![Contract::holds("admissible_at_T_star", res.value <= m2)];
    if let Some((_, n_prev)) = res.predecessor {
        contracts.push(Contract::holds("inadmissible_before_T_star", n_prev > m2));
    }
    let mut bang = Value::Null;
    if res.norm_active {
        let tree = res.tree(&noise)?;
        let report = bang_bang_check(&model, &gram, &tree, &y0, &res.u_star, p.bound, p.trials, &mut rng(cfg))?;
        if report.skipped.is_none() {
            let prop = report.proportionality_adjoint.0.min(report.proportionality_reversed.0);
            contracts.push(Contract::at_most("bang_bang_norm", report.norm_check.0, p.tolerances.norm));
            contracts.push(Contract::at_most("bang_bang_proportionality", prop, p.tolerances.proportionality));
            contracts.push(Contract::at_most("bang_bang_maximality_violations", report.maximality_violations as f64, 0.0));
        }
        bang = serde_json::to_value(&report).expect("serializable");
    }
    let result = json!({ "time_optimal": res.to_document(), "bang_bang": bang });
    let artifacts = vec![Artifact::csv("scan.csv", res.scan_csv()), Artifact::csv("control.csv", res.u_star.to_csv())];
    Ok((contracts, result, artifacts))
}

/// Duality, decay, spectral constants, observability, steering and the certificate chain.
pub fn verify_suite(cfg: &ExperimentConfig) -> Result<Parts> {
    let s = Setup::new(cfg)?;
    let p = &cfg.parameters;
    let tol = &p.tolerances;
    let mut rng = rng(cfg);
    let (dim, depth) = (s.model.dim(), s.tree.depth());
    let pairing = Pairing::new(&s.tree, p.convention, p.class)?;
    let mut contracts = Vec::new();

    let corpus: Vec<(Vec<f64>, AdaptedField, AdaptedField)> = (0..p.trials)
        .map(|_| {
            let y0 = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let u = random_field(&mut rng, pairing.control_level, dim);
            let eta = random_field(&mut rng, depth, dim);
            (y0, u, eta)
        })
        .collect();
    let residuals = corpus
        .par_iter()
        .map(|(y0, u, eta)| {
            let exact = duality_residual(&s.model, &s.gram, &s.tree, y0, u, eta, Convention::Adjoint)?.residual();
            let reversed = duality_residual(&s.model, &s.gram, &s.tree, y0, u, eta, Convention::PaperReversed)?.residual();
            Ok((exact, reversed))
        })
        .collect::<Result<Vec<_>>>()?;
    let duality_max = residuals.iter().map(|r| r.0).fold(0.0, f64::max);
    let reversed_max = residuals.iter().map(|r| r.1).fold(0.0, f64::max);
    contracts.push(Contract::at_most("duality_residual", duality_max, tol.duality));

    let cutoff = s.model.eigenvalues()[(dim - 1) / 2];
    let decay = decay_check(&s.model, &s.tree, cutoff, p.trials, &mut rng)?;
    contracts.push(Contract::at_most("decay_violation", decay.max_violation.0, tol.decay));

    let cutoffs = s.model.eigenvalues().to_vec();
    let spectral = spectral_report(&s.model, &s.gram, &cutoffs)?;
    contracts.push(Contract::at_most("spectral_attainment", spectral.max_attainment_residual(), tol.attainment));
    contracts.push(Contract::holds("spectral_monotone", spectral.is_monotone()));

    let ranges = if p.time_set.is_empty() { vec![[0, depth]] } else { p.time_set.clone() };
    let levels = time_set(&ranges, depth)?;
    let obs = observability_constant(&s.model, &s.gram, &s.tree, &levels, &mut rng)?;
    contracts.push(Contract::holds("observability_finite", obs.constant.0.is_finite() && obs.constant.0 > 0.0));

    // fuzz-based lower estimates, reported but not gated
    let t_level = s.tree.impulse_level();
    let interpolation = interpolation_check(&s.model, &s.gram, &s.tree, t_level, p.theta, p.trials, &mut rng)?;
    let po1 = po1_constant(&s.model, &s.gram, &s.tree, t_level, p.epsilon)?;

    let cert = certify(&s, cfg, p.epsilon)?;
    contracts.extend(certificate_contracts(&cert, cfg, "hum_"));

    let result = json!({
        "duality": { "trials": p.trials, "max_residual": Sig17(duality_max), "paper_reversed_max_residual": Sig17(reversed_max) },
        "decay": decay,
        "spectral": {
            "constants": sig_vec(&spectral.entries.iter().map(|e| e.constant).collect::<Vec<_>>()),
            "max_attainment_residual": Sig17(spectral.max_attainment_residual()),
            "fit_half_rss": Sig17(spectral.fit_half.rss),
            "fit_one_rss": Sig17(spectral.fit_one.rss),
            "prefers_half": spectral.prefers_half(),
            "fitted_N": Sig17(spectral.fitted_n),
        },
        "observability": { "time_set": obs.time_set, "constant": obs.constant, "method": obs.method },
        "interpolation": interpolation,
        "po1": { "t_level": t_level, "epsilon": Sig17(p.epsilon), "constant": Sig17(po1) },
        "certificate": cert.to_document(),
    });
    let out = RunOutput { problem: Problem::Verify, contracts, result, artifacts: Vec::new() };
    let artifacts = vec![Artifact::csv("verify.csv", out.contracts_csv()), Artifact::csv("spectral.csv", spectral.to_csv())];
    Ok((out.contracts, out.result, artifacts))
}

fn sweep(cfg: &ExperimentConfig) -> Result<Parts> {
    let s = Setup::new(cfg)?;
    let epsilons = &cfg.parameters.epsilons;
    let certs = epsilons.par_iter().map(|&e| certify(&s, cfg, e)).collect::<Result<Vec<_>>>()?;
    let mut table = CsvTable::new(&["epsilon", "l", "u_norm2", "yT_norm2", "bound_rhs"]);
    let mut contracts = Vec::new();
    for c in &certs {
        table.push(vec![fmt17(c.epsilon), fmt17(c.l), fmt17(c.control_norm), fmt17(c.terminal_norm), fmt17(c.epsilon * c.y0_norm2)]);
        contracts.extend(certificate_contracts(c, cfg, &format!("eps={:e}:", c.epsilon)));
    }
    let norms: Vec<f64> = certs.iter().map(|c| c.control_norm).collect();
    let fit = if certs.len() >= 3 && norms.iter().all(|n| *n > 0.0) { Some(fit_cost_scaling(epsilons, &norms)) } else { None };
    let result = json!({
        "points": certs.iter().map(|c| c.to_document()).collect::<Vec<_>>(),
        "cost_scaling_fit": fit.map(|f| json!({
            "c1": Sig17(f.c1), "c2": Sig17(f.c2), "r2": Sig17(f.r2), "rss": Sig17(f.rss), "rss_log_linear": Sig17(f.rss_log_linear),
        })),
    });
    Ok((contracts, result, vec![Artifact::csv("sweep.csv", table)]))
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    schema: &'static str,
    problem: Problem,
    timestamp: u64,
    config: &'a ExperimentConfig,
    artifacts: Vec<String>,
}

/// Writes the artifacts, `result.json` and `manifest.json` into `dir`; returns the file names.
pub fn write_outputs(cfg: &ExperimentConfig, out: &RunOutput, dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for a in &out.artifacts {
        std::fs::write(dir.join(&a.name), &a.content)?;
        names.push(a.name.clone());
    }
    std::fs::write(dir.join("result.json"), to_json(&out.result_document()))?;
    names.push("result.json".into());
    let timestamp = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut resolved = cfg.clone();
    resolved.problem = Some(out.problem);
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        schema: SCHEMA_ID,
        problem: out.problem,
        timestamp,
        config: &resolved,
        artifacts: names.clone(),
    };
    std::fs::write(dir.join("manifest.json"), to_json(&manifest))?;
    names.push("manifest.json".into());
    Ok(names)
}
