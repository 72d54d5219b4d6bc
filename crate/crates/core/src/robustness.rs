//! Continuity and robustness experiments over a perturbation family.
//!
//! For each `n` the approximating model is solved, its optimal policy is applied
//! to the true model by a fixed-policy solve, and the gaps to the true optimum
//! are tabulated at the probe points.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::family::{convergence_gap, make_sequence, ConvergenceGap, PerturbationFamily};
use crate::grid::{Grid, ValueField};
use crate::mc::{self, ExitBox, McEstimate, SimConfig};
use crate::model::{ActionSet, DiffusionModel};
use crate::parabolic::{backward_sweep, FiniteHorizonOptions};
use crate::policy::{MarkovPolicy, StationaryPolicy};
use crate::stationary::{
    check_lyapunov, check_near_monotone, evaluate_discounted_in, evaluate_ergodic_in, evaluate_exit_policy_in,
    exit_policy_iteration, policy_iteration_discounted, relative_policy_iteration, vanishing_discount, LyapunovCheck,
    NearMonotoneCheck,
};
use crate::system::ControlledSystem;

pub type StateFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
pub type StateActionFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Discounted,
    ErgodicNearMonotone,
    ErgodicLyapunov,
    FiniteHorizon,
    Exit,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Self::Discounted => "discounted",
            Self::ErgodicNearMonotone => "ergodic_near_monotone",
            Self::ErgodicLyapunov => "ergodic_lyapunov",
            Self::FiniteHorizon => "finite_horizon",
            Self::Exit => "exit",
        }
    }

    pub fn is_ergodic(self) -> bool {
        matches!(self, Self::ErgodicNearMonotone | Self::ErgodicLyapunov)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErgodicSolver {
    #[default]
    Rpi,
    Vanishing,
}

#[derive(Clone)]
pub struct ExitSpec {
    pub delta: Arc<StateActionFn>,
    pub terminal: Arc<StateFn>,
}

#[derive(Clone)]
pub struct LyapunovSpec {
    pub function: Arc<StateFn>,
    pub h: Arc<StateActionFn>,
    pub c0_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub ergodic: ErgodicSolver,
    pub alpha_schedule: Vec<f64>,
    pub vanishing_tol: f64,
    pub iterate_improvement: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 200,
            ergodic: ErgodicSolver::Rpi,
            alpha_schedule: crate::stationary::default_alpha_schedule(30),
            vanishing_tol: 1e-6,
            iterate_improvement: true,
        }
    }
}

/// Monte Carlo cross-check of every mismatch value. The seed comes from the
/// experiment, so every `n` and probe shares the same random numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McSettings {
    pub dt: f64,
    /// Truncation horizon for discounted, ergodic and exit runs.
    pub horizon: f64,
    pub n_paths: usize,
    pub antithetic: bool,
    pub burn_in: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds {
    /// Absolute thresholds; `None` means `relative × scale`.
    pub continuity: Option<f64>,
    pub robustness: Option<f64>,
    pub relative: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            continuity: None,
            robustness: None,
            relative: 1e-2,
        }
    }
}

/// Gaps at or below this count as an exact match.
pub const EXACT_GAP: f64 = 1e-9;
pub const SIGN_SLACK: f64 = 1e-8;

#[derive(Clone)]
pub struct ExperimentSpec {
    pub criterion: Criterion,
    pub family: PerturbationFamily,
    pub grid: Grid,
    pub actions: ActionSet,
    pub n_values: Vec<usize>,
    pub probes: Vec<Vec<f64>>,
    pub alpha: f64,
    pub horizon: f64,
    pub time_steps: usize,
    pub terminal: Option<Arc<StateFn>>,
    pub exit: Option<ExitSpec>,
    pub lyapunov: Option<LyapunovSpec>,
    pub solver: SolverSettings,
    pub mc: Option<McSettings>,
    pub thresholds: Thresholds,
    pub seed: u64,
}

impl fmt::Debug for ExperimentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExperimentSpec")
            .field("criterion", &self.criterion)
            .field("family", &self.family.kind.name())
            .field("grid", &self.grid)
            .field("n_values", &self.n_values)
            .field("probes", &self.probes)
            .finish_non_exhaustive()
    }
}

impl ExperimentSpec {
    /// Spec with defaults for everything criterion-specific.
    pub fn new(criterion: Criterion, family: PerturbationFamily, grid: Grid, actions: ActionSet, probes: Vec<Vec<f64>>) -> Self {
        Self {
            criterion,
            family,
            grid,
            actions,
            n_values: vec![1, 2, 4, 8, 16, 32, 64],
            probes,
            alpha: 1.0,
            horizon: 1.0,
            time_steps: 100,
            terminal: None,
            exit: None,
            lyapunov: None,
            solver: SolverSettings::default(),
            mc: None,
            thresholds: Thresholds::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.family.base.dim() != self.grid.dim() {
            return Err(Error::config("/dim", "model and grid dimensions differ"));
        }
        if self.n_values.contains(&0) {
            return Err(Error::config("/n_values", "indices must be >= 1"));
        }
        if self.n_values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("/n_values", "indices must be strictly increasing"));
        }
        for (i, p) in self.probes.iter().enumerate() {
            if p.len() != self.grid.dim() || !self.grid.contains(p) {
                return Err(Error::config(format!("/probes/{i}"), "probe lies outside the grid"));
            }
        }
        match self.criterion {
            Criterion::Discounted if !(self.alpha > 0.0 && self.alpha.is_finite()) => {
                return Err(Error::config("/alpha", "alpha must be positive"));
            }
            Criterion::FiniteHorizon => {
                if !(self.horizon > 0.0 && self.horizon.is_finite()) {
                    return Err(Error::config("/horizon", "horizon must be positive"));
                }
                if self.time_steps == 0 {
                    return Err(Error::config("/time_steps", "need at least one time step"));
                }
            }
            Criterion::Exit if self.exit.is_none() => {
                return Err(Error::config("/exit", "exit criterion needs delta and terminal data"));
            }
            Criterion::ErgodicLyapunov if self.lyapunov.is_none() => {
                return Err(Error::config("/lyapunov", "Lyapunov regime needs a Lyapunov pair"));
            }
            _ => {}
        }
        if let Some(m) = &self.mc {
            if !(m.dt > 0.0 && m.n_paths > 0) {
                return Err(Error::config("/mc", "dt must be positive and n_paths >= 1"));
            }
            if self.criterion.is_ergodic() && !(m.horizon > m.burn_in) {
                return Err(Error::config("/mc/burn_in", "horizon must exceed burn-in"));
            }
        }
        Ok(())
    }

    pub fn terminal_fn(&self) -> Arc<StateFn> {
        self.terminal.clone().unwrap_or_else(|| Arc::new(|_: &[f64]| 0.0))
    }
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub n: usize,
    pub probe: Vec<f64>,
    pub v_true: f64,
    pub v_n: f64,
    pub j_mismatch: Option<f64>,
    pub continuity_gap: f64,
    /// Signed `J(c, v_n*) - V`.
    pub robustness_gap: Option<f64>,
    pub mc: Option<McEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveMeta {
    pub residual: f64,
    pub iterations: usize,
    pub rho: Option<f64>,
    pub rho_vanishing: Option<f64>,
    pub violation_fraction: f64,
    pub near_monotone: Option<NearMonotoneCheck>,
    pub lyapunov: Option<LyapunovCheck>,
    pub sup_bound_check: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NMeta {
    pub n: usize,
    pub solve: SolveMeta,
    pub coefficient_gap: ConvergenceGap,
    /// Average cost of `v_n*` on the true model (ergodic criteria).
    pub rho_mismatch: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessReport {
    pub criterion: Criterion,
    pub family: String,
    pub n_values: Vec<usize>,
    pub probes: Vec<Vec<f64>>,
    pub seed: u64,
    pub scale: f64,
    pub continuity_threshold: f64,
    pub robustness_threshold: f64,
    pub true_model: Option<SolveMeta>,
    pub per_n: Vec<NMeta>,
    pub rows: Vec<ReportRow>,
    pub checks: Vec<Check>,
    pub complete: bool,
    /// Free-form configuration echo written to `meta.json`.
    pub spec_echo: Option<serde_json::Value>,
}

impl RobustnessReport {
    fn empty(spec: &ExperimentSpec) -> Self {
        Self {
            criterion: spec.criterion,
            family: spec.family.kind.name().to_string(),
            n_values: spec.n_values.clone(),
            probes: spec.probes.clone(),
            seed: spec.seed,
            scale: f64::NAN,
            continuity_threshold: f64::NAN,
            robustness_threshold: f64::NAN,
            true_model: None,
            per_n: Vec::new(),
            rows: Vec::new(),
            checks: Vec::new(),
            complete: false,
            spec_echo: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.complete && self.checks.iter().all(|c| c.passed)
    }

    pub fn rows_for(&self, n: usize) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(move |r| r.n == n)
    }

    /// Largest continuity gap over probes at `n`.
    pub fn max_continuity_gap(&self, n: usize) -> f64 {
        self.rows_for(n).map(|r| r.continuity_gap).fold(0.0, f64::max)
    }

    /// Largest `|J - V|` over probes at `n`, if the mismatch was computed.
    pub fn max_robustness_gap(&self, n: usize) -> Option<f64> {
        let mut it = self.rows_for(n).filter_map(|r| r.robustness_gap).peekable();
        it.peek()?;
        Some(it.map(f64::abs).fold(0.0, f64::max))
    }

    /// One line per `n` for progress output.
    pub fn summary_line(&self, n: usize) -> String {
        let mut s = format!("n={n:<4} continuity_gap={:.3e}", self.max_continuity_gap(n));
        if let Some(r) = self.max_robustness_gap(n) {
            s.push_str(&format!(" robustness_gap={r:.3e}"));
        }
        if let Some(m) = self.per_n.iter().find(|m| m.n == n) {
            s.push_str(&format!(" residual={:.1e}", m.solve.residual));
            if let Some(c) = &m.solve.near_monotone {
                s.push_str(&format!(" margin={:.3}", c.margin));
            }
            if let Some(c) = &m.solve.lyapunov {
                s.push_str(&format!(" c0={:.3} feasible={}", c.c0, c.feasible));
            }
        }
        s
    }
}

/// A failed experiment together with whatever was computed before the failure.
#[derive(Debug)]
pub struct ExperimentFailure {
    pub error: Error,
    pub partial: RobustnessReport,
}

impl fmt::Display for ExperimentFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} of {} indices completed)", self.error, self.per_n.len(), self.partial.n_values.len())
    }
}

impl std::ops::Deref for ExperimentFailure {
    type Target = RobustnessReport;
    fn deref(&self) -> &RobustnessReport {
        &self.partial
    }
}

impl std::error::Error for ExperimentFailure {}

// ---------------------------------------------------------------- solving

enum Policy {
    Stationary(StationaryPolicy),
    Markov(MarkovPolicy),
}

struct Solved {
    /// Value field at time zero, or the relative value for ergodic criteria.
    value: ValueField,
    rho: Option<f64>,
    policy: Policy,
    meta: SolveMeta,
}

impl Solved {
    fn at(&self, spec: &ExperimentSpec, x: &[f64]) -> f64 {
        if spec.criterion.is_ergodic() {
            self.rho.expect("ergodic solve has rho")
        } else {
            self.value.value_at(x)
        }
    }

    fn scale(&self, spec: &ExperimentSpec) -> f64 {
        if spec.criterion.is_ergodic() {
            self.rho.unwrap_or(0.0).abs()
        } else {
            self.value.sup_norm()
        }
    }
}

fn solve_model(spec: &ExperimentSpec, model: &DiffusionModel) -> Result<Solved> {
    let sys = ControlledSystem::assemble(model, &spec.grid, &spec.actions, None)?;
    let s = &spec.solver;
    let mut meta = SolveMeta {
        residual: 0.0,
        iterations: 0,
        rho: None,
        rho_vanishing: None,
        violation_fraction: sys.violation_fraction(),
        near_monotone: None,
        lyapunov: None,
        sup_bound_check: None,
    };
    let solved = match spec.criterion {
        Criterion::Discounted => {
            let sol = policy_iteration_discounted(&sys, spec.alpha, s.tol, s.max_iter, sys.cost_greedy(), None)?;
            meta.residual = sol.residual;
            meta.iterations = sol.iterations;
            Solved {
                value: sol.value,
                rho: None,
                policy: Policy::Stationary(sol.policy),
                meta,
            }
        }
        Criterion::ErgodicNearMonotone | Criterion::ErgodicLyapunov => {
            let sol = match s.ergodic {
                ErgodicSolver::Rpi => relative_policy_iteration(&sys, s.tol, s.max_iter, sys.cost_greedy())?,
                ErgodicSolver::Vanishing => vanishing_discount(&sys, &s.alpha_schedule, s.vanishing_tol, s.max_iter)?,
            };
            meta.residual = sol.residual;
            meta.iterations = sol.iterations;
            meta.rho = Some(sol.rho);
            meta.rho_vanishing = sol.rho_vanishing;
            if spec.criterion == Criterion::ErgodicNearMonotone {
                meta.near_monotone = Some(check_near_monotone(model, &spec.grid, &spec.actions, sol.rho));
            } else {
                let l = spec.lyapunov.as_ref().expect("validated");
                meta.lyapunov = Some(check_lyapunov(model, &spec.grid, &spec.actions, &*l.function, &*l.h, l.c0_max));
            }
            Solved {
                value: sol.value,
                rho: Some(sol.rho),
                policy: Policy::Stationary(sol.policy),
                meta,
            }
        }
        Criterion::FiniteHorizon => {
            let terminal = spec.terminal_fn();
            let h = ValueField::from_fn(spec.grid.clone(), |x| terminal(x))?.into_values();
            let opts = FiniteHorizonOptions {
                iterate_improvement: s.iterate_improvement,
            };
            let sol = backward_sweep(&sys, spec.horizon, spec.time_steps, h, None, opts)?;
            meta.iterations = spec.time_steps;
            meta.sup_bound_check = Some(sol.sup_bound_check);
            Solved {
                value: sol.values.into_iter().next().expect("at least one step"),
                rho: None,
                policy: Policy::Markov(sol.policy),
                meta,
            }
        }
        Criterion::Exit => {
            let e = spec.exit.as_ref().expect("validated");
            let sol = exit_policy_iteration(&sys, &*e.delta, &*e.terminal, s.tol, s.max_iter)?;
            meta.residual = sol.residual;
            meta.iterations = sol.iterations;
            Solved {
                value: sol.value,
                rho: None,
                policy: Policy::Stationary(sol.policy),
                meta,
            }
        }
    };
    Ok(solved)
}

/// Value of `policy` on the true system: field at time zero, plus `ρ` for ergodic criteria.
fn evaluate_on_true(spec: &ExperimentSpec, sys: &ControlledSystem, policy: &Policy) -> Result<(ValueField, Option<f64>)> {
    match (spec.criterion, policy) {
        (Criterion::Discounted, Policy::Stationary(p)) => {
            let v = evaluate_discounted_in(sys, p.indices(), spec.alpha)?;
            Ok((ValueField::new(spec.grid.clone(), v)?, None))
        }
        (Criterion::ErgodicNearMonotone | Criterion::ErgodicLyapunov, Policy::Stationary(p)) => {
            let (rho, v) = evaluate_ergodic_in(sys, p.indices())?;
            Ok((ValueField::new(spec.grid.clone(), v)?, Some(rho)))
        }
        (Criterion::FiniteHorizon, Policy::Markov(p)) => {
            let terminal = spec.terminal_fn();
            let h = ValueField::from_fn(spec.grid.clone(), |x| terminal(x))?.into_values();
            let sol = backward_sweep(sys, spec.horizon, spec.time_steps, h, Some(p), FiniteHorizonOptions::default())?;
            Ok((sol.values.into_iter().next().expect("at least one step"), None))
        }
        (Criterion::Exit, Policy::Stationary(p)) => {
            let e = spec.exit.as_ref().expect("validated");
            Ok((evaluate_exit_policy_in(sys, p, &*e.delta, &*e.terminal)?, None))
        }
        _ => unreachable!("policy kind follows the criterion"),
    }
}

fn mc_crosscheck(spec: &ExperimentSpec, m: &McSettings, true_model: &DiffusionModel, policy: &Policy, x0: &[f64]) -> Result<McEstimate> {
    let mut cfg = SimConfig::new(m.dt, m.horizon, m.n_paths, spec.seed);
    cfg.antithetic = m.antithetic;
    let acts = &spec.actions;
    match (spec.criterion, policy) {
        (Criterion::Discounted, Policy::Stationary(p)) => mc::mc_discounted_cost(true_model, acts, p, x0, spec.alpha, &cfg),
        (Criterion::ErgodicNearMonotone | Criterion::ErgodicLyapunov, Policy::Stationary(p)) => {
            mc::mc_ergodic_cost(true_model, acts, p, x0, &cfg, m.burn_in)
        }
        (Criterion::FiniteHorizon, Policy::Markov(p)) => {
            cfg.horizon = p.horizon();
            let terminal = spec.terminal_fn();
            mc::mc_finite_cost(true_model, acts, p, x0, &*terminal, &cfg)
        }
        (Criterion::Exit, Policy::Stationary(p)) => {
            let e = spec.exit.as_ref().expect("validated");
            mc::mc_exit_cost(true_model, acts, p, x0, &ExitBox::of_grid(&spec.grid), &*e.delta, &*e.terminal, &cfg)
        }
        _ => unreachable!("policy kind follows the criterion"),
    }
}

struct NResult {
    meta: NMeta,
    rows: Vec<ReportRow>,
}

fn run_one(spec: &ExperimentSpec, n: usize, truth: &Solved, true_sys: Option<&ControlledSystem>) -> Result<NResult> {
    let approx = make_sequence(&spec.family, n)?;
    let solved = solve_model(spec, &approx)?;
    let coefficient_gap = convergence_gap(&spec.family, n, &spec.grid, &spec.actions)?;
    let mismatch = match true_sys {
        Some(sys) => Some(evaluate_on_true(spec, sys, &solved.policy)?),
        None => None,
    };
    let mut rows = Vec::with_capacity(spec.probes.len());
    for p in &spec.probes {
        let v_true = truth.at(spec, p);
        let v_n = solved.at(spec, p);
        let j = mismatch.as_ref().map(|(field, rho)| match rho {
            Some(r) => *r,
            None => field.value_at(p),
        });
        let mc = match (&spec.mc, true_sys) {
            (Some(m), Some(_)) => Some(mc_crosscheck(spec, m, &spec.family.base, &solved.policy, p)?),
            _ => None,
        };
        rows.push(ReportRow {
            n,
            probe: p.clone(),
            v_true,
            v_n,
            j_mismatch: j,
            continuity_gap: (v_n - v_true).abs(),
            robustness_gap: j.map(|j| j - v_true),
            mc,
        });
    }
    Ok(NResult {
        meta: NMeta {
            n,
            solve: solved.meta,
            coefficient_gap,
            rho_mismatch: mismatch.and_then(|(_, r)| r),
        },
        rows,
    })
}

fn run(spec: &ExperimentSpec, robustness: bool) -> std::result::Result<RobustnessReport, Box<ExperimentFailure>> {
    let mut report = RobustnessReport::empty(spec);
    let fail = |error: Error, partial: RobustnessReport| Box::new(ExperimentFailure { error, partial });
    if let Err(e) = spec.validate() {
        return Err(fail(e, report));
    }
    let base = &spec.family.base;
    let truth = match solve_model(spec, base) {
        Ok(t) => t,
        Err(e) => return Err(fail(e, report)),
    };
    let true_sys = if robustness {
        match ControlledSystem::assemble(base, &spec.grid, &spec.actions, None) {
            Ok(s) => Some(s),
            Err(e) => return Err(fail(e, report)),
        }
    } else {
        None
    };
    report.scale = truth.scale(spec);
    let floor = |t: f64| t.max(EXACT_GAP);
    report.continuity_threshold = spec.thresholds.continuity.unwrap_or_else(|| floor(spec.thresholds.relative * report.scale));
    report.robustness_threshold = spec.thresholds.robustness.unwrap_or_else(|| floor(spec.thresholds.relative * report.scale));
    report.true_model = Some(truth.meta.clone());

    let results: Vec<Result<NResult>> = spec
        .n_values
        .par_iter()
        .map(|&n| run_one(spec, n, &truth, true_sys.as_ref()))
        .collect();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(r) => {
                report.per_n.push(r.meta);
                report.rows.extend(r.rows);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(fail(e, report));
    }
    report.checks = evaluate_checks(spec, &report, robustness);
    report.complete = true;
    Ok(report)
}

/// Solves the true model and every approximation; fills the continuity columns.
pub fn run_continuity(spec: &ExperimentSpec) -> std::result::Result<RobustnessReport, Box<ExperimentFailure>> {
    run(spec, false)
}

/// Continuity columns plus the mismatch cost of each `v_n*` on the true model.
pub fn run_robustness(spec: &ExperimentSpec) -> std::result::Result<RobustnessReport, Box<ExperimentFailure>> {
    run(spec, true)
}

fn trend_check(name: &str, first: f64, last: f64, n_min: usize, n_max: usize) -> Check {
    let passed = last < first || last <= EXACT_GAP;
    Check {
        name: name.to_string(),
        passed,
        detail: format!("gap(n={n_max})={last:.6e} vs gap(n={n_min})={first:.6e}"),
    }
}

fn evaluate_checks(spec: &ExperimentSpec, report: &RobustnessReport, robustness: bool) -> Vec<Check> {
    let mut checks = Vec::new();
    let (Some(&n_min), Some(&n_max)) = (spec.n_values.first(), spec.n_values.last()) else {
        return checks;
    };
    if spec.probes.is_empty() && !spec.criterion.is_ergodic() {
        return checks;
    }
    let c_first = report.max_continuity_gap(n_min);
    let c_last = report.max_continuity_gap(n_max);
    if n_max > n_min {
        checks.push(trend_check("continuity_trend", c_first, c_last, n_min, n_max));
    }
    checks.push(Check {
        name: "continuity_threshold".into(),
        passed: c_last <= report.continuity_threshold,
        detail: format!("gap(n={n_max})={c_last:.6e}, threshold {:.6e}", report.continuity_threshold),
    });

    if robustness {
        let signed: Vec<f64> = report.rows.iter().filter_map(|r| r.robustness_gap).collect();
        let worst = signed.iter().copied().fold(f64::INFINITY, f64::min);
        checks.push(Check {
            name: "robustness_nonnegative".into(),
            passed: signed.iter().all(|g| *g >= -SIGN_SLACK),
            detail: format!("min signed gap {worst:.6e}"),
        });
        let tri_excess = report
            .rows
            .iter()
            .filter_map(|r| {
                let j = r.j_mismatch?;
                let g = r.robustness_gap?;
                Some(g.abs() - ((j - r.v_n).abs() + r.continuity_gap))
            })
            .fold(f64::NEG_INFINITY, f64::max);
        checks.push(Check {
            name: "triangle_bound".into(),
            passed: report.rows.is_empty() || tri_excess <= SIGN_SLACK,
            detail: format!("max excess {tri_excess:.3e}"),
        });
        let r_first = report.max_robustness_gap(n_min).unwrap_or(0.0);
        let r_last = report.max_robustness_gap(n_max).unwrap_or(0.0);
        if n_max > n_min {
            checks.push(trend_check("robustness_trend", r_first, r_last, n_min, n_max));
        }
        checks.push(Check {
            name: "robustness_threshold".into(),
            passed: r_last <= report.robustness_threshold,
            detail: format!("gap(n={n_max})={r_last:.6e}, threshold {:.6e}", report.robustness_threshold),
        });
    }

    match spec.criterion {
        Criterion::ErgodicNearMonotone => {
            let margins: Vec<f64> = report
                .true_model
                .iter()
                .chain(report.per_n.iter().map(|m| &m.solve))
                .filter_map(|s| s.near_monotone.map(|c| c.margin))
                .collect();
            let min = margins.iter().copied().fold(f64::INFINITY, f64::min);
            checks.push(Check {
                name: "near_monotone_margin".into(),
                passed: margins.iter().all(|m| *m > 0.0),
                detail: format!("min margin {min:.6e}"),
            });
        }
        Criterion::ErgodicLyapunov => {
            let c0: Vec<(bool, f64)> = report
                .true_model
                .iter()
                .chain(report.per_n.iter().map(|m| &m.solve))
                .filter_map(|s| s.lyapunov.as_ref().map(|c| (c.feasible, c.c0)))
                .collect();
            let max = c0.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
            checks.push(Check {
                name: "lyapunov_feasible".into(),
                passed: c0.iter().all(|c| c.0),
                detail: format!("max C0 {max:.6e}"),
            });
        }
        Criterion::FiniteHorizon => {
            let ok = report
                .true_model
                .iter()
                .chain(report.per_n.iter().map(|m| &m.solve))
                .all(|s| s.sup_bound_check.unwrap_or(true));
            checks.push(Check {
                name: "finite_sup_bound".into(),
                passed: ok,
                detail: String::new(),
            });
        }
        _ => {}
    }
    let finite = report.rows.iter().all(|r| {
        r.continuity_gap.is_finite() && r.robustness_gap.is_none_or(f64::is_finite)
    });
    checks.push(Check {
        name: "gaps_finite".into(),
        passed: finite,
        detail: String::new(),
    });
    checks
}

// ---------------------------------------------------------------- output

pub const TABLE_HEADER: &str = "n,probe,V_true,V_n,J_mismatch,continuity_gap,robustness_gap,mc_mean,mc_se";

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// CSV text of the report table; probe coordinates are joined with `;`.
pub fn table_csv(report: &RobustnessReport) -> String {
    let mut s = String::from(TABLE_HEADER);
    s.push('\n');
    for r in &report.rows {
        let probe: Vec<String> = r.probe.iter().map(|x| x.to_string()).collect();
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.n,
            probe.join(";"),
            r.v_true,
            r.v_n,
            opt(r.j_mismatch),
            r.continuity_gap,
            opt(r.robustness_gap),
            opt(r.mc.as_ref().map(|m| m.mean)),
            opt(r.mc.as_ref().map(|m| m.std_error)),
        ));
    }
    s
}

/// Least-squares slope of `log y` against `log x` over positive points.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

pub fn plot_dat(report: &RobustnessReport) -> String {
    let ns: Vec<usize> = report.per_n.iter().map(|m| m.n).collect();
    let cont: Vec<(f64, f64)> = ns.iter().map(|&n| (n as f64, report.max_continuity_gap(n))).collect();
    let rob: Vec<(f64, f64)> = ns
        .iter()
        .filter_map(|&n| report.max_robustness_gap(n).map(|g| (n as f64, g)))
        .collect();
    let fmt_slope = |s: Option<f64>| s.map(|s| format!("{s:.4}")).unwrap_or_else(|| "n/a".into());
    let mut s = format!(
        "# criterion {} family {}\n# log-log slope continuity {} robustness {}\n# n continuity_gap robustness_gap\n",
        report.criterion.name(),
        report.family,
        fmt_slope(log_log_slope(&cont)),
        fmt_slope(log_log_slope(&rob)),
    );
    for (i, &n) in ns.iter().enumerate() {
        let r = report.max_robustness_gap(n).map(|g| g.to_string()).unwrap_or_else(|| "nan".into());
        s.push_str(&format!("{n} {} {r}\n", cont[i].1));
    }
    s
}

pub fn meta_json(report: &RobustnessReport) -> serde_json::Value {
    json!({
        "criterion": report.criterion,
        "family": report.family,
        "n_values": report.n_values,
        "probes": report.probes,
        "seed": report.seed,
        "scale": report.scale,
        "thresholds": {
            "continuity": report.continuity_threshold,
            "robustness": report.robustness_threshold,
        },
        "true_model": report.true_model,
        "per_n": report.per_n,
        "mc": report.rows.iter().filter_map(|r| r.mc.as_ref().map(|m| json!({"n": r.n, "probe": r.probe, "estimate": m}))).collect::<Vec<_>>(),
        "checks": report.checks,
        "complete": report.complete,
        "passed": report.passed(),
        "spec": report.spec_echo,
    })
}

/// Writes `table.csv`, `meta.json` and `plot.dat`; returns the file names.
pub fn emit_report(report: &RobustnessReport, out_dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("table.csv"), table_csv(report))?;
    let mut f = fs::File::create(out_dir.join("meta.json"))?;
    serde_json::to_writer_pretty(&mut f, &meta_json(report)).map_err(std::io::Error::from)?;
    f.write_all(b"\n")?;
    fs::write(out_dir.join("plot.dat"), plot_dat(report))?;
    Ok(vec!["table.csv".into(), "meta.json".into(), "plot.dat".into()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::PerturbationKind;
    use crate::model::builtin;

    fn spec(criterion: Criterion, kind: PerturbationKind) -> ExperimentSpec {
        let grid = Grid::new(&[-4.0], &[4.0], &[161]).unwrap();
        let actions = ActionSet::scalar(&[-1.0, 0.0, 1.0]).unwrap();
        let family = PerturbationFamily::new(kind, builtin::controlled_ou(1, 4.0));
        let mut s = ExperimentSpec::new(criterion, family, grid, actions, vec![vec![0.0], vec![1.0]]);
        s.n_values = vec![1, 4, 16];
        s
    }

    #[test]
    fn zero_perturbation_is_a_fixed_point() {
        let s = spec(Criterion::Discounted, PerturbationKind::CostRegularized { eps0: 0.0 });
        let r = run_robustness(&s).unwrap();
        assert!(r.rows.iter().all(|r| r.continuity_gap <= 1e-9 && r.robustness_gap.unwrap().abs() <= 1e-9));
        assert!(r.passed(), "{:?}", r.checks);
    }

    #[test]
    fn regularized_cost_gap_bound() {
        let s = spec(Criterion::Discounted, PerturbationKind::CostRegularized { eps0: 1.0 });
        let r = run_continuity(&s).unwrap();
        for row in &r.rows {
            assert!(row.continuity_gap <= 1.0 / (row.n as f64 * s.alpha) + 1e-12);
            assert!(row.j_mismatch.is_none());
        }
        assert!(r.checks.iter().find(|c| c.name == "continuity_trend").unwrap().passed);
    }

    #[test]
    fn ergodic_constant_shift() {
        let mut s = spec(Criterion::ErgodicNearMonotone, PerturbationKind::CostRegularized { eps0: 0.0 });
        let base = s.family.base.clone();
        s.family = PerturbationFamily::custom(base, |m, n| {
            let c = m.cost_fn().clone();
            let k = 0.5 / n as f64;
            m.with_cost(Arc::new(move |x: &[f64], u: &[f64]| c(x, u) + k), m.cost_bound() + k)
        });
        let r = run_robustness(&s).unwrap();
        for row in &r.rows {
            assert!((row.continuity_gap - 0.5 / row.n as f64).abs() < 1e-9);
            assert!(row.robustness_gap.unwrap().abs() < 1e-9);
        }
        assert!(r.per_n.iter().all(|m| m.solve.near_monotone.unwrap().margin > 0.0));
    }

    #[test]
    fn row_counts_and_csv() {
        let mut s = spec(Criterion::Discounted, PerturbationKind::CostRegularized { eps0: 1.0 });
        s.n_values = vec![];
        let r = run_robustness(&s).unwrap();
        assert_eq!(table_csv(&r), format!("{TABLE_HEADER}\n"));
        s.n_values = vec![2];
        s.probes = vec![vec![0.5]];
        let r = run_robustness(&s).unwrap();
        assert_eq!(table_csv(&r).lines().count(), 2);
        s.n_values = vec![1, 2, 3];
        s.probes = vec![vec![0.5], vec![-1.0]];
        let r = run_robustness(&s).unwrap();
        assert_eq!(r.rows.len(), 6);
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&r, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let plot = fs::read_to_string(dir.path().join("plot.dat")).unwrap();
        assert!(plot.contains("log-log slope"));
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("meta.json")).unwrap()).unwrap();
        assert_eq!(meta["criterion"], "discounted");
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(Criterion::Discounted, PerturbationKind::CostRegularized { eps0: 1.0 });
        s.n_values = vec![4, 2];
        assert!(run_continuity(&s).is_err());
        s.n_values = vec![1];
        s.probes = vec![vec![9.0]];
        assert!(run_continuity(&s).is_err());
        let s = spec(Criterion::Exit, PerturbationKind::CostRegularized { eps0: 1.0 });
        assert!(matches!(run_continuity(&s).unwrap_err().error, Error::Config { .. }));
    }

    #[test]
    fn partial_report_on_failure() {
        let mut s = spec(Criterion::Discounted, PerturbationKind::CostRegularized { eps0: 0.0 });
        let base = s.family.base.clone();
        s.family = PerturbationFamily::custom(base, |m, n| {
            if n >= 4 {
                Err(Error::Solve("synthetic".into()))
            } else {
                Ok(m.clone())
            }
        });
        let f = run_robustness(&s).unwrap_err();
        assert_eq!(f.partial.per_n.len(), 1);
        assert!(!f.partial.complete);
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&n| (n, 3.0 / n)).collect();
        assert!((log_log_slope(&pts).unwrap() + 1.0).abs() < 1e-12);
        assert!(log_log_slope(&[(1.0, 0.0)]).is_none());
    }
}
