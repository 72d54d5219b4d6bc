//! Discounted, ergodic and exit-time HJB solvers by policy iteration, and
//! fixed-policy evaluation.

use serde::Serialize;

use crate::error::{Error, Result, Unconverged};
use crate::grid::{Grid, ValueField};
use crate::linalg::sup_norm_diff;
use crate::model::{ActionSet, CostFn, DiffusionModel};
use crate::policy::StationaryPolicy;
use crate::system::{evaluate_on_nodes, ControlledSystem};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 200;

#[derive(Debug, Clone)]
pub struct DiscountedSolution {
    pub value: ValueField,
    pub policy: StationaryPolicy,
    pub alpha: f64,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErgodicRegime {
    NearMonotone,
    Lyapunov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErgodicMethod {
    RelativePolicyIteration,
    VanishingDiscount,
}

#[derive(Debug, Clone)]
pub struct ErgodicSolution {
    /// Relative value, zero at the grid anchor.
    pub value: ValueField,
    pub rho: f64,
    /// `α V_α(anchor)` at the last schedule step, when the vanishing-discount route ran.
    pub rho_vanishing: Option<f64>,
    pub policy: StationaryPolicy,
    /// Set by experiment drivers; the solvers themselves are regime-agnostic.
    pub regime: Option<ErgodicRegime>,
    pub method: ErgodicMethod,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct ExitSolution {
    pub value: ValueField,
    pub policy: StationaryPolicy,
    pub residual: f64,
    pub iterations: usize,
}

fn field(grid: &Grid, v: Vec<f64>) -> Result<ValueField> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Solve(format!("non-finite solution at node {i}")));
    }
    ValueField::new(grid.clone(), v)
}

fn policy_of(sys: &ControlledSystem, idx: Vec<usize>) -> Result<StationaryPolicy> {
    StationaryPolicy::new(sys.grid().clone(), idx, sys.actions())
}

fn check_policy(sys: &ControlledSystem, policy: &StationaryPolicy) -> Result<()> {
    if policy.grid() != sys.grid() {
        return Err(Error::config("/policy", "policy grid differs from solver grid"));
    }
    if policy.indices().iter().any(|&k| k >= sys.actions().len()) {
        return Err(Error::config("/policy", "action index out of range"));
    }
    Ok(())
}

// ---------------------------------------------------------------- discounted

/// Solves `(αI - L_v) V = c_v`.
pub fn evaluate_discounted_in(sys: &ControlledSystem, policy: &[usize], alpha: f64) -> Result<Vec<f64>> {
    let band = sys.policy_band(policy, |_| alpha, 1.0, |_| false, None);
    let lu = band.factor()?;
    Ok(lu.solve(&sys.policy_cost(policy)))
}

fn discounted_residual(alpha: f64, v: &[f64], minq: &[f64]) -> f64 {
    v.iter().zip(minq).map(|(v, q)| (q - alpha * v).abs()).fold(0.0, f64::max)
}

/// Howard iteration on an assembled system, starting from `init`.
/// `trace` receives every evaluated value vector.
pub fn policy_iteration_discounted(
    sys: &ControlledSystem,
    alpha: f64,
    tol: f64,
    max_iter: usize,
    init: Vec<usize>,
    mut trace: Option<&mut Vec<Vec<f64>>>,
) -> Result<DiscountedSolution> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config("/alpha", "alpha must be positive"));
    }
    let mut policy = init;
    let mut last = (Vec::new(), f64::INFINITY);
    for it in 1..=max_iter.max(1) {
        let v = evaluate_discounted_in(sys, &policy, alpha)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(v.clone());
        }
        let (greedy, minq) = sys.greedy(&v, None);
        let residual = discounted_residual(alpha, &v, &minq);
        if residual <= tol || greedy == policy {
            return Ok(DiscountedSolution {
                value: field(sys.grid(), v)?,
                policy: policy_of(sys, greedy)?,
                alpha,
                residual,
                iterations: it,
            });
        }
        policy = greedy;
        last = (v, residual);
    }
    Err(Error::NonConvergence(Box::new(Unconverged {
        solver: "solve_discounted",
        iterations: max_iter,
        residual: last.1,
        values: last.0,
        policy,
        rho: None,
    })))
}

pub fn solve_discounted(
    model: &DiffusionModel,
    grid: &Grid,
    actions: &ActionSet,
    alpha: f64,
    tol: f64,
    max_iter: usize,
) -> Result<DiscountedSolution> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config("/alpha", "alpha must be positive"));
    }
    let sys = ControlledSystem::assemble(model, grid, actions, None)?;
    let init = sys.cost_greedy();
    policy_iteration_discounted(&sys, alpha, tol, max_iter, init, None)
}

/// Value of a fixed policy; `cost_override` swaps in another running cost.
pub fn evaluate_policy_discounted(
    model: &DiffusionModel,
    actions: &ActionSet,
    policy: &StationaryPolicy,
    alpha: f64,
    cost_override: Option<&CostFn>,
) -> Result<ValueField> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config("/alpha", "alpha must be positive"));
    }
    let sys = ControlledSystem::assemble(model, policy.grid(), actions, cost_override)?;
    check_policy(&sys, policy)?;
    field(sys.grid(), evaluate_discounted_in(&sys, policy.indices(), alpha)?)
}

// ---------------------------------------------------------------- ergodic

/// Solves `L_v V + c_v = ρ` with `V(anchor) = 0`.
///
/// The bordered unknown `z` holds `V` with `ρ` stored in the anchor slot, so the
/// matrix is `L_v` with the anchor column replaced by `-1`. That is a rank-one
/// change of `B` = `L_v` with the anchor column replaced by `-e_a`, which keeps
/// the band structure, so one banded factorization plus Sherman-Morrison suffices.
pub fn evaluate_ergodic_in(sys: &ControlledSystem, policy: &[usize]) -> Result<(f64, Vec<f64>)> {
    let a = sys.grid().anchor();
    let n = sys.node_count();
    let band = sys.policy_band(policy, |i| if i == a { -1.0 } else { 0.0 }, -1.0, |_| false, Some(a));
    let lu = band.factor()?;
    let r: Vec<f64> = sys.policy_cost(policy).into_iter().map(|c| -c).collect();
    let y = lu.solve(&r);
    let mut u = vec![-1.0; n];
    u[a] = 0.0;
    let w = lu.solve(&u);
    let denom = 1.0 + w[a];
    if !(denom.abs() > 1e-14) {
        return Err(Error::Solve("bordered ergodic system is singular".into()));
    }
    let s = y[a] / denom;
    let mut z: Vec<f64> = y.iter().zip(&w).map(|(y, w)| y - w * s).collect();
    let rho = z[a];
    z[a] = 0.0;
    Ok((rho, z))
}

fn ergodic_residual(rho: f64, minq: &[f64]) -> f64 {
    minq.iter().map(|q| (q - rho).abs()).fold(0.0, f64::max)
}

/// Relative policy iteration on an assembled system.
pub fn relative_policy_iteration(
    sys: &ControlledSystem,
    tol: f64,
    max_iter: usize,
    init: Vec<usize>,
) -> Result<ErgodicSolution> {
    let mut policy = init;
    let mut best: Option<(f64, f64, Vec<f64>, Vec<usize>)> = None;
    for it in 1..=max_iter.max(1) {
        let (rho, v) = evaluate_ergodic_in(sys, &policy)?;
        let (greedy, minq) = sys.greedy(&v, None);
        let residual = ergodic_residual(rho, &minq);
        if residual <= tol || greedy == policy {
            return Ok(ErgodicSolution {
                value: field(sys.grid(), v)?,
                rho,
                rho_vanishing: None,
                policy: policy_of(sys, greedy)?,
                regime: None,
                method: ErgodicMethod::RelativePolicyIteration,
                residual,
                iterations: it,
            });
        }
        if best.as_ref().is_none_or(|b| residual < b.1) {
            best = Some((rho, residual, v, policy.clone()));
        }
        policy = greedy;
    }
    let (rho, residual, values, policy) = best.expect("at least one iteration");
    Err(Error::NonConvergence(Box::new(Unconverged {
        solver: "solve_ergodic_rpi",
        iterations: max_iter,
        residual,
        values,
        policy,
        rho: Some(rho),
    })))
}

pub fn solve_ergodic_rpi(
    model: &DiffusionModel,
    grid: &Grid,
    actions: &ActionSet,
    tol: f64,
    max_iter: usize,
) -> Result<ErgodicSolution> {
    let sys = ControlledSystem::assemble(model, grid, actions, None)?;
    let init = sys.cost_greedy();
    relative_policy_iteration(&sys, tol, max_iter, init)
}

/// `α_k = 0.5 · 2^{-k}` for `k = 0..=k_max`.
pub fn default_alpha_schedule(k_max: usize) -> Vec<f64> {
    (0..=k_max).map(|k| 0.5 * 0.5f64.powi(k as i32)).collect()
}

/// Vanishing-discount limit on an assembled system, refined by one relative
/// policy iteration started from the limit policy.
pub fn vanishing_discount(
    sys: &ControlledSystem,
    schedule: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<ErgodicSolution> {
    if schedule.is_empty() {
        return Err(Error::config("/alpha_schedule", "schedule is empty"));
    }
    if schedule.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
        return Err(Error::config("/alpha_schedule", "entries must be positive"));
    }
    if schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::config("/alpha_schedule", "schedule must be strictly decreasing"));
    }
    let anchor = sys.grid().anchor();
    let mut policy = sys.cost_greedy();
    let mut prev: Option<(f64, Vec<f64>)> = None;
    let mut total_iter = 0;
    let mut converged = false;
    let mut last_delta = f64::INFINITY;
    for &alpha in schedule {
        let sol = policy_iteration_discounted(sys, alpha, tol.min(DEFAULT_TOL), max_iter, policy, None)?;
        total_iter += sol.iterations;
        let v = sol.value.values();
        let rho = alpha * v[anchor];
        let rel: Vec<f64> = v.iter().map(|x| x - v[anchor]).collect();
        policy = sol.policy.indices().to_vec();
        if let Some((p_rho, p_rel)) = &prev {
            last_delta = (rho - p_rho).abs().max(sup_norm_diff(&rel, p_rel));
            if last_delta < tol {
                prev = Some((rho, rel));
                converged = true;
                break;
            }
        }
        prev = Some((rho, rel));
    }
    let (rho_vanishing, rel) = prev.expect("schedule is nonempty");
    if !converged {
        return Err(Error::NonConvergence(Box::new(Unconverged {
            solver: "solve_ergodic_vanishing",
            iterations: total_iter,
            residual: last_delta,
            values: rel,
            policy,
            rho: Some(rho_vanishing),
        })));
    }
    let mut sol = relative_policy_iteration(sys, tol.min(DEFAULT_TOL), max_iter, policy)?;
    sol.rho_vanishing = Some(rho_vanishing);
    sol.method = ErgodicMethod::VanishingDiscount;
    sol.iterations += total_iter;
    Ok(sol)
}

pub fn solve_ergodic_vanishing(
    model: &DiffusionModel,
    grid: &Grid,
    actions: &ActionSet,
    alpha_schedule: &[f64],
    tol: f64,
) -> Result<ErgodicSolution> {
    let sys = ControlledSystem::assemble(model, grid, actions, None)?;
    vanishing_discount(&sys, alpha_schedule, tol, DEFAULT_MAX_ITER)
}

/// Average cost and relative value of a fixed policy.
pub fn evaluate_policy_ergodic(
    model: &DiffusionModel,
    actions: &ActionSet,
    policy: &StationaryPolicy,
    cost_override: Option<&CostFn>,
) -> Result<(f64, ValueField)> {
    let sys = ControlledSystem::assemble(model, policy.grid(), actions, cost_override)?;
    check_policy(&sys, policy)?;
    let (rho, v) = evaluate_ergodic_in(&sys, policy.indices())?;
    Ok((rho, field(sys.grid(), v)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NearMonotoneCheck {
    pub holds: bool,
    /// `min over boundary ring of min_ζ c - ρ`.
    pub margin: f64,
}

pub fn check_near_monotone(model: &DiffusionModel, grid: &Grid, actions: &ActionSet, rho: f64) -> NearMonotoneCheck {
    let mut x = vec![0.0; grid.dim()];
    let mut ring_min = f64::INFINITY;
    for i in (0..grid.node_count()).filter(|&i| grid.is_boundary(i)) {
        grid.node_into(i, &mut x);
        for u in actions.iter() {
            ring_min = ring_min.min(model.cost(&x, u));
        }
    }
    let margin = ring_min - rho;
    NearMonotoneCheck { holds: margin > 0.0, margin }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovCheck {
    pub feasible: bool,
    /// Smallest constant with `L_ζ𝒱 + h ≤ Ĉ₀` at every interior node and action.
    pub c0: f64,
    pub worst_node: Option<Vec<f64>>,
    pub worst_action: Option<usize>,
}

/// Checks `L_ζ𝒱 ≤ Ĉ₀ - h` on interior nodes, with derivatives of `𝒱` by central
/// differences at the grid spacing. Feasible when the smallest such `Ĉ₀` is finite
/// and at most `c0_max`.
pub fn check_lyapunov(
    model: &DiffusionModel,
    grid: &Grid,
    actions: &ActionSet,
    lyap: &dyn Fn(&[f64]) -> f64,
    h: &dyn Fn(&[f64], &[f64]) -> f64,
    c0_max: f64,
) -> LyapunovCheck {
    let d = grid.dim();
    let sp = grid.spacing();
    let mut x = vec![0.0; d];
    let mut y = vec![0.0; d];
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    let mut sigma = vec![0.0; d * d];
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    let mut best = LyapunovCheck {
        feasible: false,
        c0: f64::NEG_INFINITY,
        worst_node: None,
        worst_action: None,
    };
    for i in (0..grid.node_count()).filter(|&i| !grid.is_boundary(i)) {
        grid.node_into(i, &mut x);
        let f0 = lyap(&x);
        for p in 0..d {
            let mut at = |dp: f64, q: Option<(usize, f64)>| {
                y.copy_from_slice(&x);
                y[p] += dp;
                if let Some((q, dq)) = q {
                    y[q] += dq;
                }
                lyap(&y)
            };
            let (fp, fm) = (at(sp[p], None), at(-sp[p], None));
            grad[p] = (fp - fm) / (2.0 * sp[p]);
            hess[p * d + p] = (fp - 2.0 * f0 + fm) / (sp[p] * sp[p]);
            for q in p + 1..d {
                let pp = at(sp[p], Some((q, sp[q])));
                let pm = at(sp[p], Some((q, -sp[q])));
                let mp = at(-sp[p], Some((q, sp[q])));
                let mm = at(-sp[p], Some((q, -sp[q])));
                let v = (pp - pm - mp + mm) / (4.0 * sp[p] * sp[q]);
                hess[p * d + q] = v;
                hess[q * d + p] = v;
            }
        }
        model.diffusion_into(&x, &mut sigma);
        crate::model::half_sigma_sigma_t(&sigma, d, &mut a);
        for (k, u) in actions.iter().enumerate() {
            model.drift_into(&x, u, &mut b);
            let mut lv = 0.0;
            for p in 0..d {
                lv += b[p] * grad[p];
                for q in 0..d {
                    lv += a[p * d + q] * hess[p * d + q];
                }
            }
            let need = lv + h(&x, u);
            if need.is_nan() || need > best.c0 {
                best.c0 = if need.is_nan() { f64::INFINITY } else { need };
                best.worst_node = Some(x.clone());
                best.worst_action = Some(k);
            }
        }
    }
    best.feasible = best.c0.is_finite() && best.c0 <= c0_max;
    best
}

// ---------------------------------------------------------------- exit

struct ExitData {
    delta: Vec<Vec<f64>>,
    h: Vec<f64>,
    boundary: Vec<bool>,
}

fn exit_data(
    grid: &Grid,
    actions: &ActionSet,
    delta: &(dyn Fn(&[f64], &[f64]) -> f64 + Sync),
    terminal_h: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> Result<ExitData> {
    let delta = evaluate_on_nodes(grid, actions, "delta", delta)?;
    if delta.iter().flatten().any(|&d| d < 0.0) {
        return Err(Error::config("/exit/delta", "discount function must be nonnegative"));
    }
    let n = grid.node_count();
    let boundary: Vec<bool> = (0..n).map(|i| grid.is_boundary(i)).collect();
    let mut h = vec![0.0; n];
    let mut x = vec![0.0; grid.dim()];
    for i in (0..n).filter(|&i| boundary[i]) {
        grid.node_into(i, &mut x);
        h[i] = terminal_h(&x);
        if !h[i].is_finite() {
            return Err(Error::ModelEvaluation {
                coefficient: "terminal",
                x: x.clone(),
                action: Vec::new(),
            });
        }
    }
    Ok(ExitData { delta, h, boundary })
}

fn evaluate_exit_in(sys: &ControlledSystem, data: &ExitData, policy: &[usize]) -> Result<Vec<f64>> {
    let b = &data.boundary;
    let band = sys.policy_band(policy, |i| data.delta[policy[i]][i], 1.0, |i| b[i], None);
    let lu = band.factor()?;
    let mut rhs = vec![0.0; sys.node_count()];
    for (i, r) in rhs.iter_mut().enumerate() {
        if b[i] {
            *r = data.h[i];
            continue;
        }
        *r = sys.cost(policy[i], i);
        for (j, l) in sys.generator(policy[i]).matrix.row(i) {
            if b[j] {
                *r += l * data.h[j];
            }
        }
    }
    let mut v = lu.solve(&rhs);
    for i in (0..v.len()).filter(|&i| b[i]) {
        v[i] = data.h[i];
    }
    Ok(v)
}

fn exit_residual(data: &ExitData, minq: &[f64]) -> f64 {
    minq.iter()
        .zip(&data.boundary)
        .filter(|(_, &b)| !b)
        .map(|(q, _)| q.abs())
        .fold(0.0, f64::max)
}

#[allow(clippy::too_many_arguments)]
pub fn solve_exit(
    model: &DiffusionModel,
    grid: &Grid,
    actions: &ActionSet,
    delta: &(dyn Fn(&[f64], &[f64]) -> f64 + Sync),
    terminal_h: &(dyn Fn(&[f64]) -> f64 + Sync),
    tol: f64,
    max_iter: usize,
) -> Result<ExitSolution> {
    let sys = ControlledSystem::assemble(model, grid, actions, None)?;
    exit_policy_iteration(&sys, delta, terminal_h, tol, max_iter)
}

pub fn exit_policy_iteration(
    sys: &ControlledSystem,
    delta: &(dyn Fn(&[f64], &[f64]) -> f64 + Sync),
    terminal_h: &(dyn Fn(&[f64]) -> f64 + Sync),
    tol: f64,
    max_iter: usize,
) -> Result<ExitSolution> {
    let data = exit_data(sys.grid(), sys.actions(), delta, terminal_h)?;
    let mut policy = sys.cost_greedy();
    let mut last = (Vec::new(), f64::INFINITY);
    for it in 1..=max_iter.max(1) {
        let v = evaluate_exit_in(sys, &data, &policy)?;
        let (greedy, minq) = sys.greedy(&v, Some(&data.delta));
        let residual = exit_residual(&data, &minq);
        if residual <= tol || greedy == policy {
            return Ok(ExitSolution {
                value: field(sys.grid(), v)?,
                policy: policy_of(sys, greedy)?,
                residual,
                iterations: it,
            });
        }
        policy = greedy;
        last = (v, residual);
    }
    Err(Error::NonConvergence(Box::new(Unconverged {
        solver: "solve_exit",
        iterations: max_iter,
        residual: last.1,
        values: last.0,
        policy,
        rho: None,
    })))
}

pub fn evaluate_policy_exit(
    model: &DiffusionModel,
    actions: &ActionSet,
    policy: &StationaryPolicy,
    delta: &(dyn Fn(&[f64], &[f64]) -> f64 + Sync),
    terminal_h: &(dyn Fn(&[f64]) -> f64 + Sync),
    cost_override: Option<&CostFn>,
) -> Result<ValueField> {
    let sys = ControlledSystem::assemble(model, policy.grid(), actions, cost_override)?;
    check_policy(&sys, policy)?;
    evaluate_exit_policy_in(&sys, policy, delta, terminal_h)
}

pub fn evaluate_exit_policy_in(
    sys: &ControlledSystem,
    policy: &StationaryPolicy,
    delta: &(dyn Fn(&[f64], &[f64]) -> f64 + Sync),
    terminal_h: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> Result<ValueField> {
    let data = exit_data(sys.grid(), sys.actions(), delta, terminal_h)?;
    field(sys.grid(), evaluate_exit_in(sys, &data, policy.indices())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin;
    use std::sync::Arc;

    fn ou(cap: f64) -> DiffusionModel {
        builtin::controlled_ou(1, cap)
    }

    fn line(lo: f64, hi: f64, n: usize) -> Grid {
        Grid::new(&[lo], &[hi], &[n]).unwrap()
    }

    fn three() -> ActionSet {
        ActionSet::scalar(&[-1.0, 0.0, 1.0]).unwrap()
    }

    fn with_cost(m: &DiffusionModel, c: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static, bound: f64) -> DiffusionModel {
        m.with_cost(Arc::new(c), bound).unwrap()
    }

    #[test]
    fn constant_cost_discounted() {
        let m = with_cost(&ou(4.0), |_, _| 3.0, 3.0);
        let s = solve_discounted(&m, &line(-4.0, 4.0, 81), &three(), 0.5, 1e-9, 50).unwrap();
        assert!(s.value.values().iter().all(|v| (v - 6.0).abs() < 1e-9));
        assert!(s.residual <= 1e-9);
        assert_eq!(s.iterations, 1);
    }

    #[test]
    fn action_only_cost() {
        let m = with_cost(&ou(4.0), |_, u| (u[0] - 1.0).powi(2) + 0.5, 4.5);
        let s = solve_discounted(&m, &line(-4.0, 4.0, 81), &three(), 2.0, 1e-9, 50).unwrap();
        assert!(s.value.values().iter().all(|v| (v - 0.25).abs() < 1e-9));
        assert!(s.policy.indices().iter().all(|&k| k == 2));
    }

    fn ou_discounted() -> (DiffusionModel, Grid, DiscountedSolution) {
        let m = ou(4.0);
        let g = line(-4.0, 4.0, 401);
        let s = solve_discounted(&m, &g, &three(), 1.0, 1e-10, 100).unwrap();
        (m, g, s)
    }

    #[test]
    fn discounted_bounds_and_selector() {
        let (m, g, s) = ou_discounted();
        for &v in s.value.values() {
            assert!((0.0..=4.0 + 1e-8).contains(&v));
        }
        let sys = ControlledSystem::assemble(&m, &g, &three(), None).unwrap();
        let (greedy, _) = sys.greedy(s.value.values(), None);
        assert_eq!(greedy, s.policy.indices());
        // the optimal control pushes toward the origin
        assert_eq!(s.policy.lookup(&[2.0]), 0);
        assert_eq!(s.policy.lookup(&[-2.0]), 2);
    }

    #[test]
    fn policy_evaluation_consistency_and_comparison() {
        let (m, g, s) = ou_discounted();
        let acts = three();
        let v = evaluate_policy_discounted(&m, &acts, &s.policy, 1.0, None).unwrap();
        assert!(sup_norm_diff(v.values(), s.value.values()) < 1e-9);
        let zero = StationaryPolicy::constant(g, 1, &acts).unwrap();
        let vz = evaluate_policy_discounted(&m, &acts, &zero, 1.0, None).unwrap();
        for (a, b) in vz.values().iter().zip(s.value.values()) {
            assert!(a >= &(b - 1e-10));
        }
    }

    #[test]
    fn howard_iterates_decrease() {
        let m = ou(4.0);
        let g = line(-4.0, 4.0, 201);
        let sys = ControlledSystem::assemble(&m, &g, &three(), None).unwrap();
        let mut trace = Vec::new();
        // start from the worst constant policy so several improvements happen
        let init = vec![2; g.node_count()];
        policy_iteration_discounted(&sys, 1.0, 1e-12, 100, init, Some(&mut trace)).unwrap();
        assert!(trace.len() >= 2);
        for w in trace.windows(2) {
            for (new, old) in w[1].iter().zip(&w[0]) {
                assert!(*new <= old + 1e-10);
            }
        }
    }

    #[test]
    fn nonconvergence_carries_iterate() {
        let m = ou(4.0);
        let g = line(-4.0, 4.0, 101);
        let sys = ControlledSystem::assemble(&m, &g, &three(), None).unwrap();
        let err = policy_iteration_discounted(&sys, 1.0, 0.0, 1, vec![2; 101], None).unwrap_err();
        match err {
            Error::NonConvergence(u) => {
                assert_eq!(u.values.len(), 101);
                assert_eq!(u.iterations, 1);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn constant_cost_ergodic_both_methods() {
        let m = with_cost(&ou(4.0), |_, _| 2.5, 2.5);
        let g = line(-4.0, 4.0, 81);
        let r = solve_ergodic_rpi(&m, &g, &three(), 1e-9, 50).unwrap();
        assert!((r.rho - 2.5).abs() < 1e-12);
        assert!(r.value.values().iter().all(|v| v.abs() < 1e-9));
        let v = solve_ergodic_vanishing(&m, &g, &three(), &default_alpha_schedule(30), 1e-7).unwrap();
        assert!((v.rho - 2.5).abs() < 1e-9);
        assert!((v.rho_vanishing.unwrap() - 2.5).abs() < 1e-9);
    }

    #[test]
    fn ergodic_shift_by_constant() {
        let g = line(-5.0, 5.0, 201);
        let base = ou(9.0);
        let shifted = with_cost(&base, |x, _| (x[0] * x[0]).min(9.0) + 1.5, 10.5);
        let a = solve_ergodic_rpi(&base, &g, &three(), 1e-10, 100).unwrap();
        let b = solve_ergodic_rpi(&shifted, &g, &three(), 1e-10, 100).unwrap();
        assert!((b.rho - a.rho - 1.5).abs() < 1e-9);
        assert_eq!(a.policy.indices(), b.policy.indices());
        assert!(sup_norm_diff(a.value.values(), b.value.values()) < 1e-7);
        assert_eq!(a.value.values()[g.anchor()], 0.0);
        assert!(a.rho >= 0.0 && a.rho <= 9.0);
    }

    #[test]
    fn ergodic_policy_evaluation_matches() {
        let g = line(-5.0, 5.0, 201);
        let m = ou(9.0);
        let s = solve_ergodic_rpi(&m, &g, &three(), 1e-10, 100).unwrap();
        let (rho, v) = evaluate_policy_ergodic(&m, &three(), &s.policy, None).unwrap();
        assert!((rho - s.rho).abs() < 1e-9);
        assert!(sup_norm_diff(v.values(), s.value.values()) < 1e-8);
        let k = with_cost(&m, |_, _| 4.0, 4.0);
        let zero = StationaryPolicy::constant(g, 0, &three()).unwrap();
        let (rk, _) = evaluate_policy_ergodic(&k, &three(), &zero, None).unwrap();
        assert!((rk - 4.0).abs() < 1e-10);
    }

    #[test]
    fn near_monotone_examples() {
        let m = with_cost(&ou(25.0), |x, _| (x[0] * x[0]).min(25.0), 25.0);
        let g = line(-6.0, 6.0, 61);
        let c = check_near_monotone(&m, &g, &three(), 1.0);
        assert!(c.holds);
        assert!((c.margin - 24.0).abs() < 1e-12);
        let k = with_cost(&m, |_, _| 3.0, 3.0);
        let c = check_near_monotone(&k, &g, &three(), 3.0);
        assert!(!c.holds);
        assert_eq!(c.margin, 0.0);
    }

    #[test]
    fn lyapunov_examples() {
        let acts = ActionSet::scalar(&[0.0]).unwrap();
        let g = line(-5.0, 5.0, 101);
        let stable = DiffusionModel::new(1, |x, _, b| b[0] = -x[0], |_, s| s[0] = 2f64.sqrt(), |_, _| 0.0, 0.0).unwrap();
        let v = |x: &[f64]| x[0] * x[0];
        let h = |x: &[f64], _: &[f64]| x[0] * x[0];
        let c = check_lyapunov(&stable, &g, &acts, &v, &h, 10.0);
        assert!(c.feasible);
        assert!((c.c0 - 2.0).abs() < 1e-9);
        assert!(c.worst_node.unwrap()[0].abs() < 1e-12);
        let zero = |_: &[f64], _: &[f64]| 0.0;
        let c = check_lyapunov(&stable, &g, &acts, &v, &zero, 10.0);
        assert!((c.c0 - 2.0).abs() < 1e-9);

        let unstable = DiffusionModel::new(1, |x, _, b| b[0] = x[0], |_, s| s[0] = 2f64.sqrt(), |_, _| 0.0, 0.0).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for half in [5.0, 10.0, 20.0] {
            let g = line(-half, half, 101);
            let c = check_lyapunov(&unstable, &g, &acts, &v, &h, 10.0);
            assert!(c.c0 > prev);
            prev = c.c0;
        }
        assert!(prev > 10.0);
        assert!(!check_lyapunov(&unstable, &line(-20.0, 20.0, 101), &acts, &v, &h, 10.0).feasible);
    }

    fn bm(a: f64) -> DiffusionModel {
        let s = (2.0 * a).sqrt();
        DiffusionModel::new(1, |_, _, b| b[0] = 0.0, move |_, out| out[0] = s, |_, _| 1.0, 1.0).unwrap()
    }

    #[test]
    fn exit_constants() {
        let acts = ActionSet::scalar(&[0.0]).unwrap();
        let g = line(0.0, 1.0, 51);
        let m = bm(1.0).with_cost(Arc::new(|_: &[f64], _: &[f64]| 0.0), 0.0).unwrap();
        for k in [0.0, 1.0] {
            let s = solve_exit(&m, &g, &acts, &|_, _| 0.0, &|_| k, 1e-9, 10).unwrap();
            assert!(s.value.values().iter().all(|v| (v - k).abs() < 1e-12));
            assert!(s.residual <= 1e-9);
        }
    }

    #[test]
    fn exit_closed_form_and_exact_boundary() {
        let acts = ActionSet::scalar(&[0.0]).unwrap();
        let g = line(0.0, 1.0, 101);
        let s = solve_exit(&bm(1.0), &g, &acts, &|_, _| 0.0, &|x| 0.1 + x[0] * 1e-3, 1e-9, 10).unwrap();
        let v = s.value.values();
        assert_eq!(v[0].to_bits(), 0.1f64.to_bits());
        assert_eq!(v[100].to_bits(), (0.1 + 1e-3f64).to_bits());

        let s = solve_exit(&bm(1.0), &g, &acts, &|_, _| 0.0, &|_| 0.0, 1e-9, 10).unwrap();
        let err = (0..101)
            .map(|i| {
                let x = g.node(i)[0];
                (s.value.values()[i] - x * (1.0 - x) / 2.0).abs()
            })
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn exit_policy_comparison() {
        let m = ou(4.0);
        let g = line(-2.0, 2.0, 161);
        let acts = three();
        let delta = |_: &[f64], _: &[f64]| 0.5;
        let h = |x: &[f64]| x[0].abs();
        let s = solve_exit(&m, &g, &acts, &delta, &h, 1e-10, 100).unwrap();
        let v = evaluate_policy_exit(&m, &acts, &s.policy, &delta, &h, None).unwrap();
        assert!(sup_norm_diff(v.values(), s.value.values()) < 1e-9);
        let zero = StationaryPolicy::constant(g, 2, &acts).unwrap();
        let vz = evaluate_policy_exit(&m, &acts, &zero, &delta, &h, None).unwrap();
        for (a, b) in vz.values().iter().zip(s.value.values()) {
            assert!(*a >= b - 1e-10);
        }
        let one = evaluate_policy_exit(&m.with_cost(Arc::new(|_: &[f64], _: &[f64]| 0.0), 0.0).unwrap(), &acts, &zero, &|_, _| 0.0, &|_| 1.0, None).unwrap();
        assert!(one.values().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }
}
