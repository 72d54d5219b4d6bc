//! Finite-horizon HJB by implicit Euler, backward from the terminal time.

use crate::error::{Error, Result};
use crate::grid::{Grid, ValueField};
use crate::model::{ActionSet, CostFn, DiffusionModel};
use crate::policy::MarkovPolicy;
use crate::system::ControlledSystem;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FiniteHorizonOptions {
    /// Repeat improvement and evaluation within each step until the policy settles.
    pub iterate_improvement: bool,
}

#[derive(Debug, Clone)]
pub struct ParabolicSolution {
    /// `values[k]` is `ψ(k dt, ·)` for `k = 0..=N_t`.
    pub values: Vec<ValueField>,
    pub policy: MarkovPolicy,
    pub terminal: ValueField,
    pub horizon: f64,
    pub dt: f64,
    /// `sup|ψ| ≤ T sup|c| + sup|H|` held at every step.
    pub sup_bound_check: bool,
}

const MAX_INNER: usize = 50;

fn check_horizon(horizon: f64, time_steps: usize) -> Result<f64> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::config("/horizon", "horizon must be positive"));
    }
    if time_steps == 0 {
        return Err(Error::config("/time_steps", "need at least one time step"));
    }
    Ok(horizon / time_steps as f64)
}

fn terminal_values(grid: &Grid, terminal: &dyn Fn(&[f64]) -> f64) -> Result<Vec<f64>> {
    let mut x = vec![0.0; grid.dim()];
    (0..grid.node_count())
        .map(|i| {
            grid.node_into(i, &mut x);
            let v = terminal(&x);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::ModelEvaluation {
                    coefficient: "terminal",
                    x: x.clone(),
                    action: Vec::new(),
                })
            }
        })
        .collect()
}

fn implicit_step(sys: &ControlledSystem, policy: &[usize], next: &[f64], dt: f64) -> Result<Vec<f64>> {
    let band = sys.policy_band(policy, |_| 1.0, dt, |_| false, None);
    let rhs: Vec<f64> = next
        .iter()
        .zip(sys.policy_cost(policy))
        .map(|(p, c)| p + dt * c)
        .collect();
    Ok(band.factor()?.solve(&rhs))
}

/// Backward sweep from nodal terminal data. With `frozen`, actions come from that
/// policy instead of improvement.
pub fn backward_sweep(
    sys: &ControlledSystem,
    horizon: f64,
    time_steps: usize,
    terminal: Vec<f64>,
    frozen: Option<&MarkovPolicy>,
    opts: FiniteHorizonOptions,
) -> Result<ParabolicSolution> {
    let dt = check_horizon(horizon, time_steps)?;
    let grid = sys.grid();
    if terminal.len() != grid.node_count() {
        return Err(Error::config("/terminal", "terminal data length does not match grid"));
    }
    if let Some(p) = frozen {
        if p.grid() != grid || p.time_steps() != time_steps {
            return Err(Error::config("/policy", "policy grid or time steps do not match"));
        }
    }
    let mut psi = vec![Vec::new(); time_steps + 1];
    let mut steps = vec![Vec::new(); time_steps];
    psi[time_steps] = terminal;
    for k in (0..time_steps).rev() {
        let next = &psi[k + 1];
        let (policy, cur) = match frozen {
            Some(p) => {
                let pol = p.step(k).to_vec();
                let cur = implicit_step(sys, &pol, next, dt)?;
                (pol, cur)
            }
            None => {
                let mut pol = sys.greedy(next, None).0;
                let mut cur = implicit_step(sys, &pol, next, dt)?;
                if opts.iterate_improvement {
                    for _ in 0..MAX_INNER {
                        let g = sys.greedy(&cur, None).0;
                        if g == pol {
                            break;
                        }
                        pol = g;
                        cur = implicit_step(sys, &pol, next, dt)?;
                    }
                }
                (pol, cur)
            }
        };
        if let Some(i) = cur.iter().position(|v| !v.is_finite()) {
            return Err(Error::Solve(format!("non-finite value at node {i}, step {k}")));
        }
        psi[k] = cur;
        steps[k] = policy;
    }

    let c_sup = (0..sys.actions().len())
        .flat_map(|k| (0..sys.node_count()).map(move |i| (k, i)))
        .map(|(k, i)| sys.cost(k, i).abs())
        .fold(0.0, f64::max);
    let h_sup = psi[time_steps].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let bound = horizon * c_sup + h_sup + 1e-8;
    let sup_bound_check = psi.iter().flatten().all(|v| v.abs() <= bound);

    let policy = MarkovPolicy::new(grid.clone(), dt, steps, sys.actions())?;
    let terminal = ValueField::new(grid.clone(), psi[time_steps].clone())?;
    let values = psi
        .into_iter()
        .map(|v| ValueField::new(grid.clone(), v))
        .collect::<Result<Vec<_>>>()?;
    Ok(ParabolicSolution {
        values,
        policy,
        terminal,
        horizon,
        dt,
        sup_bound_check,
    })
}

pub fn solve_finite_horizon(
    model: &DiffusionModel,
    grid: &Grid,
    actions: &ActionSet,
    horizon: f64,
    time_steps: usize,
    terminal: &dyn Fn(&[f64]) -> f64,
) -> Result<ParabolicSolution> {
    solve_finite_horizon_with(model, grid, actions, horizon, time_steps, terminal, FiniteHorizonOptions::default())
}

pub fn solve_finite_horizon_with(
    model: &DiffusionModel,
    grid: &Grid,
    actions: &ActionSet,
    horizon: f64,
    time_steps: usize,
    terminal: &dyn Fn(&[f64]) -> f64,
    opts: FiniteHorizonOptions,
) -> Result<ParabolicSolution> {
    check_horizon(horizon, time_steps)?;
    let sys = ControlledSystem::assemble(model, grid, actions, None)?;
    let h = terminal_values(grid, terminal)?;
    backward_sweep(&sys, horizon, time_steps, h, None, opts)
}

/// Values `ψ(k dt, ·)`, `k = 0..=N_t`, of a frozen Markov policy.
pub fn evaluate_policy_finite(
    model: &DiffusionModel,
    actions: &ActionSet,
    policy: &MarkovPolicy,
    terminal: &dyn Fn(&[f64]) -> f64,
    cost_override: Option<&CostFn>,
) -> Result<Vec<ValueField>> {
    let sys = ControlledSystem::assemble(model, policy.grid(), actions, cost_override)?;
    let h = terminal_values(policy.grid(), terminal)?;
    let sol = backward_sweep(&sys, policy.horizon(), policy.time_steps(), h, Some(policy), FiniteHorizonOptions::default())?;
    Ok(sol.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sup_norm_diff;
    use crate::model::builtin;
    use std::sync::Arc;

    fn line(lo: f64, hi: f64, n: usize) -> Grid {
        Grid::new(&[lo], &[hi], &[n]).unwrap()
    }

    fn three() -> ActionSet {
        ActionSet::scalar(&[-1.0, 0.0, 1.0]).unwrap()
    }

    fn const_cost(k: f64) -> DiffusionModel {
        builtin::controlled_ou(1, 4.0).with_cost(Arc::new(move |_: &[f64], _: &[f64]| k), k).unwrap()
    }

    #[test]
    fn constant_data() {
        let g = line(-3.0, 3.0, 61);
        let s = solve_finite_horizon(&const_cost(0.0), &g, &three(), 1.0, 20, &|_| 2.0).unwrap();
        assert!(s.values.iter().flat_map(|f| f.values()).all(|v| (v - 2.0).abs() < 1e-12));
        let s = solve_finite_horizon(&const_cost(1.0), &g, &three(), 2.0, 40, &|_| 0.0).unwrap();
        for (k, f) in s.values.iter().enumerate() {
            let t = k as f64 * s.dt;
            assert!(f.values().iter().all(|v| (v - (2.0 - t)).abs() < 1e-9));
        }
        assert!(s.sup_bound_check);
        assert_eq!(s.values.last().unwrap().values(), s.terminal.values());
    }

    #[test]
    fn heat_kernel() {
        let density = |x: f64, var: f64| (-x * x / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
        let heat = DiffusionModel::new(1, |_, _, b| b[0] = 0.0, |_, s| s[0] = 2f64.sqrt(), |_, _| 0.0, 0.0).unwrap();
        let acts = ActionSet::scalar(&[0.0]).unwrap();
        let g = line(-8.0, 8.0, 321);
        let t = 0.5;
        let err = |nt: usize| {
            let s = solve_finite_horizon(&heat, &g, &acts, t, nt, &|x| density(x[0], 1.0)).unwrap();
            (0..g.node_count())
                .filter(|&i| !g.is_boundary(i))
                .map(|i| (s.values[0].values()[i] - density(g.node(i)[0], 1.0 + 2.0 * t)).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(50), err(100));
        assert!(e1 < 5e-3, "{e1}");
        assert!(e2 < 0.6 * e1, "{e1} {e2}");
    }

    #[test]
    fn frozen_policy_matches_and_dominates() {
        let m = builtin::controlled_ou(1, 4.0);
        let g = line(-4.0, 4.0, 161);
        let acts = three();
        let h = |x: &[f64]| x[0].abs().min(2.0);
        let s = solve_finite_horizon(&m, &g, &acts, 1.0, 50, &h).unwrap();
        let v = evaluate_policy_finite(&m, &acts, &s.policy, &h, None).unwrap();
        for (a, b) in v.iter().zip(&s.values) {
            assert!(sup_norm_diff(a.values(), b.values()) < 1e-9);
        }
        let steps = vec![vec![2; g.node_count()]; 50];
        let frozen = MarkovPolicy::new(g, s.dt, steps, &acts).unwrap();
        let vf = evaluate_policy_finite(&m, &acts, &frozen, &h, None).unwrap();
        for (a, b) in vf[0].values().iter().zip(s.values[0].values()) {
            assert!(*a >= b - 1e-10);
        }
    }

    #[test]
    fn dynamic_programming_split() {
        let m = builtin::controlled_ou(1, 4.0);
        let g = line(-4.0, 4.0, 81);
        let acts = three();
        let sys = ControlledSystem::assemble(&m, &g, &acts, None).unwrap();
        let h = terminal_values(&g, &|x| x[0].abs()).unwrap();
        let opts = FiniteHorizonOptions::default();
        let full = backward_sweep(&sys, 2.0, 40, h.clone(), None, opts).unwrap();
        let late = backward_sweep(&sys, 1.0, 20, h, None, opts).unwrap();
        let early = backward_sweep(&sys, 1.0, 20, late.values[0].values().to_vec(), None, opts).unwrap();
        assert!(sup_norm_diff(full.values[0].values(), early.values[0].values()) < 1e-8);
    }

    #[test]
    fn comparison_in_cost() {
        let g = line(-4.0, 4.0, 81);
        let acts = three();
        let base = builtin::controlled_ou(1, 4.0);
        let higher = base
            .with_cost(Arc::new(|x: &[f64], _: &[f64]| (x[0] * x[0]).min(4.0) + 0.3 * x[0].sin().abs()), 5.0)
            .unwrap();
        let a = solve_finite_horizon(&base, &g, &acts, 1.0, 20, &|_| 0.0).unwrap();
        let b = solve_finite_horizon(&higher, &g, &acts, 1.0, 20, &|_| 0.0).unwrap();
        for (lo, hi) in a.values.iter().zip(&b.values) {
            for (x, y) in lo.values().iter().zip(hi.values()) {
                assert!(y >= &(x - 1e-12));
            }
        }
    }

    #[test]
    fn iterated_improvement_is_no_worse() {
        let m = builtin::controlled_ou(1, 4.0);
        let g = line(-4.0, 4.0, 81);
        let acts = three();
        let one = solve_finite_horizon(&m, &g, &acts, 1.0, 10, &|_| 0.0).unwrap();
        let it = solve_finite_horizon_with(&m, &g, &acts, 1.0, 10, &|_| 0.0, FiniteHorizonOptions { iterate_improvement: true }).unwrap();
        for (a, b) in it.values[0].values().iter().zip(one.values[0].values()) {
            assert!(*a <= b + 1e-10);
        }
    }

    #[test]
    fn rejects_bad_horizon() {
        let g = line(-1.0, 1.0, 11);
        assert!(solve_finite_horizon(&const_cost(1.0), &g, &three(), 0.0, 10, &|_| 0.0).is_err());
        assert!(solve_finite_horizon(&const_cost(1.0), &g, &three(), 1.0, 0, &|_| 0.0).is_err());
    }
}
