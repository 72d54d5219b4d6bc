//! Per-action generators and costs on a grid, shared by the HJB solvers.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::generator::{assemble_all, DiscreteGenerator};
use crate::grid::Grid;
use crate::linalg::BandMatrix;
use crate::model::{ActionSet, CostFn, DiffusionModel};
use crate::policy::argmin_lowest;

/// Everything needed to evaluate `L_ζ v + c(·, ζ)` at every node for every action.
#[derive(Debug, Clone)]
pub struct ControlledSystem {
    grid: Grid,
    actions: ActionSet,
    generators: Vec<DiscreteGenerator>,
    costs: Vec<Vec<f64>>,
    kl: usize,
    ku: usize,
}

impl ControlledSystem {
    /// Discretizes every action. `cost_override` replaces the model's running cost.
    pub fn assemble(
        model: &DiffusionModel,
        grid: &Grid,
        actions: &ActionSet,
        cost_override: Option<&CostFn>,
    ) -> Result<Self> {
        let generators = assemble_all(model, grid, actions)?;
        let cost = |x: &[f64], u: &[f64]| match cost_override {
            Some(c) => c(x, u),
            None => model.cost(x, u),
        };
        let costs = evaluate_on_nodes(grid, actions, "cost", cost)?;
        let (mut kl, mut ku) = (0, 0);
        for g in &generators {
            let (l, u) = g.matrix.bandwidths();
            kl = kl.max(l);
            ku = ku.max(u);
        }
        Ok(Self {
            grid: grid.clone(),
            actions: actions.clone(),
            generators,
            costs,
            kl,
            ku,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn actions(&self) -> &ActionSet {
        &self.actions
    }
    pub fn generator(&self, k: usize) -> &DiscreteGenerator {
        &self.generators[k]
    }
    pub fn cost(&self, k: usize, node: usize) -> f64 {
        self.costs[k][node]
    }
    pub fn node_count(&self) -> usize {
        self.grid.node_count()
    }
    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    /// Largest fraction of rows that fell back to the non-monotone cross stencil.
    pub fn violation_fraction(&self) -> f64 {
        self.generators.iter().map(|g| g.violation_fraction()).fold(0.0, f64::max)
    }

    /// `L_k v (i) + c_k(i)`.
    pub fn q(&self, k: usize, i: usize, v: &[f64]) -> f64 {
        self.generators[k].matrix.row_dot(i, v) + self.costs[k][i]
    }

    /// Per-node minimizing action of `L_k v + c_k - δ_k v` (lowest index on ties)
    /// and the minimum itself.
    pub fn greedy(&self, v: &[f64], delta: Option<&[Vec<f64>]>) -> (Vec<usize>, Vec<f64>) {
        let m = self.actions.len();
        let pairs: Vec<(usize, f64)> = (0..self.node_count())
            .into_par_iter()
            .map_init(
                || vec![0.0; m],
                |buf, i| {
                    for (k, slot) in buf.iter_mut().enumerate() {
                        let mut q = self.q(k, i, v);
                        if let Some(d) = delta {
                            q -= d[k][i] * v[i];
                        }
                        *slot = q;
                    }
                    argmin_lowest(buf)
                },
            )
            .collect();
        pairs.into_iter().unzip()
    }

    /// Initial policy: per-node argmin of the running cost.
    pub fn cost_greedy(&self) -> Vec<usize> {
        let m = self.actions.len();
        let mut buf = vec![0.0; m];
        (0..self.node_count())
            .map(|i| {
                for (k, slot) in buf.iter_mut().enumerate() {
                    *slot = self.costs[k][i];
                }
                argmin_lowest(&buf).0
            })
            .collect()
    }

    pub fn policy_cost(&self, policy: &[usize]) -> Vec<f64> {
        policy.iter().enumerate().map(|(i, &k)| self.costs[k][i]).collect()
    }

    /// Band matrix with rows `diag(i) e_i - t L_v(i, ·)`; pinned rows become
    /// identity rows and pinned columns are left out (their values move to the
    /// right-hand side). Entries in column `drop_col` off the diagonal are skipped.
    pub(crate) fn policy_band(
        &self,
        policy: &[usize],
        diag: impl Fn(usize) -> f64,
        t: f64,
        pinned: impl Fn(usize) -> bool,
        drop_col: Option<usize>,
    ) -> BandMatrix {
        let n = self.node_count();
        let mut band = BandMatrix::zeros(n, self.kl, self.ku);
        for i in 0..n {
            if pinned(i) {
                band.add(i, i, 1.0);
                continue;
            }
            band.add(i, i, diag(i));
            for (j, l) in self.generators[policy[i]].matrix.row(i) {
                if pinned(j) || drop_col == Some(j) {
                    continue;
                }
                band.add(i, j, -t * l);
            }
        }
        band
    }
}

/// Evaluates `f(x_i, ζ_k)` into `[action][node]`, rejecting non-finite values.
pub(crate) fn evaluate_on_nodes(
    grid: &Grid,
    actions: &ActionSet,
    name: &'static str,
    f: impl Fn(&[f64], &[f64]) -> f64 + Sync,
) -> Result<Vec<Vec<f64>>> {
    let n = grid.node_count();
    (0..actions.len())
        .map(|k| {
            let u = actions.get(k);
            let mut x = vec![0.0; grid.dim()];
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                grid.node_into(i, &mut x);
                let v = f(&x, u);
                if !v.is_finite() {
                    return Err(Error::ModelEvaluation {
                        coefficient: name,
                        x: x.clone(),
                        action: u.to_vec(),
                    });
                }
                out.push(v);
            }
            Ok(out)
        })
        .collect()
}
