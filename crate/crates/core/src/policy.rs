//! Grid-indexed deterministic selectors.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::ActionSet;

/// One action index per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryPolicy {
    grid: Grid,
    action_index: Vec<usize>,
}

impl StationaryPolicy {
    pub fn new(grid: Grid, action_index: Vec<usize>, actions: &ActionSet) -> Result<Self> {
        if action_index.len() != grid.node_count() {
            return Err(Error::config("/policy", "policy length does not match node count"));
        }
        if let Some(i) = action_index.iter().position(|&a| a >= actions.len()) {
            return Err(Error::config(format!("/policy/{i}"), "action index out of range"));
        }
        Ok(Self { grid, action_index })
    }

    pub fn constant(grid: Grid, index: usize, actions: &ActionSet) -> Result<Self> {
        let n = grid.node_count();
        Self::new(grid, vec![index; n], actions)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn indices(&self) -> &[usize] {
        &self.action_index
    }
    pub fn at(&self, node: usize) -> usize {
        self.action_index[node]
    }
    /// Action at the grid node nearest `x`.
    pub fn lookup(&self, x: &[f64]) -> usize {
        self.action_index[self.grid.nearest_node(x)]
    }
}

/// Action index per (time step, node); step `k` covers `[k dt, (k+1) dt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovPolicy {
    grid: Grid,
    dt: f64,
    steps: Vec<Vec<usize>>,
}

impl MarkovPolicy {
    pub fn new(grid: Grid, dt: f64, steps: Vec<Vec<usize>>, actions: &ActionSet) -> Result<Self> {
        if steps.is_empty() || !(dt > 0.0) {
            return Err(Error::config("/policy", "need at least one step and dt > 0"));
        }
        for (k, s) in steps.iter().enumerate() {
            if s.len() != grid.node_count() {
                return Err(Error::config(format!("/policy/{k}"), "step length does not match node count"));
            }
            if s.iter().any(|&a| a >= actions.len()) {
                return Err(Error::config(format!("/policy/{k}"), "action index out of range"));
            }
        }
        Ok(Self { grid, dt, steps })
    }

    pub fn from_stationary(p: &StationaryPolicy, dt: f64, time_steps: usize) -> Self {
        Self {
            grid: p.grid.clone(),
            dt,
            steps: vec![p.action_index.clone(); time_steps],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn time_steps(&self) -> usize {
        self.steps.len()
    }
    pub fn horizon(&self) -> f64 {
        self.dt * self.steps.len() as f64
    }
    pub fn step(&self, k: usize) -> &[usize] {
        &self.steps[k]
    }
    pub fn steps(&self) -> &[Vec<usize>] {
        &self.steps
    }

    pub fn step_at(&self, t: f64) -> usize {
        let k = (t / self.dt + 1e-9).floor();
        (k.max(0.0) as usize).min(self.steps.len() - 1)
    }

    pub fn lookup(&self, x: &[f64], t: f64) -> usize {
        self.steps[self.step_at(t)][self.grid.nearest_node(x)]
    }
}

/// Lowest index whose value is within a relative `1e-12` of the minimum.
pub(crate) fn argmin_lowest(values: &[f64]) -> (usize, f64) {
    let m = values.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * (1.0 + m.abs());
    let k = values.iter().position(|&v| v <= m + tol).unwrap_or(0);
    (k, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_to_lowest_index() {
        assert_eq!(argmin_lowest(&[2.0, 1.0, 1.0]).0, 1);
        assert_eq!(argmin_lowest(&[1.0 + 1e-15, 1.0, 3.0]).0, 0);
        assert_eq!(argmin_lowest(&[1.0 + 1e-6, 1.0, 3.0]).0, 1);
    }

    #[test]
    fn markov_step_lookup() {
        let g = Grid::new(&[0.0], &[1.0], &[3]).unwrap();
        let acts = ActionSet::scalar(&[0.0, 1.0]).unwrap();
        let p = MarkovPolicy::new(g, 0.5, vec![vec![0, 0, 0], vec![1, 1, 1]], &acts).unwrap();
        assert_eq!(p.lookup(&[0.2], 0.0), 0);
        assert_eq!(p.lookup(&[0.2], 0.5), 1);
        assert_eq!(p.lookup(&[0.2], 0.99), 1);
        assert_eq!(p.lookup(&[0.2], 5.0), 1);
        assert_eq!(p.horizon(), 1.0);
    }

    #[test]
    fn invalid_indices_rejected() {
        let g = Grid::new(&[0.0], &[1.0], &[3]).unwrap();
        let acts = ActionSet::scalar(&[0.0]).unwrap();
        assert!(StationaryPolicy::new(g.clone(), vec![0, 1, 0], &acts).is_err());
        assert!(StationaryPolicy::new(g, vec![0, 0], &acts).is_err());
    }
}
