//! Monotone finite-difference approximation of
//! `L_ζ f = trace(a ∇²f) + b(·, ζ)·∇f`.
//!
//! Second derivatives use central differences, mixed derivatives the
//! positivity-preserving 7-point split when the diffusion is diagonally
//! dominant, and the drift is upwinded. At box faces the diffusion stencil is
//! mirrored (zero normal derivative) and outward drift is dropped, so every
//! row, including boundary rows, sums to zero.

use crate::error::Result;
use crate::grid::Grid;
use crate::linalg::CsrMatrix;
use crate::model::{eval_generator_coeffs, DiffusionModel};

const NEG_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryMode {
    Neumann,
}

#[derive(Debug, Clone)]
pub struct DiscreteGenerator {
    pub matrix: CsrMatrix,
    pub action_index: Option<usize>,
    pub boundary_mode: BoundaryMode,
    /// Rows with an off-diagonal entry below `-1e-12`.
    pub violation_rows: Vec<usize>,
    /// Set when more than 0.1% of rows violate monotonicity.
    pub warning: bool,
}

impl DiscreteGenerator {
    pub fn violation_fraction(&self) -> f64 {
        self.violation_rows.len() as f64 / self.matrix.dim() as f64
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        self.matrix.mul_vec(f)
    }
}

/// Neighbour index along `axis` by `step` (±1), mirrored at the faces.
#[inline]
fn mirrored(k: usize, n: usize, step: isize) -> usize {
    let j = k as isize + step;
    if j < 0 {
        1
    } else if j as usize >= n {
        n - 2
    } else {
        j as usize
    }
}

fn offset_index(grid: &Grid, multi: &[usize], steps: &[(usize, isize)]) -> usize {
    let mut idx = grid.flat_index(multi);
    for &(axis, s) in steps {
        let k = multi[axis];
        let j = mirrored(k, grid.shape()[axis], s);
        idx = idx - k * grid.strides()[axis] + j * grid.strides()[axis];
    }
    idx
}

pub fn discretize_generator(model: &DiffusionModel, grid: &Grid, action: &[f64]) -> Result<DiscreteGenerator> {
    discretize_generator_indexed(model, grid, action, None)
}

pub(crate) fn discretize_generator_indexed(
    model: &DiffusionModel,
    grid: &Grid,
    action: &[f64],
    action_index: Option<usize>,
) -> Result<DiscreteGenerator> {
    assert_eq!(model.dim(), grid.dim(), "model and grid dimensions differ");
    let d = grid.dim();
    let h = grid.spacing();
    let shape = grid.shape();
    let n = grid.node_count();
    let mut rows = Vec::with_capacity(n);
    let mut violation_rows = Vec::new();
    let mut x = vec![0.0; d];
    let mut multi = vec![0usize; d];

    for idx in 0..n {
        grid.node_into(idx, &mut x);
        grid.multi_index_into(idx, &mut multi);
        let coeffs = eval_generator_coeffs(model, &x, action)?;
        let a = &coeffs.a;
        let b = &coeffs.b;
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(4 * d * d + 1);

        // diagonal dominance decides between the split and central cross stencils
        let mut dominant = true;
        for i in 0..d {
            let mut off = 0.0;
            for j in 0..d {
                if j != i {
                    off += a[i * d + j].abs() / (h[i] * h[j]);
                }
            }
            if a[i * d + i] / (h[i] * h[i]) < off {
                dominant = false;
            }
        }

        for i in 0..d {
            let hi = h[i];
            let mut w = a[i * d + i] / (hi * hi);
            if dominant {
                for j in 0..d {
                    if j != i {
                        w -= a[i * d + j].abs() / (hi * h[j]);
                    }
                }
            }
            let plus = offset_index(grid, &multi, &[(i, 1)]);
            let minus = offset_index(grid, &multi, &[(i, -1)]);
            entries.push((plus, w));
            entries.push((minus, w));

            let bi = b[i];
            if bi > 0.0 && multi[i] + 1 < shape[i] {
                entries.push((plus, bi / hi));
            } else if bi < 0.0 && multi[i] > 0 {
                entries.push((minus, -bi / hi));
            }
        }

        for i in 0..d {
            for j in i + 1..d {
                let aij = a[i * d + j];
                if aij == 0.0 {
                    continue;
                }
                let hh = h[i] * h[j];
                if dominant {
                    let w = aij.abs() / hh;
                    let (si, sj) = if aij > 0.0 { (1, 1) } else { (1, -1) };
                    entries.push((offset_index(grid, &multi, &[(i, si), (j, sj)]), w));
                    entries.push((offset_index(grid, &multi, &[(i, -si), (j, -sj)]), w));
                } else {
                    // 2 a_ij ∂_ij with the 4-point central stencil
                    let w = aij / (2.0 * hh);
                    entries.push((offset_index(grid, &multi, &[(i, 1), (j, 1)]), w));
                    entries.push((offset_index(grid, &multi, &[(i, -1), (j, -1)]), w));
                    entries.push((offset_index(grid, &multi, &[(i, 1), (j, -1)]), -w));
                    entries.push((offset_index(grid, &multi, &[(i, -1), (j, 1)]), -w));
                }
            }
        }

        // merge, then close the row so it annihilates constants
        entries.sort_by_key(|&(c, _)| c);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len() + 1);
        for (c, v) in entries {
            if c == idx {
                continue;
            }
            match merged.last_mut() {
                Some((lc, lv)) if *lc == c => *lv += v,
                _ => merged.push((c, v)),
            }
        }
        merged.retain(|&(_, v)| v != 0.0);
        let mut off_sum = 0.0;
        let mut violated = false;
        for &(_, v) in &merged {
            off_sum += v;
            if v < -NEG_TOL {
                violated = true;
            }
        }
        if violated {
            violation_rows.push(idx);
        }
        merged.push((idx, -off_sum));
        rows.push(merged);
    }
    let warning = violation_rows.len() as f64 > 1e-3 * n as f64;
    Ok(DiscreteGenerator {
        matrix: CsrMatrix::from_rows(n, rows),
        action_index,
        boundary_mode: BoundaryMode::Neumann,
        violation_rows,
        warning,
    })
}

/// One generator per action, in action order.
pub fn assemble_all(model: &DiffusionModel, grid: &Grid, actions: &crate::model::ActionSet) -> Result<Vec<DiscreteGenerator>> {
    use rayon::prelude::*;
    (0..actions.len())
        .into_par_iter()
        .map(|k| discretize_generator_indexed(model, grid, actions.get(k), Some(k)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin;
    use proptest::prelude::*;

    fn model_1d(a: f64, b: f64) -> DiffusionModel {
        let s = (2.0 * a).sqrt();
        DiffusionModel::new(1, move |_x, _u, o| o[0] = b, move |_x, sg| sg[0] = s, |_x, _u| 0.0, 1.0).unwrap()
    }

    #[test]
    fn laplacian_stencil() {
        let g = Grid::new(&[0.0], &[1.0], &[11]).unwrap();
        let h = 0.1;
        let gen = discretize_generator(&model_1d(1.0, 0.0), &g, &[0.0]).unwrap();
        let m = &gen.matrix;
        assert!((m.get(5, 4) - 1.0 / (h * h)).abs() < 1e-9);
        assert!((m.get(5, 6) - 1.0 / (h * h)).abs() < 1e-9);
        assert!((m.get(5, 5) + 2.0 / (h * h)).abs() < 1e-9);
        assert!(gen.violation_rows.is_empty());
    }

    #[test]
    fn upwind_stencil_by_hand() {
        // a = 1/2, b = +1, h = 1: left 0.5, right 1.5, diagonal -2
        let g = Grid::new(&[0.0], &[4.0], &[5]).unwrap();
        let gen = discretize_generator(&model_1d(0.5, 1.0), &g, &[0.0]).unwrap();
        let m = &gen.matrix;
        assert_eq!(m.get(2, 1), 0.5);
        assert_eq!(m.get(2, 3), 1.5);
        assert_eq!(m.get(2, 2), -2.0);
        // outward drift dropped at the upper face, diffusion mirrored
        assert_eq!(m.get(4, 3), 1.0);
        assert_eq!(m.get(4, 4), -1.0);
    }

    #[test]
    fn constants_are_annihilated_everywhere() {
        let g = Grid::new(&[-3.0, -2.0], &[3.0, 2.5], &[13, 10]).unwrap();
        let model = DiffusionModel::new(
            2,
            |x, u, o| {
                o[0] = -x[0] + u[0];
                o[1] = x[0] - 0.5 * x[1];
            },
            |x, s| s.copy_from_slice(&[1.0 + 0.1 * x[1].cos(), 0.3, 0.2, 1.2]),
            |_x, _u| 0.0,
            0.0,
        )
        .unwrap();
        let gen = discretize_generator(&model, &g, &[0.7]).unwrap();
        let ones = vec![1.0; g.node_count()];
        let l1 = gen.apply(&ones);
        assert!(l1.iter().all(|v| v.abs() <= 1e-9));
        assert!(gen.violation_rows.is_empty());
        for i in 0..g.node_count() {
            for (j, v) in gen.matrix.row(i) {
                if j == i {
                    assert!(v <= 0.0);
                } else {
                    assert!(v >= -1e-12);
                }
            }
        }
    }

    #[test]
    fn non_dominant_cross_term_is_flagged() {
        let g = Grid::new(&[-1.0, -1.0], &[1.0, 1.0], &[9, 9]).unwrap();
        // a_11 = 0.5 < a_12 = 0.6
        let model = DiffusionModel::new(
            2,
            |_x, _u, o| o.fill(0.0),
            |_x, s| s.copy_from_slice(&[1.0, 0.0, 1.2, 0.1]),
            |_x, _u| 0.0,
            0.0,
        )
        .unwrap();
        let gen = discretize_generator(&model, &g, &[0.0]).unwrap();
        assert!(!gen.violation_rows.is_empty());
        assert!(gen.warning);
        let l1 = gen.apply(&vec![1.0; g.node_count()]);
        assert!(l1.iter().all(|v| v.abs() <= 1e-9));
    }

    #[test]
    fn quadratic_consistency() {
        // a = ½ I, b = 0: L |x|² = d; central differences are exact for quadratics
        for d in [1usize, 2] {
            let model = builtin::controlled_ou(d, 1.0);
            let zero_drift = DiffusionModel::from_parts(
                d,
                std::sync::Arc::new(|_x: &[f64], _u: &[f64], o: &mut [f64]| o.fill(0.0)),
                builtin::constant_diffusion(builtin::identity_scaled(d, 1.0)),
                model.cost_fn().clone(),
                1.0,
            )
            .unwrap();
            let mut errs = vec![];
            for shape in [11usize, 21] {
                let g = Grid::new(&vec![-1.0; d], &vec![1.0; d], &vec![shape; d]).unwrap();
                let gen = discretize_generator(&zero_drift, &g, &vec![0.0; d]).unwrap();
                let f: Vec<f64> = g.nodes().map(|x| x.iter().map(|v| v * v).sum()).collect();
                let lf = gen.apply(&f);
                let err = (0..g.node_count())
                    .filter(|&i| !g.is_boundary(i))
                    .map(|i| (lf[i] - d as f64).abs())
                    .fold(0.0, f64::max);
                errs.push((g.spacing()[0], err));
            }
            // fit C on the coarse grid, check the fine grid obeys C h²
            let c = errs[0].1 / (errs[0].0 * errs[0].0) + 1e-6;
            assert!(errs[1].1 <= c * errs[1].0 * errs[1].0);
            assert!(errs[1].1 < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn monotone_and_conservative_1d(b in -5.0f64..5.0, a in 0.05f64..3.0, shape in 3usize..40) {
            let g = Grid::new(&[-2.0], &[2.0], &[shape]).unwrap();
            let gen = discretize_generator(&model_1d(a, b), &g, &[0.0]).unwrap();
            prop_assert!(gen.violation_rows.is_empty());
            for i in 0..g.node_count() {
                prop_assert!(gen.matrix.row_sum(i).abs() <= 1e-9 * (1.0 + gen.matrix.get(i, i).abs()));
                prop_assert!(gen.matrix.get(i, i) <= 0.0);
            }
        }
    }
}
