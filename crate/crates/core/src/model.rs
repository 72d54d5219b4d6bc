//! Controlled diffusion models `dX = b(X, U) dt + σ(X) dW` with bounded
//! running cost, and sampled checks of the standing assumptions.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::Grid;

pub type DriftFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;
/// Writes σ(x) row-major into a `d*d` buffer.
pub type DiffusionFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
pub type CostFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

/// Finite set of action vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSet {
    points: Vec<Vec<f64>>,
    labels: Option<Vec<String>>,
}

impl ActionSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::config("/actions", "action set must be nonempty"));
        }
        let m = points[0].len();
        for (i, p) in points.iter().enumerate() {
            if p.len() != m {
                return Err(Error::config(format!("/actions/{i}"), "inconsistent action dimension"));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("/actions/{i}"), "non-finite action"));
            }
            for (j, q) in points[..i].iter().enumerate() {
                if p.iter().zip(q).all(|(a, b)| (a - b).abs() <= 1e-12) {
                    return Err(Error::config(
                        format!("/actions/{i}"),
                        format!("duplicates action {j}"),
                    ));
                }
            }
        }
        Ok(Self { points, labels: None })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::config("/action_labels", "label count mismatch"));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Scalar actions `{v_0, v_1, ...}`.
    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| vec![v]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
    pub fn dim(&self) -> usize {
        self.points[0].len()
    }
    pub fn get(&self, i: usize) -> &[f64] {
        &self.points[i]
    }
    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }
    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.iter().map(|p| p.as_slice())
    }

    pub fn max_norm_sq(&self) -> f64 {
        self.iter()
            .map(|p| p.iter().map(|v| v * v).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Drift, state-dependent diffusion matrix and bounded running cost.
///
/// Coefficients are plain callables; the model is immutable and cheap to
/// clone (shared `Arc`s).
#[derive(Clone)]
pub struct DiffusionModel {
    dim: usize,
    drift: Arc<DriftFn>,
    diffusion: Arc<DiffusionFn>,
    cost: Arc<CostFn>,
    cost_bound: f64,
}

impl fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("dim", &self.dim)
            .field("cost_bound", &self.cost_bound)
            .finish_non_exhaustive()
    }
}

impl DiffusionModel {
    pub fn new(
        dim: usize,
        drift: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        diffusion: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        cost: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        cost_bound: f64,
    ) -> Result<Self> {
        Self::from_parts(dim, Arc::new(drift), Arc::new(diffusion), Arc::new(cost), cost_bound)
    }

    pub fn from_parts(
        dim: usize,
        drift: Arc<DriftFn>,
        diffusion: Arc<DiffusionFn>,
        cost: Arc<CostFn>,
        cost_bound: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("/dim", "dimension must be positive"));
        }
        if !(cost_bound.is_finite() && cost_bound >= 0.0) {
            return Err(Error::config("/cost_bound", "cost bound must be finite and nonnegative"));
        }
        Ok(Self {
            dim,
            drift,
            diffusion,
            cost,
            cost_bound,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn cost_bound(&self) -> f64 {
        self.cost_bound
    }
    pub fn drift_fn(&self) -> &Arc<DriftFn> {
        &self.drift
    }
    pub fn diffusion_fn(&self) -> &Arc<DiffusionFn> {
        &self.diffusion
    }
    pub fn cost_fn(&self) -> &Arc<CostFn> {
        &self.cost
    }

    #[inline]
    pub fn drift_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.drift)(x, u, out)
    }
    #[inline]
    pub fn diffusion_into(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }
    #[inline]
    pub fn cost(&self, x: &[f64], u: &[f64]) -> f64 {
        (self.cost)(x, u)
    }

    pub fn drift(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut b = vec![0.0; self.dim];
        self.drift_into(x, u, &mut b);
        b
    }

    pub fn diffusion(&self, x: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.dim * self.dim];
        self.diffusion_into(x, &mut s);
        s
    }

    /// Same dynamics with a different running cost.
    pub fn with_cost(&self, cost: Arc<CostFn>, cost_bound: f64) -> Result<Self> {
        Self::from_parts(self.dim, self.drift.clone(), self.diffusion.clone(), cost, cost_bound)
    }
}

/// `a = ½σσᵀ`, `b` and `c` at one state/action pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorCoeffs {
    /// Row-major `d*d`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: f64,
}

pub(crate) fn half_sigma_sigma_t(sigma: &[f64], d: usize, out: &mut [f64]) {
    for i in 0..d {
        for j in 0..=i {
            let mut s = 0.0;
            for k in 0..d {
                s += sigma[i * d + k] * sigma[j * d + k];
            }
            out[i * d + j] = 0.5 * s;
            out[j * d + i] = 0.5 * s;
        }
    }
}

pub fn eval_generator_coeffs(model: &DiffusionModel, x: &[f64], u: &[f64]) -> Result<GeneratorCoeffs> {
    let d = model.dim();
    let fail = |coefficient| Error::ModelEvaluation {
        coefficient,
        x: x.to_vec(),
        action: u.to_vec(),
    };
    let sigma = model.diffusion(x);
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(fail("diffusion"));
    }
    let mut a = vec![0.0; d * d];
    half_sigma_sigma_t(&sigma, d, &mut a);
    if a.iter().any(|v| !v.is_finite()) {
        return Err(fail("diffusion"));
    }
    let b = model.drift(x, u);
    if b.iter().any(|v| !v.is_finite()) {
        return Err(fail("drift"));
    }
    let c = model.cost(x, u);
    if !c.is_finite() {
        return Err(fail("cost"));
    }
    Ok(GeneratorCoeffs { a, b, c })
}

pub(crate) fn min_eigenvalue(a: &[f64], d: usize) -> f64 {
    if d == 1 {
        return a[0];
    }
    let m = DMatrix::from_row_slice(d, d, a);
    m.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Sampled diagnostics for local Lipschitz continuity, affine growth,
/// uniform ellipticity and cost boundedness.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub min_eigen_a: f64,
    pub growth_ratio: f64,
    pub lipschitz_estimate: f64,
    pub cost_min: f64,
    pub cost_max: f64,
    pub ellipticity_threshold: f64,
    pub pass_lipschitz: bool,
    pub pass_growth: bool,
    pub pass_ellipticity: bool,
    pub pass_cost_bound: bool,
    pub pass_finite: bool,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.pass_lipschitz && self.pass_growth && self.pass_ellipticity && self.pass_cost_bound && self.pass_finite
    }
}

fn frobenius_sq(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Exhaustive evaluation over every grid node and action point.
pub fn validate_assumptions(
    model: &DiffusionModel,
    grid: &Grid,
    actions: &ActionSet,
    threshold: f64,
) -> AssumptionReport {
    let d = model.dim();
    let mut min_eig = f64::INFINITY;
    let mut growth = 0.0f64;
    let mut lip = 0.0f64;
    let mut cmin = f64::INFINITY;
    let mut cmax = f64::NEG_INFINITY;
    let mut finite = true;

    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    let mut b2 = vec![0.0; d];
    let mut s2 = vec![0.0; d * d];
    let mut y = vec![0.0; d];
    for idx in 0..grid.node_count() {
        let x = grid.node(idx);
        let sigma = model.diffusion(&x);
        if sigma.iter().any(|v| !v.is_finite()) {
            finite = false;
            continue;
        }
        half_sigma_sigma_t(&sigma, d, &mut a);
        min_eig = min_eig.min(min_eigenvalue(&a, d));
        let x_sq: f64 = x.iter().map(|v| v * v).sum();
        let sig_sq = frobenius_sq(&sigma);

        // forward neighbours along each axis give the sampled pairs
        let m = grid.multi_index(idx);
        let mut neighbours = Vec::with_capacity(d);
        for i in 0..d {
            if m[i] + 1 < grid.shape()[i] {
                neighbours.push(idx + grid.strides()[i]);
            }
        }
        for &nb in &neighbours {
            grid.node_into(nb, &mut y);
            let dist = x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            model.diffusion_into(&y, &mut s2);
            let ds = sigma.iter().zip(&s2).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            if ds.is_finite() {
                lip = lip.max(ds / dist);
            }
        }

        for u in actions.iter() {
            model.drift_into(&x, u, &mut b);
            if b.iter().any(|v| !v.is_finite()) {
                finite = false;
                continue;
            }
            let bx: f64 = b.iter().zip(&x).map(|(p, q)| p * q).sum();
            growth = growth.max((bx.max(0.0) + sig_sq) / (1.0 + x_sq));
            for &nb in &neighbours {
                grid.node_into(nb, &mut y);
                model.drift_into(&y, u, &mut b2);
                let dist = x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                let db = b.iter().zip(&b2).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                if db.is_finite() {
                    lip = lip.max(db / dist);
                }
            }
            let c = model.cost(&x, u);
            if !c.is_finite() {
                finite = false;
                continue;
            }
            cmin = cmin.min(c);
            cmax = cmax.max(c);
        }
    }
    AssumptionReport {
        min_eigen_a: min_eig,
        growth_ratio: growth,
        lipschitz_estimate: lip,
        cost_min: cmin,
        cost_max: cmax,
        ellipticity_threshold: threshold,
        pass_lipschitz: lip.is_finite(),
        pass_growth: growth.is_finite(),
        pass_ellipticity: threshold > 0.0 && min_eig >= threshold,
        pass_cost_bound: cmin >= 0.0 && cmax <= model.cost_bound(),
        pass_finite: finite,
    }
}

/// Ready-made coefficient closures used by the built-in model catalogue.
pub mod builtin {
    use super::*;

    /// `b(x, ζ) = -θ (x - μ) + B ζ` with `B` row-major `d × m`.
    pub fn ou_drift(theta: f64, mu: Vec<f64>, gain: Vec<f64>, m: usize) -> Arc<DriftFn> {
        let d = mu.len();
        Arc::new(move |x, u, out| {
            for i in 0..d {
                let mut bi = -theta * (x[i] - mu[i]);
                for k in 0..m {
                    bi += gain[i * m + k] * u[k];
                }
                out[i] = bi;
            }
        })
    }

    /// `b_i(x, ζ) = -A tanh(x_i / w) + (B ζ)_i`.
    pub fn saturating_drift(amplitude: f64, width: f64, d: usize, gain: Vec<f64>, m: usize) -> Arc<DriftFn> {
        Arc::new(move |x, u, out| {
            for i in 0..d {
                let mut bi = -amplitude * (x[i] / width).tanh();
                for k in 0..m {
                    bi += gain[i * m + k] * u[k];
                }
                out[i] = bi;
            }
        })
    }

    /// `b_i(x, ζ) = Σ_k p_ik x_i^k + (B ζ)_i`.
    pub fn polynomial_drift(coeffs: Vec<Vec<f64>>, gain: Vec<f64>, m: usize) -> Arc<DriftFn> {
        let d = coeffs.len();
        Arc::new(move |x, u, out| {
            for i in 0..d {
                let mut bi = horner(&coeffs[i], x[i]);
                for k in 0..m {
                    bi += gain[i * m + k] * u[k];
                }
                out[i] = bi;
            }
        })
    }

    /// Diagonal `σ` with `σ_ii(x) = Σ_k p_ik x_i^k`.
    pub fn diagonal_polynomial_diffusion(coeffs: Vec<Vec<f64>>) -> Arc<DiffusionFn> {
        let d = coeffs.len();
        Arc::new(move |x, out| {
            out.fill(0.0);
            for i in 0..d {
                out[i * d + i] = horner(&coeffs[i], x[i]);
            }
        })
    }

    fn horner(c: &[f64], x: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, &a| acc * x + a)
    }

    pub fn constant_diffusion(sigma: Vec<f64>) -> Arc<DiffusionFn> {
        Arc::new(move |_x, out| out.copy_from_slice(&sigma))
    }

    pub fn constant_cost(k: f64) -> Arc<CostFn> {
        Arc::new(move |_x, _u| k)
    }

    /// `min(w |x|² + r |ζ|², cap)`.
    pub fn capped_quadratic_cost(state_weight: f64, control_weight: f64, cap: f64) -> Arc<CostFn> {
        Arc::new(move |x, u| {
            let xs: f64 = x.iter().map(|v| v * v).sum();
            let us: f64 = u.iter().map(|v| v * v).sum();
            (state_weight * xs + control_weight * us).min(cap)
        })
    }

    pub fn identity_scaled(d: usize, s: f64) -> Vec<f64> {
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            m[i * d + i] = s;
        }
        m
    }

    /// Controlled OU benchmark: `b = -x + ζ`, `σ = √2 I`, `c = min(|x|², cap)`.
    pub fn controlled_ou(d: usize, cap: f64) -> DiffusionModel {
        DiffusionModel::from_parts(
            d,
            ou_drift(1.0, vec![0.0; d], identity_scaled(d, 1.0), d),
            constant_diffusion(identity_scaled(d, std::f64::consts::SQRT_2)),
            capped_quadratic_cost(1.0, 0.0, cap),
            cap,
        )
        .expect("valid built-in model")
    }
}
