//! Sequences of approximating models converging to a base model.
//!
//! Every built-in family perturbs with an explicit `1/n` rate (or, for the
//! polynomial family, degree `k0 + n`), so the `n`-th model is reproducible.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{ActionSet, CostFn, DiffusionModel};

/// Parameters of `dr = (θ(μ - r) + g ζ) dt + σ dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VasicekParams {
    pub theta: f64,
    pub mu: f64,
    pub sigma: f64,
    pub gain: f64,
}

impl VasicekParams {
    pub fn perturbed(&self, d_theta: f64, d_mu: f64, d_sigma: f64, n: usize) -> Self {
        let k = n as f64;
        Self {
            theta: self.theta + d_theta / k,
            mu: self.mu + d_mu / k,
            sigma: self.sigma + d_sigma / k,
            gain: self.gain,
        }
    }

    pub fn model(&self, cost: Arc<CostFn>, cost_bound: f64) -> Result<DiffusionModel> {
        let p = *self;
        DiffusionModel::from_parts(
            1,
            Arc::new(move |x, u, out| out[0] = p.theta * (p.mu - x[0]) + p.gain * u[0]),
            Arc::new(move |_x, out| out[0] = p.sigma),
            cost,
            cost_bound,
        )
    }
}

pub type CustomSequence = dyn Fn(&DiffusionModel, usize) -> Result<DiffusionModel> + Send + Sync;

#[derive(Clone)]
pub enum PerturbationKind {
    /// Noise replaced by an Itô process `dS = b̂_n dt + σ̂_n dW` with
    /// `b̂_n = β₀/n`, `σ̂_n = (1 + s₀/n) I`.
    NoiseIto { beta0: Vec<f64>, s0: f64 },
    /// `b`, `σ` replaced by tensor Chebyshev interpolants of degree `k0 + n`
    /// on the box `[lower, upper]`.
    CoeffPolynomial { k0: usize, lower: Vec<f64>, upper: Vec<f64> },
    /// `c_n = min(c + (ε₀/n) ζᵀζ, M)`.
    CostRegularized { eps0: f64 },
    /// Vasicek parameters shifted by `(δθ, δμ, δσ)/n`.
    VasicekMisspec {
        params: VasicekParams,
        d_theta: f64,
        d_mu: f64,
        d_sigma: f64,
    },
    Custom(Arc<CustomSequence>),
}

impl fmt::Debug for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NoiseIto { beta0, s0 } => f.debug_struct("NoiseIto").field("beta0", beta0).field("s0", s0).finish(),
            Self::CoeffPolynomial { k0, .. } => f.debug_struct("CoeffPolynomial").field("k0", k0).finish(),
            Self::CostRegularized { eps0 } => f.debug_struct("CostRegularized").field("eps0", eps0).finish(),
            Self::VasicekMisspec { params, .. } => f.debug_struct("VasicekMisspec").field("params", params).finish(),
            Self::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl PerturbationKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::NoiseIto { .. } => "noise_ito",
            Self::CoeffPolynomial { .. } => "coeff_polynomial",
            Self::CostRegularized { .. } => "cost_regularized",
            Self::VasicekMisspec { .. } => "vasicek_misspec",
            Self::Custom(_) => "custom",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PerturbationFamily {
    pub kind: PerturbationKind,
    pub base: DiffusionModel,
}

impl PerturbationFamily {
    pub fn new(kind: PerturbationKind, base: DiffusionModel) -> Self {
        Self { kind, base }
    }

    /// Vasicek family whose base model is built from `params`.
    pub fn vasicek(
        params: VasicekParams,
        d_theta: f64,
        d_mu: f64,
        d_sigma: f64,
        cost: Arc<CostFn>,
        cost_bound: f64,
    ) -> Result<Self> {
        let base = params.model(cost, cost_bound)?;
        Ok(Self {
            kind: PerturbationKind::VasicekMisspec {
                params,
                d_theta,
                d_mu,
                d_sigma,
            },
            base,
        })
    }

    pub fn custom(base: DiffusionModel, f: impl Fn(&DiffusionModel, usize) -> Result<DiffusionModel> + Send + Sync + 'static) -> Self {
        Self {
            kind: PerturbationKind::Custom(Arc::new(f)),
            base,
        }
    }
}

/// The `n`-th approximating model.
pub fn make_sequence(family: &PerturbationFamily, n: usize) -> Result<DiffusionModel> {
    if n == 0 {
        return Err(Error::config("/n", "sequence index must be >= 1"));
    }
    let base = &family.base;
    let d = base.dim();
    let k = n as f64;
    match &family.kind {
        PerturbationKind::NoiseIto { beta0, s0 } => {
            if beta0.len() != d {
                return Err(Error::config("/family/params/beta0", format!("expected {d} components")));
            }
            if beta0.iter().all(|&v| v == 0.0) && *s0 == 0.0 {
                return Ok(base.clone());
            }
            let bhat: Vec<f64> = beta0.iter().map(|v| v / k).collect();
            let scale = 1.0 + s0 / k;
            let drift = base.drift_fn().clone();
            let diff = base.diffusion_fn().clone();
            let diff_b = diff.clone();
            DiffusionModel::from_parts(
                d,
                Arc::new(move |x, u, out| {
                    drift(x, u, out);
                    let mut s = [0.0f64; 16];
                    let mut heap;
                    let sig: &mut [f64] = if d * d <= 16 {
                        &mut s[..d * d]
                    } else {
                        heap = vec![0.0; d * d];
                        &mut heap
                    };
                    diff_b(x, sig);
                    for i in 0..d {
                        let mut acc = 0.0;
                        for j in 0..d {
                            acc += sig[i * d + j] * bhat[j];
                        }
                        out[i] += acc;
                    }
                }),
                Arc::new(move |x, out| {
                    diff(x, out);
                    for v in out.iter_mut() {
                        *v *= scale;
                    }
                }),
                base.cost_fn().clone(),
                base.cost_bound(),
            )
        }
        PerturbationKind::CostRegularized { eps0 } => {
            if *eps0 < 0.0 {
                return Err(Error::config("/family/params/eps0", "must be nonnegative"));
            }
            if *eps0 == 0.0 {
                return Ok(base.clone());
            }
            let eps = eps0 / k;
            let cost = base.cost_fn().clone();
            let bound = base.cost_bound();
            base.with_cost(
                Arc::new(move |x, u| {
                    let us: f64 = u.iter().map(|v| v * v).sum();
                    (cost(x, u) + eps * us).min(bound)
                }),
                bound,
            )
        }
        PerturbationKind::VasicekMisspec {
            params,
            d_theta,
            d_mu,
            d_sigma,
        } => params
            .perturbed(*d_theta, *d_mu, *d_sigma, n)
            .model(base.cost_fn().clone(), base.cost_bound()),
        PerturbationKind::CoeffPolynomial { k0, lower, upper } => {
            if lower.len() != d || upper.len() != d {
                return Err(Error::config("/family/params", "box dimension mismatch"));
            }
            let degree = k0 + n;
            let basis = Arc::new(ChebyshevBasis::new(lower, upper, degree)?);
            let sigma_interp = Arc::new(TensorInterpolant::sample(&basis, d * d, |x, out| {
                base.diffusion_into(x, out)
            }));
            let drift_interp = Arc::new(DriftInterpolants {
                basis: basis.clone(),
                drift: base.drift_fn().clone(),
                dim: d,
                cache: Mutex::new(HashMap::new()),
            });
            DiffusionModel::from_parts(
                d,
                Arc::new(move |x, u, out| drift_interp.eval(x, u, out)),
                Arc::new(move |x, out| sigma_interp.eval(x, out)),
                base.cost_fn().clone(),
                base.cost_bound(),
            )
        }
        PerturbationKind::Custom(f) => f(base, n),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceGap {
    pub drift: f64,
    pub diffusion: f64,
    pub cost: f64,
}

/// Sup-norm distance between the `n`-th model and the base over grid nodes
/// and actions.
pub fn convergence_gap(family: &PerturbationFamily, n: usize, grid: &Grid, actions: &ActionSet) -> Result<ConvergenceGap> {
    let approx = make_sequence(family, n)?;
    let base = &family.base;
    let d = base.dim();
    let mut gap = ConvergenceGap {
        drift: 0.0,
        diffusion: 0.0,
        cost: 0.0,
    };
    let (mut b0, mut b1) = (vec![0.0; d], vec![0.0; d]);
    let (mut s0, mut s1) = (vec![0.0; d * d], vec![0.0; d * d]);
    let mut x = vec![0.0; d];
    for idx in 0..grid.node_count() {
        grid.node_into(idx, &mut x);
        base.diffusion_into(&x, &mut s0);
        approx.diffusion_into(&x, &mut s1);
        let ds = s0.iter().zip(&s1).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        gap.diffusion = gap.diffusion.max(ds);
        for u in actions.iter() {
            base.drift_into(&x, u, &mut b0);
            approx.drift_into(&x, u, &mut b1);
            let db = b0.iter().zip(&b1).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            gap.drift = gap.drift.max(db);
            gap.cost = gap.cost.max((base.cost(&x, u) - approx.cost(&x, u)).abs());
        }
    }
    Ok(gap)
}

/// Chebyshev points of the second kind on a box, with barycentric weights.
#[derive(Debug)]
pub struct ChebyshevBasis {
    nodes: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl ChebyshevBasis {
    pub fn new(lower: &[f64], upper: &[f64], degree: usize) -> Result<Self> {
        if degree == 0 {
            return Err(Error::config("/family/params/k0", "degree must be positive"));
        }
        let nodes = lower
            .iter()
            .zip(upper)
            .map(|(&lo, &hi)| {
                (0..=degree)
                    .map(|k| {
                        let t = (std::f64::consts::PI * k as f64 / degree as f64).cos();
                        0.5 * (lo + hi) + 0.5 * (hi - lo) * t
                    })
                    .collect()
            })
            .collect();
        let weights = (0..=degree)
            .map(|k| {
                let s = if k % 2 == 0 { 1.0 } else { -1.0 };
                if k == 0 || k == degree {
                    0.5 * s
                } else {
                    s
                }
            })
            .collect();
        Ok(Self { nodes, weights })
    }

    fn dim(&self) -> usize {
        self.nodes.len()
    }

    fn points(&self) -> usize {
        self.weights.len()
    }

    /// Barycentric coefficients for evaluating along `axis` at `x`.
    fn coefficients(&self, axis: usize, x: f64, out: &mut [f64]) {
        let nodes = &self.nodes[axis];
        if let Some(k) = nodes.iter().position(|&xk| xk == x) {
            out.fill(0.0);
            out[k] = 1.0;
            return;
        }
        let mut denom = 0.0;
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.weights[k] / (x - nodes[k]);
            denom += *o;
        }
        for o in out.iter_mut() {
            *o /= denom;
        }
    }
}

/// Tensor-product interpolant of a vector-valued function.
#[derive(Debug)]
struct TensorInterpolant {
    basis: Arc<ChebyshevBasis>,
    components: usize,
    /// `values[c + components * node]`, node index axis-0 fastest.
    values: Vec<f64>,
}

impl TensorInterpolant {
    fn sample(basis: &Arc<ChebyshevBasis>, components: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Self {
        let d = basis.dim();
        let p = basis.points();
        let total = p.pow(d as u32);
        let mut values = vec![0.0; total * components];
        let mut x = vec![0.0; d];
        for node in 0..total {
            let mut rem = node;
            for (i, xi) in x.iter_mut().enumerate() {
                *xi = basis.nodes[i][rem % p];
                rem /= p;
            }
            f(&x, &mut values[node * components..(node + 1) * components]);
        }
        Self {
            basis: basis.clone(),
            components,
            values,
        }
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let d = self.basis.dim();
        let p = self.basis.points();
        let nc = self.components;
        // contract one axis at a time, axis 0 first
        let mut coef = vec![0.0; p];
        let mut current = self.values.clone();
        let mut len = current.len() / nc;
        for axis in 0..d {
            self.basis.coefficients(axis, x[axis], &mut coef);
            let next_len = len / p;
            let mut next = vec![0.0; next_len * nc];
            for outer in 0..next_len {
                for k in 0..p {
                    let w = coef[k];
                    if w == 0.0 {
                        continue;
                    }
                    let src = (outer * p + k) * nc;
                    for c in 0..nc {
                        next[outer * nc + c] += w * current[src + c];
                    }
                }
            }
            current = next;
            len = next_len;
        }
        out.copy_from_slice(&current[..nc]);
    }
}

/// Drift interpolants built lazily per distinct action vector.
struct DriftInterpolants {
    basis: Arc<ChebyshevBasis>,
    drift: Arc<crate::model::DriftFn>,
    dim: usize,
    cache: Mutex<HashMap<Vec<u64>, Arc<TensorInterpolant>>>,
}

impl DriftInterpolants {
    fn eval(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let key: Vec<u64> = u.iter().map(|v| v.to_bits()).collect();
        let interp = {
            let mut cache = self.cache.lock().expect("interpolant cache poisoned");
            cache
                .entry(key)
                .or_insert_with(|| {
                    let drift = self.drift.clone();
                    Arc::new(TensorInterpolant::sample(&self.basis, self.dim, |y, o| drift(y, u, o)))
                })
                .clone()
        };
        interp.eval(x, out);
    }
}
