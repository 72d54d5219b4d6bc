//! Euler-Maruyama simulation under fixed policies and Monte Carlo cost estimates.
//!
//! Path `p` draws its normals from ChaCha8 stream `p` of the configured seed, so
//! the estimate does not depend on how paths are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::linalg::pairwise_sum;
use crate::model::{ActionSet, DiffusionModel};
use crate::policy::{MarkovPolicy, StationaryPolicy};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub antithetic: bool,
    /// Keep every per-path value in the estimate.
    pub keep_paths: bool,
}

impl SimConfig {
    pub fn new(dt: f64, horizon: f64, n_paths: usize, seed: u64) -> Self {
        Self {
            dt,
            horizon,
            n_paths,
            seed,
            antithetic: false,
            keep_paths: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("/mc/dt", "dt must be positive"));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::config("/mc/horizon", "horizon must be nonnegative"));
        }
        if self.n_paths == 0 {
            return Err(Error::config("/mc/n_paths", "need at least one path"));
        }
        if self.antithetic && self.n_paths % 2 == 1 {
            return Err(Error::config("/mc/n_paths", "antithetic sampling needs an even path count"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt - 1e-9).ceil().max(0.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Bound on the truncated tail `M e^{-αT}/α`; zero for other criteria.
    pub tail_bound: f64,
    pub clamp_events: u64,
    /// Exit runs only: paths still inside the domain at the horizon.
    pub unexited: u64,
    #[serde(skip)]
    pub path_values: Option<Vec<f64>>,
}

/// Action lookup for simulation.
pub trait Control: Sync {
    fn grid(&self) -> &Grid;
    fn action_at(&self, x: &[f64], t: f64) -> usize;
}

impl Control for StationaryPolicy {
    fn grid(&self) -> &Grid {
        StationaryPolicy::grid(self)
    }
    fn action_at(&self, x: &[f64], _t: f64) -> usize {
        self.lookup(x)
    }
}

impl Control for MarkovPolicy {
    fn grid(&self) -> &Grid {
        MarkovPolicy::grid(self)
    }
    fn action_at(&self, x: &[f64], t: f64) -> usize {
        self.lookup(x, t)
    }
}

struct Stepper<'a> {
    model: &'a DiffusionModel,
    actions: &'a ActionSet,
    policy: &'a dyn Control,
    dt: f64,
    sqrt_dt: f64,
    seed: u64,
    reflect: bool,
}

struct PathState {
    path: u64,
    x: Vec<f64>,
    next: Vec<f64>,
    b: Vec<f64>,
    sigma: Vec<f64>,
    xi: Vec<f64>,
    rng: ChaCha8Rng,
    sign: f64,
    clamps: u64,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a DiffusionModel, actions: &'a ActionSet, policy: &'a dyn Control, cfg: &SimConfig, reflect: bool) -> Self {
        Self {
            model,
            actions,
            policy,
            dt: cfg.dt,
            sqrt_dt: cfg.dt.sqrt(),
            seed: cfg.seed,
            reflect,
        }
    }

    /// Path `p` under antithetic sampling uses stream `p / 2`, negated when odd.
    fn start(&self, path: u64, antithetic: bool, x0: &[f64]) -> PathState {
        let d = x0.len();
        let (stream, sign) = if antithetic {
            (path / 2, if path % 2 == 1 { -1.0 } else { 1.0 })
        } else {
            (path, 1.0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        PathState {
            path,
            x: x0.to_vec(),
            next: vec![0.0; d],
            b: vec![0.0; d],
            sigma: vec![0.0; d * d],
            xi: vec![0.0; d],
            rng,
            sign,
            clamps: 0,
        }
    }

    fn action(&self, st: &PathState, t: f64) -> usize {
        self.policy.action_at(&st.x, t)
    }

    /// Euler-Maruyama proposal into `st.next`, reflected into the box if enabled.
    fn propose(&self, st: &mut PathState, u: usize, step: usize) -> Result<()> {
        let d = st.x.len();
        self.model.drift_into(&st.x, self.actions.get(u), &mut st.b);
        self.model.diffusion_into(&st.x, &mut st.sigma);
        for z in st.xi.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut st.rng);
            *z = st.sign * n;
        }
        for i in 0..d {
            let mut noise = 0.0;
            for j in 0..d {
                noise += st.sigma[i * d + j] * st.xi[j];
            }
            st.next[i] = st.x[i] + st.b[i] * self.dt + noise * self.sqrt_dt;
        }
        if st.next.iter().any(|v| !v.is_finite()) {
            return Err(Error::PathBlowup { path: st.path, step: step + 1 });
        }
        if self.reflect {
            let g = self.policy.grid();
            for i in 0..d {
                let (lo, hi) = (g.lower()[i], g.upper()[i]);
                let v = st.next[i];
                if v < lo || v > hi {
                    st.clamps += 1;
                    let r = if v < lo { 2.0 * lo - v } else { 2.0 * hi - v };
                    st.next[i] = r.clamp(lo, hi);
                }
            }
        }
        Ok(())
    }

    fn advance(st: &mut PathState) {
        std::mem::swap(&mut st.x, &mut st.next);
    }
}

struct PathOutcome {
    value: f64,
    clamps: u64,
    unexited: bool,
}

fn check_start(policy: &dyn Control, x0: &[f64]) -> Result<()> {
    let g = policy.grid();
    if x0.len() != g.dim() {
        return Err(Error::config("/x0", "initial state has the wrong dimension"));
    }
    if !g.contains(x0) {
        return Err(Error::config("/x0", "initial state lies outside the grid box"));
    }
    Ok(())
}

/// Runs every path in parallel, then reduces in path order.
fn estimate(cfg: &SimConfig, tail_bound: f64, run: impl Fn(u64) -> Result<PathOutcome> + Sync) -> Result<McEstimate> {
    cfg.validate()?;
    let outcomes: Vec<Result<PathOutcome>> = (0..cfg.n_paths as u64).into_par_iter().map(&run).collect();
    let mut values = Vec::with_capacity(cfg.n_paths);
    let (mut clamps, mut unexited) = (0u64, 0u64);
    for o in outcomes {
        let o = o?;
        values.push(o.value);
        clamps += o.clamps;
        unexited += o.unexited as u64;
    }
    // antithetic pairs are one sample each
    let samples: Vec<f64> = if cfg.antithetic {
        values.chunks(2).map(|p| 0.5 * (p[0] + p[1])).collect()
    } else {
        values.clone()
    };
    let m = samples.len() as f64;
    let mean = pairwise_sum(&samples) / m;
    let std_error = if samples.len() > 1 {
        let dev: Vec<f64> = samples.iter().map(|v| (v - mean) * (v - mean)).collect();
        (pairwise_sum(&dev) / (m - 1.0) / m).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        std_error,
        n_paths: cfg.n_paths,
        seed: cfg.seed,
        tail_bound,
        clamp_events: clamps,
        unexited,
        path_values: cfg.keep_paths.then_some(values),
    })
}

/// States at step times `0, dt, ..., N dt`.
pub fn simulate_path(
    model: &DiffusionModel,
    actions: &ActionSet,
    policy: &dyn Control,
    x0: &[f64],
    cfg: &SimConfig,
    path_index: u64,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    check_start(policy, x0)?;
    let s = Stepper::new(model, actions, policy, cfg, true);
    let mut st = s.start(path_index, cfg.antithetic, x0);
    let n = cfg.steps();
    let mut out = Vec::with_capacity(n + 1);
    out.push(st.x.clone());
    for k in 0..n {
        let u = s.action(&st, k as f64 * cfg.dt);
        s.propose(&mut st, u, k)?;
        Stepper::advance(&mut st);
        out.push(st.x.clone());
    }
    Ok(out)
}

/// Truncated `∫_0^T e^{-αt} c dt` per path.
pub fn mc_discounted_cost(
    model: &DiffusionModel,
    actions: &ActionSet,
    policy: &dyn Control,
    x0: &[f64],
    alpha: f64,
    cfg: &SimConfig,
) -> Result<McEstimate> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config("/alpha", "alpha must be positive"));
    }
    check_start(policy, x0)?;
    let s = Stepper::new(model, actions, policy, cfg, true);
    let n = cfg.steps();
    let decay = (-alpha * cfg.dt).exp();
    let tail = model.cost_bound() * (-alpha * cfg.horizon).exp() / alpha;
    estimate(cfg, tail, |p| {
        let mut st = s.start(p, cfg.antithetic, x0);
        let mut disc = 1.0;
        let mut acc = 0.0;
        for k in 0..n {
            let u = s.action(&st, k as f64 * cfg.dt);
            acc += disc * model.cost(&st.x, actions.get(u)) * cfg.dt;
            disc *= decay;
            s.propose(&mut st, u, k)?;
            Stepper::advance(&mut st);
        }
        Ok(PathOutcome {
            value: acc,
            clamps: st.clamps,
            unexited: false,
        })
    })
}

/// Time average of `c` over `[burn_in, T]` per path.
pub fn mc_ergodic_cost(
    model: &DiffusionModel,
    actions: &ActionSet,
    policy: &dyn Control,
    x0: &[f64],
    cfg: &SimConfig,
    burn_in: f64,
) -> Result<McEstimate> {
    if !(burn_in >= 0.0 && cfg.horizon > burn_in) {
        return Err(Error::config("/mc/burn_in", "horizon must exceed burn-in"));
    }
    check_start(policy, x0)?;
    let s = Stepper::new(model, actions, policy, cfg, true);
    let n = cfg.steps();
    let first = ((burn_in / cfg.dt) - 1e-9).ceil().max(0.0) as usize;
    let counted = n.saturating_sub(first).max(1) as f64;
    estimate(cfg, 0.0, |p| {
        let mut st = s.start(p, cfg.antithetic, x0);
        let mut acc = 0.0;
        for k in 0..n {
            let u = s.action(&st, k as f64 * cfg.dt);
            if k >= first {
                acc += model.cost(&st.x, actions.get(u));
            }
            s.propose(&mut st, u, k)?;
            Stepper::advance(&mut st);
        }
        Ok(PathOutcome {
            value: acc / counted,
            clamps: st.clamps,
            unexited: false,
        })
    })
}

/// `∫_0^T c dt + H(X_T)` per path; the horizon is the policy's.
pub fn mc_finite_cost(
    model: &DiffusionModel,
    actions: &ActionSet,
    policy: &MarkovPolicy,
    x0: &[f64],
    terminal: &(dyn Fn(&[f64]) -> f64 + Sync),
    cfg: &SimConfig,
) -> Result<McEstimate> {
    let t = policy.horizon();
    if (cfg.horizon - t).abs() > 1e-9 * t.max(1.0) {
        return Err(Error::config("/mc/horizon", "simulation horizon must equal the policy horizon"));
    }
    check_start(policy, x0)?;
    let s = Stepper::new(model, actions, policy, cfg, true);
    let n = cfg.steps();
    estimate(cfg, 0.0, |p| {
        let mut st = s.start(p, cfg.antithetic, x0);
        let mut acc = 0.0;
        for k in 0..n {
            let u = s.action(&st, k as f64 * cfg.dt);
            acc += model.cost(&st.x, actions.get(u)) * cfg.dt;
            s.propose(&mut st, u, k)?;
            Stepper::advance(&mut st);
        }
        Ok(PathOutcome {
            value: acc + terminal(&st.x),
            clamps: st.clamps,
            unexited: false,
        })
    })
}

/// Axis-aligned exit domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ExitBox {
    pub fn of_grid(g: &Grid) -> Self {
        Self {
            lower: g.lower().to_vec(),
            upper: g.upper().to_vec(),
        }
    }

    fn inside_open(&self, x: &[f64]) -> bool {
        x.iter().enumerate().all(|(i, &v)| v > self.lower[i] && v < self.upper[i])
    }

    /// Fraction of the segment `a -> b` travelled before first leaving the box.
    fn crossing(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut theta: f64 = 1.0;
        for i in 0..a.len() {
            let dv = b[i] - a[i];
            if b[i] >= self.upper[i] && dv > 0.0 {
                theta = theta.min((self.upper[i] - a[i]) / dv);
            } else if b[i] <= self.lower[i] && dv < 0.0 {
                theta = theta.min((self.lower[i] - a[i]) / dv);
            }
        }
        theta.clamp(0.0, 1.0)
    }
}

/// `∫_0^τ e^{-∫δ} c dt + e^{-∫_0^τ δ} h(X_τ)` per path, with the exit point
/// located by linear interpolation on the step that leaves the box.
#[allow(clippy::too_many_arguments)]
pub fn mc_exit_cost(
    model: &DiffusionModel,
    actions: &ActionSet,
    policy: &dyn Control,
    x0: &[f64],
    domain: &ExitBox,
    delta: &(dyn Fn(&[f64], &[f64]) -> f64 + Sync),
    terminal: &(dyn Fn(&[f64]) -> f64 + Sync),
    cfg: &SimConfig,
) -> Result<McEstimate> {
    cfg.validate()?;
    if x0.len() != domain.lower.len() {
        return Err(Error::config("/x0", "initial state has the wrong dimension"));
    }
    if !domain.inside_open(x0) {
        // starting on or outside the boundary exits at once
        let h = terminal(x0);
        return estimate(cfg, 0.0, |_| {
            Ok(PathOutcome {
                value: h,
                clamps: 0,
                unexited: false,
            })
        });
    }
    let s = Stepper::new(model, actions, policy, cfg, false);
    let n = cfg.steps();
    estimate(cfg, 0.0, |p| {
        let mut st = s.start(p, cfg.antithetic, x0);
        let mut acc = 0.0;
        let mut log_disc = 0.0f64;
        for k in 0..n {
            let u = s.action(&st, k as f64 * cfg.dt);
            let zeta = actions.get(u);
            let c = model.cost(&st.x, zeta);
            let dl = delta(&st.x, zeta);
            s.propose(&mut st, u, k)?;
            if domain.inside_open(&st.next) {
                acc += (-log_disc).exp() * c * cfg.dt;
                log_disc += dl * cfg.dt;
                Stepper::advance(&mut st);
                continue;
            }
            let theta = domain.crossing(&st.x, &st.next);
            let tau_dt = theta * cfg.dt;
            acc += (-log_disc).exp() * c * tau_dt;
            log_disc += dl * tau_dt;
            let hit: Vec<f64> = st
                .x
                .iter()
                .zip(&st.next)
                .enumerate()
                .map(|(i, (a, b))| (a + theta * (b - a)).clamp(domain.lower[i], domain.upper[i]))
                .collect();
            return Ok(PathOutcome {
                value: acc + (-log_disc).exp() * terminal(&hit),
                clamps: 0,
                unexited: false,
            });
        }
        Ok(PathOutcome {
            value: acc,
            clamps: 0,
            unexited: true,
        })
    })
}
