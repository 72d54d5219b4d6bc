//! JSON experiment configuration with a strict schema.
//!
//! Errors carry a JSON pointer to the offending key. Overrides of the form
//! `a.b.c=value` apply to the defaults-filled document and must name an
//! existing key.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::family::{PerturbationFamily, PerturbationKind, VasicekParams};
use crate::grid::Grid;
use crate::model::{builtin, ActionSet, CostFn, DiffusionFn, DiffusionModel, DriftFn};
use crate::robustness::{
    Criterion, ErgodicSolver, ExitSpec, ExperimentSpec, LyapunovSpec, McSettings, SolverSettings, StateActionFn, StateFn,
    Thresholds,
};
use crate::stationary::default_alpha_schedule;

fn one() -> f64 {
    1.0
}
fn default_time_steps() -> usize {
    100
}
fn default_n_values() -> Vec<usize> {
    vec![1, 2, 4, 8, 16, 32, 64]
}
fn default_ellipticity() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub criterion: Criterion,
    pub dim: usize,
    pub drift: DriftConfig,
    pub diffusion: DiffusionConfig,
    pub cost: CostConfig,
    /// Defaults to the bound implied by `cost`.
    #[serde(default)]
    pub cost_bound: Option<f64>,
    pub family: FamilyConfig,
    pub grid: GridConfig,
    pub actions: Vec<Vec<f64>>,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default)]
    pub alpha_schedule: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default = "default_time_steps")]
    pub time_steps: usize,
    #[serde(default)]
    pub terminal: StateFnConfig,
    #[serde(default)]
    pub exit: Option<ExitConfig>,
    #[serde(default)]
    pub lyapunov: Option<LyapunovConfig>,
    #[serde(default = "default_n_values")]
    pub n_values: Vec<usize>,
    /// Empty means the grid anchor.
    #[serde(default)]
    pub probes: Vec<Vec<f64>>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub mc: Option<McConfig>,
    #[serde(default)]
    pub thresholds: ThresholdConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ellipticity")]
    pub ellipticity_threshold: f64,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftConfig {
    /// `-θ (x - μ) + B ζ`.
    Ou {
        #[serde(default = "one")]
        theta: f64,
        #[serde(default)]
        mu: Option<Vec<f64>>,
        #[serde(default)]
        gain: Option<Vec<f64>>,
    },
    /// One-dimensional `θ (μ - r) + g ζ`.
    Vasicek {
        #[serde(default = "one")]
        theta: f64,
        #[serde(default)]
        mu: f64,
        #[serde(default = "one")]
        gain: f64,
    },
    /// `-A tanh(x_i / w) + (B ζ)_i`.
    Saturating {
        #[serde(default = "two")]
        amplitude: f64,
        #[serde(default = "two")]
        width: f64,
        #[serde(default)]
        gain: Option<Vec<f64>>,
    },
    /// Per-axis polynomial in `x_i`, coefficients from the constant term up.
    Polynomial {
        coeffs: Vec<Vec<f64>>,
        #[serde(default)]
        gain: Option<Vec<f64>>,
    },
    Constant {
        value: Vec<f64>,
        #[serde(default)]
        gain: Option<Vec<f64>>,
    },
}

fn two() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionConfig {
    /// Either a row-major `d × d` matrix or `scale · I`.
    Constant {
        #[serde(default)]
        sigma: Option<Vec<f64>>,
        #[serde(default)]
        scale: Option<f64>,
    },
    /// Diagonal with per-axis polynomial entries.
    Polynomial { coeffs: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostConfig {
    Constant {
        value: f64,
    },
    /// `min(w |x|² + r |ζ|², cap)`.
    CappedQuadratic {
        #[serde(default = "one")]
        state_weight: f64,
        #[serde(default)]
        control_weight: f64,
        cap: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilyConfig {
    NoiseIto(NoiseItoParams),
    CoeffPolynomial(CoeffPolynomialParams),
    CostRegularized(CostRegularizedParams),
    VasicekMisspec(VasicekMisspecParams),
    /// Only constructible in code; rejected when building from a file.
    Custom(Option<Value>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseItoParams {
    #[serde(default)]
    pub beta0: Option<Vec<f64>>,
    #[serde(default)]
    pub s0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffPolynomialParams {
    #[serde(default)]
    pub k0: usize,
    #[serde(default)]
    pub lower: Option<Vec<f64>>,
    #[serde(default)]
    pub upper: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostRegularizedParams {
    pub eps0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VasicekMisspecParams {
    #[serde(default)]
    pub d_theta: f64,
    #[serde(default)]
    pub d_mu: f64,
    #[serde(default)]
    pub d_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateFnConfig {
    Constant {
        value: f64,
    },
    /// `min(w |x|² + offset, cap)`.
    Quadratic {
        #[serde(default = "one")]
        weight: f64,
        #[serde(default)]
        offset: f64,
        #[serde(default)]
        cap: Option<f64>,
    },
    /// `w Σ|x_i|`.
    Abs {
        #[serde(default = "one")]
        weight: f64,
    },
    /// Centered normal density with variance `v` per axis.
    GaussianDensity {
        #[serde(default = "one")]
        variance: f64,
    },
}

impl Default for StateFnConfig {
    fn default() -> Self {
        Self::Constant { value: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateActionFnConfig {
    Constant {
        value: f64,
    },
    /// `w |x|² + r |ζ|²`.
    Quadratic {
        #[serde(default = "one")]
        state_weight: f64,
        #[serde(default)]
        control_weight: f64,
    },
}

impl Default for StateActionFnConfig {
    fn default() -> Self {
        Self::Constant { value: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitConfig {
    #[serde(default)]
    pub delta: StateActionFnConfig,
    #[serde(default)]
    pub terminal: StateFnConfig,
}

fn default_lyap_fn() -> StateFnConfig {
    StateFnConfig::Quadratic {
        weight: 1.0,
        offset: 0.0,
        cap: None,
    }
}
fn default_lyap_h() -> StateActionFnConfig {
    StateActionFnConfig::Quadratic {
        state_weight: 1.0,
        control_weight: 0.0,
    }
}
fn default_c0_max() -> f64 {
    1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovConfig {
    #[serde(default = "default_lyap_fn")]
    pub function: StateFnConfig,
    #[serde(default = "default_lyap_h")]
    pub h: StateActionFnConfig,
    #[serde(default = "default_c0_max")]
    pub c0_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub ergodic: ErgodicSolver,
    /// Length of the default schedule `0.5 · 2^{-k}`, `k = 0..=schedule_steps`.
    pub schedule_steps: usize,
    pub vanishing_tol: f64,
    pub iterate_improvement: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let s = SolverSettings::default();
        Self {
            tol: s.tol,
            max_iter: s.max_iter,
            ergodic: s.ergodic,
            schedule_steps: 30,
            vanishing_tol: s.vanishing_tol,
            iterate_improvement: s.iterate_improvement,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub dt: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub antithetic: bool,
    pub burn_in: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 10.0,
            n_paths: 1000,
            antithetic: false,
            burn_in: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdConfig {
    pub continuity: Option<f64>,
    pub robustness: Option<f64>,
    pub relative: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            continuity: None,
            robustness: None,
            relative: Thresholds::default().relative,
        }
    }
}

/// Which policy the `evaluate` command applies to the true model: the optimal
/// policy of approximation `n` (default: the largest of `n_values`) or a
/// constant action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub n: Option<usize>,
    pub action: Option<usize>,
}

// ---------------------------------------------------------------- parsing

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut s = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => s.push_str(&format!("/{index}")),
            Segment::Map { key } => s.push_str(&format!("/{key}")),
            Segment::Enum { .. } | Segment::Unknown => {}
        }
    }
    s
}

fn backticked(msg: &str) -> Option<&str> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(&msg[start..start + len])
}

fn config_error(err: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let mut pointer = pointer_of(err.path());
    let msg = err.inner().to_string();
    // point at the missing or unknown key itself
    if msg.starts_with("missing field") || msg.starts_with("unknown field") {
        if let Some(key) = backticked(&msg).filter(|k| !pointer.ends_with(&format!("/{k}"))) {
            pointer.push('/');
            pointer.push_str(key);
        }
    }
    if pointer.is_empty() {
        pointer.push('/');
    }
    Error::config(pointer, msg)
}

fn from_value(v: Value) -> Result<ExperimentConfig> {
    serde_path_to_error::deserialize(v).map_err(config_error)
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::config("/", e.to_string()))?;
    let cfg = from_value(v)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Applies `key.path=value` to the defaults-filled document.
pub fn apply_override(cfg: &ExperimentConfig, assignment: &str) -> Result<ExperimentConfig> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config("/", format!("override `{assignment}` is not key=value")))?;
    let pointer = format!("/{}", key.trim().replace('.', "/"));
    let mut doc = serde_json::to_value(cfg).map_err(|e| Error::config("/", e.to_string()))?;
    let slot = doc
        .pointer_mut(&pointer)
        .ok_or_else(|| Error::config(pointer.clone(), "override names a key that does not exist"))?;
    *slot = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let out = from_value(doc)?;
    out.validate()?;
    Ok(out)
}

/// Reads, overrides and validates a configuration file.
pub fn load_config(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = parse_config(&text)?;
    for o in overrides {
        cfg = apply_override(&cfg, o)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Loads a configuration file straight into an experiment.
pub fn load_experiment(path: &Path) -> Result<ExperimentSpec> {
    load_config(path, &[], None)?.spec()
}

// ---------------------------------------------------------------- building

fn check_len(pointer: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::config(pointer, format!("expected {want} entries, found {got}")));
    }
    Ok(())
}

fn finite(pointer: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::config(pointer, "value must be finite"))
    }
}

fn gain_matrix(pointer: &str, gain: &Option<Vec<f64>>, d: usize, m: usize) -> Result<Vec<f64>> {
    match gain {
        Some(g) => {
            check_len(pointer, g.len(), d * m)?;
            Ok(g.clone())
        }
        None if d == m => Ok(builtin::identity_scaled(d, 1.0)),
        None => Err(Error::config(pointer, "gain is required when action and state dimensions differ")),
    }
}

impl StateFnConfig {
    pub fn build(&self) -> Arc<StateFn> {
        match *self {
            Self::Constant { value } => Arc::new(move |_| value),
            Self::Quadratic { weight, offset, cap } => Arc::new(move |x: &[f64]| {
                let v = weight * x.iter().map(|v| v * v).sum::<f64>() + offset;
                cap.map_or(v, |c| v.min(c))
            }),
            Self::Abs { weight } => Arc::new(move |x: &[f64]| weight * x.iter().map(|v| v.abs()).sum::<f64>()),
            Self::GaussianDensity { variance } => Arc::new(move |x: &[f64]| {
                let norm = (2.0 * std::f64::consts::PI * variance).sqrt();
                x.iter().map(|v| (-v * v / (2.0 * variance)).exp() / norm).product()
            }),
        }
    }
}

impl StateActionFnConfig {
    pub fn build(&self) -> Arc<StateActionFn> {
        match *self {
            Self::Constant { value } => Arc::new(move |_, _| value),
            Self::Quadratic {
                state_weight,
                control_weight,
            } => Arc::new(move |x: &[f64], u: &[f64]| {
                state_weight * x.iter().map(|v| v * v).sum::<f64>() + control_weight * u.iter().map(|v| v * v).sum::<f64>()
            }),
        }
    }

    fn min_value(&self) -> f64 {
        match *self {
            Self::Constant { value } => value,
            Self::Quadratic {
                state_weight,
                control_weight,
            } => state_weight.min(0.0) * f64::INFINITY + control_weight.min(0.0) * f64::INFINITY,
        }
    }
}

impl ExperimentConfig {
    pub fn grid(&self) -> Result<Grid> {
        let g = &self.grid;
        check_len("/grid/upper", g.upper.len(), g.lower.len())?;
        check_len("/grid/shape", g.shape.len(), g.lower.len())?;
        if g.lower.len() != self.dim {
            return Err(Error::config("/grid/lower", "grid dimension differs from dim"));
        }
        Grid::new(&g.lower, &g.upper, &g.shape)
    }

    pub fn actions(&self) -> Result<ActionSet> {
        ActionSet::new(self.actions.clone()).map_err(|e| match e {
            Error::Config { message, .. } => Error::config("/actions", message),
            e => e,
        })
    }

    fn cost(&self) -> Result<(Arc<CostFn>, f64)> {
        let (c, implied) = match self.cost {
            CostConfig::Constant { value } => (builtin::constant_cost(finite("/cost/value", value)?), value.abs()),
            CostConfig::CappedQuadratic {
                state_weight,
                control_weight,
                cap,
            } => {
                if !(state_weight >= 0.0 && control_weight >= 0.0 && cap.is_finite() && cap >= 0.0) {
                    return Err(Error::config("/cost", "weights and cap must be nonnegative and finite"));
                }
                (builtin::capped_quadratic_cost(state_weight, control_weight, cap), cap)
            }
        };
        Ok((c, self.cost_bound.unwrap_or(implied)))
    }

    fn drift(&self, m: usize) -> Result<Arc<DriftFn>> {
        let d = self.dim;
        Ok(match &self.drift {
            DriftConfig::Ou { theta, mu, gain } => {
                let mu = mu.clone().unwrap_or_else(|| vec![0.0; d]);
                check_len("/drift/mu", mu.len(), d)?;
                builtin::ou_drift(*theta, mu, gain_matrix("/drift/gain", gain, d, m)?, m)
            }
            DriftConfig::Vasicek { theta, mu, gain } => {
                if d != 1 || m != 1 {
                    return Err(Error::config("/drift/kind", "vasicek drift is one-dimensional with scalar actions"));
                }
                builtin::ou_drift(*theta, vec![*mu], vec![*gain], 1)
            }
            DriftConfig::Saturating { amplitude, width, gain } => {
                if !(*width > 0.0) {
                    return Err(Error::config("/drift/width", "width must be positive"));
                }
                builtin::saturating_drift(*amplitude, *width, d, gain_matrix("/drift/gain", gain, d, m)?, m)
            }
            DriftConfig::Polynomial { coeffs, gain } => {
                check_len("/drift/coeffs", coeffs.len(), d)?;
                builtin::polynomial_drift(coeffs.clone(), gain_matrix("/drift/gain", gain, d, m)?, m)
            }
            DriftConfig::Constant { value, gain } => {
                check_len("/drift/value", value.len(), d)?;
                let g = gain_matrix("/drift/gain", gain, d, m)?;
                let zero = vec![0.0; d];
                let lin = builtin::ou_drift(0.0, zero, g, m);
                let value = value.clone();
                Arc::new(move |x: &[f64], u: &[f64], out: &mut [f64]| {
                    lin(x, u, out);
                    for (o, v) in out.iter_mut().zip(&value) {
                        *o += v;
                    }
                })
            }
        })
    }

    fn diffusion(&self) -> Result<Arc<DiffusionFn>> {
        let d = self.dim;
        Ok(match &self.diffusion {
            DiffusionConfig::Constant { sigma, scale } => match (sigma, scale) {
                (Some(s), None) => {
                    check_len("/diffusion/sigma", s.len(), d * d)?;
                    builtin::constant_diffusion(s.clone())
                }
                (None, Some(k)) => builtin::constant_diffusion(builtin::identity_scaled(d, *k)),
                _ => return Err(Error::config("/diffusion", "give exactly one of sigma or scale")),
            },
            DiffusionConfig::Polynomial { coeffs } => {
                check_len("/diffusion/coeffs", coeffs.len(), d)?;
                builtin::diagonal_polynomial_diffusion(coeffs.clone())
            }
        })
    }

    /// The true (base) model.
    pub fn base_model(&self) -> Result<DiffusionModel> {
        let m = self.actions()?.dim();
        let (cost, bound) = self.cost()?;
        DiffusionModel::from_parts(self.dim, self.drift(m)?, self.diffusion()?, cost, bound)
    }

    pub fn family(&self) -> Result<PerturbationFamily> {
        let base = self.base_model()?;
        let d = self.dim;
        let kind = match &self.family {
            FamilyConfig::NoiseIto(p) => {
                let beta0 = p.beta0.clone().unwrap_or_else(|| vec![0.0; d]);
                check_len("/family/params/beta0", beta0.len(), d)?;
                PerturbationKind::NoiseIto { beta0, s0: p.s0 }
            }
            FamilyConfig::CoeffPolynomial(p) => {
                let lower = p.lower.clone().unwrap_or_else(|| self.grid.lower.clone());
                let upper = p.upper.clone().unwrap_or_else(|| self.grid.upper.clone());
                check_len("/family/params/lower", lower.len(), d)?;
                check_len("/family/params/upper", upper.len(), d)?;
                PerturbationKind::CoeffPolynomial { k0: p.k0, lower, upper }
            }
            FamilyConfig::CostRegularized(p) => {
                if !(p.eps0 >= 0.0 && p.eps0.is_finite()) {
                    return Err(Error::config("/family/params/eps0", "eps0 must be nonnegative"));
                }
                PerturbationKind::CostRegularized { eps0: p.eps0 }
            }
            FamilyConfig::VasicekMisspec(p) => {
                let DriftConfig::Vasicek { theta, mu, gain } = self.drift else {
                    return Err(Error::config("/drift/kind", "vasicek_misspec needs a vasicek drift"));
                };
                let sigma = match &self.diffusion {
                    DiffusionConfig::Constant { sigma: Some(s), scale: None } if s.len() == 1 => s[0],
                    DiffusionConfig::Constant { sigma: None, scale: Some(k) } => *k,
                    _ => return Err(Error::config("/diffusion", "vasicek_misspec needs a constant scalar diffusion")),
                };
                let params = VasicekParams { theta, mu, sigma, gain };
                let (cost, bound) = self.cost()?;
                return PerturbationFamily::vasicek(params, p.d_theta, p.d_mu, p.d_sigma, cost, bound);
            }
            FamilyConfig::Custom(_) => {
                return Err(Error::config("/family/kind", "custom families can only be built in code"));
            }
        };
        Ok(PerturbationFamily::new(kind, base))
    }

    pub fn alpha_schedule(&self) -> Vec<f64> {
        self.alpha_schedule
            .clone()
            .unwrap_or_else(|| default_alpha_schedule(self.solver.schedule_steps))
    }

    pub fn probes(&self, grid: &Grid) -> Vec<Vec<f64>> {
        if self.probes.is_empty() {
            vec![grid.node(grid.anchor())]
        } else {
            self.probes.clone()
        }
    }

    /// Fully built experiment.
    pub fn spec(&self) -> Result<ExperimentSpec> {
        let grid = self.grid()?;
        let actions = self.actions()?;
        let family = self.family()?;
        let probes = self.probes(&grid);
        let mut spec = ExperimentSpec::new(self.criterion, family, grid, actions, probes);
        spec.n_values = self.n_values.clone();
        spec.alpha = self.alpha;
        spec.horizon = self.horizon;
        spec.time_steps = self.time_steps;
        spec.terminal = Some(self.terminal.build());
        spec.exit = self.exit.as_ref().map(|e| ExitSpec {
            delta: e.delta.build(),
            terminal: e.terminal.build(),
        });
        spec.lyapunov = self.lyapunov.as_ref().map(|l| LyapunovSpec {
            function: l.function.build(),
            h: l.h.build(),
            c0_max: l.c0_max,
        });
        spec.solver = SolverSettings {
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
            ergodic: self.solver.ergodic,
            alpha_schedule: self.alpha_schedule(),
            vanishing_tol: self.solver.vanishing_tol,
            iterate_improvement: self.solver.iterate_improvement,
        };
        spec.mc = self.mc.as_ref().map(|m| McSettings {
            dt: m.dt,
            horizon: m.horizon,
            n_paths: m.n_paths,
            antithetic: m.antithetic,
            burn_in: m.burn_in,
        });
        spec.thresholds = Thresholds {
            continuity: self.thresholds.continuity,
            robustness: self.thresholds.robustness,
            relative: self.thresholds.relative,
        };
        spec.seed = self.seed;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("/dim", "dimension must be positive"));
        }
        if !(self.solver.tol >= 0.0) || self.solver.max_iter == 0 {
            return Err(Error::config("/solver", "tol must be nonnegative and max_iter positive"));
        }
        if let Some(s) = &self.alpha_schedule {
            if s.is_empty() || s.iter().any(|a| !(*a > 0.0)) || s.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::config("/alpha_schedule", "schedule must be positive and strictly decreasing"));
            }
        }
        if let Some(e) = &self.exit {
            if e.delta.min_value() < 0.0 {
                return Err(Error::config("/exit/delta", "discount function must be nonnegative"));
            }
        }
        if let Some(m) = &self.mc {
            if !(m.dt > 0.0) {
                return Err(Error::config("/mc/dt", "dt must be positive"));
            }
            if m.n_paths == 0 {
                return Err(Error::config("/mc/n_paths", "need at least one path"));
            }
            if m.antithetic && m.n_paths % 2 == 1 {
                return Err(Error::config("/mc/n_paths", "antithetic sampling needs an even path count"));
            }
        }
        if let (Some(a), Some(n)) = (self.evaluate.action, self.evaluate.n) {
            let _ = (a, n);
            return Err(Error::config("/evaluate", "give at most one of n or action"));
        }
        if let Some(a) = self.evaluate.action {
            if a >= self.actions.len() {
                return Err(Error::config("/evaluate/action", "action index out of range"));
            }
        }
        if self.evaluate.n == Some(0) {
            return Err(Error::config("/evaluate/n", "index must be >= 1"));
        }
        self.spec().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "criterion": "discounted",
        "dim": 1,
        "drift": {"kind": "ou"},
        "diffusion": {"kind": "constant", "scale": 1.4142135623730951},
        "cost": {"kind": "capped_quadratic", "cap": 4.0},
        "family": {"kind": "cost_regularized", "params": {"eps0": 1.0}},
        "grid": {"lower": [-4.0], "upper": [4.0], "shape": [81]},
        "actions": [[-1.0], [0.0], [1.0]]
    }"#;

    fn pointer(e: Error) -> String {
        match e {
            Error::Config { pointer, .. } => pointer,
            e => panic!("expected a config error, got {e}"),
        }
    }

    #[test]
    fn defaults_filled() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.n_values, vec![1, 2, 4, 8, 16, 32, 64]);
        assert_eq!(c.seed, 0);
        let spec = c.spec().unwrap();
        assert_eq!(spec.probes, vec![vec![0.0]]);
        assert_eq!(spec.family.base.cost_bound(), 4.0);
    }

    #[test]
    fn missing_criterion_is_named() {
        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        v.as_object_mut().unwrap().remove("criterion");
        assert_eq!(pointer(parse_config(&v.to_string()).unwrap_err()), "/criterion");
    }

    #[test]
    fn unknown_keys_rejected_everywhere() {
        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        v["typo"] = Value::from(1);
        assert_eq!(pointer(parse_config(&v.to_string()).unwrap_err()), "/typo");

        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        v["grid"]["spacing"] = Value::from(0.1);
        assert_eq!(pointer(parse_config(&v.to_string()).unwrap_err()), "/grid/spacing");

        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        v["family"]["params"]["eps"] = Value::from(0.1);
        assert!(pointer(parse_config(&v.to_string()).unwrap_err()).starts_with("/family"));

        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        v["drift"]["thetta"] = Value::from(0.1);
        assert!(pointer(parse_config(&v.to_string()).unwrap_err()).starts_with("/drift"));

        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        v["solver"] = serde_json::json!({"tol": 1e-9, "maxiter": 3});
        assert!(pointer(parse_config(&v.to_string()).unwrap_err()).starts_with("/solver"));
    }

    #[test]
    fn inverted_grid_rejected() {
        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        v["grid"]["upper"] = serde_json::json!([-5.0]);
        assert!(pointer(parse_config(&v.to_string()).unwrap_err()).starts_with("/grid"));
    }

    #[test]
    fn overrides() {
        let c = parse_config(MINIMAL).unwrap();
        let z = apply_override(&c, "family.params.eps0=0").unwrap();
        assert_eq!(z.family, FamilyConfig::CostRegularized(CostRegularizedParams { eps0: 0.0 }));
        assert_eq!(pointer(apply_override(&c, "alpha=0").unwrap_err()), "/alpha");
        assert_eq!(pointer(apply_override(&c, "nosuch.key=1").unwrap_err()), "/nosuch/key");
        let s = apply_override(&c, "n_values.6=100").unwrap();
        assert_eq!(s.n_values[6], 100);
        let e = apply_override(&c, "solver.ergodic=vanishing").unwrap();
        assert_eq!(e.solver.ergodic, ErgodicSolver::Vanishing);
    }

    #[test]
    fn round_trip() {
        let full = r#"{
            "criterion": "ergodic_lyapunov",
            "dim": 1,
            "drift": {"kind": "saturating", "amplitude": 2.0, "width": 2.0},
            "diffusion": {"kind": "polynomial", "coeffs": [[1.4, 0.0, 0.05]]},
            "cost": {"kind": "capped_quadratic", "state_weight": 1.0, "control_weight": 0.1, "cap": 9.0},
            "family": {"kind": "coeff_polynomial", "params": {"k0": 2}},
            "grid": {"lower": [-3.0], "upper": [3.0], "shape": [61]},
            "actions": [[-1.0], [1.0]],
            "lyapunov": {"c0_max": 50.0},
            "mc": {"n_paths": 10},
            "probes": [[0.5]],
            "seed": 9
        }"#;
        let a = parse_config(full).unwrap();
        let b = parse_config(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(a, b);
        let a = parse_config(MINIMAL).unwrap();
        let b = parse_config(&serde_json::to_string_pretty(&a).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn custom_family_not_loadable() {
        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        v["family"] = serde_json::json!({"kind": "custom"});
        assert_eq!(pointer(parse_config(&v.to_string()).unwrap_err()), "/family/kind");
    }

    #[test]
    fn vasicek_family_uses_drift_parameters() {
        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        v["drift"] = serde_json::json!({"kind": "vasicek", "theta": 1.0, "mu": 0.0, "gain": 1.0});
        v["family"] = serde_json::json!({"kind": "vasicek_misspec", "params": {"d_theta": 0.5}});
        let spec = parse_config(&v.to_string()).unwrap().spec().unwrap();
        let m = crate::family::make_sequence(&spec.family, 1).unwrap();
        let mut b = [0.0];
        m.drift_into(&[1.0], &[0.0], &mut b);
        assert!((b[0] + 1.5).abs() < 1e-12);
        spec.family.base.diffusion_into(&[0.0], &mut b);
        assert!((b[0] - 2f64.sqrt()).abs() < 1e-12);
        v["drift"] = serde_json::json!({"kind": "ou"});
        assert_eq!(pointer(parse_config(&v.to_string()).unwrap_err()), "/drift/kind");
    }

    #[test]
    fn criterion_specific_requirements() {
        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        v["criterion"] = Value::from("exit");
        assert_eq!(pointer(parse_config(&v.to_string()).unwrap_err()), "/exit");
        v["exit"] = serde_json::json!({"terminal": {"kind": "constant", "value": 1.0}});
        parse_config(&v.to_string()).unwrap();
        v["exit"]["delta"] = serde_json::json!({"kind": "constant", "value": -1.0});
        assert_eq!(pointer(parse_config(&v.to_string()).unwrap_err()), "/exit/delta");
    }
}
