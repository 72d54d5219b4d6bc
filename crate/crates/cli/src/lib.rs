//! Command-line front end for `diffrobust`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use diffrobust::config::{load_config, ExperimentConfig, McConfig};
use diffrobust::family::make_sequence;
use diffrobust::mc::{self, ExitBox, McEstimate, SimConfig};
use diffrobust::model::validate_assumptions;
use diffrobust::parabolic::{solve_finite_horizon_with, evaluate_policy_finite, FiniteHorizonOptions, ParabolicSolution};
use diffrobust::policy::{MarkovPolicy, StationaryPolicy};
use diffrobust::robustness::{emit_report, run_robustness, Criterion, ErgodicSolver, ExperimentSpec};
use diffrobust::stationary::{
    check_lyapunov, check_near_monotone, evaluate_policy_discounted, evaluate_policy_ergodic, evaluate_policy_exit,
    solve_discounted, solve_ergodic_rpi, solve_ergodic_vanishing, solve_exit,
};
use diffrobust::{DiffusionModel, Error, ValueField};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ASSERTION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "diffrobust", version, about = "Robustness experiments for controlled diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the configuration and print the model assumption report.
    Validate(Common),
    /// Solve the HJB problem of the true model.
    Solve(Common),
    /// Evaluate an approximating model's optimal policy (or a constant action) on the true model.
    Evaluate(Common),
    /// Monte Carlo estimates at the probe points.
    Simulate(SimulateArgs),
    /// Full continuity and robustness experiment.
    Robustness(Common),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "diffrobust-out")]
    out: PathBuf,
    /// `key.path=value`, applied in order.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Write per-path values as CSV.
    #[arg(long)]
    dump_paths: bool,
}

/// Runs the command line and returns the process exit code.
pub fn parse_and_dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = std::iter::once("diffrobust".into())
        .chain(argv.into_iter().map(Into::into))
        .collect();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let pool = match thread_pool() {
        Ok(p) => p,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_CONFIG;
        }
    };
    let run = || match cli.command {
        Command::Validate(c) => validate(&c),
        Command::Solve(c) => solve(&c),
        Command::Evaluate(c) => evaluate(&c),
        Command::Simulate(s) => simulate(&s.common, s.dump_paths),
        Command::Robustness(c) => robustness(&c),
    };
    let result = match &pool {
        Some(p) => p.install(run),
        None => run(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            error_code(&e)
        }
    }
}

fn error_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Io(_) => EXIT_CONFIG,
        _ => EXIT_ASSERTION,
    }
}

fn thread_pool() -> Result<Option<rayon::ThreadPool>, String> {
    let Ok(raw) = std::env::var("DIFFROBUST_THREADS") else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("DIFFROBUST_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map(Some)
        .map_err(|e| e.to_string())
}

type Res<T> = diffrobust::Result<T>;

fn load(c: &Common) -> Res<(ExperimentConfig, ExperimentSpec)> {
    let cfg = load_config(&c.config, &c.overrides, c.seed)?;
    let spec = cfg.spec()?;
    Ok((cfg, spec))
}

/// Collects output files and writes the `manifest.json` index.
struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn new(dir: &Path) -> Res<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn text(&mut self, name: &str, body: &str) -> Res<()> {
        fs::write(self.dir.join(name), body)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json(&mut self, name: &str, v: &Value) -> Res<()> {
        let mut s = serde_json::to_string_pretty(v).map_err(std::io::Error::from)?;
        s.push('\n');
        self.text(name, &s)
    }

    fn field(&mut self, stem: &str, f: &ValueField) -> Res<()> {
        let csv = format!("{stem}.csv");
        f.write_csv(fs::File::create(self.dir.join(&csv))?)?;
        self.files.push(csv);
        let bin = format!("{stem}.bin");
        f.write_binary(fs::File::create(self.dir.join(&bin))?)?;
        self.files.push(bin);
        Ok(())
    }

    /// Per-step CSVs plus their own manifest.
    fn steps(&mut self, values: &[ValueField], horizon: f64, dt: f64, policy: Option<&MarkovPolicy>) -> Res<()> {
        let width = values.len().to_string().len();
        let mut names = Vec::with_capacity(values.len());
        for (k, v) in values.iter().enumerate() {
            let name = format!("value_t{k:0width$}.csv");
            v.write_csv(fs::File::create(self.dir.join(&name))?)?;
            self.files.push(name.clone());
            names.push(name);
        }
        let mut m = json!({"T": horizon, "N_t": values.len() - 1, "dt": dt, "files": names});
        if let Some(p) = policy {
            m["policy"] = json!(p.steps());
            m["tie_break"] = json!("lowest-index");
        }
        self.json("steps.json", &m)
    }

    fn finish(mut self, command: &str, cfg: &ExperimentConfig) -> Res<()> {
        let files = std::mem::take(&mut self.files);
        let m = json!({
            "command": command,
            "criterion": cfg.criterion,
            "seed": cfg.seed,
            "files": files,
            "config": cfg,
        });
        let mut s = serde_json::to_string_pretty(&m).map_err(std::io::Error::from)?;
        s.push('\n');
        fs::write(self.dir.join("manifest.json"), s)?;
        Ok(())
    }
}

// ---------------------------------------------------------------- validate

fn validate(c: &Common) -> Res<i32> {
    let (cfg, spec) = load(c)?;
    let thr = cfg.ellipticity_threshold;
    let base = validate_assumptions(&spec.family.base, &spec.grid, &spec.actions, thr);
    println!("config ok: criterion={} family={} nodes={} actions={}", spec.criterion.name(), spec.family.kind.name(), spec.grid.node_count(), spec.actions.len());
    println!("true model: {}", report_line(&base));
    let mut ok = base.all_pass();
    for &n in &spec.n_values {
        let r = validate_assumptions(&make_sequence(&spec.family, n)?, &spec.grid, &spec.actions, thr);
        ok &= r.all_pass();
        if c.verbose > 0 || !r.all_pass() {
            println!("n={n:<4} {}", report_line(&r));
        }
    }
    Ok(if ok { EXIT_OK } else { EXIT_ASSERTION })
}

fn report_line(r: &diffrobust::model::AssumptionReport) -> String {
    format!(
        "min_eig(a)={:.3e} growth={:.3} lipschitz={:.3} cost=[{:.3}, {:.3}] lipschitz:{} growth:{} ellipticity:{} cost_bound:{} finite:{}",
        r.min_eigen_a,
        r.growth_ratio,
        r.lipschitz_estimate,
        r.cost_min,
        r.cost_max,
        pass(r.pass_lipschitz),
        pass(r.pass_growth),
        pass(r.pass_ellipticity),
        pass(r.pass_cost_bound),
        pass(r.pass_finite)
    )
}

fn pass(b: bool) -> &'static str {
    if b {
        "pass"
    } else {
        "FAIL"
    }
}

// ---------------------------------------------------------------- solve

enum Solved {
    Stationary {
        value: ValueField,
        policy: StationaryPolicy,
        sidecar: Value,
    },
    Finite(ParabolicSolution),
}

fn policy_json(p: &StationaryPolicy) -> Value {
    json!(p.indices())
}

fn solve_model(cfg: &ExperimentConfig, spec: &ExperimentSpec, model: &DiffusionModel) -> Res<Solved> {
    let (g, a, s) = (&spec.grid, &spec.actions, &spec.solver);
    Ok(match spec.criterion {
        Criterion::Discounted => {
            let sol = solve_discounted(model, g, a, spec.alpha, s.tol, s.max_iter)?;
            let sidecar = json!({
                "alpha": sol.alpha,
                "residual": sol.residual,
                "iterations": sol.iterations,
                "policy": policy_json(&sol.policy),
                "tie_break": "lowest-index",
            });
            Solved::Stationary {
                value: sol.value,
                policy: sol.policy,
                sidecar,
            }
        }
        Criterion::ErgodicNearMonotone | Criterion::ErgodicLyapunov => {
            let sol = match s.ergodic {
                ErgodicSolver::Rpi => solve_ergodic_rpi(model, g, a, s.tol, s.max_iter)?,
                ErgodicSolver::Vanishing => solve_ergodic_vanishing(model, g, a, &s.alpha_schedule, s.vanishing_tol)?,
            };
            let mut sidecar = json!({
                "rho": sol.rho,
                "rho_vanishing": sol.rho_vanishing,
                "method": sol.method,
                "residual": sol.residual,
                "iterations": sol.iterations,
                "policy": policy_json(&sol.policy),
                "tie_break": "lowest-index",
            });
            if spec.criterion == Criterion::ErgodicNearMonotone {
                sidecar["regime"] = json!("near_monotone");
                sidecar["near_monotone"] = json!(check_near_monotone(model, g, a, sol.rho));
            } else if let Some(l) = &spec.lyapunov {
                sidecar["regime"] = json!("lyapunov");
                sidecar["lyapunov"] = json!(check_lyapunov(model, g, a, &*l.function, &*l.h, l.c0_max));
            }
            Solved::Stationary {
                value: sol.value,
                policy: sol.policy,
                sidecar,
            }
        }
        Criterion::FiniteHorizon => {
            let terminal = spec.terminal_fn();
            let opts = FiniteHorizonOptions {
                iterate_improvement: cfg.solver.iterate_improvement,
            };
            Solved::Finite(solve_finite_horizon_with(model, g, a, spec.horizon, spec.time_steps, &*terminal, opts)?)
        }
        Criterion::Exit => {
            let e = spec.exit.as_ref().expect("validated");
            let sol = solve_exit(model, g, a, &*e.delta, &*e.terminal, s.tol, s.max_iter)?;
            let sidecar = json!({
                "residual": sol.residual,
                "iterations": sol.iterations,
                "policy": policy_json(&sol.policy),
                "tie_break": "lowest-index",
            });
            Solved::Stationary {
                value: sol.value,
                policy: sol.policy,
                sidecar,
            }
        }
    })
}

fn probe_values(spec: &ExperimentSpec, v: &ValueField) -> Value {
    json!(spec
        .probes
        .iter()
        .map(|p| json!({"x": p, "value": v.value_at(p)}))
        .collect::<Vec<_>>())
}

fn solve(c: &Common) -> Res<i32> {
    let (cfg, spec) = load(c)?;
    let mut out = Output::new(&c.out)?;
    match solve_model(&cfg, &spec, &spec.family.base)? {
        Solved::Stationary { value, sidecar, .. } => {
            out.field("value", &value)?;
            let mut side = sidecar;
            side["probes"] = probe_values(&spec, &value);
            out.json("solution.json", &side)?;
            println!(
                "solved {}: residual={:.2e} iterations={} sup|V|={:.6}",
                spec.criterion.name(),
                side["residual"].as_f64().unwrap_or(f64::NAN),
                side["iterations"],
                value.sup_norm()
            );
            if let Some(rho) = side["rho"].as_f64() {
                println!("rho={rho:.10}");
            }
        }
        Solved::Finite(sol) => {
            out.steps(&sol.values, sol.horizon, sol.dt, Some(&sol.policy))?;
            println!(
                "solved finite_horizon: T={} N_t={} sup|psi(0)|={:.6} sup_bound_check={}",
                sol.horizon,
                sol.values.len() - 1,
                sol.values[0].sup_norm(),
                sol.sup_bound_check
            );
        }
    }
    out.finish("solve", &cfg)?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------- evaluate

enum Chosen {
    Stationary(StationaryPolicy),
    Markov(MarkovPolicy),
}

/// The policy selected by the `evaluate` section, with a label.
fn chosen_policy(cfg: &ExperimentConfig, spec: &ExperimentSpec, default_true: bool) -> Res<(Chosen, Value)> {
    if let Some(k) = cfg.evaluate.action {
        let p = StationaryPolicy::constant(spec.grid.clone(), k, &spec.actions)?;
        let chosen = if spec.criterion == Criterion::FiniteHorizon {
            Chosen::Markov(MarkovPolicy::from_stationary(&p, spec.horizon / spec.time_steps as f64, spec.time_steps))
        } else {
            Chosen::Stationary(p)
        };
        return Ok((chosen, json!({"action": k})));
    }
    let (model, label) = match cfg.evaluate.n {
        Some(n) => (make_sequence(&spec.family, n)?, json!({"n": n})),
        None if default_true => (spec.family.base.clone(), json!({"n": null})),
        None => {
            let n = *spec.n_values.last().ok_or_else(|| Error::config("/n_values", "empty"))?;
            (make_sequence(&spec.family, n)?, json!({"n": n}))
        }
    };
    let chosen = match solve_model(cfg, spec, &model)? {
        Solved::Stationary { policy, .. } => Chosen::Stationary(policy),
        Solved::Finite(sol) => Chosen::Markov(sol.policy),
    };
    Ok((chosen, label))
}

fn evaluate(c: &Common) -> Res<i32> {
    let (cfg, spec) = load(c)?;
    let (chosen, label) = chosen_policy(&cfg, &spec, false)?;
    let model = &spec.family.base;
    let a = &spec.actions;
    let mut out = Output::new(&c.out)?;
    let mut side = json!({"criterion": spec.criterion, "policy_source": label});
    match chosen {
        Chosen::Stationary(p) => {
            let v = match spec.criterion {
                Criterion::Discounted => evaluate_policy_discounted(model, a, &p, spec.alpha, None)?,
                Criterion::Exit => {
                    let e = spec.exit.as_ref().expect("validated");
                    evaluate_policy_exit(model, a, &p, &*e.delta, &*e.terminal, None)?
                }
                _ => {
                    let (rho, v) = evaluate_policy_ergodic(model, a, &p, None)?;
                    side["rho"] = json!(rho);
                    println!("rho={rho:.10}");
                    v
                }
            };
            out.field("value", &v)?;
            side["policy"] = policy_json(&p);
            side["probes"] = probe_values(&spec, &v);
            println!("evaluated {} on the true model: sup|J|={:.6}", label, v.sup_norm());
        }
        Chosen::Markov(p) => {
            let terminal = spec.terminal_fn();
            let values = evaluate_policy_finite(model, a, &p, &*terminal, None)?;
            out.steps(&values, p.horizon(), p.dt(), Some(&p))?;
            side["probes"] = probe_values(&spec, &values[0]);
            println!("evaluated {} on the true model: sup|J(0)|={:.6}", label, values[0].sup_norm());
        }
    }
    out.json("evaluate.json", &side)?;
    out.finish("evaluate", &cfg)?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------- simulate

fn simulate(c: &Common, dump_paths: bool) -> Res<i32> {
    let (cfg, spec) = load(c)?;
    let mc_cfg = cfg.mc.clone().unwrap_or_else(McConfig::default);
    let (chosen, label) = chosen_policy(&cfg, &spec, true)?;
    let model = &spec.family.base;
    let a = &spec.actions;
    let mut sim = SimConfig::new(mc_cfg.dt, mc_cfg.horizon, mc_cfg.n_paths, cfg.seed);
    sim.antithetic = mc_cfg.antithetic;
    sim.keep_paths = dump_paths;
    let mut out = Output::new(&c.out)?;
    let mut results = Vec::new();
    for (i, x0) in spec.probes.iter().enumerate() {
        let est: McEstimate = match (&chosen, spec.criterion) {
            (Chosen::Markov(p), _) => {
                let mut s = sim;
                s.horizon = p.horizon();
                let terminal = spec.terminal_fn();
                mc::mc_finite_cost(model, a, p, x0, &*terminal, &s)?
            }
            (Chosen::Stationary(p), Criterion::Discounted) => mc::mc_discounted_cost(model, a, p, x0, spec.alpha, &sim)?,
            (Chosen::Stationary(p), Criterion::Exit) => {
                let e = spec.exit.as_ref().expect("validated");
                mc::mc_exit_cost(model, a, p, x0, &ExitBox::of_grid(&spec.grid), &*e.delta, &*e.terminal, &sim)?
            }
            (Chosen::Stationary(p), _) => mc::mc_ergodic_cost(model, a, p, x0, &sim, mc_cfg.burn_in)?,
        };
        println!(
            "probe {:?}: mean={:.6} std_error={:.3e} n_paths={} clamp_events={}",
            x0, est.mean, est.std_error, est.n_paths, est.clamp_events
        );
        if dump_paths {
            if let Some(v) = &est.path_values {
                let mut s = String::from("path,value\n");
                for (k, x) in v.iter().enumerate() {
                    s.push_str(&format!("{k},{x:e}\n"));
                }
                out.text(&format!("paths_probe{i}.csv"), &s)?;
            }
        }
        results.push(json!({"x": x0, "estimate": est}));
    }
    out.json("estimates.json", &json!({"criterion": spec.criterion, "policy_source": label, "probes": results}))?;
    out.finish("simulate", &cfg)?;
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------- robustness

fn robustness(c: &Common) -> Res<i32> {
    let (cfg, spec) = load(c)?;
    let mut out = Output::new(&c.out)?;
    let (mut report, code) = match run_robustness(&spec) {
        Ok(r) => {
            let code = if r.passed() { EXIT_OK } else { EXIT_ASSERTION };
            (r, code)
        }
        Err(f) => {
            eprintln!("error: {}", f.error);
            let code = error_code(&f.error);
            (f.partial, code)
        }
    };
    report.spec_echo = Some(serde_json::to_value(&cfg).map_err(std::io::Error::from)?);
    for m in &report.per_n {
        println!("{}", report.summary_line(m.n));
    }
    for ch in &report.checks {
        if c.verbose > 0 || !ch.passed {
            println!("check {:<24} {} {}", ch.name, pass(ch.passed), ch.detail);
        }
    }
    let files = emit_report(&report, &c.out)?;
    out.files.extend(files);
    out.finish("robustness", &cfg)?;
    println!("{}", if code == EXIT_OK { "all checks passed" } else { "checks failed" });
    Ok(code)
}
