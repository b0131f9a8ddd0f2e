//! Subcommand pipelines behind the `risk-ctmdp` binary: each reads a resolved
//! configuration, runs the library and writes CSV artifacts.
//!
//! Floats are written as `{:.16e}` (17 significant digits) so every value
//! round-trips exactly.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, LoadedConfig, ResolvedConfig};
use crate::hjb::{extract_policy, residual_quantile, solve_hjb, PolicyField};
use crate::lyapunov::check_certificate;
use crate::model::{validate_kernel, ControlledChain};
use crate::report::Violation;
use crate::simulate::{
    certified_cost_cap, estimate_discounted_exponential, map_trajectories, tail_horizon,
    MarkovControl,
};
use crate::verify::{run_analytic_suite, verify_model, CheckEntry, CheckReport, FkOptions, VerifyPlan};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "RISK_CTMDP_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Certify,
    Solve,
    Simulate,
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Certify => "certify",
            Command::Solve => "solve",
            Command::Simulate => "simulate",
            Command::Verify => "verify",
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("{command} failed: {message}")]
    Pipeline {
        command: &'static str,
        message: String,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl RunError {
    /// 2 for configuration errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 1,
        }
    }

    fn pipeline(command: Command, e: impl std::fmt::Display) -> Self {
        RunError::Pipeline {
            command: command.name(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub artifacts: Vec<PathBuf>,
    /// Human-readable result lines for stdout.
    pub summary: Vec<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }
}

/// Command-line settings layered over the configuration document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// Main tolerance of the subcommand: certificate tolerance for `certify`,
    /// schedule tolerance for `solve` and `simulate`, oracle tolerance for `verify`.
    pub tol: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub theta_nodes: Option<usize>,
    pub delta_list: Option<Vec<f64>>,
    pub n_list: Option<Vec<f64>>,
    pub theta: Option<f64>,
    pub x0: Option<usize>,
    pub num_traj: Option<usize>,
    pub horizon: Option<f64>,
    pub tail_eps: Option<f64>,
    pub policy_file: Option<PathBuf>,
    pub dump_trajectories: bool,
}

impl Overrides {
    pub fn apply(&self, cmd: Command, loaded: &mut LoadedConfig) {
        let c = &mut loaded.config;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(t) = self.tol {
            match cmd {
                Command::Certify => c.tolerances.certificate = Some(t),
                Command::Solve | Command::Simulate => c.tolerances.schedule = t,
                Command::Verify => c.tolerances.oracle = t,
            }
        }
        if let Some(n) = self.theta_nodes {
            c.theta_grid = n;
        }
        if let Some(d) = &self.delta_list {
            c.schedules.delta_list = Some(d.clone());
        }
        if let Some(n) = &self.n_list {
            c.schedules.n_list = Some(n.clone());
        }
        if let Some(t) = self.theta {
            c.simulate.theta = t;
        }
        if let Some(x) = self.x0 {
            c.simulate.x0 = x;
        }
        if let Some(n) = self.num_traj {
            match cmd {
                Command::Verify => c.verify.num_traj = n,
                _ => c.simulate.num_traj = n,
            }
        }
        if let Some(h) = self.horizon {
            c.simulate.horizon = Some(h);
        }
        if let Some(e) = self.tail_eps {
            c.simulate.tail_eps = e;
        }
        if let Some(p) = &self.policy_file {
            let abs = if p.is_absolute() {
                p.clone()
            } else {
                std::env::current_dir()
                    .map(|d| d.join(p))
                    .unwrap_or_else(|_| p.clone())
            };
            c.simulate.policy_file = Some(abs);
        }
        if self.dump_trajectories {
            c.simulate.dump_trajectories = true;
        }
    }
}

/// Output directory: the flag, then the configuration's `output_dir`, then
/// [`OUTPUT_DIR_ENV`], then the working directory.
pub fn output_dir(flag: Option<&Path>, loaded: &LoadedConfig) -> PathBuf {
    if let Some(f) = flag {
        return f.to_path_buf();
    }
    if let Some(d) = &loaded.config.output_dir {
        return if d.is_absolute() {
            d.clone()
        } else {
            loaded.base_dir.join(d)
        };
    }
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("."),
    }
}

/// Loads `config_path`, applies `overrides` and runs `cmd`.
pub fn execute(config_path: &Path, cmd: Command, overrides: &Overrides) -> Result<Outcome, RunError> {
    let mut loaded = LoadedConfig::from_file(config_path)?;
    overrides.apply(cmd, &mut loaded);
    let resolved = loaded.resolve()?;
    let out = output_dir(overrides.out_dir.as_deref(), &loaded);
    run(&resolved, cmd, &out)
}

pub fn run(cfg: &ResolvedConfig, cmd: Command, out_dir: &Path) -> Result<Outcome, RunError> {
    fs::create_dir_all(out_dir).map_err(|e| RunError::Io {
        path: out_dir.display().to_string(),
        message: e.to_string(),
    })?;
    match cmd {
        Command::Certify => certify(cfg, out_dir),
        Command::Solve => solve(cfg, out_dir),
        Command::Simulate => simulate(cfg, out_dir),
        Command::Verify => verify(cfg, out_dir),
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

struct Table {
    path: PathBuf,
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new(dir: &Path, name: &str, header: &[&str]) -> Result<Self, RunError> {
        let mut t = Self {
            path: dir.join(name),
            writer: csv::Writer::from_writer(Vec::new()),
        };
        t.row(header)?;
        Ok(t)
    }

    fn row<S: AsRef<[u8]>>(&mut self, fields: &[S]) -> Result<(), RunError> {
        self.writer.write_record(fields).map_err(|e| self.io(e))
    }

    fn io(&self, e: impl std::fmt::Display) -> RunError {
        RunError::Io {
            path: self.path.display().to_string(),
            message: e.to_string(),
        }
    }

    /// Writes the file and returns its path and contents.
    fn finish(self) -> Result<(PathBuf, String), RunError> {
        let path = self.path.clone();
        let bytes = self
            .writer
            .into_inner()
            .map_err(|e| RunError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        fs::write(&path, &bytes).map_err(|e| RunError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok((path, String::from_utf8_lossy(&bytes).into_owned()))
    }
}

fn violation_row(v: &Violation) -> Vec<String> {
    vec![
        v.check_id.to_string(),
        fmt_f64(v.coord),
        v.action.map(|a| a.to_string()).unwrap_or_default(),
        fmt_f64(v.lhs),
        fmt_f64(v.rhs),
        fmt_f64(v.margin()),
    ]
}

fn certify(cfg: &ResolvedConfig, dir: &Path) -> Result<Outcome, RunError> {
    let alpha = cfg.model.alpha();
    let c = &cfg.cert;
    let kernel = validate_kernel(&cfg.model, cfg.hjb.kernel_tol);
    let report = check_certificate(&cfg.model, c, cfg.certificate_tol)
        .map_err(|e| RunError::pipeline(Command::Certify, e))?;

    let mut t = Table::new(dir, "certificate.csv", &["check_id", "x", "a", "lhs", "rhs", "margin"])?;
    let constants: [(&str, f64, Option<f64>); 8] = [
        ("alpha", alpha, None),
        ("rho0", c.rho0, None),
        ("m0", c.m0, None),
        ("l0", c.l0, None),
        ("rho1", c.rho1, Some(alpha.min(alpha * alpha / c.rho0))),
        ("rho2", c.rho2, Some(alpha)),
        ("b1", c.b1, None),
        ("m1", c.m1, None),
    ];
    for (name, value, bound) in constants {
        t.row(&[
            format!("const_{name}"),
            String::new(),
            String::new(),
            fmt_f64(value),
            bound.map(fmt_f64).unwrap_or_default(),
            bound.map(|b| fmt_f64(b - value)).unwrap_or_default(),
        ])?;
    }
    for v in kernel.violations.iter().chain(&report.violations) {
        t.row(&violation_row(v))?;
    }
    let (path, text) = t.finish()?;
    let passed = kernel.is_empty() && report.is_empty();
    let mut summary: Vec<String> = text.lines().map(str::to_string).collect();
    summary.push(format!(
        "certificate {}: {} violation(s) at tolerance {:e}",
        if passed { "holds" } else { "fails" },
        kernel.len() + report.len(),
        cfg.certificate_tol
    ));
    Ok(Outcome {
        passed,
        artifacts: vec![path],
        summary,
    })
}

fn solve(cfg: &ResolvedConfig, dir: &Path) -> Result<Outcome, RunError> {
    let (phi, rep) = solve_hjb(&cfg.model, &cfg.cert, &cfg.schedules, &cfg.grid, &cfg.hjb)
        .map_err(|e| RunError::pipeline(Command::Solve, e))?;
    let policy = extract_policy(&phi, &cfg.model);
    let space = cfg.model.space();

    let mut t = Table::new(
        dir,
        "value.csv",
        &["theta", "state_index", "state_coord", "phi", "action_index"],
    )?;
    for (i, &theta) in phi.nodes().iter().enumerate() {
        for x in 0..phi.num_states() {
            t.row(&[
                fmt_f64(theta),
                x.to_string(),
                fmt_f64(space.coord(x)),
                fmt_f64(phi.get(i, x)),
                policy.action(i, x).to_string(),
            ])?;
        }
    }
    let (value_path, _) = t.finish()?;

    let passed = rep.monitors_pass(cfg.hjb.monotone_tol);
    let m = &rep.monitors;
    let mut r = Table::new(dir, "solve_report.csv", &["key", "value"])?;
    let mut kv = |k: String, v: String| r.row(&[k, v]);
    kv("total_picard_iterations".into(), rep.total_picard_iterations().to_string())?;
    kv("residual".into(), fmt_f64(rep.residual))?;
    kv(
        "residual_q95".into(),
        fmt_f64(residual_quantile(&phi, &cfg.model, 0.95)),
    )?;
    for (k, l) in rep.levels.iter().enumerate() {
        kv(format!("level{k}_n"), fmt_f64(l.level))?;
        kv(format!("level{k}_q_bar"), fmt_f64(l.q_bar))?;
        kv(format!("level{k}_num_deltas"), l.deltas.len().to_string())?;
        kv(
            format!("level{k}_picard_iterations"),
            l.picard_iterations.iter().sum::<usize>().to_string(),
        )?;
        kv(
            format!("level{k}_last_delta_diff"),
            l.delta_diffs.last().map_or(String::new(), |d| fmt_f64(*d)),
        )?;
        kv(format!("level{k}_converged"), l.converged.to_string())?;
    }
    for (k, d) in rep.level_diffs.iter().enumerate() {
        kv(format!("level_diff{k}"), fmt_f64(*d))?;
    }
    kv("delta_monotone_violation".into(), fmt_f64(m.delta_monotone_violation))?;
    kv("level_monotone_violation".into(), fmt_f64(m.level_monotone_violation))?;
    kv("theta_monotone_violation".into(), fmt_f64(m.theta_monotone_violation))?;
    kv("truncated_lipschitz_ratio".into(), fmt_f64(m.truncated_lipschitz_ratio))?;
    kv("limit_lipschitz_ratio".into(), fmt_f64(m.limit_lipschitz_ratio))?;
    kv("enclosure_violations".into(), m.enclosure_violations.to_string())?;
    kv("monitors_pass".into(), passed.to_string())?;
    let (report_path, _) = r.finish()?;

    let last = phi.nodes().len() - 1;
    let x_mid = space.nearest(0.0);
    Ok(Outcome {
        passed,
        artifacts: vec![value_path, report_path],
        summary: vec![
            format!(
                "phi(1, x = {}) = {}; {} Picard sweeps; residual {:e}",
                space.coord(x_mid),
                phi.get(last, x_mid),
                rep.total_picard_iterations(),
                rep.residual
            ),
            format!("monitors {}", if passed { "pass" } else { "FAIL" }),
        ],
    })
}

/// Reads the policy columns of a `value.csv` written by `solve`.
pub fn read_policy_csv(path: &Path, num_states: usize) -> Result<PolicyField, String> {
    let name = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| format!("{name}: {e}"))?;
    let headers = rdr.headers().map_err(|e| format!("{name}: {e}"))?.clone();
    let col = |h: &str| {
        headers
            .iter()
            .position(|c| c == h)
            .ok_or_else(|| format!("{name}: missing column `{h}`"))
    };
    let (ct, cx, ca) = (col("theta")?, col("state_index")?, col("action_index")?);
    let mut nodes: Vec<f64> = Vec::new();
    let mut actions = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format!("{name}: {e}"))?;
        let line = i + 2;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let theta: f64 = field(ct)
            .parse()
            .map_err(|_| format!("{name} line {line}: bad theta {:?}", field(ct)))?;
        let x: usize = field(cx)
            .parse()
            .map_err(|_| format!("{name} line {line}: bad state_index {:?}", field(cx)))?;
        let a: usize = field(ca)
            .parse()
            .map_err(|_| format!("{name} line {line}: bad action_index {:?}", field(ca)))?;
        if nodes.last() != Some(&theta) {
            nodes.push(theta);
        }
        let expected = actions.len() % num_states;
        if x != expected {
            return Err(format!(
                "{name} line {line}: expected state_index {expected}, got {x}"
            ));
        }
        actions.push(a);
    }
    PolicyField::new(nodes, num_states, actions).map_err(|e| format!("{name}: {e}"))
}

fn simulate(cfg: &ResolvedConfig, dir: &Path) -> Result<Outcome, RunError> {
    let s = &cfg.simulate;
    let model = &cfg.model;
    let policy = match &s.policy_file {
        Some(p) => read_policy_csv(p, model.num_states()).map_err(|m| ConfigError {
            file: p.display().to_string(),
            field: "simulate.policy_file".into(),
            message: m,
        })?,
        None => {
            let (phi, _) = solve_hjb(model, &cfg.cert, &cfg.schedules, &cfg.grid, &cfg.hjb)
                .map_err(|e| RunError::pipeline(Command::Simulate, e))?;
            extract_policy(&phi, model)
        }
    };
    if !policy.is_admissible(model) {
        return Err(ConfigError {
            file: s
                .policy_file
                .as_ref()
                .map_or_else(|| "<solve>".into(), |p| p.display().to_string()),
            field: "simulate.policy_file".into(),
            message: "policy does not match the model's states and actions".into(),
        }
        .into());
    }
    let control = MarkovControl::new(policy, s.theta, model.alpha())
        .map_err(|e| RunError::pipeline(Command::Simulate, e))?;
    let horizon = match s.horizon {
        Some(h) => h,
        None => {
            let cap = certified_cost_cap(model, &cfg.cert)
                .map_err(|e| RunError::pipeline(Command::Simulate, e))?;
            tail_horizon(s.theta, model.alpha(), cap, s.tail_eps)
        }
    };
    let est = estimate_discounted_exponential(
        model, &control, s.x0, s.theta, 1.0, horizon, s.num_traj, cfg.seed,
    )
    .map_err(|e| RunError::pipeline(Command::Simulate, e))?;

    let mut t = Table::new(dir, "estimate.csv", &["estimate", "std_error", "num_samples", "horizon"])?;
    t.row(&[
        fmt_f64(est.mean),
        fmt_f64(est.std_error),
        est.num_samples.to_string(),
        fmt_f64(est.horizon),
    ])?;
    let (path, _) = t.finish()?;
    let mut artifacts = vec![path];

    if s.dump_trajectories {
        let rows = map_trajectories(
            model,
            &control,
            s.x0,
            horizon,
            s.num_traj,
            cfg.seed,
            |_, traj| {
                Ok((
                    traj.discounted_cost(model),
                    traj.jump_times.len(),
                    *traj.states.last().expect("initial state"),
                ))
            },
        )
        .map_err(|e| RunError::pipeline(Command::Simulate, e))?;
        let mut d = Table::new(
            dir,
            "trajectories.csv",
            &["trajectory", "discounted_cost", "num_jumps", "final_state"],
        )?;
        for (i, (cost, jumps, last)) in rows.iter().enumerate() {
            d.row(&[
                i.to_string(),
                fmt_f64(*cost),
                jumps.to_string(),
                last.to_string(),
            ])?;
        }
        artifacts.push(d.finish()?.0);
    }

    let passed = est.mean.is_finite() && est.std_error.is_finite();
    Ok(Outcome {
        passed,
        artifacts,
        summary: vec![format!(
            "E exp(theta int e^(-alpha t) c dt) = {} +/- {} (theta {}, x0 {}, {} paths, horizon {}); \
             certainty equivalent {}",
            est.mean,
            est.std_error,
            s.theta,
            s.x0,
            est.num_samples,
            est.horizon,
            est.mean.ln() / s.theta
        )],
    })
}

fn verify(cfg: &ResolvedConfig, dir: &Path) -> Result<Outcome, RunError> {
    let v = &cfg.verify;
    let mut report = CheckReport::default();
    let kernel = validate_kernel(&cfg.model, cfg.hjb.kernel_tol);
    report.push(CheckEntry::le("kernel_conservative", kernel.len() as f64, 0.0));
    let cert = check_certificate(&cfg.model, &cfg.cert, cfg.certificate_tol)
        .map_err(|e| RunError::pipeline(Command::Verify, e))?;
    report.push(CheckEntry::le("certificate", cert.len() as f64, 0.0));

    let plan = VerifyPlan {
        level: v.level,
        delta: v.delta,
        theta: v.theta,
        grid: cfg.grid.clone(),
        grading: v.grading,
        picard: cfg.hjb.picard,
        initial_states: v.initial_states.clone(),
        fk: FkOptions {
            num_traj: v.num_traj,
            seed: cfg.seed,
            grid_error: 0.0,
            num_random_policies: v.num_random_policies,
            random_policy_traj: v.random_policy_traj,
        },
        oracle_tol: cfg.oracle_tol,
        num_oracle_policies: v.num_oracle_policies,
    };
    report.extend(
        verify_model(&cfg.model, &cfg.cert, &plan)
            .map_err(|e| RunError::pipeline(Command::Verify, e))?,
    );
    if v.analytic_suite {
        report.extend(
            run_analytic_suite(cfg.model.alpha())
                .map_err(|e| RunError::pipeline(Command::Verify, e))?,
        );
    }

    let mut t = Table::new(dir, "verify.csv", &["check_id", "lhs", "rhs", "margin", "passed"])?;
    for e in &report.entries {
        t.row(&[
            e.check_id.clone(),
            fmt_f64(e.lhs),
            fmt_f64(e.rhs),
            fmt_f64(e.margin()),
            e.passed.to_string(),
        ])?;
    }
    let (path, _) = t.finish()?;
    let passed = report.passed();
    let mut summary = vec![format!(
        "{} of {} checks passed",
        report.entries.iter().filter(|e| e.passed).count(),
        report.entries.len()
    )];
    summary.extend(
        report
            .failures()
            .map(|e| format!("FAILED {}: lhs {:e} > rhs {:e}", e.check_id, e.lhs, e.rhs)),
    );
    Ok(Outcome {
        passed,
        artifacts: vec![path],
        summary,
    })
}
