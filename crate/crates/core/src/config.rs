//! JSON run configuration: model document, certificate, grids, tolerances
//! and per-subcommand settings.
//!
//! Relative file paths inside a configuration are resolved against the
//! directory of the document that mentions them.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::fixtures;
use crate::hjb::{HjbOptions, PicardOptions, Schedules, ThetaGrid};
use crate::lyapunov::{certify_gaussian, GrowthFn, LyapunovCertificate};
use crate::model::{
    build_gaussian_model, ActionSet, ControlledChain, CostRate, CtmdpModel, GaussianJumpSpec,
    GridSpec, StateSpace,
};

/// Configuration rejection with the document and field it refers to.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    /// File the error was found in (`<inline>` for documents parsed from a string).
    pub file: String,
    /// Dotted path of the offending field, empty when the whole document is at fault.
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "{}: {}", self.file, self.message)
        } else {
            write!(f, "{}: field `{}`: {}", self.file, self.field, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    fn new(file: &str, field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            file: file.to_string(),
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Inline model document or a path to one.
    pub model: ModelSource,
    /// Overrides the model's discount rate.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub certificate: Option<CertificateDoc>,
    #[serde(default = "default_theta_grid")]
    pub theta_grid: usize,
    #[serde(default)]
    pub schedules: SchedulesDoc,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub simulate: SimulateDoc,
    #[serde(default)]
    pub verify: VerifyDoc,
}

fn default_theta_grid() -> usize {
    201
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    Path(PathBuf),
    /// Parsed into a [`ModelDoc`] on resolution so errors keep their field path.
    Inline(serde_json::Value),
}

impl<'de> Deserialize<'de> for ModelSource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) => ModelSource::Path(s.into()),
            other => ModelSource::Inline(other),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    pub alpha: f64,
    #[serde(default)]
    pub grid: Option<GridDoc>,
    pub actions: ActionsDoc,
    pub kernel: KernelDoc,
    pub cost: CostDoc,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDoc {
    pub x_min: f64,
    pub x_max: f64,
    pub num_states: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionsDoc {
    pub count: usize,
    /// Parameter value of each action (defaults to the action index).
    #[serde(default)]
    pub spec: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelDoc {
    /// One signed rate row per `(state, action)` pair, inline or from a CSV file.
    RateMatrix {
        #[serde(default)]
        rows: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        csv: Option<PathBuf>,
    },
    GaussianJump {
        sigma: f64,
        rate_scale: f64,
        intensity: IntensityDoc,
        #[serde(default)]
        renorm_threshold: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum IntensityDoc {
    /// `lambda(x, a) = rate_scale (x^2 + 1) weights[a]`.
    Quadratic { weights: Vec<f64> },
    /// One value per `(state, action)` pair, state-major.
    Table { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostDoc {
    pub spec: CostSpec,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostSpec {
    Constant {
        value: f64,
    },
    /// One value per `(state, action)` pair, state-major.
    Table {
        values: Vec<f64>,
    },
    /// `c(x, a) = weights[a] rho ln(1 + x^2) + offset`.
    LogGrowth {
        rho: f64,
        weights: Vec<f64>,
        #[serde(default)]
        offset: f64,
    },
    /// `c(x, a) = sum_k coeffs[a][k] x^k`.
    Polynomial {
        coeffs: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum CertificateDoc {
    /// Closed-form certificate of the Gaussian jump kernel.
    Gaussian { rho1: f64 },
    /// `V0 = V1 = 1` with the largest exit rate and cost of the model.
    Bounded,
    Explicit {
        v0: GrowthDoc,
        v1: GrowthDoc,
        rho0: f64,
        m0: f64,
        l0: f64,
        rho1: f64,
        rho2: f64,
        b1: f64,
        m1: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum GrowthDoc {
    Constant(f64),
    Polynomial { polynomial: Vec<f64> },
    Table { table: Vec<f64> },
}

impl From<&GrowthDoc> for GrowthFn {
    fn from(g: &GrowthDoc) -> Self {
        match g {
            GrowthDoc::Constant(c) => GrowthFn::Constant(*c),
            GrowthDoc::Polynomial { polynomial } => GrowthFn::Polynomial(polynomial.clone()),
            GrowthDoc::Table { table } => GrowthFn::Table(table.clone()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulesDoc {
    #[serde(default)]
    pub delta_list: Option<Vec<f64>>,
    #[serde(default)]
    pub n_list: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub picard: f64,
    pub schedule: f64,
    /// Defaults to 1e-8 for rate matrices and 1e-5 for quadrature kernels.
    pub certificate: Option<f64>,
    pub monotone: f64,
    pub kernel: f64,
    pub oracle: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        let h = HjbOptions::default();
        Self {
            picard: h.picard.tol,
            schedule: h.tol,
            certificate: None,
            monotone: h.monotone_tol,
            kernel: h.kernel_tol,
            oracle: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateDoc {
    pub theta: f64,
    /// Initial state index.
    pub x0: usize,
    pub num_traj: usize,
    /// Fixed horizon; when absent the horizon follows from `tail_eps`.
    pub horizon: Option<f64>,
    pub tail_eps: f64,
    /// Value/policy CSV written by `solve`; when absent the model is solved first.
    pub policy_file: Option<PathBuf>,
    pub dump_trajectories: bool,
}

impl Default for SimulateDoc {
    fn default() -> Self {
        Self {
            theta: 1.0,
            x0: 0,
            num_traj: 10_000,
            horizon: None,
            tail_eps: 1e-4,
            policy_file: None,
            dump_trajectories: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyDoc {
    /// Truncation level; defaults to the last entry of the resolved `n_list`.
    pub level: Option<f64>,
    pub delta: f64,
    pub theta: f64,
    pub grading: f64,
    /// Defaults to every state on models with at most ten states, else the
    /// state nearest the origin.
    pub initial_states: Option<Vec<usize>>,
    pub num_traj: usize,
    pub num_random_policies: usize,
    pub random_policy_traj: usize,
    pub num_oracle_policies: usize,
    /// Also run the analytically solvable reference cases.
    pub analytic_suite: bool,
}

impl Default for VerifyDoc {
    fn default() -> Self {
        Self {
            level: None,
            delta: 0.01,
            theta: 1.0,
            grading: 1.25,
            initial_states: None,
            num_traj: 100_000,
            num_random_policies: 20,
            random_policy_traj: 20_000,
            num_oracle_policies: 20,
            analytic_suite: false,
        }
    }
}

/// A parsed configuration together with the location it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub file: String,
    pub base_dir: PathBuf,
}

fn path_error<E: fmt::Display>(
    e: serde_path_to_error::Error<E>,
    file: &str,
    prefix: &str,
) -> ConfigError {
    let field = e.path().to_string();
    let field = match (field.as_str(), prefix) {
        (".", "") => String::new(),
        (".", p) => p.trim_end_matches('.').to_string(),
        (f, p) => format!("{p}{f}"),
    };
    ConfigError::new(file, field, e.inner().to_string())
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, file: &str) -> Result<T, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| path_error(e, file, ""))
}

impl LoadedConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let file = path.display().to_string();
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::new(&file, "", format!("cannot read: {e}")))?;
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Self::from_str_in(&text, &file, base_dir)
    }

    /// Parses `text`; relative paths resolve against `base_dir`.
    pub fn from_str_in(text: &str, file: &str, base_dir: PathBuf) -> Result<Self, ConfigError> {
        Ok(Self {
            config: parse_json(text, file)?,
            file: file.to_string(),
            base_dir,
        })
    }

    fn err(&self, field: impl Into<String>, message: impl Into<String>) -> ConfigError {
        ConfigError::new(&self.file, field, message)
    }

    fn resolve_path(base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    /// Builds every object the subcommands need, rejecting out-of-range settings.
    pub fn resolve(&self) -> Result<ResolvedConfig, ConfigError> {
        let c = &self.config;
        let (doc, doc_file, doc_base, prefix) = match &c.model {
            ModelSource::Inline(value) => (
                serde_path_to_error::deserialize::<_, ModelDoc>(value.clone())
                    .map_err(|e| path_error(e, &self.file, "model."))?,
                self.file.clone(),
                self.base_dir.clone(),
                "model.",
            ),
            ModelSource::Path(p) => {
                let path = Self::resolve_path(&self.base_dir, p);
                if !path.is_file() {
                    return Err(self.err("model", format!("file {} does not exist", path.display())));
                }
                let file = path.display().to_string();
                let text = fs::read_to_string(&path)
                    .map_err(|e| ConfigError::new(&file, "", format!("cannot read: {e}")))?;
                let doc: ModelDoc = parse_json(&text, &file)?;
                let base = path
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from("."));
                (doc, file, base, "")
            }
        };
        let alpha = c.alpha.unwrap_or(doc.alpha);
        let alpha_field = if c.alpha.is_some() {
            "alpha".to_string()
        } else {
            format!("{prefix}alpha")
        };
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(self.err(alpha_field, format!("must be positive, got {alpha}")));
        }
        let model_err = |field: &str, msg: String| {
            ConfigError::new(&doc_file, format!("{prefix}{field}"), msg)
        };
        let model = build_model(&doc, alpha, &doc_base, &model_err)?;

        let cert = match &c.certificate {
            Some(CertificateDoc::Gaussian { rho1 }) => match &doc.kernel {
                KernelDoc::GaussianJump {
                    sigma, rate_scale, ..
                } => certify_gaussian(*sigma, *rate_scale, *rho1, alpha)
                    .map_err(|e| self.err("certificate", e.to_string()))?,
                _ => {
                    return Err(self.err(
                        "certificate.type",
                        "gaussian certificate requires a gaussian_jump kernel",
                    ))
                }
            },
            Some(CertificateDoc::Bounded) => fixtures::bounded_certificate(&model),
            Some(CertificateDoc::Explicit {
                v0,
                v1,
                rho0,
                m0,
                l0,
                rho1,
                rho2,
                b1,
                m1,
            }) => LyapunovCertificate {
                v0: v0.into(),
                v1: v1.into(),
                rho0: *rho0,
                m0: *m0,
                l0: *l0,
                rho1: *rho1,
                rho2: *rho2,
                b1: *b1,
                m1: *m1,
            },
            None => match &doc.kernel {
                KernelDoc::RateMatrix { .. } => fixtures::bounded_certificate(&model),
                KernelDoc::GaussianJump { .. } => {
                    return Err(self.err(
                        "certificate",
                        "required for gaussian_jump kernels",
                    ))
                }
            },
        };
        cert.validate_constants(alpha)
            .map_err(|e| self.err("certificate", e.to_string()))?;
        cert.v0_values(model.space())
            .and_then(|_| cert.v1_values(model.space()))
            .map_err(|e| self.err("certificate", e.to_string()))?;

        if c.theta_grid < 3 {
            return Err(self.err("theta_grid", format!("need at least 3 nodes, got {}", c.theta_grid)));
        }
        let grid = ThetaGrid::uniform(c.theta_grid)
            .map_err(|e| self.err("theta_grid", e.to_string()))?;

        let defaults = Schedules::default_for(&model, &cert)
            .map_err(|e| self.err("schedules", e.to_string()))?;
        let schedules = Schedules {
            delta_list: c
                .schedules
                .delta_list
                .clone()
                .unwrap_or(defaults.delta_list),
            n_list: c.schedules.n_list.clone().unwrap_or(defaults.n_list),
        };
        check_schedules(&schedules).map_err(|(f, m)| self.err(f, m))?;

        let t = &c.tolerances;
        for (name, v) in [
            ("picard", t.picard),
            ("schedule", t.schedule),
            ("monotone", t.monotone),
            ("kernel", t.kernel),
            ("oracle", t.oracle),
            ("certificate", t.certificate.unwrap_or(1.0)),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(self.err(format!("tolerances.{name}"), format!("must be positive, got {v}")));
            }
        }
        let certificate_tol = t.certificate.unwrap_or(match doc.kernel {
            KernelDoc::RateMatrix { .. } => 1e-8,
            KernelDoc::GaussianJump { .. } => 1e-5,
        });
        let hjb = HjbOptions {
            picard: PicardOptions {
                tol: t.picard,
                ..Default::default()
            },
            tol: t.schedule,
            monotone_tol: t.monotone,
            kernel_tol: t.kernel,
            ..Default::default()
        };

        let ns = model.num_states();
        let s = &c.simulate;
        if !(s.theta > 0.0 && s.theta <= 1.0) {
            return Err(self.err("simulate.theta", format!("must lie in (0, 1], got {}", s.theta)));
        }
        if s.x0 >= ns {
            return Err(self.err("simulate.x0", format!("state {} out of range (model has {ns} states)", s.x0)));
        }
        if s.num_traj == 0 {
            return Err(self.err("simulate.num_traj", "must be positive"));
        }
        if let Some(h) = s.horizon {
            if !(h.is_finite() && h >= 0.0) {
                return Err(self.err("simulate.horizon", format!("must be finite and >= 0, got {h}")));
            }
        }
        if !(s.tail_eps.is_finite() && s.tail_eps > 0.0) {
            return Err(self.err("simulate.tail_eps", format!("must be positive, got {}", s.tail_eps)));
        }
        let policy_file = match &s.policy_file {
            Some(p) => {
                let path = Self::resolve_path(&self.base_dir, p);
                if !path.is_file() {
                    return Err(self.err(
                        "simulate.policy_file",
                        format!("file {} does not exist", path.display()),
                    ));
                }
                Some(path)
            }
            None => None,
        };

        let v = &c.verify;
        let level = v.level.unwrap_or(*schedules.n_list.last().expect("validated"));
        if !(level >= 1.0 && level.is_finite()) {
            return Err(self.err("verify.level", format!("must be >= 1, got {level}")));
        }
        if !(v.delta > 0.0 && v.delta < v.theta) {
            return Err(self.err("verify.delta", format!("must lie in (0, verify.theta), got {}", v.delta)));
        }
        if !(v.theta > 0.0 && v.theta <= 1.0) {
            return Err(self.err("verify.theta", format!("must lie in (0, 1], got {}", v.theta)));
        }
        if !(v.grading > 1.0 && v.grading.is_finite()) {
            return Err(self.err("verify.grading", format!("must exceed 1, got {}", v.grading)));
        }
        let initial_states = match &v.initial_states {
            Some(list) => {
                if list.is_empty() {
                    return Err(self.err("verify.initial_states", "must be nonempty"));
                }
                if let Some(x) = list.iter().find(|x| **x >= ns) {
                    return Err(self.err(
                        "verify.initial_states",
                        format!("state {x} out of range (model has {ns} states)"),
                    ));
                }
                list.clone()
            }
            None if ns <= 10 => (0..ns).collect(),
            None => vec![model.space().nearest(0.0)],
        };
        if v.num_traj == 0 {
            return Err(self.err("verify.num_traj", "must be positive"));
        }

        Ok(ResolvedConfig {
            model,
            cert,
            grid,
            schedules,
            hjb,
            certificate_tol,
            oracle_tol: t.oracle,
            seed: c.seed,
            simulate: SimulateSettings {
                theta: s.theta,
                x0: s.x0,
                num_traj: s.num_traj,
                horizon: s.horizon,
                tail_eps: s.tail_eps,
                policy_file,
                dump_trajectories: s.dump_trajectories,
            },
            verify: VerifySettings {
                level,
                delta: v.delta,
                theta: v.theta,
                grading: v.grading,
                initial_states,
                num_traj: v.num_traj,
                num_random_policies: v.num_random_policies,
                random_policy_traj: v.random_policy_traj.max(1),
                num_oracle_policies: v.num_oracle_policies,
                analytic_suite: v.analytic_suite,
            },
        })
    }
}

fn check_schedules(s: &Schedules) -> Result<(), (String, String)> {
    let d = &s.delta_list;
    let n = &s.n_list;
    if d.is_empty() {
        return Err(("schedules.delta_list".into(), "must be nonempty".into()));
    }
    if let Some((i, v)) = d.iter().enumerate().find(|(_, v)| !(**v > 0.0 && **v < 1.0)) {
        return Err((format!("schedules.delta_list[{i}]"), format!("must lie in (0, 1), got {v}")));
    }
    if let Some(i) = d.windows(2).position(|w| w[1] >= w[0]) {
        return Err((
            format!("schedules.delta_list[{}]", i + 1),
            "delta_list must be strictly decreasing".into(),
        ));
    }
    if n.is_empty() {
        return Err(("schedules.n_list".into(), "must be nonempty".into()));
    }
    if let Some((i, v)) = n.iter().enumerate().find(|(_, v)| !(**v >= 1.0 && v.is_finite())) {
        return Err((format!("schedules.n_list[{i}]"), format!("must be >= 1, got {v}")));
    }
    if let Some(i) = n.windows(2).position(|w| w[1] <= w[0]) {
        return Err((
            format!("schedules.n_list[{}]", i + 1),
            "n_list must be strictly increasing".into(),
        ));
    }
    Ok(())
}

fn build_model(
    doc: &ModelDoc,
    alpha: f64,
    base: &Path,
    err: &dyn Fn(&str, String) -> ConfigError,
) -> Result<CtmdpModel, ConfigError> {
    let count = doc.actions.count;
    if count == 0 {
        return Err(err("actions.count", "must be positive".into()));
    }
    let params = match &doc.actions.spec {
        Some(p) if p.len() != count => {
            return Err(err(
                "actions.spec",
                format!("{} entries for {count} actions", p.len()),
            ))
        }
        Some(p) => p.clone(),
        None => (0..count).map(|a| a as f64).collect(),
    };
    let grid = doc.grid.map(|g| GridSpec {
        x_min: g.x_min,
        x_max: g.x_max,
        num_states: g.num_states,
    });

    match &doc.kernel {
        KernelDoc::RateMatrix { rows, csv } => {
            let rows = match (rows, csv) {
                (Some(r), None) => r.clone(),
                (None, Some(p)) => {
                    let path = LoadedConfig::resolve_path(base, p);
                    read_rate_csv(&path).map_err(|m| err("kernel.csv", m))?
                }
                _ => {
                    return Err(err(
                        "kernel",
                        "rate_matrix needs exactly one of `rows` or `csv`".into(),
                    ))
                }
            };
            let ns = rows.first().map_or(0, Vec::len);
            if ns == 0 {
                return Err(err("kernel.rows", "no rate rows".into()));
            }
            let space = match grid {
                Some(g) => {
                    if g.num_states != ns {
                        return Err(err(
                            "grid.num_states",
                            format!("{} states but the rate rows have {ns} columns", g.num_states),
                        ));
                    }
                    StateSpace::uniform(g.x_min, g.x_max, g.num_states)
                        .map_err(|e| err("grid", e.to_string()))?
                }
                None => StateSpace::finite(ns),
            };
            let actions = ActionSet::new(vec![params; ns]).map_err(|e| err("actions", e.to_string()))?;
            let cost = build_cost(&doc.cost.spec, &space, &actions, err)?;
            CtmdpModel::from_rate_rows(space, actions, rows, cost, alpha)
                .map_err(|e| err("kernel", e.to_string()))
        }
        KernelDoc::GaussianJump {
            sigma,
            rate_scale,
            intensity,
            renorm_threshold,
        } => {
            let g = grid.ok_or_else(|| err("grid", "required for gaussian_jump kernels".into()))?;
            let space = StateSpace::uniform(g.x_min, g.x_max, g.num_states)
                .map_err(|e| err("grid", e.to_string()))?;
            let actions = ActionSet::new(vec![params; g.num_states])
                .map_err(|e| err("actions", e.to_string()))?;
            let cost = build_cost(&doc.cost.spec, &space, &actions, err)?;
            let lambda: Vec<f64> = match intensity {
                IntensityDoc::Quadratic { weights } => {
                    if weights.len() != count {
                        return Err(err(
                            "kernel.intensity.weights",
                            format!("{} weights for {count} actions", weights.len()),
                        ));
                    }
                    space
                        .coords()
                        .iter()
                        .flat_map(|x| weights.iter().map(move |w| rate_scale * (x * x + 1.0) * w))
                        .collect()
                }
                IntensityDoc::Table { values } => {
                    if values.len() != g.num_states * count {
                        return Err(err(
                            "kernel.intensity.values",
                            format!(
                                "{} values for {} state-action pairs",
                                values.len(),
                                g.num_states * count
                            ),
                        ));
                    }
                    values.clone()
                }
            };
            let mut spec = GaussianJumpSpec::new(*sigma, *rate_scale);
            if let Some(t) = renorm_threshold {
                spec.renorm_threshold = *t;
            }
            let costs = cost.values().to_vec();
            build_gaussian_model(
                &spec,
                &g,
                count,
                alpha,
                |x, a| lambda[space.nearest(x) * count + a],
                |x, a| costs[space.nearest(x) * count + a],
            )
            .map_err(|e| err("kernel", e.to_string()))
        }
    }
}

fn build_cost(
    spec: &CostSpec,
    space: &StateSpace,
    actions: &ActionSet,
    err: &dyn Fn(&str, String) -> ConfigError,
) -> Result<CostRate, ConfigError> {
    let count = actions.max_count();
    let per_action = |field: &str, len: usize| {
        if len == count {
            Ok(())
        } else {
            Err(err(field, format!("{len} entries for {count} actions")))
        }
    };
    let r = match spec {
        CostSpec::Constant { value } => CostRate::from_fn(actions, |_, _| *value),
        CostSpec::Table { values } => CostRate::new(actions, values.clone()),
        CostSpec::LogGrowth {
            rho,
            weights,
            offset,
        } => {
            per_action("cost.spec.weights", weights.len())?;
            CostRate::from_fn(actions, |x, a| {
                let c = space.coord(x);
                weights[a] * rho * (c * c).ln_1p() + offset
            })
        }
        CostSpec::Polynomial { coeffs } => {
            per_action("cost.spec.coeffs", coeffs.len())?;
            CostRate::from_fn(actions, |x, a| {
                let c = space.coord(x);
                coeffs[a].iter().rev().fold(0.0, |acc, k| acc * c + k)
            })
        }
    };
    r.map_err(|e| err("cost.spec", e.to_string()))
}

/// Reads signed rate rows from a headerless CSV; `#` starts a comment line.
pub fn read_rate_csv(path: &Path) -> Result<Vec<Vec<f64>>, String> {
    if !path.is_file() {
        return Err(format!("file {} does not exist", path.display()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format!("{}: {e}", path.display()))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, s)| {
                s.parse::<f64>().map_err(|_| {
                    format!("{} row {} column {}: not a number: {s:?}", path.display(), i + 1, j + 1)
                })
            })
            .collect::<Result<Vec<f64>, String>>()?;
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSettings {
    pub theta: f64,
    pub x0: usize,
    pub num_traj: usize,
    pub horizon: Option<f64>,
    pub tail_eps: f64,
    pub policy_file: Option<PathBuf>,
    pub dump_trajectories: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifySettings {
    pub level: f64,
    pub delta: f64,
    pub theta: f64,
    pub grading: f64,
    pub initial_states: Vec<usize>,
    pub num_traj: usize,
    pub num_random_policies: usize,
    pub random_policy_traj: usize,
    pub num_oracle_policies: usize,
    pub analytic_suite: bool,
}

/// Validated configuration with the model and certificate built.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub model: CtmdpModel,
    pub cert: LyapunovCertificate,
    pub grid: ThetaGrid,
    pub schedules: Schedules,
    pub hjb: HjbOptions,
    pub certificate_tol: f64,
    pub oracle_tol: f64,
    pub seed: u64,
    pub simulate: SimulateSettings,
    pub verify: VerifySettings,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str) -> Result<ResolvedConfig, ConfigError> {
        LoadedConfig::from_str_in(text, "<inline>", PathBuf::from("."))?.resolve()
    }

    const TWO_STATE: &str = r#"{
        "model": {
            "alpha": 1.0,
            "actions": {"count": 2},
            "kernel": {"type": "rate_matrix", "rows": [[-0.5, 0.5], [-2, 2], [1, -1], [0.2, -0.2]]},
            "cost": {"spec": {"type": "table", "values": [0.6, 1.0, 0.1, 0.4]}}
        }
    }"#;

    #[test]
    fn inline_rate_matrix_matches_fixture() {
        let r = load(TWO_STATE).unwrap();
        assert_eq!(r.model, fixtures::two_state_model());
        assert_eq!(r.grid.len(), 201);
        assert_eq!(r.certificate_tol, 1e-8);
        assert_eq!(r.verify.initial_states, vec![0, 1]);
    }

    #[test]
    fn gaussian_document_builds_certified_model() {
        let text = r#"{
            "model": {
                "alpha": 1.0,
                "grid": {"x_min": -6, "x_max": 6, "num_states": 49},
                "actions": {"count": 2},
                "kernel": {"type": "gaussian_jump", "sigma": 1.0, "rate_scale": 6e-5,
                           "intensity": {"type": "quadratic", "weights": [1.0, 0.4]}},
                "cost": {"spec": {"type": "log_growth", "rho": 0.5, "weights": [0.6, 1.0]}}
            },
            "certificate": {"type": "gaussian", "rho1": 0.5}
        }"#;
        let r = load(text).unwrap();
        let (m, c) = fixtures::gaussian_solve_fixture(1.0).unwrap();
        assert_eq!(r.cert, c);
        assert_eq!(r.model.num_states(), m.num_states());
        for x in 0..m.num_states() {
            for a in 0..2 {
                assert_eq!(r.model.exit_rate(x, a), m.exit_rate(x, a));
                assert_eq!(r.model.cost(x, a), m.cost(x, a));
            }
        }
        assert_eq!(r.certificate_tol, 1e-5);
    }

    #[test]
    fn errors_name_the_field() {
        let bad = TWO_STATE.replace("\"alpha\": 1.0", "\"alpha\": -1.0");
        assert_eq!(load(&bad).unwrap_err().field, "model.alpha");

        let bad = TWO_STATE.replace("\"count\": 2", "\"count\": \"two\"");
        assert_eq!(load(&bad).unwrap_err().field, "model.actions.count");

        let text = TWO_STATE.trim_end().trim_end_matches('}').to_string()
            + r#", "schedules": {"delta_list": [0.1, 0.2]}}"#;
        let e = load(&text).unwrap_err();
        assert_eq!(e.field, "schedules.delta_list[1]");

        let text = TWO_STATE.trim_end().trim_end_matches('}').to_string()
            + r#", "simulate": {"x0": 7}}"#;
        assert_eq!(load(&text).unwrap_err().field, "simulate.x0");

        let text = TWO_STATE.trim_end().trim_end_matches('}').to_string()
            + r#", "tolerances": {"picard": 0}}"#;
        assert_eq!(load(&text).unwrap_err().field, "tolerances.picard");

        let text = TWO_STATE.trim_end().trim_end_matches('}').to_string()
            + r#", "bogus": 1}"#;
        assert!(load(&text).is_err());
    }

    #[test]
    fn missing_files_are_rejected() {
        let text = r#"{"model": "does/not/exist.json"}"#;
        assert_eq!(load(text).unwrap_err().field, "model");
        let text = TWO_STATE.trim_end().trim_end_matches('}').to_string()
            + r#", "simulate": {"policy_file": "nope.csv"}}"#;
        assert_eq!(load(&text).unwrap_err().field, "simulate.policy_file");
    }
}
