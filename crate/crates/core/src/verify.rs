//! Cross-checks of solver output against independent routes: Monte Carlo of
//! the probabilistic representation, a linear fixed-policy integrator, and
//! analytically solvable special cases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fixtures;
use crate::hjb::{
    extract_policy, solve_hjb, solve_truncated, HjbOptions, PicardOptions, PolicyField, Schedules,
    SolveError, ThetaGrid, ValueField,
};
use crate::lyapunov::{CertificateError, LyapunovCertificate};
use crate::model::{truncate, ControlledChain, CtmdpModel, ModelError, TruncatedModel};
use crate::simulate::{estimate_truncated_functional, MarkovControl, SimError};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("fixed-policy integration unstable: step halving still disagrees by {disagreement:e} after {substeps} substeps")]
    Unstable { disagreement: f64, substeps: usize },
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Certificate(#[from] CertificateError),
    #[error(transparent)]
    Fixture(#[from] fixtures::FixtureError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckEntry {
    pub check_id: String,
    pub lhs: f64,
    pub rhs: f64,
    pub passed: bool,
}

impl CheckEntry {
    /// Passes when `lhs <= rhs` (both finite).
    pub fn le(check_id: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Self {
            check_id: check_id.into(),
            lhs,
            rhs,
            passed: lhs.is_finite() && rhs.is_finite() && lhs <= rhs,
        }
    }

    pub fn margin(&self) -> f64 {
        self.rhs - self.lhs
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn push(&mut self, e: CheckEntry) {
        self.entries.push(e);
    }

    pub fn extend(&mut self, other: CheckReport) {
        self.entries.extend(other.entries);
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }

    pub fn get(&self, check_id: &str) -> Option<&CheckEntry> {
        self.entries.iter().find(|e| e.check_id == check_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FkOptions {
    pub num_traj: usize,
    pub seed: u64,
    /// θ-discretization error of the field being checked.
    pub grid_error: f64,
    /// Number of random time-varying policies for the infimum check.
    pub num_random_policies: usize,
    pub random_policy_traj: usize,
}

impl Default for FkOptions {
    fn default() -> Self {
        Self {
            num_traj: 100_000,
            seed: 0,
            grid_error: 0.0,
            num_random_policies: 20,
            random_policy_traj: 20_000,
        }
    }
}

/// Uniformly random selector on `nodes`.
pub fn random_policy(
    nodes: &[f64],
    chain: &impl ControlledChain,
    rng: &mut impl Rng,
) -> PolicyField {
    let ns = chain.num_states();
    let actions = (0..nodes.len() * ns)
        .map(|k| rng.gen_range(0..chain.num_actions(k % ns)))
        .collect();
    PolicyField::new(nodes.to_vec(), ns, actions).expect("shape matches by construction")
}

/// Mean within `3 SE + slack` of `target`, rerun once with 4x samples on failure.
fn mc_check<F>(
    run: F,
    num_traj: usize,
    accept: impl Fn(f64, f64) -> bool,
) -> Result<(f64, f64), VerifyError>
where
    F: Fn(usize) -> Result<crate::simulate::EstimatorResult, SimError>,
{
    let r = run(num_traj)?;
    if accept(r.mean, r.std_error) {
        return Ok((r.mean, r.std_error));
    }
    let r = run(4 * num_traj)?;
    Ok((r.mean, r.std_error))
}

/// Compares `phi(theta, x0)` with the Monte Carlo mean of the truncated
/// functional under the policy extracted from `phi`, and checks that random
/// policies never do better than `phi` (beyond noise).
pub fn crosscheck_feynman_kac(
    model_n: &TruncatedModel<'_>,
    phi: &ValueField,
    theta: f64,
    delta: f64,
    x0: usize,
    opts: &FkOptions,
) -> Result<CheckReport, VerifyError> {
    let value = phi.at(theta, x0).ok_or_else(|| {
        VerifyError::InvalidArgument(format!("theta {theta} is not a node of the field"))
    })?;
    let alpha = model_n.alpha();
    let policy = extract_policy(phi, model_n);
    let control = MarkovControl::new(policy, theta, alpha)?;
    let slack = opts.grid_error;
    let (mean, se) = mc_check(
        |n| estimate_truncated_functional(model_n, &control, theta, delta, x0, n, opts.seed),
        opts.num_traj,
        |m, se| (value - m).abs() <= 3.0 * se + slack,
    )?;
    let mut report = CheckReport::default();
    report.push(CheckEntry::le(
        format!("fk_x{x0}"),
        (value - mean).abs(),
        3.0 * se + slack,
    ));
    report.push(CheckEntry::le(format!("fk_se_x{x0}"), se, 0.005 * mean));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0f_9011c1e5);
    let coarse = ThetaGrid::uniform(5).expect("static grid");
    for k in 0..opts.num_random_policies {
        let p = random_policy(coarse.nodes(), model_n, &mut rng);
        let ctl = MarkovControl::new(p, theta, alpha)?;
        let seed = opts.seed.wrapping_add(1 + k as u64);
        let (m, se) = mc_check(
            |n| estimate_truncated_functional(model_n, &ctl, theta, delta, x0, n, seed),
            opts.random_policy_traj,
            |m, se| m >= value - 3.0 * se - slack,
        )?;
        report.push(CheckEntry::le(
            format!("fk_infimum_x{x0}_p{k}"),
            value,
            m + 3.0 * se + slack,
        ));
    }
    Ok(report)
}

/// Integrates the linear θ-equation of a fixed selector,
/// `alpha theta u' = sum_y q_n(y|x,f) u(y) + theta c_n(x,f) u(x)` with
/// `u(delta) = e^{n delta/alpha}`, by classical RK4 on `grid` (which starts at
/// `delta`). Substeps are doubled until two successive resolutions agree to `tol`.
pub fn oracle_fixed_policy(
    model_n: &TruncatedModel<'_>,
    policy: &PolicyField,
    grid: &ThetaGrid,
    tol: f64,
) -> Result<ValueField, VerifyError> {
    if !policy.is_admissible(model_n) {
        return Err(VerifyError::InvalidArgument(
            "policy does not match the model".into(),
        ));
    }
    let delta = grid.first();
    if !(delta > 0.0) {
        return Err(VerifyError::InvalidArgument(
            "grid must start at delta > 0".into(),
        ));
    }
    let mut stiff: f64 = 0.0;
    for x in 0..model_n.num_states() {
        for a in 0..model_n.num_actions(x) {
            stiff = stiff.max(2.0 * model_n.exit_rate(x, a) + model_n.cost(x, a));
        }
    }
    let mut refine = 1;
    let mut prev = march(model_n, policy, grid, stiff, refine);
    for _ in 0..8 {
        refine *= 2;
        let next = march(model_n, policy, grid, stiff, refine);
        let d = next.sup_diff(&prev);
        if d <= tol * next.max_abs().max(1.0) {
            return Ok(next);
        }
        prev = next;
    }
    let d = march(model_n, policy, grid, stiff, refine * 2).sup_diff(&prev);
    Err(VerifyError::Unstable {
        disagreement: d,
        substeps: refine,
    })
}

fn march(
    model_n: &TruncatedModel<'_>,
    policy: &PolicyField,
    grid: &ThetaGrid,
    stiff: f64,
    refine: usize,
) -> ValueField {
    let alpha = model_n.alpha();
    let ns = model_n.num_states();
    let mut gen = vec![0.0; model_n.actions().max_count()];
    let mut rhs = |theta: f64, u: &[f64], out: &mut [f64]| {
        for x in 0..ns {
            let k = model_n.num_actions(x);
            model_n.apply_generator(x, u, &mut gen[..k]);
            let a = policy.action_at(theta, x);
            out[x] = (gen[a] + theta * model_n.cost(x, a) * u[x]) / (alpha * theta);
        }
    };
    let nodes = grid.nodes();
    let start = (model_n.level() * nodes[0] / alpha).exp();
    let mut out = ValueField::constant(grid, ns, start);
    let mut u = vec![start; ns];
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (
        vec![0.0; ns],
        vec![0.0; ns],
        vec![0.0; ns],
        vec![0.0; ns],
        vec![0.0; ns],
    );
    for i in 0..nodes.len() - 1 {
        let (a, b) = (nodes[i], nodes[i + 1]);
        // stability of explicit RK4 on the 1/theta stiff part
        let h_max = 0.5 * alpha * a / stiff.max(1e-300);
        let steps = (((b - a) / h_max).ceil() as usize).max(1) * refine;
        let h = (b - a) / steps as f64;
        for s in 0..steps {
            let t = a + s as f64 * h;
            rhs(t, &u, &mut k1);
            for x in 0..ns {
                tmp[x] = u[x] + 0.5 * h * k1[x];
            }
            rhs(t + 0.5 * h, &tmp, &mut k2);
            for x in 0..ns {
                tmp[x] = u[x] + 0.5 * h * k2[x];
            }
            rhs(t + 0.5 * h, &tmp, &mut k3);
            for x in 0..ns {
                tmp[x] = u[x] + h * k3[x];
            }
            rhs(t + h, &tmp, &mut k4);
            for x in 0..ns {
                u[x] += h / 6.0 * (k1[x] + 2.0 * k2[x] + 2.0 * k3[x] + k4[x]);
            }
        }
        for x in 0..ns {
            out.set(i + 1, x, u[x]);
        }
    }
    out
}

/// Analytically forced cases: zero cost (phi = 1), constant cost
/// (phi = e^{theta c0/alpha}), the theta = 0 boundary, and the value bounds on
/// the certified Gaussian model.
pub fn run_analytic_suite(alpha: f64) -> Result<CheckReport, VerifyError> {
    let mut report = CheckReport::default();
    let grid = ThetaGrid::uniform(201)?;
    let schedules = Schedules {
        delta_list: (0..=6).map(|k| 0.064 * 0.5f64.powi(k)).collect(),
        n_list: vec![2.0, 4.0],
    };
    let opts = HjbOptions::default();

    let zero = fixtures::constant_cost_model(0.0, alpha)?;
    let (phi0, _) = solve_hjb(
        &zero,
        &fixtures::bounded_certificate(&zero),
        &schedules,
        &grid,
        &opts,
    )?;
    let err0 = phi0
        .values()
        .iter()
        .fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
    report.push(CheckEntry::le("analytic_zero_cost", err0, 1e-10));

    let c0 = 1.0;
    let cc = fixtures::constant_cost_model(c0, alpha)?;
    let (phi1, _) = solve_hjb(
        &cc,
        &fixtures::bounded_certificate(&cc),
        &schedules,
        &grid,
        &opts,
    )?;
    let mut rel: f64 = 0.0;
    for (i, &t) in grid.nodes().iter().enumerate() {
        let exact = (t * c0 / alpha).exp();
        for x in 0..cc.num_states() {
            rel = rel.max((phi1.get(i, x) / exact - 1.0).abs());
        }
    }
    report.push(CheckEntry::le("analytic_constant_cost", rel, 1e-4));

    let boundary = phi1
        .row(0)
        .iter()
        .fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
    report.push(CheckEntry::le("analytic_theta_zero", boundary, 1e-12));

    let (g, cert) = fixtures::gaussian_solve_fixture(alpha)?;
    let gs = Schedules::default_for(&g, &cert)?;
    let (phig, rep) = solve_hjb(&g, &cert, &gs, &grid, &opts)?;
    let v0 = cert.v0_values(g.space())?;
    let count = crate::hjb::enclosure_violations(&phig, &cert, alpha, &v0, 0.0);
    report.push(CheckEntry::le(
        "analytic_gaussian_enclosure",
        count as f64,
        0.0,
    ));
    report.push(CheckEntry::le(
        "analytic_gaussian_monitors",
        if rep.monitors_pass(opts.monotone_tol) {
            0.0
        } else {
            1.0
        },
        0.0,
    ));
    Ok(report)
}

/// Parameters of [`verify_model`].
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyPlan {
    pub level: f64,
    pub delta: f64,
    pub theta: f64,
    pub grid: ThetaGrid,
    pub grading: f64,
    pub picard: PicardOptions,
    pub initial_states: Vec<usize>,
    pub fk: FkOptions,
    pub oracle_tol: f64,
    pub num_oracle_policies: usize,
}

/// Full verification of one model: truncated solve with a grid-error
/// estimate, Feynman-Kac checks at every initial state, agreement with the
/// fixed-policy oracle for the minimizer, and suboptimality of random
/// policies under the oracle.
pub fn verify_model(
    model: &CtmdpModel,
    cert: &LyapunovCertificate,
    plan: &VerifyPlan,
) -> Result<CheckReport, VerifyError> {
    let model_n = truncate(model, cert, plan.level)?;
    let (phi, grid_error) = crate::hjb::grid_error_estimate(
        &model_n,
        &plan.grid,
        plan.delta,
        plan.grading,
        &plan.picard,
    )?;
    let solve_grid = phi.grid();
    let mut report = CheckReport::default();
    for &x0 in &plan.initial_states {
        if x0 >= model.num_states() {
            return Err(VerifyError::InvalidArgument(format!(
                "initial state {x0} out of range"
            )));
        }
        let fk = FkOptions {
            grid_error,
            ..plan.fk
        };
        report.extend(crosscheck_feynman_kac(
            &model_n, &phi, plan.theta, plan.delta, x0, &fk,
        )?);
    }

    let minimizer = extract_policy(&phi, &model_n);
    let oracle = oracle_fixed_policy(&model_n, &minimizer, &solve_grid, plan.oracle_tol * 0.1)?;
    let combined = plan.oracle_tol.max(grid_error + plan.picard.tol);
    report.push(CheckEntry::le(
        "oracle_minimizer",
        oracle.sup_diff(&phi),
        combined,
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(plan.fk.seed ^ 0x0_5ac1e);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..plan.num_oracle_policies {
        let p = random_policy(solve_grid.nodes(), &model_n, &mut rng);
        let u = oracle_fixed_policy(&model_n, &p, &solve_grid, plan.oracle_tol * 0.1)?;
        worst = worst.max(phi.max_excess(&u));
    }
    if plan.num_oracle_policies > 0 {
        report.push(CheckEntry::le("oracle_suboptimality", worst, combined));
    }
    Ok(report)
}

/// Solves at `(level, delta)` with [`solve_truncated`] on `grid.truncated(delta, grading)`.
pub fn solve_at(
    model_n: &TruncatedModel<'_>,
    grid: &ThetaGrid,
    delta: f64,
    grading: f64,
    picard: &PicardOptions,
) -> Result<ValueField, VerifyError> {
    Ok(solve_truncated(model_n, &grid.truncated(delta, grading)?, picard)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{
        bounded_certificate, constant_cost_model, two_state_certificate, two_state_model,
    };
    use approx::assert_relative_eq;

    #[test]
    fn zero_cost_crosscheck_has_zero_margin() {
        let m = constant_cost_model(0.0, 1.0).unwrap();
        let cert = bounded_certificate(&m);
        let mt = truncate(&m, &cert, 3.0).unwrap();
        let grid = ThetaGrid::uniform(21).unwrap();
        let phi = solve_at(&mt, &grid, 0.05, 1.25, &PicardOptions::default()).unwrap();
        let opts = FkOptions {
            num_traj: 100,
            num_random_policies: 3,
            random_policy_traj: 50,
            ..Default::default()
        };
        let r = crosscheck_feynman_kac(&mt, &phi, 1.0, 0.05, 0, &opts).unwrap();
        assert!(r.passed());
        let e = r.get("fk_x0").unwrap();
        assert_eq!(e.lhs, 0.0);
        assert_eq!(e.rhs, 0.0);
    }

    #[test]
    fn single_state_constant_cost_is_exact() {
        let m = constant_cost_model(0.7, 1.0).unwrap();
        let cert = bounded_certificate(&m);
        let mt = truncate(&m, &cert, 2.0).unwrap();
        let grid = ThetaGrid::uniform(101).unwrap();
        let phi = solve_at(&mt, &grid, 0.1, 1.25, &PicardOptions::default()).unwrap();
        let expected = (2.0f64 * 0.1).exp() * (0.7f64 * 0.9).exp();
        assert_relative_eq!(phi.at(1.0, 1).unwrap(), expected, max_relative = 1e-4);
        let opts = FkOptions {
            num_traj: 10,
            num_random_policies: 0,
            grid_error: 1e-4 * expected,
            ..Default::default()
        };
        let r = crosscheck_feynman_kac(&mt, &phi, 1.0, 0.1, 1, &opts).unwrap();
        assert!(r.passed(), "{:?}", r.entries);
    }

    #[test]
    fn oracle_of_zero_cost_is_boundary_constant() {
        let m = constant_cost_model(0.0, 1.0).unwrap();
        let cert = bounded_certificate(&m);
        let mt = truncate(&m, &cert, 3.0).unwrap();
        let grid = ThetaGrid::uniform(11)
            .unwrap()
            .truncated(0.1, 1.25)
            .unwrap();
        let p = PolicyField::new(grid.nodes().to_vec(), 3, vec![1; grid.len() * 3]).unwrap();
        let u = oracle_fixed_policy(&mt, &p, &grid, 1e-10).unwrap();
        let h = (0.3f64).exp();
        assert!(u.values().iter().all(|v| (v - h).abs() < 1e-13));
    }

    #[test]
    fn oracle_matches_minimizer_and_dominates_otherwise() {
        let m = two_state_model();
        let cert = two_state_certificate();
        let mt = truncate(&m, &cert, 5.0).unwrap();
        let grid = ThetaGrid::uniform(101).unwrap();
        let phi = solve_at(&mt, &grid, 0.01, 1.25, &PicardOptions::default()).unwrap();
        let sg = phi.grid();
        let pol = extract_policy(&phi, &mt);
        let u = oracle_fixed_policy(&mt, &pol, &sg, 1e-9).unwrap();
        assert!(u.sup_diff(&phi) < 1e-4, "{}", u.sup_diff(&phi));
        // always the costlier action in state 0
        let worse = PolicyField::new(
            sg.nodes().to_vec(),
            2,
            (0..sg.len()).flat_map(|i| [1, pol.action(i, 1)]).collect(),
        )
        .unwrap();
        let w = oracle_fixed_policy(&mt, &worse, &sg, 1e-9).unwrap();
        assert!(phi.max_excess(&w) < 1e-6);
        let last = sg.len() - 1;
        if pol.action(last, 0) == 0 {
            assert!(w.get(last, 0) > phi.get(last, 0) + 1e-4);
        }
    }

    #[test]
    fn analytic_suite_passes() {
        let r = run_analytic_suite(2.0).unwrap();
        assert!(r.passed(), "{:?}", r.failures().collect::<Vec<_>>());
        let r1 = run_analytic_suite(1.0).unwrap();
        assert!(r1.passed(), "{:?}", r1.failures().collect::<Vec<_>>());
    }
}
