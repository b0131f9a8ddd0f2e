//! Controlled jump-process models on a finite state grid.
//!
//! Two kernel representations are supported:
//!
//! * [`TransitionKernel::RateMatrix`]: an explicit signed rate row per
//!   `(state, action)` pair.
//! * [`TransitionKernel::IntensityJump`]: a jump intensity `lambda(x, a)`
//!   together with a jump distribution `p(x, .)` over grid nodes, giving
//!   `q(y | x, a) = lambda(x, a) * (p(x, y) - [y == x])`.
//!
//! Continuous state spaces are discretized by [`StateSpace::uniform`], which
//! carries trapezoidal quadrature weights. The Gaussian jump model is built by
//! [`build_gaussian_model`]; its rows are renormalized so that every row of
//! the jump distribution has mass exactly one.
//!
//! Everything downstream (solver, simulator, checks) talks to a model through
//! the [`ControlledChain`] trait, which is also implemented by the level-`n`
//! truncation [`TruncatedModel`].

use thiserror::Error;

use crate::lyapunov::LyapunovCertificate;
use crate::report::ValidationReport;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("discount rate alpha must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("jump standard deviation sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("rate scale M must be positive and finite, got {0}")]
    InvalidRateScale(f64),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("state {0} has an empty action set")]
    EmptyActionSet(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(
        "cost rate at state {state}, action {action} must be finite and nonnegative, got {value}"
    )]
    InvalidCost {
        state: usize,
        action: usize,
        value: f64,
    },
    #[error(
        "jump intensity at state {state} (x = {coord}), action {action} is {lambda}, \
         outside (0, M(x^2+1)] = (0, {bound}]"
    )]
    IntensityBound {
        state: usize,
        coord: f64,
        action: usize,
        lambda: f64,
        bound: f64,
    },
    #[error(
        "grid too coarse: central jump row renormalization factor {factor} deviates from 1 \
         by more than {threshold}"
    )]
    GridTooCoarse { factor: f64, threshold: f64 },
    #[error("jump distribution row {state} must be finite, nonnegative and have positive mass")]
    InvalidJumpRow { state: usize },
}

/// Ordered grid of states with per-state quadrature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    coords: Vec<f64>,
    weights: Vec<f64>,
}

impl StateSpace {
    /// An intrinsically finite space: coordinates are the indices, weights are 1.
    pub fn finite(num_states: usize) -> Self {
        Self {
            coords: (0..num_states).map(|i| i as f64).collect(),
            weights: vec![1.0; num_states],
        }
    }

    pub fn from_coords(coords: Vec<f64>, weights: Vec<f64>) -> Result<Self, ModelError> {
        if coords.is_empty() {
            return Err(ModelError::InvalidGrid("state space is empty".into()));
        }
        if coords.len() != weights.len() {
            return Err(ModelError::Shape(format!(
                "{} coordinates but {} weights",
                coords.len(),
                weights.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(ModelError::InvalidGrid("non-finite coordinate".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(ModelError::InvalidGrid(
                "quadrature weights must be positive".into(),
            ));
        }
        let mut sorted = coords.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(ModelError::InvalidGrid(
                "state coordinates must be distinct".into(),
            ));
        }
        Ok(Self { coords, weights })
    }

    /// Uniform grid on `[x_min, x_max]` with trapezoidal weights, so the
    /// weights sum to `x_max - x_min`.
    pub fn uniform(x_min: f64, x_max: f64, num_states: usize) -> Result<Self, ModelError> {
        if !(x_min.is_finite() && x_max.is_finite()) || x_min >= x_max {
            return Err(ModelError::InvalidGrid(format!(
                "need finite x_min < x_max, got [{x_min}, {x_max}]"
            )));
        }
        if num_states < 2 {
            return Err(ModelError::InvalidGrid(
                "need at least two grid nodes".into(),
            ));
        }
        let h = (x_max - x_min) / (num_states - 1) as f64;
        let coords: Vec<f64> = (0..num_states)
            .map(|i| {
                if i == num_states - 1 {
                    x_max
                } else {
                    x_min + i as f64 * h
                }
            })
            .collect();
        let mut weights = vec![h; num_states];
        weights[0] = 0.5 * h;
        weights[num_states - 1] = 0.5 * h;
        Ok(Self { coords, weights })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coord(&self, x: usize) -> f64 {
        self.coords[x]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Index of the state whose coordinate is closest to `x` (lowest index on ties).
    pub fn nearest(&self, x: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.coords.iter().enumerate() {
            let d = (c - x).abs();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }
}

/// Finite action list per state; each action carries a real parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSet {
    params: Vec<Vec<f64>>,
    offsets: Vec<usize>,
}

impl ActionSet {
    pub fn new(params: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        let mut offsets = Vec::with_capacity(params.len() + 1);
        let mut acc = 0;
        for (x, p) in params.iter().enumerate() {
            if p.is_empty() {
                return Err(ModelError::EmptyActionSet(x));
            }
            offsets.push(acc);
            acc += p.len();
        }
        offsets.push(acc);
        Ok(Self { params, offsets })
    }

    /// `count` actions at every state, parameterized by their index.
    pub fn uniform(num_states: usize, count: usize) -> Result<Self, ModelError> {
        Self::new(vec![(0..count).map(|a| a as f64).collect(); num_states])
    }

    pub fn num_states(&self) -> usize {
        self.params.len()
    }

    pub fn count(&self, x: usize) -> usize {
        self.params[x].len()
    }

    pub fn max_count(&self) -> usize {
        self.params.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn param(&self, x: usize, a: usize) -> f64 {
        self.params[x][a]
    }

    /// Flat index of the `(x, a)` pair.
    pub fn pair(&self, x: usize, a: usize) -> usize {
        debug_assert!(a < self.count(x));
        self.offsets[x] + a
    }

    pub fn num_pairs(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransitionKernel {
    /// Signed rate rows, `rates[pair * n + y]`, units 1/time.
    RateMatrix { rates: Vec<f64> },
    /// `lambda[pair]` in 1/time; `jump[x * n + y]` is a probability row.
    IntensityJump { lambda: Vec<f64>, jump: Vec<f64> },
}

/// Nonnegative cost rate per `(state, action)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CostRate {
    values: Vec<f64>,
}

impl CostRate {
    pub fn new(actions: &ActionSet, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != actions.num_pairs() {
            return Err(ModelError::Shape(format!(
                "{} cost values for {} state-action pairs",
                values.len(),
                actions.num_pairs()
            )));
        }
        for x in 0..actions.num_states() {
            for a in 0..actions.count(x) {
                let v = values[actions.pair(x, a)];
                if !(v.is_finite() && v >= 0.0) {
                    return Err(ModelError::InvalidCost {
                        state: x,
                        action: a,
                        value: v,
                    });
                }
            }
        }
        Ok(Self { values })
    }

    pub fn from_fn(
        actions: &ActionSet,
        f: impl Fn(usize, usize) -> f64,
    ) -> Result<Self, ModelError> {
        let mut values = Vec::with_capacity(actions.num_pairs());
        for x in 0..actions.num_states() {
            for a in 0..actions.count(x) {
                values.push(f(x, a));
            }
        }
        Self::new(actions, values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Read access to a controlled chain: everything the solver and simulator need.
pub trait ControlledChain: Sync {
    fn space(&self) -> &StateSpace;
    fn actions(&self) -> &ActionSet;
    fn alpha(&self) -> f64;
    fn cost(&self, x: usize, a: usize) -> f64;
    /// Total jump intensity `q_x(a)`.
    fn exit_rate(&self, x: usize, a: usize) -> f64;
    /// Writes `sum_y q(y | x, a) u(y)` for every action at `x` into `out`.
    fn apply_generator(&self, x: usize, u: &[f64], out: &mut [f64]);
    /// Candidate jump targets with their rates; the rates sum to `exit_rate(x, a)`.
    /// A target equal to `x` is a fictitious jump that leaves the state unchanged.
    fn jump_rates(&self, x: usize, a: usize, out: &mut Vec<(usize, f64)>);

    fn num_states(&self) -> usize {
        self.space().len()
    }

    fn num_actions(&self, x: usize) -> usize {
        self.actions().count(x)
    }

    /// `q*(x) = max_a q_x(a)`.
    fn max_exit_rate(&self, x: usize) -> f64 {
        (0..self.num_actions(x))
            .map(|a| self.exit_rate(x, a))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtmdpModel {
    space: StateSpace,
    actions: ActionSet,
    kernel: TransitionKernel,
    cost: CostRate,
    alpha: f64,
    exit_rates: Vec<f64>,
}

impl CtmdpModel {
    /// Model with explicit rate rows; `rates[pair]` is the row for that pair.
    pub fn from_rate_rows(
        space: StateSpace,
        actions: ActionSet,
        rows: Vec<Vec<f64>>,
        cost: CostRate,
        alpha: f64,
    ) -> Result<Self, ModelError> {
        let n = space.len();
        check_alpha(alpha)?;
        if actions.num_states() != n {
            return Err(ModelError::Shape(format!(
                "{} action lists for {} states",
                actions.num_states(),
                n
            )));
        }
        if rows.len() != actions.num_pairs() {
            return Err(ModelError::Shape(format!(
                "{} rate rows for {} state-action pairs",
                rows.len(),
                actions.num_pairs()
            )));
        }
        let mut rates = Vec::with_capacity(rows.len() * n);
        for (p, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(ModelError::Shape(format!(
                    "rate row {p} has {} columns, expected {n}",
                    row.len()
                )));
            }
            rates.extend_from_slice(row);
        }
        Self::assemble(
            space,
            actions,
            TransitionKernel::RateMatrix { rates },
            cost,
            alpha,
        )
    }

    /// Model with jump intensities and a per-state jump distribution (rows of `jump`
    /// are used as given; see [`build_gaussian_model`] for exact renormalization).
    pub fn from_intensity_jump(
        space: StateSpace,
        actions: ActionSet,
        lambda: Vec<f64>,
        jump: Vec<Vec<f64>>,
        cost: CostRate,
        alpha: f64,
    ) -> Result<Self, ModelError> {
        let n = space.len();
        check_alpha(alpha)?;
        if actions.num_states() != n || jump.len() != n {
            return Err(ModelError::Shape(format!(
                "{} states, {} action lists, {} jump rows",
                n,
                actions.num_states(),
                jump.len()
            )));
        }
        if lambda.len() != actions.num_pairs() {
            return Err(ModelError::Shape(format!(
                "{} intensities for {} state-action pairs",
                lambda.len(),
                actions.num_pairs()
            )));
        }
        let mut flat = Vec::with_capacity(n * n);
        for (x, row) in jump.iter().enumerate() {
            if row.len() != n {
                return Err(ModelError::Shape(format!(
                    "jump row {x} has {} entries",
                    row.len()
                )));
            }
            flat.extend_from_slice(row);
        }
        Self::assemble(
            space,
            actions,
            TransitionKernel::IntensityJump { lambda, jump: flat },
            cost,
            alpha,
        )
    }

    fn assemble(
        space: StateSpace,
        actions: ActionSet,
        kernel: TransitionKernel,
        cost: CostRate,
        alpha: f64,
    ) -> Result<Self, ModelError> {
        if cost.values.len() != actions.num_pairs() {
            return Err(ModelError::Shape(
                "cost table does not match action set".into(),
            ));
        }
        let n = space.len();
        let mut exit_rates = vec![0.0; actions.num_pairs()];
        for x in 0..n {
            for a in 0..actions.count(x) {
                let p = actions.pair(x, a);
                exit_rates[p] = match &kernel {
                    TransitionKernel::RateMatrix { rates } => {
                        let row = &rates[p * n..(p + 1) * n];
                        row.iter()
                            .enumerate()
                            .filter(|(y, _)| *y != x)
                            .map(|(_, r)| *r)
                            .sum()
                    }
                    TransitionKernel::IntensityJump { lambda, .. } => lambda[p],
                };
            }
        }
        Ok(Self {
            space,
            actions,
            kernel,
            cost,
            alpha,
            exit_rates,
        })
    }

    pub fn kernel(&self) -> &TransitionKernel {
        &self.kernel
    }

    pub fn cost_rate(&self) -> &CostRate {
        &self.cost
    }

    /// Same model with a different discount rate.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self, ModelError> {
        check_alpha(alpha)?;
        Ok(Self {
            alpha,
            ..self.clone()
        })
    }

    /// Same dynamics, different cost table.
    pub fn with_cost(&self, cost: CostRate) -> Result<Self, ModelError> {
        if cost.values.len() != self.actions.num_pairs() {
            return Err(ModelError::Shape(
                "cost table does not match action set".into(),
            ));
        }
        Ok(Self {
            cost,
            ..self.clone()
        })
    }

    /// Effective signed kernel entry `q(y | x, a)`.
    pub fn rate(&self, x: usize, a: usize, y: usize) -> f64 {
        let n = self.space.len();
        let p = self.actions.pair(x, a);
        match &self.kernel {
            TransitionKernel::RateMatrix { rates } => rates[p * n + y],
            TransitionKernel::IntensityJump { lambda, jump } => {
                let mass = jump[x * n + y];
                if y == x {
                    lambda[p] * (mass - 1.0)
                } else {
                    lambda[p] * mass
                }
            }
        }
    }
}

fn check_alpha(alpha: f64) -> Result<(), ModelError> {
    if alpha.is_finite() && alpha > 0.0 {
        Ok(())
    } else {
        Err(ModelError::InvalidAlpha(alpha))
    }
}

impl ControlledChain for CtmdpModel {
    fn space(&self) -> &StateSpace {
        &self.space
    }

    fn actions(&self) -> &ActionSet {
        &self.actions
    }

    fn alpha(&self) -> f64 {
        self.alpha
    }

    fn cost(&self, x: usize, a: usize) -> f64 {
        self.cost.values[self.actions.pair(x, a)]
    }

    fn exit_rate(&self, x: usize, a: usize) -> f64 {
        self.exit_rates[self.actions.pair(x, a)]
    }

    fn apply_generator(&self, x: usize, u: &[f64], out: &mut [f64]) {
        let n = self.space.len();
        let ux = u[x];
        match &self.kernel {
            TransitionKernel::RateMatrix { rates } => {
                for (a, slot) in out.iter_mut().enumerate().take(self.actions.count(x)) {
                    let p = self.actions.pair(x, a);
                    let row = &rates[p * n..(p + 1) * n];
                    let mut acc = 0.0;
                    for (y, (r, uy)) in row.iter().zip(u).enumerate() {
                        if y != x {
                            acc += r * (uy - ux);
                        }
                    }
                    *slot = acc;
                }
            }
            TransitionKernel::IntensityJump { lambda, jump } => {
                // Differences against u(x) make constant functions exact zeros.
                let row = &jump[x * n..(x + 1) * n];
                let mut s = 0.0;
                for (p, uy) in row.iter().zip(u) {
                    s += p * (uy - ux);
                }
                for (a, slot) in out.iter_mut().enumerate().take(self.actions.count(x)) {
                    *slot = lambda[self.actions.pair(x, a)] * s;
                }
            }
        }
    }

    fn jump_rates(&self, x: usize, a: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let n = self.space.len();
        let p = self.actions.pair(x, a);
        match &self.kernel {
            TransitionKernel::RateMatrix { rates } => {
                let row = &rates[p * n..(p + 1) * n];
                out.extend(
                    row.iter()
                        .enumerate()
                        .filter(|(y, r)| *y != x && **r > 0.0)
                        .map(|(y, r)| (y, *r)),
                );
            }
            TransitionKernel::IntensityJump { lambda, jump } => {
                let row = &jump[x * n..(x + 1) * n];
                let l = lambda[p];
                out.extend(
                    row.iter()
                        .enumerate()
                        .filter(|(_, m)| **m > 0.0)
                        .map(|(y, m)| (y, l * m)),
                );
            }
        }
    }
}

/// Grid bounds for a discretized continuous state space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub num_states: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianJumpSpec {
    pub sigma: f64,
    /// `M` in `0 < lambda(x, a) <= M (x^2 + 1)`.
    pub rate_scale: f64,
    /// Largest tolerated `|Z - 1|` for the central row's raw quadrature mass `Z`.
    pub renorm_threshold: f64,
}

impl GaussianJumpSpec {
    pub fn new(sigma: f64, rate_scale: f64) -> Self {
        Self {
            sigma,
            rate_scale,
            renorm_threshold: 1e-3,
        }
    }
}

/// Discretized Gaussian jump model: from `x` the process jumps at intensity
/// `lambda(x, a)` to a normal `N(x, sigma^2)` location.
///
/// `lambda` and `cost` receive the state coordinate and the action index.
pub fn build_gaussian_model<L, C>(
    spec: &GaussianJumpSpec,
    grid: &GridSpec,
    actions_per_state: usize,
    alpha: f64,
    lambda: L,
    cost: C,
) -> Result<CtmdpModel, ModelError>
where
    L: Fn(f64, usize) -> f64,
    C: Fn(f64, usize) -> f64,
{
    if !(spec.sigma.is_finite() && spec.sigma > 0.0) {
        return Err(ModelError::InvalidSigma(spec.sigma));
    }
    if !(spec.rate_scale.is_finite() && spec.rate_scale > 0.0) {
        return Err(ModelError::InvalidRateScale(spec.rate_scale));
    }
    check_alpha(alpha)?;
    if actions_per_state == 0 {
        return Err(ModelError::EmptyActionSet(0));
    }
    let space = StateSpace::uniform(grid.x_min, grid.x_max, grid.num_states)?;
    let actions = ActionSet::uniform(space.len(), actions_per_state)?;
    let n = space.len();

    let mut lam = Vec::with_capacity(actions.num_pairs());
    for x in 0..n {
        let c = space.coord(x);
        let bound = spec.rate_scale * (c * c + 1.0);
        for a in 0..actions_per_state {
            let l = lambda(c, a);
            if !(l.is_finite() && l > 0.0 && l <= bound) {
                return Err(ModelError::IntensityBound {
                    state: x,
                    coord: c,
                    action: a,
                    lambda: l,
                    bound,
                });
            }
            lam.push(l);
        }
    }

    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * spec.sigma);
    let two_var = 2.0 * spec.sigma * spec.sigma;
    let center = space.nearest(0.5 * (grid.x_min + grid.x_max));
    let mut jump = Vec::with_capacity(n);
    for x in 0..n {
        let cx = space.coord(x);
        let mut row: Vec<f64> = space
            .coords()
            .iter()
            .zip(space.weights())
            .map(|(y, w)| norm * (-(y - cx).powi(2) / two_var).exp() * w)
            .collect();
        let z = row_mass(&row);
        if x == center && (z - 1.0).abs() > spec.renorm_threshold {
            return Err(ModelError::GridTooCoarse {
                factor: z,
                threshold: spec.renorm_threshold,
            });
        }
        if !(z.is_finite() && z > 0.0) {
            return Err(ModelError::InvalidJumpRow { state: x });
        }
        normalize_exact(&mut row);
        jump.push(row);
    }

    let cost = CostRate::from_fn(&actions, |x, a| cost(space.coord(x), a))?;
    CtmdpModel::from_intensity_jump(space, actions, lam, jump, cost, alpha)
}

/// Left-to-right sum; the order every mass check in this crate uses.
pub fn row_mass(row: &[f64]) -> f64 {
    row.iter().sum()
}

/// Scales `row` to unit mass, then absorbs the rounding residue into the
/// last nonzero entry so that the left-to-right sum is exactly `1.0`.
pub fn normalize_exact(row: &mut [f64]) {
    let z = row_mass(row);
    for v in row.iter_mut() {
        *v /= z;
    }
    let Some(last) = row.iter().rposition(|v| *v != 0.0) else {
        return;
    };
    let imax = row
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(last);
    for _ in 0..64 {
        let head: f64 = row[..last].iter().sum();
        if head <= 1.0 {
            // exact: head lies in [0.5, 1] unless the tail carries the mass
            row[last] = 1.0 - head;
            if row_mass(row) == 1.0 {
                return;
            }
        }
        row[imax] = row[imax].next_down();
    }
}

/// Checks conservativity, off-diagonal nonnegativity and stability of every row.
///
/// Check ids: `conservative` (lhs = |row sum|), `offdiag_nonneg`
/// (lhs = -q(y|x,a)), `stable` (lhs = q*(x)).
pub fn validate_kernel(model: &CtmdpModel, tol: f64) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = model.space.len();
    for x in 0..n {
        let cx = model.space.coord(x);
        for a in 0..model.actions.count(x) {
            let mut sum = 0.0;
            for y in 0..n {
                let r = model.rate(x, a, y);
                sum += r;
                if y != x {
                    report.check_le("offdiag_nonneg", x, cx, Some(a), -r, 0.0, 0.0);
                }
            }
            if let TransitionKernel::IntensityJump { lambda, jump } = &model.kernel {
                // Row sums of lambda * (p - delta) are lambda * (mass - 1).
                let p = model.actions.pair(x, a);
                sum = lambda[p] * (row_mass(&jump[x * n..(x + 1) * n]) - 1.0);
                report.check_le("offdiag_nonneg", x, cx, Some(a), -lambda[p], 0.0, 0.0);
            }
            report.check_le("conservative", x, cx, Some(a), sum.abs(), tol, 0.0);
        }
        report.check_le("stable", x, cx, None, model.max_exit_rate(x), f64::MAX, 0.0);
    }
    report
}

/// Level-`n` truncation: rows vanish and costs are zero outside `{V0 <= n}`;
/// inside, costs are capped at `min(n, rho1 ln V0 + L0)`.
#[derive(Debug, Clone)]
pub struct TruncatedModel<'a> {
    base: &'a CtmdpModel,
    level: f64,
    inside: Vec<bool>,
    cost: Vec<f64>,
    q_bar: f64,
}

pub fn truncate<'a>(
    model: &'a CtmdpModel,
    cert: &LyapunovCertificate,
    level: f64,
) -> Result<TruncatedModel<'a>, crate::lyapunov::CertificateError> {
    let v0 = cert.v0_values(&model.space)?;
    let n = model.space.len();
    let mut inside = vec![false; n];
    let mut cost = vec![0.0; model.actions.num_pairs()];
    let mut q_bar: f64 = 0.0;
    for x in 0..n {
        if v0[x] > level {
            continue;
        }
        inside[x] = true;
        let cap = level.min(cert.rho1 * v0[x].ln() + cert.l0);
        for a in 0..model.actions.count(x) {
            let p = model.actions.pair(x, a);
            cost[p] = model.cost.values[p].min(cap);
            q_bar = q_bar.max(model.exit_rates[p]);
        }
    }
    Ok(TruncatedModel {
        base: model,
        level,
        inside,
        cost,
        q_bar,
    })
}

impl<'a> TruncatedModel<'a> {
    pub fn base(&self) -> &'a CtmdpModel {
        self.base
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn is_inside(&self, x: usize) -> bool {
        self.inside[x]
    }

    pub fn inside_mask(&self) -> &[bool] {
        &self.inside
    }

    /// `max_{x, a} q^(n)_x(a)`.
    pub fn q_bar(&self) -> f64 {
        self.q_bar
    }
}

impl ControlledChain for TruncatedModel<'_> {
    fn space(&self) -> &StateSpace {
        &self.base.space
    }

    fn actions(&self) -> &ActionSet {
        &self.base.actions
    }

    fn alpha(&self) -> f64 {
        self.base.alpha
    }

    fn cost(&self, x: usize, a: usize) -> f64 {
        self.cost[self.base.actions.pair(x, a)]
    }

    fn exit_rate(&self, x: usize, a: usize) -> f64 {
        if self.inside[x] {
            self.base.exit_rate(x, a)
        } else {
            0.0
        }
    }

    fn apply_generator(&self, x: usize, u: &[f64], out: &mut [f64]) {
        if self.inside[x] {
            self.base.apply_generator(x, u, out);
        } else {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn jump_rates(&self, x: usize, a: usize, out: &mut Vec<(usize, f64)>) {
        if self.inside[x] {
            self.base.jump_rates(x, a, out);
        } else {
            out.clear();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lyapunov::{GrowthFn, LyapunovCertificate};

    fn two_state(rows: Vec<Vec<f64>>) -> CtmdpModel {
        let actions = ActionSet::uniform(2, rows.len() / 2).unwrap();
        let cost = CostRate::new(&actions, vec![0.0; rows.len()]).unwrap();
        CtmdpModel::from_rate_rows(StateSpace::finite(2), actions, rows, cost, 1.0).unwrap()
    }

    fn unit_cert() -> LyapunovCertificate {
        LyapunovCertificate {
            v0: GrowthFn::Constant(1.0),
            v1: GrowthFn::Constant(1.0),
            rho0: 0.5,
            m0: 2.0,
            l0: 1.0,
            rho1: 0.5,
            rho2: 0.5,
            b1: 0.0,
            m1: 1.0,
        }
    }

    #[test]
    fn conservative_matrix_validates() {
        let m = two_state(vec![vec![-1.0, 1.0], vec![2.0, -2.0]]);
        assert!(validate_kernel(&m, 1e-12).is_empty());
    }

    #[test]
    fn reports_conservativity_gap() {
        let m = two_state(vec![vec![-1.0, 0.9], vec![2.0, -2.0]]);
        let r = validate_kernel(&m, 1e-12);
        let v: Vec<_> = r.of_kind("conservative").collect();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].state, 0);
        assert!((v[0].lhs - 0.1).abs() < 1e-12);
    }

    #[test]
    fn reports_negative_off_diagonal() {
        let m = two_state(vec![vec![0.5, -0.5], vec![2.0, -2.0]]);
        let r = validate_kernel(&m, 1e-12);
        assert_eq!(r.of_kind("offdiag_nonneg").count(), 1);
        assert_eq!(r.of_kind("conservative").count(), 0);
    }

    #[test]
    fn non_finite_rate_is_unstable() {
        let m = two_state(vec![vec![-f64::INFINITY, f64::INFINITY], vec![2.0, -2.0]]);
        let r = validate_kernel(&m, 1e-12);
        assert!(r.of_kind("stable").count() >= 1);
    }

    #[test]
    fn absorbing_state_is_legal() {
        let m = two_state(vec![vec![-1.0, 1.0], vec![0.0, 0.0]]);
        assert!(validate_kernel(&m, 1e-12).is_empty());
        assert_eq!(m.max_exit_rate(1), 0.0);
    }

    #[test]
    fn uniform_grid_weights_sum_to_length() {
        let s = StateSpace::uniform(-3.0, 5.0, 81).unwrap();
        let total: f64 = s.weights().iter().sum();
        assert!((total - 8.0).abs() < 1e-12);
        assert_eq!(s.coord(80), 5.0);
    }

    #[test]
    fn rejects_duplicate_coordinates() {
        assert!(StateSpace::from_coords(vec![0.0, 1.0, 0.0], vec![1.0; 3]).is_err());
    }

    fn gaussian(grid: GridSpec, m: f64) -> CtmdpModel {
        build_gaussian_model(
            &GaussianJumpSpec::new(1.0, m),
            &grid,
            2,
            1.0,
            |x, _| m * (x * x + 1.0),
            |_, _| 0.0,
        )
        .unwrap()
    }

    #[test]
    fn gaussian_rows_have_unit_mass_exactly() {
        let m = gaussian(
            GridSpec {
                x_min: -8.0,
                x_max: 8.0,
                num_states: 161,
            },
            1.0,
        );
        let TransitionKernel::IntensityJump { jump, .. } = m.kernel() else {
            panic!("expected intensity kernel")
        };
        for row in jump.chunks(161) {
            assert_eq!(row_mass(row), 1.0);
        }
        assert!(validate_kernel(&m, 0.0).is_empty());
    }

    #[test]
    fn gaussian_sup_rate_at_origin() {
        let m = gaussian(
            GridSpec {
                x_min: -4.0,
                x_max: 4.0,
                num_states: 81,
            },
            0.3,
        );
        let origin = m.space().nearest(0.0);
        assert_eq!(m.max_exit_rate(origin), 0.3);
    }

    #[test]
    fn gaussian_second_moment_matches_variance() {
        let m = gaussian(
            GridSpec {
                x_min: -8.0,
                x_max: 8.0,
                num_states: 1601,
            },
            1.0,
        );
        let TransitionKernel::IntensityJump { jump, .. } = m.kernel() else {
            unreachable!()
        };
        let x = m.space().nearest(0.0);
        assert_eq!(m.space().coord(x), 0.0);
        let row = &jump[x * 1601..(x + 1) * 1601];
        let second: f64 = row
            .iter()
            .zip(m.space().coords())
            .map(|(p, y)| p * y * y)
            .sum();
        assert!((second - 1.0).abs() < 1e-6, "second moment {second}");
        let fourth: f64 = row
            .iter()
            .zip(m.space().coords())
            .map(|(p, y)| p * y.powi(4))
            .sum();
        assert!((fourth - 3.0).abs() < 1e-6, "fourth moment {fourth}");
    }

    #[test]
    fn gaussian_rejects_bad_inputs() {
        let grid = GridSpec {
            x_min: -4.0,
            x_max: 4.0,
            num_states: 81,
        };
        let err = build_gaussian_model(
            &GaussianJumpSpec::new(0.0, 1.0),
            &grid,
            1,
            1.0,
            |_, _| 1.0,
            |_, _| 0.0,
        );
        assert!(matches!(err, Err(ModelError::InvalidSigma(_))));

        let coarse = GridSpec {
            x_min: -4.0,
            x_max: 4.0,
            num_states: 5,
        };
        let err = build_gaussian_model(
            &GaussianJumpSpec::new(0.2, 1.0),
            &coarse,
            1,
            1.0,
            |_, _| 1.0,
            |_, _| 0.0,
        );
        assert!(matches!(err, Err(ModelError::GridTooCoarse { .. })));

        let err = build_gaussian_model(
            &GaussianJumpSpec::new(1.0, 1.0),
            &grid,
            1,
            1.0,
            |x, _| 2.0 * (x * x + 1.0),
            |_, _| 0.0,
        );
        assert!(matches!(err, Err(ModelError::IntensityBound { .. })));
    }

    #[test]
    fn truncation_zeroes_rows_outside_level_set() {
        let m = gaussian(
            GridSpec {
                x_min: -4.0,
                x_max: 4.0,
                num_states: 81,
            },
            0.01,
        );
        let m = m
            .with_cost(CostRate::from_fn(m.actions(), |_, _| 0.2).unwrap())
            .unwrap();
        let cert = LyapunovCertificate {
            v0: GrowthFn::Polynomial(vec![1.0, 0.0, 1.0]),
            ..unit_cert()
        };
        let t = truncate(&m, &cert, 5.0).unwrap();
        for x in 0..m.num_states() {
            let c = m.space().coord(x);
            assert_eq!(t.is_inside(x), c.abs() <= 2.0 + 1e-12, "x = {c}");
            if !t.is_inside(x) {
                let mut out = vec![1.0; 2];
                t.apply_generator(x, &vec![3.0; 81], &mut out);
                assert_eq!(out, vec![0.0, 0.0]);
                assert_eq!(t.cost(x, 0), 0.0);
                assert_eq!(t.exit_rate(x, 1), 0.0);
            }
        }
    }

    #[test]
    fn truncated_cost_is_min_of_three() {
        // c = 5, n = 3, rho1 ln V0 + L0 = 10 -> c_n = 3.
        let actions = ActionSet::uniform(1, 1).unwrap();
        let cost = CostRate::new(&actions, vec![5.0]).unwrap();
        let m =
            CtmdpModel::from_rate_rows(StateSpace::finite(1), actions, vec![vec![0.0]], cost, 1.0)
                .unwrap();
        let cert = LyapunovCertificate {
            l0: 10.0,
            ..unit_cert()
        };
        let t = truncate(&m, &cert, 3.0).unwrap();
        assert_eq!(t.cost(0, 0), 3.0);

        // V0 = n + 1 puts the state outside.
        let cert = LyapunovCertificate {
            v0: GrowthFn::Constant(4.0),
            ..unit_cert()
        };
        let t = truncate(&m, &cert, 3.0).unwrap();
        assert!(!t.is_inside(0));
        assert_eq!(t.cost(0, 0), 0.0);
    }
}
