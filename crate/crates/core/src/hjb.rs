//! θ-parameterized HJB solver.
//!
//! The value `phi(theta, x)` of the risk-sensitive problem solves
//!
//! ```text
//! alpha theta d/dtheta phi(theta, x) = min_a [ sum_y q(y|x,a) phi(theta, y) + theta c(x,a) phi(theta, x) ]
//! ```
//!
//! It is constructed through bounded subproblems. For a truncation level `n`
//! and a left boundary `0 < delta < 1`, the truncated value is the fixed
//! point of the Volterra-type operator
//!
//! ```text
//! T u(theta, x) = e^{n delta / alpha}
//!               + (1/alpha) int_delta^theta min_a [ (1/s) sum_y q_n(y|x,a) u(s, y) + c_n(x,a) u(s, x) ] ds
//! ```
//!
//! some power of which is a contraction, so plain Picard iteration converges.
//! [`solve_hjb`] then drives `delta -> 0` (fields decrease) and `n -> infinity`
//! (fields increase) over finite schedules.
//!
//! The `delta -> 0` limit is accelerated: the truncation bias is smooth in
//! `delta` to leading orders, so the last three levels are combined by
//! polynomial (Richardson) extrapolation and the result is clamped to the bracket
//! `max(1, e^{-n delta/alpha} phi_delta) <= phi_n <= min(phi_delta, e^{n theta/alpha})`.

use rayon::prelude::*;
use thiserror::Error;

use crate::lyapunov::{CertificateError, LyapunovCertificate};
use crate::model::{truncate, validate_kernel, ControlledChain, CtmdpModel, TruncatedModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("invalid theta grid: {0}")]
    InvalidGrid(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error(
        "Picard iteration did not converge in {iterations} sweeps (last change {last_change:e})"
    )]
    PicardNotConverged { iterations: usize, last_change: f64 },
    #[error("{which} schedule exhausted without convergence (last difference {last_diff:e}, tol {tol:e})")]
    ScheduleNotConverged {
        which: &'static str,
        last_diff: f64,
        tol: f64,
    },
    #[error(
        "monotonicity violated in the {which} loop by {amount:e} (> 10 x tol); \
         the discretization is inconsistent"
    )]
    Monotonicity { which: &'static str, amount: f64 },
    #[error("model kernel is invalid: {0}")]
    InvalidKernel(String),
    #[error(transparent)]
    Certificate(#[from] CertificateError),
}

/// Ordered θ nodes in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaGrid {
    nodes: Vec<f64>,
}

impl ThetaGrid {
    pub fn new(nodes: Vec<f64>) -> Result<Self, SolveError> {
        if nodes.len() < 2 {
            return Err(SolveError::InvalidGrid("need at least two nodes".into()));
        }
        if nodes.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(SolveError::InvalidGrid("nodes must lie in [0, 1]".into()));
        }
        if nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SolveError::InvalidGrid(
                "nodes must be strictly increasing".into(),
            ));
        }
        Ok(Self { nodes })
    }

    /// `size` equally spaced nodes including both endpoints.
    pub fn uniform(size: usize) -> Result<Self, SolveError> {
        if size < 2 {
            return Err(SolveError::InvalidGrid("need at least two nodes".into()));
        }
        let last = (size - 1) as f64;
        Self::new((0..size).map(|i| i as f64 / last).collect())
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.nodes[0]
    }

    pub fn max_step(&self) -> f64 {
        self.nodes
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// Inserts the midpoint of every interval.
    pub fn refined(&self) -> Self {
        let mut nodes = Vec::with_capacity(2 * self.nodes.len() - 1);
        for w in self.nodes.windows(2) {
            nodes.push(w[0]);
            nodes.push(0.5 * (w[0] + w[1]));
        }
        nodes.push(*self.nodes.last().unwrap());
        Self { nodes }
    }

    /// Solve grid on `[delta, max node]`: every node above `delta`, plus
    /// geometric nodes `delta * grading^k` wherever the base spacing is coarse
    /// relative to `theta`. The `1/s` factor in the operator makes relative,
    /// not absolute, resolution the relevant measure near `delta`.
    pub fn truncated(&self, delta: f64, grading: f64) -> Result<Self, SolveError> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(SolveError::InvalidGrid(format!(
                "delta must lie in (0, 1), got {delta}"
            )));
        }
        if !(grading > 1.0 && grading.is_finite()) {
            return Err(SolveError::InvalidGrid(format!(
                "grading must exceed 1, got {grading}"
            )));
        }
        let top = *self.nodes.last().unwrap();
        if delta >= top {
            return Err(SolveError::InvalidGrid(format!(
                "delta {delta} is not below the last node {top}"
            )));
        }
        let base: Vec<f64> = self
            .nodes
            .iter()
            .copied()
            .filter(|t| *t > delta * (1.0 + 1e-12))
            .collect();
        let reach = (self.max_step() / (grading - 1.0)).min(top);
        let min_gap = 0.25 * (grading - 1.0);
        let mut nodes = vec![delta];
        let mut bi = 0;
        let mut g = delta * grading;
        loop {
            let next_base = base.get(bi).copied();
            let take_graded = g < reach && next_base.is_none_or(|b| g < b);
            if take_graded {
                // skip graded nodes that crowd the next base node
                let last = *nodes.last().unwrap();
                let crowded =
                    next_base.is_some_and(|b| b - g < min_gap * b) || g - last < min_gap * g;
                if !crowded {
                    nodes.push(g);
                }
                g *= grading;
            } else if let Some(b) = next_base {
                nodes.push(b);
                bi += 1;
            } else {
                break;
            }
        }
        Self::new(nodes)
    }

    /// Index of the node closest to `theta` (lower index on ties).
    pub fn nearest(&self, theta: f64) -> usize {
        nearest_index(&self.nodes, theta)
    }
}

pub(crate) fn nearest_index(nodes: &[f64], theta: f64) -> usize {
    let i = nodes.partition_point(|t| *t < theta);
    if i == 0 {
        return 0;
    }
    if i == nodes.len() {
        return nodes.len() - 1;
    }
    if theta - nodes[i - 1] <= nodes[i] - theta {
        i - 1
    } else {
        i
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FieldMeta {
    pub level: Option<f64>,
    pub delta: Option<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Values on a (θ-node × state) grid, stored row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    nodes: Vec<f64>,
    num_states: usize,
    values: Vec<f64>,
    pub meta: FieldMeta,
}

impl ValueField {
    pub fn constant(grid: &ThetaGrid, num_states: usize, value: f64) -> Self {
        Self {
            nodes: grid.nodes.clone(),
            num_states,
            values: vec![value; grid.len() * num_states],
            meta: FieldMeta::default(),
        }
    }

    pub fn from_fn(grid: &ThetaGrid, num_states: usize, mut f: impl FnMut(f64, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len() * num_states);
        for &t in grid.nodes() {
            for x in 0..num_states {
                values.push(f(t, x));
            }
        }
        Self {
            nodes: grid.nodes.clone(),
            num_states,
            values,
            meta: FieldMeta::default(),
        }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn grid(&self) -> ThetaGrid {
        ThetaGrid {
            nodes: self.nodes.clone(),
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn get(&self, node: usize, x: usize) -> f64 {
        self.values[node * self.num_states + x]
    }

    pub fn set(&mut self, node: usize, x: usize, v: f64) {
        self.values[node * self.num_states + x] = v;
    }

    pub fn row(&self, node: usize) -> &[f64] {
        &self.values[node * self.num_states..(node + 1) * self.num_states]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Value at the node equal to `theta` (within 1e-12), if any.
    pub fn at(&self, theta: f64, x: usize) -> Option<f64> {
        let i = nearest_index(&self.nodes, theta);
        ((self.nodes[i] - theta).abs() <= 1e-12).then(|| self.get(i, x))
    }

    /// `max |self - other|` over identical grids.
    pub fn sup_diff(&self, other: &ValueField) -> f64 {
        assert_eq!(self.values.len(), other.values.len(), "field shapes differ");
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `max |self - other|` over nodes `theta >= theta_min` of identical grids.
    pub fn sup_diff_above(&self, other: &ValueField, theta_min: f64) -> f64 {
        assert_eq!(self.values.len(), other.values.len(), "field shapes differ");
        let mut m: f64 = 0.0;
        for (i, &t) in self.nodes.iter().enumerate() {
            if t < theta_min {
                continue;
            }
            for x in 0..self.num_states {
                m = m.max((self.get(i, x) - other.get(i, x)).abs());
            }
        }
        m
    }

    /// `max (self - other)`: positive where `self` exceeds `other`.
    pub fn max_excess(&self, other: &ValueField) -> f64 {
        assert_eq!(self.values.len(), other.values.len(), "field shapes differ");
        self.values
            .iter()
            .zip(&other.values)
            .fold(f64::NEG_INFINITY, |m, (a, b)| m.max(a - b))
    }

    /// `max |self - other|` over nodes of `self` that also appear in `other`.
    pub fn sup_diff_common(&self, other: &ValueField) -> f64 {
        let mut m: f64 = 0.0;
        for (i, &t) in self.nodes.iter().enumerate() {
            for x in 0..self.num_states {
                if let Some(v) = other.at(t, x) {
                    m = m.max((self.get(i, x) - v).abs());
                }
            }
        }
        m
    }

    /// Re-samples onto `grid`: nodes below this field's first node take
    /// `fill`; every other node must coincide with a node of this field.
    pub fn extend_to(&self, grid: &ThetaGrid, fill: f64) -> ValueField {
        let first = self.nodes[0];
        let mut out = ValueField::constant(grid, self.num_states, fill);
        for (i, &t) in grid.nodes().iter().enumerate() {
            if t < first - 1e-12 {
                continue;
            }
            let j = nearest_index(&self.nodes, t);
            assert!(
                (self.nodes[j] - t).abs() <= 1e-12 * t.max(1e-300)
                    || (self.nodes[j] - t).abs() <= 1e-15,
                "node {t} missing from source field"
            );
            out.values[i * self.num_states..(i + 1) * self.num_states].copy_from_slice(self.row(j));
        }
        out.meta = self.meta.clone();
        out
    }

    /// `max_x, consecutive nodes |phi(θ_{i+1}, x) - phi(θ_i, x)| / (θ_{i+1} - θ_i) / bound(x)`.
    pub fn max_lipschitz_ratio(&self, bound: impl Fn(usize) -> f64) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.nodes.len().saturating_sub(1) {
            let dt = self.nodes[i + 1] - self.nodes[i];
            for x in 0..self.num_states {
                let slope = (self.get(i + 1, x) - self.get(i, x)).abs() / dt;
                let b = bound(x);
                let r = if b.is_infinite() { 0.0 } else { slope / b };
                worst = worst.max(r);
            }
        }
        worst
    }

    /// Largest decrease along θ at fixed state (0 when nondecreasing).
    pub fn theta_monotone_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.nodes.len().saturating_sub(1) {
            for x in 0..self.num_states {
                worst = worst.max(self.get(i, x) - self.get(i + 1, x));
            }
        }
        worst
    }
}

/// Deterministic Markov selector on a (θ-node × state) grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyField {
    nodes: Vec<f64>,
    num_states: usize,
    actions: Vec<usize>,
}

impl PolicyField {
    pub fn new(
        nodes: Vec<f64>,
        num_states: usize,
        actions: Vec<usize>,
    ) -> Result<Self, SolveError> {
        ThetaGrid::new(nodes.clone()).or_else(|e| {
            if nodes.len() == 1 && (0.0..=1.0).contains(&nodes[0]) {
                Ok(ThetaGrid {
                    nodes: nodes.clone(),
                })
            } else {
                Err(e)
            }
        })?;
        if actions.len() != nodes.len() * num_states {
            return Err(SolveError::InvalidGrid(format!(
                "{} actions for {} nodes x {} states",
                actions.len(),
                nodes.len(),
                num_states
            )));
        }
        Ok(Self {
            nodes,
            num_states,
            actions,
        })
    }

    /// θ-independent selector `f(x)`.
    pub fn stationary(actions: Vec<usize>) -> Self {
        Self {
            nodes: vec![1.0],
            num_states: actions.len(),
            actions,
        }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn action(&self, node: usize, x: usize) -> usize {
        self.actions[node * self.num_states + x]
    }

    pub fn nearest_node(&self, theta: f64) -> usize {
        nearest_index(&self.nodes, theta)
    }

    pub fn action_at(&self, theta: f64, x: usize) -> usize {
        self.action(self.nearest_node(theta), x)
    }

    /// The time-domain selector `f(t, x) = f*(theta0 e^{-alpha t}, x)`.
    pub fn action_at_time(&self, theta0: f64, alpha: f64, t: f64, x: usize) -> usize {
        self.action_at(theta0 * (-alpha * t).exp(), x)
    }

    /// Whether every action index is admissible for `chain`.
    pub fn is_admissible(&self, chain: &impl ControlledChain) -> bool {
        self.num_states == chain.num_states()
            && (0..self.nodes.len())
                .all(|i| (0..self.num_states).all(|x| self.action(i, x) < chain.num_actions(x)))
    }
}

/// Picard iteration controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    /// Stop once `max |T u - u| <= tol * max(1, max |T u|)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Round-off floor: when the sweep change has not halved for
    /// `stall_window` sweeps and its minimum is below `stall_tol * scale`,
    /// the iteration is accepted as converged to working precision.
    pub stall_window: usize,
    pub stall_tol: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 20_000,
            stall_window: 100,
            stall_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// `max |u_{k+1} - u_k|` for every sweep.
    pub sweep_changes: Vec<f64>,
    pub final_change: f64,
    /// Accepted at the round-off floor rather than at `tol`.
    pub stalled: bool,
}

impl SolveReport {
    /// Ratios `d_{k+m} / d_k` of sweep changes, skipping pairs whose
    /// denominator is at round-off level (`d_k <= floor`).
    pub fn m_step_ratios(&self, m: usize, floor: f64) -> Vec<f64> {
        let d = &self.sweep_changes;
        (0..d.len().saturating_sub(m))
            .filter(|&k| d[k] > floor && d[k + m] > 0.0)
            .map(|k| d[k + m] / d[k])
            .collect()
    }
}

/// Applies the truncated Picard operator to `u`, a field on `[delta, 1]`.
pub fn apply_t(u: &ValueField, model_n: &TruncatedModel<'_>) -> ValueField {
    let alpha = model_n.alpha();
    let delta = u.nodes[0];
    let boundary = (model_n.level() * delta / alpha).exp();
    apply_t_with(u, model_n, boundary)
}

fn apply_t_with(u: &ValueField, model_n: &TruncatedModel<'_>, boundary: f64) -> ValueField {
    let alpha = model_n.alpha();
    let ns = u.num_states;
    let nodes = &u.nodes;
    let max_actions = model_n.actions().max_count();

    let columns: Vec<Vec<f64>> = (0..ns)
        .into_par_iter()
        .map(|x| {
            let k = model_n.num_actions(x);
            let mut gen = vec![0.0; max_actions];
            let mut col = Vec::with_capacity(nodes.len());
            let mut acc = boundary;
            let mut g_prev = 0.0;
            for (j, &s) in nodes.iter().enumerate() {
                let row = u.row(j);
                model_n.apply_generator(x, row, &mut gen[..k]);
                let mut g = f64::INFINITY;
                for (a, ga) in gen[..k].iter().enumerate() {
                    g = g.min(ga / s + model_n.cost(x, a) * row[x]);
                }
                if j > 0 {
                    acc += 0.5 * (s - nodes[j - 1]) * (g_prev + g) / alpha;
                }
                col.push(acc);
                g_prev = g;
            }
            col
        })
        .collect();

    let mut out = ValueField {
        nodes: nodes.clone(),
        num_states: ns,
        values: vec![0.0; u.values.len()],
        meta: u.meta.clone(),
    };
    for (x, col) in columns.iter().enumerate() {
        for (j, v) in col.iter().enumerate() {
            out.values[j * ns + x] = *v;
        }
    }
    out
}

/// Picard-iterates the truncated operator on `grid` (which starts at `delta`)
/// from the constant boundary value.
pub fn solve_truncated(
    model_n: &TruncatedModel<'_>,
    grid: &ThetaGrid,
    opts: &PicardOptions,
) -> Result<(ValueField, SolveReport), SolveError> {
    let boundary = (model_n.level() * grid.first() / model_n.alpha()).exp();
    let init = ValueField::constant(grid, model_n.num_states(), boundary);
    solve_truncated_from(model_n, init, opts)
}

/// Picard iteration from an arbitrary bounded initial field.
pub fn solve_truncated_from(
    model_n: &TruncatedModel<'_>,
    init: ValueField,
    opts: &PicardOptions,
) -> Result<(ValueField, SolveReport), SolveError> {
    let delta = init.nodes[0];
    if !(delta > 0.0) {
        return Err(SolveError::InvalidGrid(
            "truncated solves need delta > 0".into(),
        ));
    }
    let boundary = (model_n.level() * delta / model_n.alpha()).exp();
    let mut u = init;
    let mut report = SolveReport::default();
    let mut best = f64::INFINITY;
    let mut best_at = 0;
    for it in 1..=opts.max_iter {
        let next = apply_t_with(&u, model_n, boundary);
        let change = next.sup_diff(&u);
        let scale = next.max_abs().max(1.0);
        report.sweep_changes.push(change);
        report.iterations = it;
        report.final_change = change;
        u = next;
        if !change.is_finite() {
            break;
        }
        if change < 0.5 * best {
            best = change;
            best_at = it;
        }
        let stalled = it - best_at >= opts.stall_window && change <= opts.stall_tol * scale;
        report.stalled = stalled && change > opts.tol * scale;
        if change <= opts.tol * scale || stalled {
            u.meta = FieldMeta {
                level: Some(model_n.level()),
                delta: Some(delta),
                iterations: it,
                residual: change,
            };
            return Ok((u, report));
        }
    }
    Err(SolveError::PicardNotConverged {
        iterations: report.iterations,
        last_change: report.final_change,
    })
}

/// `beta = [ -2 q_bar ln(delta) + n (1 - delta) ]^m / (alpha^m m!)`.
pub fn contraction_bound(level: f64, delta: f64, q_bar: f64, alpha: f64, m: usize) -> f64 {
    let b = (-2.0 * q_bar * delta.ln() + level * (1.0 - delta)) / alpha;
    (1..=m).fold(1.0, |acc, k| acc * b / k as f64)
}

/// Least `m >= 1` with `contraction_bound(..., m) < 1`.
pub fn contraction_steps(level: f64, delta: f64, q_bar: f64, alpha: f64) -> usize {
    let b = (-2.0 * q_bar * delta.ln() + level * (1.0 - delta)) / alpha;
    let mut beta = 1.0;
    let mut m = 0;
    loop {
        m += 1;
        beta *= b / m as f64;
        if beta < 1.0 {
            return m;
        }
    }
}

/// `2 e^{2n/alpha} (e^{n/alpha} - 1)`: θ-Lipschitz constant of the truncated fields.
pub fn truncated_lipschitz_constant(level: f64, alpha: f64) -> f64 {
    2.0 * (2.0 * level / alpha).exp() * (level / alpha).exp_m1()
}

/// δ and n schedules for the double limit.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedules {
    pub delta_list: Vec<f64>,
    pub n_list: Vec<f64>,
}

impl Schedules {
    pub fn validate(&self) -> Result<(), SolveError> {
        if self.delta_list.is_empty() || self.n_list.is_empty() {
            return Err(SolveError::InvalidSchedule(
                "schedules must be nonempty".into(),
            ));
        }
        if self.delta_list.iter().any(|d| !(*d > 0.0 && *d < 1.0)) {
            return Err(SolveError::InvalidSchedule(
                "delta_list entries must lie in (0, 1)".into(),
            ));
        }
        if self.delta_list.windows(2).any(|w| w[1] >= w[0]) {
            return Err(SolveError::InvalidSchedule(
                "delta_list must be strictly decreasing".into(),
            ));
        }
        if self.n_list.iter().any(|n| !(*n >= 1.0 && n.is_finite())) {
            return Err(SolveError::InvalidSchedule(
                "n_list entries must be >= 1".into(),
            ));
        }
        if self.n_list.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SolveError::InvalidSchedule(
                "n_list must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    /// `delta = 0.1 * 2^-k` down to about 1e-6, and `n` doubling from
    /// `max(2, ceil(median V0))` until it exceeds both the largest `V0` and the
    /// largest cost on the grid, plus one more doubling to confirm convergence.
    pub fn default_for(model: &CtmdpModel, cert: &LyapunovCertificate) -> Result<Self, SolveError> {
        let delta_list = (0..=16).map(|k| 0.1 * 0.5f64.powi(k)).collect();
        let mut v0 = cert.v0_values(model.space())?;
        let v0_max = v0.iter().copied().fold(1.0, f64::max);
        v0.sort_by(f64::total_cmp);
        let median = v0[v0.len() / 2];
        let c_max = model
            .cost_rate()
            .values()
            .iter()
            .copied()
            .fold(0.0, f64::max);
        let mut n = median.ceil().max(2.0);
        let mut n_list = vec![n];
        while n <= v0_max || n <= c_max {
            n *= 2.0;
            n_list.push(n);
        }
        n_list.push(2.0 * n);
        Ok(Self { delta_list, n_list })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HjbOptions {
    pub picard: PicardOptions,
    /// Convergence tolerance of both schedule loops, relative to `max(1, max |phi|)`.
    pub tol: f64,
    /// Geometric ratio of the θ refinement near `delta`.
    pub grading: f64,
    /// Tolerance of the monotonicity monitors, relative to field scale.
    pub monotone_tol: f64,
    /// Conservativity tolerance used when validating the kernel up front.
    pub kernel_tol: f64,
}

impl Default for HjbOptions {
    fn default() -> Self {
        Self {
            picard: PicardOptions::default(),
            tol: 1e-6,
            grading: 1.25,
            monotone_tol: 1e-8,
            kernel_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LevelReport {
    pub level: f64,
    pub q_bar: f64,
    pub deltas: Vec<f64>,
    pub picard_iterations: Vec<usize>,
    /// Successive differences of the extrapolated δ-limit estimates.
    pub delta_diffs: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Monitors {
    /// Largest increase of the raw field when δ decreases (should be <= 0).
    pub delta_monotone_violation: f64,
    /// Largest decrease of the raw field when n increases at equal δ (should be <= 0).
    pub level_monotone_violation: f64,
    /// Largest decrease along θ of the final field.
    pub theta_monotone_violation: f64,
    /// Largest observed slope over the truncated-field Lipschitz constant.
    pub truncated_lipschitz_ratio: f64,
    /// Largest observed slope over the certificate Lipschitz constant (final field).
    pub limit_lipschitz_ratio: f64,
    /// Nodes where the final field leaves `[1, value_upper_bound]` by more than tol.
    pub enclosure_violations: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HjbReport {
    pub levels: Vec<LevelReport>,
    pub level_diffs: Vec<f64>,
    pub monitors: Monitors,
    pub residual: f64,
    /// Raw truncated fields of the last level, one per δ, on the output grid.
    pub last_level_fields: Vec<ValueField>,
}

impl HjbReport {
    pub fn total_picard_iterations(&self) -> usize {
        self.levels
            .iter()
            .flat_map(|l| l.picard_iterations.iter())
            .sum()
    }

    pub fn monitors_pass(&self, monotone_tol: f64) -> bool {
        let m = &self.monitors;
        m.delta_monotone_violation <= monotone_tol
            && m.level_monotone_violation <= monotone_tol
            && m.theta_monotone_violation <= monotone_tol
            && m.truncated_lipschitz_ratio <= 1.0
            && m.limit_lipschitz_ratio <= 1.0
            && m.enclosure_violations == 0
    }
}

/// Number of truncated fields combined in the δ -> 0 extrapolation.
const EXTRAPOLATION_POINTS: usize = 3;

/// Polynomial extrapolation of `ln phi` to `delta = 0` through the last
/// [`EXTRAPOLATION_POINTS`] fields with `delta <= theta` at each node (the
/// last entry of `fields` has the smallest `delta`), clamped to the rigorous
/// bracket of the last field. Below the smallest `delta` the value is 1.
fn extrapolate(fields: &[(f64, &ValueField)], level: f64, alpha: f64) -> ValueField {
    let (delta, raw) = *fields.last().expect("at least one field");
    let shrink = (-level * delta / alpha).exp();
    let mut out = raw.clone();
    let mut weights = Vec::with_capacity(EXTRAPOLATION_POINTS);
    for (i, &t) in raw.nodes.iter().enumerate() {
        let valid = fields.partition_point(|(d, _)| *d > t * (1.0 + 1e-12));
        let used = &fields[valid.max(fields.len().saturating_sub(EXTRAPOLATION_POINTS))..];
        weights.clear();
        weights.extend((0..used.len()).map(|p| {
            (0..used.len())
                .filter(|&q| q != p)
                .map(|q| used[q].0 / (used[q].0 - used[p].0))
                .product::<f64>()
        }));
        let cap = (level * t / alpha).exp();
        for x in 0..raw.num_states {
            let hi = raw.get(i, x).min(cap);
            let lo = (shrink * raw.get(i, x)).max(1.0).min(hi);
            let e = if used.is_empty() {
                1.0
            } else {
                used.iter()
                    .zip(&weights)
                    .map(|((_, f), w)| w * f.get(i, x).ln())
                    .sum::<f64>()
                    .exp()
            };
            out.set(i, x, e.clamp(lo, hi));
        }
    }
    out
}

/// Drives the truncated solves through the δ and n schedules.
pub fn solve_hjb(
    model: &CtmdpModel,
    cert: &LyapunovCertificate,
    schedules: &Schedules,
    grid: &ThetaGrid,
    opts: &HjbOptions,
) -> Result<(ValueField, HjbReport), SolveError> {
    schedules.validate()?;
    cert.validate_constants(model.alpha())?;
    let kernel = validate_kernel(model, opts.kernel_tol);
    if let Some(v) = kernel.violations.first() {
        return Err(SolveError::InvalidKernel(v.to_string()));
    }
    if grid.first() != 0.0 || *grid.nodes().last().unwrap() != 1.0 {
        return Err(SolveError::InvalidGrid(
            "output grid must span [0, 1]".into(),
        ));
    }
    let alpha = model.alpha();
    let ns = model.num_states();
    let mut report = HjbReport::default();
    let mut monitors = Monitors::default();
    let mut prev_level: Option<(ValueField, Vec<ValueField>)> = None;
    let mut final_field: Option<ValueField> = None;
    let mut level_converged = schedules.n_list.len() == 1;

    for &level in &schedules.n_list {
        let model_n = truncate(model, cert, level)?;
        let mut lr = LevelReport {
            level,
            q_bar: model_n.q_bar(),
            converged: schedules.delta_list.len() == 1,
            ..Default::default()
        };
        let lip = truncated_lipschitz_constant(level, alpha);
        let mut raws: Vec<ValueField> = Vec::new();
        let mut estimate: Option<ValueField> = None;
        for (k, &delta) in schedules.delta_list.iter().enumerate() {
            let solve_grid = grid.truncated(delta, opts.grading)?;
            let (field, rep) = solve_truncated(&model_n, &solve_grid, &opts.picard)?;
            let raw = field.extend_to(grid, (level * delta / alpha).exp());
            lr.deltas.push(delta);
            lr.picard_iterations.push(rep.iterations);
            let scale = raw.max_abs().max(1.0);
            monitors.truncated_lipschitz_ratio = monitors
                .truncated_lipschitz_ratio
                .max(raw.max_lipschitz_ratio(|_| lip));

            if let Some(prev) = raws.last() {
                let increase = raw.max_excess(prev) / scale;
                monitors.delta_monotone_violation = monitors.delta_monotone_violation.max(increase);
                if increase > 10.0 * opts.tol {
                    return Err(SolveError::Monotonicity {
                        which: "delta",
                        amount: increase,
                    });
                }
            }
            raws.push(raw);
            let points: Vec<(f64, &ValueField)> = (0..=k)
                .map(|j| (schedules.delta_list[j], &raws[j]))
                .collect();
            let next = extrapolate(&points, level, alpha);
            let done = match (&estimate, k) {
                (Some(prev_est), k) if k >= 2 => {
                    let d = next.sup_diff(prev_est) / next.max_abs().max(1.0);
                    lr.delta_diffs.push(d);
                    d < opts.tol
                }
                _ => false,
            };
            estimate = Some(next);
            if done {
                lr.converged = true;
                break;
            }
        }
        let estimate = estimate.expect("nonempty delta schedule");
        if !lr.converged {
            return Err(SolveError::ScheduleNotConverged {
                which: "delta",
                last_diff: lr.delta_diffs.last().copied().unwrap_or(f64::NAN),
                tol: opts.tol,
            });
        }

        let mut stop = false;
        if let Some((prev_est, prev_raws)) = &prev_level {
            // Compare raw fields at the smallest δ both levels reached.
            let common = prev_raws.len().min(raws.len()) - 1;
            let scale = raws[common].max_abs().max(1.0);
            let decrease = prev_raws[common].max_excess(&raws[common]) / scale;
            monitors.level_monotone_violation = monitors.level_monotone_violation.max(decrease);
            if decrease > 10.0 * opts.tol {
                return Err(SolveError::Monotonicity {
                    which: "n",
                    amount: decrease,
                });
            }
            let d = estimate.sup_diff(prev_est) / estimate.max_abs().max(1.0);
            report.level_diffs.push(d);
            stop = d < opts.tol;
        }
        report.levels.push(lr);
        final_field = Some(estimate.clone());
        report.last_level_fields = raws.clone();
        prev_level = Some((estimate, raws));
        if stop {
            level_converged = true;
            break;
        }
    }
    if !level_converged {
        return Err(SolveError::ScheduleNotConverged {
            which: "n",
            last_diff: report.level_diffs.last().copied().unwrap_or(f64::NAN),
            tol: opts.tol,
        });
    }

    let mut phi = final_field.expect("nonempty n schedule");
    let v0 = cert.v0_values(model.space())?;
    let v1 = cert.v1_values(model.space())?;
    let scale = phi.max_abs().max(1.0);
    monitors.theta_monotone_violation = phi.theta_monotone_violation() / scale;
    monitors.limit_lipschitz_ratio =
        phi.max_lipschitz_ratio(|x| cert.second_moment_bound(alpha, v1[x]));
    monitors.enclosure_violations = enclosure_violations(&phi, cert, alpha, &v0, opts.tol * scale);
    report.residual = residual(&phi, model);
    phi.meta = FieldMeta {
        level: report.levels.last().map(|l| l.level),
        delta: report.levels.last().and_then(|l| l.deltas.last().copied()),
        iterations: report.total_picard_iterations(),
        residual: report.residual,
    };
    debug_assert_eq!(phi.num_states(), ns);
    report.monitors = monitors;
    Ok((phi, report))
}

/// Nodes where `phi` leaves `[1, value_upper_bound]` by more than `tol`.
pub fn enclosure_violations(
    phi: &ValueField,
    cert: &LyapunovCertificate,
    alpha: f64,
    v0: &[f64],
    tol: f64,
) -> usize {
    let mut count = 0;
    for (i, &t) in phi.nodes().iter().enumerate() {
        for x in 0..phi.num_states() {
            let v = phi.get(i, x);
            let upper = cert.value_upper_bound(alpha, t, v0[x]);
            if v < 1.0 - tol || v > upper + tol {
                count += 1;
            }
        }
    }
    count
}

/// Minimizing selector of `sum_y q(y|x,a) phi(theta, y) + theta c(x,a) phi(theta, x)`
/// at every node; ties (relative 1e-10) go to the lowest action index.
pub fn extract_policy(phi: &ValueField, chain: &impl ControlledChain) -> PolicyField {
    let ns = phi.num_states();
    let mut gen = vec![0.0; chain.actions().max_count()];
    let mut actions = Vec::with_capacity(phi.nodes().len() * ns);
    for (i, &t) in phi.nodes().iter().enumerate() {
        let row = phi.row(i);
        for x in 0..ns {
            let k = chain.num_actions(x);
            chain.apply_generator(x, row, &mut gen[..k]);
            let obj = |a: usize| gen[a] + t * chain.cost(x, a) * row[x];
            let best = (0..k).map(obj).fold(f64::INFINITY, f64::min);
            let tie = 1e-10 * best.abs().max(row[x].abs()).max(1.0);
            let a = (0..k).find(|&a| obj(a) <= best + tie).unwrap_or(0);
            actions.push(a);
        }
    }
    PolicyField {
        nodes: phi.nodes().to_vec(),
        num_states: ns,
        actions,
    }
}

/// Pointwise HJB defects `|alpha θ Dθ phi - min_a[...]|` at interior nodes,
/// with central differences.
pub fn residuals(phi: &ValueField, chain: &impl ControlledChain) -> Vec<f64> {
    let alpha = chain.alpha();
    let nodes = phi.nodes();
    let ns = phi.num_states();
    let mut gen = vec![0.0; chain.actions().max_count()];
    let mut out = Vec::new();
    for i in 1..nodes.len().saturating_sub(1) {
        let t = nodes[i];
        let row = phi.row(i);
        for x in 0..ns {
            let d = (phi.get(i + 1, x) - phi.get(i - 1, x)) / (nodes[i + 1] - nodes[i - 1]);
            let k = chain.num_actions(x);
            chain.apply_generator(x, row, &mut gen[..k]);
            let rhs = (0..k)
                .map(|a| gen[a] + t * chain.cost(x, a) * row[x])
                .fold(f64::INFINITY, f64::min);
            out.push((alpha * t * d - rhs).abs());
        }
    }
    out
}

/// Maximum HJB defect over interior nodes.
pub fn residual(phi: &ValueField, chain: &impl ControlledChain) -> f64 {
    residuals(phi, chain).into_iter().fold(0.0, f64::max)
}

/// HJB defect at quantile `q` in `[0, 1]` (`q = 1` is the maximum); excluding
/// the top quantile discounts nodes where the value is not differentiable.
pub fn residual_quantile(phi: &ValueField, chain: &impl ControlledChain, q: f64) -> f64 {
    let mut r = residuals(phi, chain);
    if r.is_empty() {
        return 0.0;
    }
    r.sort_by(f64::total_cmp);
    let idx = ((r.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
    r[idx]
}

/// Richardson estimate of the θ-discretization error of a truncated solve on
/// `grid.truncated(delta, grading)`: the solve is repeated with every interval
/// halved and `(4/3) max |phi_h - phi_{h/2}|` over shared nodes is returned,
/// together with the coarse field.
pub fn grid_error_estimate(
    model_n: &TruncatedModel<'_>,
    grid: &ThetaGrid,
    delta: f64,
    grading: f64,
    opts: &PicardOptions,
) -> Result<(ValueField, f64), SolveError> {
    let coarse_grid = grid.truncated(delta, grading)?;
    let fine_grid = grid.refined().truncated(delta, grading.sqrt())?;
    let (coarse, _) = solve_truncated(model_n, &coarse_grid, opts)?;
    let (fine, _) = solve_truncated(model_n, &fine_grid, opts)?;
    let diff = coarse.sup_diff_common(&fine);
    Ok((coarse, 4.0 / 3.0 * diff))
}
