//! Monte Carlo simulation of the controlled jump process.
//!
//! Paths are generated by thinning: at state `x`, candidate events arrive at
//! the majorant rate `q*(x) = max_a q_x(a)` and are accepted with probability
//! `q_x(a_t) / q*(x)`, where `a_t` is the action in force at the candidate
//! time. This is exact for time-varying Markov controls.
//!
//! Randomness: trajectory `i` of a batch uses `ChaCha8Rng` seeded with the
//! batch seed on stream `i`, so every trajectory is reproducible on its own
//! and batch results do not depend on the worker count. Batch sums use
//! pairwise summation in trajectory order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::hjb::PolicyField;
use crate::lyapunov::{CertificateError, LyapunovCertificate};
use crate::model::{ControlledChain, TruncatedModel};

pub const DEFAULT_MAX_JUMPS: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("explosion guard: more than {max_jumps} jumps before t = {time}")]
    Explosion { max_jumps: usize, time: f64 },
    #[error("non-finite functional sample in trajectory {trajectory}")]
    NonFinite { trajectory: usize },
    #[error("a Lyapunov certificate is required to bound the tail of the criterion")]
    MissingCertificate,
    #[error(transparent)]
    Certificate(#[from] CertificateError),
}

/// Deterministic Markov control `t -> f*(theta0 e^{-alpha t}, x)` with
/// nearest-node θ lookup (ties to the lower node).
///
/// The θ trajectory only decreases, so the node in force is piecewise
/// constant in time; the switch times are precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovControl {
    policy: PolicyField,
    theta0: f64,
    alpha: f64,
    /// `(switch time, node in force from that time on)`, increasing in time.
    switches: Vec<(f64, usize)>,
    start_node: usize,
}

impl MarkovControl {
    pub fn new(policy: PolicyField, theta0: f64, alpha: f64) -> Result<Self, SimError> {
        if !(0.0..=1.0).contains(&theta0) {
            return Err(SimError::InvalidArgument(format!(
                "theta0 must lie in [0, 1], got {theta0}"
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(SimError::InvalidArgument(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        let nodes = policy.nodes();
        let start_node = policy.nearest_node(theta0);
        let mut switches = Vec::new();
        if theta0 > 0.0 {
            for i in (1..=start_node).rev() {
                let mid = 0.5 * (nodes[i - 1] + nodes[i]);
                if mid <= 0.0 {
                    break;
                }
                switches.push(((theta0 / mid).ln() / alpha, i - 1));
            }
        }
        Ok(Self {
            policy,
            theta0,
            alpha,
            switches,
            start_node,
        })
    }

    /// θ-independent control.
    pub fn stationary(actions: Vec<usize>) -> Self {
        Self {
            policy: PolicyField::stationary(actions),
            theta0: 1.0,
            alpha: 1.0,
            switches: Vec::new(),
            start_node: 0,
        }
    }

    pub fn policy(&self) -> &PolicyField {
        &self.policy
    }

    pub fn theta0(&self) -> f64 {
        self.theta0
    }

    fn segment_at(&self, t: f64) -> usize {
        self.switches.partition_point(|(s, _)| *s <= t)
    }

    fn node_of_segment(&self, k: usize) -> usize {
        if k == 0 {
            self.start_node
        } else {
            self.switches[k - 1].1
        }
    }

    /// Time of the first switch strictly after `t` (infinite if none).
    pub fn next_switch(&self, t: f64) -> f64 {
        self.switches
            .get(self.segment_at(t))
            .map_or(f64::INFINITY, |(s, _)| *s)
    }

    pub fn action(&self, t: f64, x: usize) -> usize {
        self.policy
            .action(self.node_of_segment(self.segment_at(t)), x)
    }
}

/// Interval of constant state and action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub state: usize,
    pub action: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub jump_times: Vec<f64>,
    /// `states[0]` is the initial state, `states[k]` the state after jump `k`.
    pub states: Vec<usize>,
    /// Consecutive segments covering `[0, horizon]`.
    pub segments: Vec<Segment>,
    pub horizon: f64,
}

impl Trajectory {
    /// State occupied at time `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> usize {
        self.states[self.jump_times.partition_point(|s| *s <= t)]
    }

    /// `int_0^horizon e^{-alpha t} c(xi_t, a_t) dt`, exact per run of equal
    /// cost rate (so a constant cost gives a path-independent value).
    pub fn discounted_cost(&self, chain: &impl ControlledChain) -> f64 {
        let alpha = chain.alpha();
        let piece = |c: f64, a: f64, b: f64| {
            if c == 0.0 {
                0.0
            } else {
                c * ((-alpha * a).exp() - (-alpha * b).exp()) / alpha
            }
        };
        let mut total = 0.0;
        let mut run: Option<(f64, f64, f64)> = None;
        for s in &self.segments {
            let c = chain.cost(s.state, s.action);
            run = match run {
                Some((rc, a, _)) if rc == c => Some((rc, a, s.end)),
                Some((rc, a, b)) => {
                    total += piece(rc, a, b);
                    Some((c, s.start, s.end))
                }
                None => Some((c, s.start, s.end)),
            };
        }
        if let Some((rc, a, b)) = run {
            total += piece(rc, a, b);
        }
        total
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn exponential(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    let u: f64 = rng.gen();
    -(1.0 - u).ln() / rate
}

/// One path on `[0, horizon]`, using stream 0 of `seed`.
pub fn sample_trajectory(
    chain: &impl ControlledChain,
    control: &MarkovControl,
    x0: usize,
    horizon: f64,
    seed: u64,
) -> Result<Trajectory, SimError> {
    check_inputs(chain, control, x0, horizon)?;
    simulate_path(
        chain,
        control,
        x0,
        horizon,
        &mut rng_for(seed, 0),
        DEFAULT_MAX_JUMPS,
    )
}

fn check_inputs(
    chain: &impl ControlledChain,
    control: &MarkovControl,
    x0: usize,
    horizon: f64,
) -> Result<(), SimError> {
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(SimError::InvalidArgument(format!(
            "horizon must be finite and >= 0, got {horizon}"
        )));
    }
    if x0 >= chain.num_states() {
        return Err(SimError::InvalidArgument(format!(
            "initial state {x0} out of range (0..{})",
            chain.num_states()
        )));
    }
    if !control.policy.is_admissible(chain) {
        return Err(SimError::InvalidArgument(
            "policy does not match the model's states or actions".into(),
        ));
    }
    Ok(())
}

/// One path driven by a caller-supplied generator, failing after `max_jumps` jumps.
pub fn simulate_path(
    chain: &impl ControlledChain,
    control: &MarkovControl,
    x0: usize,
    horizon: f64,
    rng: &mut ChaCha8Rng,
    max_jumps: usize,
) -> Result<Trajectory, SimError> {
    let mut traj = Trajectory {
        states: vec![x0],
        horizon,
        ..Default::default()
    };
    let mut targets = Vec::new();
    let mut x = x0;
    let mut t = 0.0;
    let mut seg_start = 0.0;
    let mut seg_action = control.action(0.0, x);
    let close = |traj: &mut Trajectory, start: &mut f64, end: f64, state: usize, action: usize| {
        if end > *start {
            traj.segments.push(Segment {
                start: *start,
                end,
                state,
                action,
            });
        }
        *start = end;
    };
    loop {
        let q_star = chain.max_exit_rate(x);
        let next = if q_star > 0.0 {
            t + exponential(rng, q_star)
        } else {
            f64::INFINITY
        };
        // action switches before the candidate time split the segment
        loop {
            let s = control.next_switch(seg_start);
            if s >= next.min(horizon) {
                break;
            }
            close(&mut traj, &mut seg_start, s, x, seg_action);
            seg_action = control.action(s, x);
        }
        if next >= horizon {
            close(&mut traj, &mut seg_start, horizon, x, seg_action);
            return Ok(traj);
        }
        t = next;
        let a = control.action(t, x);
        let rate = chain.exit_rate(x, a);
        let u: f64 = rng.gen();
        if u * q_star >= rate {
            continue;
        }
        targets.clear();
        chain.jump_rates(x, a, &mut targets);
        let total: f64 = targets.iter().map(|(_, r)| r).sum();
        let mut pick = rng.gen::<f64>() * total;
        let mut y = targets.last().map_or(x, |(y, _)| *y);
        for &(cand, r) in &targets {
            if pick < r {
                y = cand;
                break;
            }
            pick -= r;
        }
        if y == x {
            continue;
        }
        close(&mut traj, &mut seg_start, t, x, seg_action);
        x = y;
        seg_action = control.action(t, x);
        traj.jump_times.push(t);
        traj.states.push(x);
        if traj.jump_times.len() > max_jumps {
            return Err(SimError::Explosion { max_jumps, time: t });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorResult {
    pub mean: f64,
    pub std_error: f64,
    pub num_samples: usize,
    pub horizon: f64,
}

impl EstimatorResult {
    /// Sample mean and standard error of `samples`, with pairwise sums.
    pub fn from_samples(samples: &[f64], horizon: f64) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std_error: f64::NAN,
                num_samples: 0,
                horizon,
            };
        }
        if samples.iter().all(|v| v.to_bits() == samples[0].to_bits()) {
            return Self {
                mean: samples[0],
                std_error: 0.0,
                num_samples: n,
                horizon,
            };
        }
        let mean = pairwise_sum(samples) / n as f64;
        let std_error = if n > 1 {
            let sq: Vec<f64> = samples.iter().map(|v| (v - mean) * (v - mean)).collect();
            (pairwise_sum(&sq) / ((n - 1) as f64 * n as f64)).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std_error,
            num_samples: n,
            horizon,
        }
    }
}

/// Pairwise (cascade) summation; the result depends only on the order of `v`.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        v.iter().sum()
    } else {
        let mid = v.len() / 2;
        pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
    }
}

/// Runs `num_traj` independent paths in parallel and maps each to a value;
/// values come back in trajectory order.
pub fn map_trajectories<C, F, T>(
    chain: &C,
    control: &MarkovControl,
    x0: usize,
    horizon: f64,
    num_traj: usize,
    seed: u64,
    f: F,
) -> Result<Vec<T>, SimError>
where
    C: ControlledChain,
    F: Fn(usize, &Trajectory) -> Result<T, SimError> + Sync,
    T: Send,
{
    check_inputs(chain, control, x0, horizon)?;
    if num_traj == 0 {
        return Err(SimError::InvalidArgument(
            "num_traj must be positive".into(),
        ));
    }
    (0..num_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, i as u64);
            let traj = simulate_path(chain, control, x0, horizon, &mut rng, DEFAULT_MAX_JUMPS)?;
            f(i, &traj)
        })
        .collect()
}

/// Mean of `scale * exp(factor * int_0^horizon e^{-alpha t} c dt)`.
pub fn estimate_discounted_exponential(
    chain: &impl ControlledChain,
    control: &MarkovControl,
    x0: usize,
    factor: f64,
    scale: f64,
    horizon: f64,
    num_traj: usize,
    seed: u64,
) -> Result<EstimatorResult, SimError> {
    let samples = map_trajectories(chain, control, x0, horizon, num_traj, seed, |i, traj| {
        let v = scale * (factor * traj.discounted_cost(chain)).exp();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(SimError::NonFinite { trajectory: i })
        }
    })?;
    Ok(EstimatorResult::from_samples(&samples, horizon))
}

/// `T_delta(theta) = ln(theta / delta) / alpha`.
pub fn truncation_horizon(theta: f64, delta: f64, alpha: f64) -> f64 {
    (theta / delta).ln() / alpha
}

/// Truncated functional `e^{n delta/alpha} exp(theta int_0^{T_delta(theta)} e^{-alpha t} c_n dt)`,
/// the probabilistic representation of the truncated value at `(theta, x0)`.
pub fn estimate_truncated_functional(
    model_n: &TruncatedModel<'_>,
    control: &MarkovControl,
    theta: f64,
    delta: f64,
    x0: usize,
    num_traj: usize,
    seed: u64,
) -> Result<EstimatorResult, SimError> {
    if !(delta > 0.0 && theta <= 1.0) {
        return Err(SimError::InvalidArgument(format!(
            "need 0 < delta and theta <= 1, got delta {delta}, theta {theta}"
        )));
    }
    if delta > theta {
        return Err(SimError::InvalidArgument(format!(
            "delta {delta} exceeds theta {theta}: horizon undefined"
        )));
    }
    let alpha = model_n.alpha();
    let horizon = truncation_horizon(theta, delta, alpha);
    let scale = (model_n.level() * delta / alpha).exp();
    estimate_discounted_exponential(model_n, control, x0, theta, scale, horizon, num_traj, seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JEstimate {
    pub j_tilde: EstimatorResult,
    /// `(1/theta) ln(mean)`.
    pub j_log: f64,
}

/// Horizon past which the discounted cost can contribute at most a factor
/// `1 + tail_eps`, from the pathwise bound `c <= cost_cap`.
pub fn tail_horizon(theta: f64, alpha: f64, cost_cap: f64, tail_eps: f64) -> f64 {
    if cost_cap <= 0.0 || theta <= 0.0 {
        return 0.0;
    }
    let t = (theta * cost_cap / (alpha * tail_eps.ln_1p())).ln() / alpha;
    t.max(0.0)
}

/// Largest cost rate the certificate allows on the grid,
/// `max_x (rho1 ln V0(x) + L0)`, capped by the largest tabulated cost.
pub fn certified_cost_cap(
    chain: &impl ControlledChain,
    cert: &LyapunovCertificate,
) -> Result<f64, SimError> {
    let v0 = cert.v0_values(chain.space())?;
    let cert_cap = v0
        .iter()
        .map(|v| cert.rho1 * v.ln() + cert.l0)
        .fold(0.0, f64::max);
    let mut table_cap: f64 = 0.0;
    for x in 0..chain.num_states() {
        for a in 0..chain.num_actions(x) {
            table_cap = table_cap.max(chain.cost(x, a));
        }
    }
    Ok(cert_cap.min(table_cap))
}

/// Risk-sensitive criterion `E exp(theta int_0^inf e^{-alpha t} c dt)` and its
/// log form, with the horizon cut where the tail factor is below `1 + tail_eps`.
pub fn estimate_j(
    chain: &impl ControlledChain,
    cert: Option<&LyapunovCertificate>,
    control: &MarkovControl,
    theta: f64,
    x0: usize,
    num_traj: usize,
    seed: u64,
    tail_eps: f64,
) -> Result<JEstimate, SimError> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(SimError::InvalidArgument(format!(
            "theta must lie in (0, 1], got {theta}"
        )));
    }
    if !(tail_eps > 0.0 && tail_eps.is_finite()) {
        return Err(SimError::InvalidArgument(format!(
            "tail_eps must be positive, got {tail_eps}"
        )));
    }
    let cert = cert.ok_or(SimError::MissingCertificate)?;
    let cap = certified_cost_cap(chain, cert)?;
    let horizon = tail_horizon(theta, chain.alpha(), cap, tail_eps);
    let j_tilde =
        estimate_discounted_exponential(chain, control, x0, theta, 1.0, horizon, num_traj, seed)?;
    Ok(JEstimate {
        j_tilde,
        j_log: j_tilde.mean.ln() / theta,
    })
}

/// Sample means of `V0(xi_t)` at each of `times`.
pub fn estimate_v0_moments(
    chain: &impl ControlledChain,
    cert: &LyapunovCertificate,
    control: &MarkovControl,
    x0: usize,
    times: &[f64],
    num_traj: usize,
    seed: u64,
) -> Result<Vec<EstimatorResult>, SimError> {
    let v0 = cert.v0_values(chain.space())?;
    let horizon = times.iter().copied().fold(0.0, f64::max);
    let rows = map_trajectories(chain, control, x0, horizon, num_traj, seed, |_, traj| {
        Ok(times
            .iter()
            .map(|&t| v0[traj.state_at(t)])
            .collect::<Vec<f64>>())
    })?;
    Ok((0..times.len())
        .map(|k| {
            let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
            EstimatorResult::from_samples(&col, times[k])
        })
        .collect())
}

/// Sample mean of `exp(2 int_0^T e^{-alpha t} c dt)` with `T` from the tail rule.
pub fn estimate_second_moment(
    chain: &impl ControlledChain,
    cert: &LyapunovCertificate,
    control: &MarkovControl,
    x0: usize,
    num_traj: usize,
    seed: u64,
    tail_eps: f64,
) -> Result<EstimatorResult, SimError> {
    let cap = certified_cost_cap(chain, cert)?;
    let horizon = tail_horizon(2.0, chain.alpha(), cap, tail_eps);
    estimate_discounted_exponential(chain, control, x0, 2.0, 1.0, horizon, num_traj, seed)
}
