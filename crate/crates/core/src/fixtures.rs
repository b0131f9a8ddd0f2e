//! Small reference models with known certificates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lyapunov::{certify_gaussian, CertificateError, GrowthFn, LyapunovCertificate};
use crate::model::{
    build_gaussian_model, ActionSet, CostRate, CtmdpModel, GaussianJumpSpec, GridSpec, ModelError,
    StateSpace,
};

/// Two states, two actions, `alpha = 1`:
///
/// | state | action | rate out | cost |
/// |-------|--------|----------|------|
/// | 0     | 0      | 0.5      | 0.6  |
/// | 0     | 1      | 2.0      | 1.0  |
/// | 1     | 0      | 1.0      | 0.1  |
/// | 1     | 1      | 0.2      | 0.4  |
pub fn two_state_model() -> CtmdpModel {
    let actions = ActionSet::uniform(2, 2).expect("static shape");
    let rows = vec![
        vec![-0.5, 0.5],
        vec![-2.0, 2.0],
        vec![1.0, -1.0],
        vec![0.2, -0.2],
    ];
    let cost = CostRate::new(&actions, vec![0.6, 1.0, 0.1, 0.4]).expect("static costs");
    CtmdpModel::from_rate_rows(StateSpace::finite(2), actions, rows, cost, 1.0)
        .expect("static model")
}

pub fn two_state_certificate() -> LyapunovCertificate {
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

/// Flat certificate for a bounded model: `V0 = V1 = 1`, `L0 = max cost`,
/// `M0 = max exit rate`.
pub fn bounded_certificate(model: &CtmdpModel) -> LyapunovCertificate {
    use crate::model::ControlledChain;
    let alpha = model.alpha();
    let mut m0: f64 = 1e-12;
    let mut l0: f64 = 0.0;
    for x in 0..model.num_states() {
        for a in 0..model.num_actions(x) {
            m0 = m0.max(model.exit_rate(x, a));
            l0 = l0.max(model.cost(x, a));
        }
    }
    LyapunovCertificate {
        v0: GrowthFn::Constant(1.0),
        v1: GrowthFn::Constant(1.0),
        rho0: 0.5 * alpha,
        m0,
        l0,
        rho1: 0.5 * alpha,
        rho2: 0.5 * alpha,
        b1: 0.0,
        m1: 1.0,
    }
}

/// Three states, two actions, a non-trivial conservative kernel and a
/// constant cost rate `c0`.
pub fn constant_cost_model(c0: f64, alpha: f64) -> Result<CtmdpModel, ModelError> {
    let actions = ActionSet::uniform(3, 2)?;
    let rows = vec![
        vec![-1.0, 0.5, 0.5],
        vec![-2.0, 1.5, 0.5],
        vec![1.0, -1.5, 0.5],
        vec![0.2, -0.2, 0.0],
        vec![0.3, 0.7, -1.0],
        vec![2.0, 0.0, -2.0],
    ];
    let cost = CostRate::new(&actions, vec![c0; 6])?;
    CtmdpModel::from_rate_rows(StateSpace::finite(3), actions, rows, cost, alpha)
}

pub const GAUSSIAN_SIGMA: f64 = 1.0;
pub const GAUSSIAN_M: f64 = 6e-5;
pub const GAUSSIAN_RHO1: f64 = 0.5;

/// Gaussian jump model with two actions on `[-6, 6]` (49 nodes):
/// `lambda(x, a) = M (x^2 + 1) w_a` with `w = (1, 0.4)` and
/// `c(x, a) = rho1 ln(1 + x^2) v_a` with `v = (0.6, 1)`.
/// `M` scales with `alpha` so the certificate precondition holds.
pub fn gaussian_solve_fixture(
    alpha: f64,
) -> Result<(CtmdpModel, LyapunovCertificate), FixtureError> {
    let m = GAUSSIAN_M * alpha;
    let spec = GaussianJumpSpec::new(GAUSSIAN_SIGMA, m);
    let grid = GridSpec {
        x_min: -6.0,
        x_max: 6.0,
        num_states: 49,
    };
    let w = [1.0, 0.4];
    let v = [0.6, 1.0];
    let model = build_gaussian_model(
        &spec,
        &grid,
        2,
        alpha,
        |x, a| m * (x * x + 1.0) * w[a],
        |x, a| GAUSSIAN_RHO1 * (x * x).ln_1p() * v[a],
    )?;
    let cert = certify_gaussian(GAUSSIAN_SIGMA, m, GAUSSIAN_RHO1, alpha)?;
    Ok((model, cert))
}

/// Single-action Gaussian jump model on `[-12, 12]` (481 nodes) with the
/// extremal intensity `lambda = M (x^2 + 1)` and zero cost.
pub fn gaussian_identity_fixture() -> Result<(CtmdpModel, LyapunovCertificate), FixtureError> {
    let spec = GaussianJumpSpec::new(GAUSSIAN_SIGMA, GAUSSIAN_M);
    let grid = GridSpec {
        x_min: -12.0,
        x_max: 12.0,
        num_states: 481,
    };
    let model = build_gaussian_model(
        &spec,
        &grid,
        1,
        1.0,
        |x, _| GAUSSIAN_M * (x * x + 1.0),
        |_, _| 0.0,
    )?;
    let cert = certify_gaussian(GAUSSIAN_SIGMA, GAUSSIAN_M, GAUSSIAN_RHO1, 1.0)?;
    Ok((model, cert))
}

/// Random conservative rate-matrix model with exit rates in `(0, max_rate]`
/// and costs in `[0, max_cost]`.
pub fn random_small_model(
    seed: u64,
    num_states: usize,
    num_actions: usize,
    max_rate: f64,
    max_cost: f64,
    alpha: f64,
) -> Result<CtmdpModel, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actions = ActionSet::uniform(num_states, num_actions)?;
    let mut rows = Vec::with_capacity(num_states * num_actions);
    let mut costs = Vec::with_capacity(num_states * num_actions);
    for x in 0..num_states {
        for _ in 0..num_actions {
            let exit = max_rate * (0.1 + 0.9 * rng.gen::<f64>());
            let mut split: Vec<f64> = (0..num_states)
                .map(|y| if y == x { 0.0 } else { rng.gen::<f64>() + 1e-3 })
                .collect();
            let total: f64 = split.iter().sum();
            for (y, v) in split.iter_mut().enumerate() {
                *v = if y == x { 0.0 } else { exit * *v / total };
            }
            let off: f64 = split.iter().sum();
            split[x] = -off;
            rows.push(split);
            costs.push(max_cost * rng.gen::<f64>());
        }
    }
    let cost = CostRate::new(&actions, costs)?;
    CtmdpModel::from_rate_rows(StateSpace::finite(num_states), actions, rows, cost, alpha)
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Certificate(#[from] CertificateError),
}
