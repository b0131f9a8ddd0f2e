//! Lyapunov drift certificates and the value bounds they imply.
//!
//! A certificate bundles two growth functions `V0, V1 >= 1` with the constants
//! of the two drift conditions:
//!
//! ```text
//! (i)   sum_y q(y|x,a) V0(y)    <= rho0 V0(x)
//! (ii)  q_x(a)                  <= M0 V0(x)
//! (iii) c(x,a)                  <= rho1 ln V0(x) + L0
//! (iv)  sum_y q(y|x,a) V1(y)^2  <= rho2 V1(x)^2 + b1
//! (v)   V0(x)^2                 <= M1 V1(x)
//! ```
//!
//! with `0 < rho1 < min(alpha, alpha^2 / rho0)`, `0 < rho2 < alpha`,
//! `b1 >= 0` and `M1 >= 1`. [`check_certificate`] verifies these at every
//! grid node of a discretized model.

use thiserror::Error;

use crate::model::{ControlledChain, CtmdpModel, StateSpace};
use crate::report::ValidationReport;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertificateError {
    #[error("certificate constant {name} out of range: {detail}")]
    ConstantRange { name: &'static str, detail: String },
    #[error("{which} table has {got} entries but the grid has {expected} states")]
    GridMismatch {
        which: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{which}({coord}) = {value} at state {state}; growth functions must be >= 1")]
    BelowOne {
        which: &'static str,
        state: usize,
        coord: f64,
        value: f64,
    },
    #[error("Gaussian certificate precondition violated: {0}")]
    GaussianPrecondition(String),
}

/// A state function given in closed form or tabulated on the grid.
#[derive(Debug, Clone, PartialEq)]
pub enum GrowthFn {
    Constant(f64),
    /// Coefficients in increasing powers of the state coordinate.
    Polynomial(Vec<f64>),
    /// One value per grid state.
    Table(Vec<f64>),
}

impl GrowthFn {
    pub fn eval_coord(&self, x: f64) -> Option<f64> {
        match self {
            GrowthFn::Constant(c) => Some(*c),
            GrowthFn::Polynomial(coeffs) => {
                Some(coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c))
            }
            GrowthFn::Table(_) => None,
        }
    }

    fn values(
        &self,
        which: &'static str,
        space: &StateSpace,
    ) -> Result<Vec<f64>, CertificateError> {
        let vals = match self {
            GrowthFn::Table(t) => {
                if t.len() != space.len() {
                    return Err(CertificateError::GridMismatch {
                        which,
                        expected: space.len(),
                        got: t.len(),
                    });
                }
                t.clone()
            }
            other => space
                .coords()
                .iter()
                .map(|c| other.eval_coord(*c).expect("closed form"))
                .collect(),
        };
        for (state, v) in vals.iter().enumerate() {
            if !(v.is_finite() && *v >= 1.0) {
                return Err(CertificateError::BelowOne {
                    which,
                    state,
                    coord: space.coord(state),
                    value: *v,
                });
            }
        }
        Ok(vals)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovCertificate {
    pub v0: GrowthFn,
    pub v1: GrowthFn,
    pub rho0: f64,
    pub m0: f64,
    pub l0: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub b1: f64,
    pub m1: f64,
}

impl LyapunovCertificate {
    pub fn v0_values(&self, space: &StateSpace) -> Result<Vec<f64>, CertificateError> {
        self.v0.values("V0", space)
    }

    pub fn v1_values(&self, space: &StateSpace) -> Result<Vec<f64>, CertificateError> {
        self.v1.values("V1", space)
    }

    /// Checks the admissible ranges of all constants for discount rate `alpha`.
    pub fn validate_constants(&self, alpha: f64) -> Result<(), CertificateError> {
        let range = |name: &'static str, ok: bool, detail: String| {
            if ok {
                Ok(())
            } else {
                Err(CertificateError::ConstantRange { name, detail })
            }
        };
        range(
            "rho0",
            self.rho0 > 0.0 && self.rho0.is_finite(),
            format!("need rho0 > 0, got {}", self.rho0),
        )?;
        range(
            "M0",
            self.m0 > 0.0 && self.m0.is_finite(),
            format!("need M0 > 0, got {}", self.m0),
        )?;
        range(
            "L0",
            self.l0 >= 0.0 && self.l0.is_finite(),
            format!("need L0 >= 0, got {}", self.l0),
        )?;
        let rho1_cap = alpha.min(alpha * alpha / self.rho0);
        range(
            "rho1",
            self.rho1 > 0.0 && self.rho1 < rho1_cap,
            format!(
                "need 0 < rho1 < min(alpha, alpha^2/rho0) = {rho1_cap}, got {}",
                self.rho1
            ),
        )?;
        range(
            "rho2",
            self.rho2 > 0.0 && self.rho2 < alpha,
            format!("need 0 < rho2 < alpha = {alpha}, got {}", self.rho2),
        )?;
        range(
            "b1",
            self.b1 >= 0.0 && self.b1.is_finite(),
            format!("need b1 >= 0, got {}", self.b1),
        )?;
        range(
            "M1",
            self.m1 >= 1.0 && self.m1.is_finite(),
            format!("need M1 >= 1, got {}", self.m1),
        )?;
        Ok(())
    }

    /// Upper bound on the risk-sensitive value at `theta` from a state with `V0 = v0x`.
    pub fn value_upper_bound(&self, alpha: f64, theta: f64, v0x: f64) -> f64 {
        value_upper_bound(self, alpha, theta, v0x)
    }

    /// Bound on `E exp(2 int e^{-alpha t} c dt)` from a state with `V1 = v1x`;
    /// it is also the theta-Lipschitz constant of the limiting value.
    pub fn second_moment_bound(&self, alpha: f64, v1x: f64) -> f64 {
        alpha * (2.0 * self.l0 / alpha).exp() / (alpha - self.rho2)
            * self.m1
            * self.m1
            * (v1x * v1x + self.b1 / self.rho2)
    }

    /// Log-form bound on the certainty-equivalent cost, uniform in theta.
    pub fn log_cost_bound(&self, alpha: f64, v0x: f64) -> f64 {
        let a2 = alpha * alpha;
        (a2 / (a2 - self.rho0 * self.rho1)).ln() + self.l0 / alpha + self.rho1 / alpha * v0x.ln()
    }
}

/// `(alpha^2 / (alpha^2 - rho0 rho1 theta)) * exp(theta L0 / alpha) * V0(x)^(rho1 theta / alpha)`.
pub fn value_upper_bound(cert: &LyapunovCertificate, alpha: f64, theta: f64, v0x: f64) -> f64 {
    let a2 = alpha * alpha;
    a2 / (a2 - cert.rho0 * cert.rho1 * theta)
        * (theta * cert.l0 / alpha).exp()
        * v0x.powf(cert.rho1 * theta / alpha)
}

/// Verifies drift conditions (i)-(v) at every grid node.
///
/// Check ids: `drift_v0`, `rate_bound`, `cost_bound`, `drift_v1`, `v0_v1`.
pub fn check_certificate(
    model: &CtmdpModel,
    cert: &LyapunovCertificate,
    tol: f64,
) -> Result<ValidationReport, CertificateError> {
    cert.validate_constants(model.alpha())?;
    let space = model.space();
    let v0 = cert.v0_values(space)?;
    let v1 = cert.v1_values(space)?;
    let v1_sq: Vec<f64> = v1.iter().map(|v| v * v).collect();

    let mut report = ValidationReport::default();
    let mut drift0 = vec![0.0; model.actions().max_count()];
    let mut drift1 = vec![0.0; model.actions().max_count()];
    for x in 0..space.len() {
        let cx = space.coord(x);
        let k = model.num_actions(x);
        model.apply_generator(x, &v0, &mut drift0[..k]);
        model.apply_generator(x, &v1_sq, &mut drift1[..k]);
        for a in 0..k {
            report.check_le(
                "drift_v0",
                x,
                cx,
                Some(a),
                drift0[a],
                cert.rho0 * v0[x],
                tol,
            );
            report.check_le(
                "rate_bound",
                x,
                cx,
                Some(a),
                model.exit_rate(x, a),
                cert.m0 * v0[x],
                tol,
            );
            report.check_le(
                "cost_bound",
                x,
                cx,
                Some(a),
                model.cost(x, a),
                cert.rho1 * v0[x].ln() + cert.l0,
                tol,
            );
            report.check_le(
                "drift_v1",
                x,
                cx,
                Some(a),
                drift1[a],
                cert.rho2 * v1_sq[x] + cert.b1,
                tol,
            );
        }
        report.check_le("v0_v1", x, cx, None, v0[x] * v0[x], cert.m1 * v1[x], tol);
    }
    Ok(report)
}

/// `3780 (sigma^8 + sigma^6 + sigma^4 + sigma^2)`, the Gaussian moment constant.
pub fn gaussian_moment_constant(sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    3780.0 * (s2.powi(4) + s2.powi(3) + s2.powi(2) + s2)
}

/// Closed-form certificate for the Gaussian jump model with
/// `0 < lambda(x, a) <= M (x^2 + 1)` and `c(x, a) <= rho1 ln(1 + x^2) + M`.
pub fn certify_gaussian(
    sigma: f64,
    m: f64,
    rho1: f64,
    alpha: f64,
) -> Result<LyapunovCertificate, CertificateError> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(CertificateError::GaussianPrecondition(format!(
            "sigma > 0 (got {sigma})"
        )));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(CertificateError::GaussianPrecondition(format!(
            "alpha > 0 (got {alpha})"
        )));
    }
    let k = gaussian_moment_constant(sigma);
    if !(m > 0.0 && m < alpha / k) {
        return Err(CertificateError::GaussianPrecondition(format!(
            "0 < M < alpha / (3780 (sigma^8 + sigma^6 + sigma^4 + sigma^2)) = {} (got M = {m})",
            alpha / k
        )));
    }
    let rho0 = m * sigma * sigma;
    let cap = alpha.min(alpha * alpha / rho0);
    if !(rho1 > 0.0 && rho1 < cap) {
        return Err(CertificateError::GaussianPrecondition(format!(
            "0 < rho1 < min(alpha, alpha^2 / (M sigma^2)) = {cap} (got rho1 = {rho1})"
        )));
    }
    let cert = LyapunovCertificate {
        v0: GrowthFn::Polynomial(vec![1.0, 0.0, 1.0]),
        v1: GrowthFn::Polynomial(vec![1.0, 0.0, 0.0, 0.0, 1.0]),
        rho0,
        m0: m,
        l0: m,
        rho1,
        rho2: m * k,
        b1: 1.0,
        m1: 2.0,
    };
    cert.validate_constants(alpha)?;
    Ok(cert)
}
